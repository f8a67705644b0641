#include "cimsim/train.hpp"

#include <cmath>
#include <cstdio>

namespace cimsim {

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: epochs/batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning rate must be positive");
}

void FinetuneConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("FinetuneConfig: epochs/batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("FinetuneConfig: learning rate must be positive");
}

SgdMomentum::SgdMomentum(QuantizedModel& model, double learning_rate, double momentum)
    : model_(model), lr_(learning_rate), momentum_(momentum) {
    for (auto* layer : model_.param_layers()) {
        vel_w_.emplace_back(layer->weights()->shape);
        vel_b_.emplace_back(layer->bias()->shape);
    }
}

void SgdMomentum::step(const ModelGrads& grads) {
    size_t p = 0;
    for (size_t li = 0; li < model_.layers.size(); ++li) {
        Layer* layer = model_.layers[li].get();
        if (!layer->has_params()) continue;
        const ParamGrads& g = grads.per_layer[li];
        Tensor& w = *layer->weights();
        Tensor& b = *layer->bias();
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            vel_w_[p].data[i] = momentum_ * vel_w_[p].data[i] - lr_ * g.d_weights.data[i];
            w.data[i] += vel_w_[p].data[i];
        }
        for (std::int64_t i = 0; i < b.numel(); ++i) {
            vel_b_[p].data[i] = momentum_ * vel_b_[p].data[i] - lr_ * g.d_bias.data[i];
            b.data[i] += vel_b_[p].data[i];
        }
        ++p;
    }
}

namespace {

double accuracy_of(const std::function<Tensor(const Tensor&)>& fwd, const Dataset& ds,
                   int batch_size) {
    std::int64_t correct = 0;
    for (int begin = 0; begin < ds.size(); begin += batch_size) {
        std::vector<int> idx;
        for (int i = begin; i < std::min(begin + batch_size, ds.size()); ++i) idx.push_back(i);
        auto [x, y] = gather(ds, idx);
        const Tensor logits = fwd(x);
        correct += static_cast<std::int64_t>(
            std::llround(top1_accuracy(logits, y) * static_cast<double>(idx.size())));
    }
    return static_cast<double>(correct) / ds.size();
}

} // namespace

double evaluate_accuracy(const QuantizedModel& model, const Dataset& ds, int batch_size) {
    return accuracy_of([&](const Tensor& x) { return model.forward(x, nullptr); }, ds, batch_size);
}

double evaluate_accuracy(const ChipInstance& chip, const Dataset& ds, int batch_size) {
    return accuracy_of([&](const Tensor& x) { return chip.forward(x); }, ds, batch_size);
}

TrainReport train_baseline(QuantizedModel& model, const Dataset& train, const Dataset& test,
                           const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) throw DataError("train_baseline: empty training set");

    {
        const int n = std::min(cfg.calibration_samples, train.size());
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        auto [calib, labels] = gather(train, idx);
        (void)labels;
        model.calibrate_clips(calib, cfg.calibration_percentile);
    }

    SgdMomentum opt(model, cfg.learning_rate, cfg.momentum);
    const Dataset eval_set = cfg.eval_samples > 0 ? test.head(cfg.eval_samples) : test;

    TrainReport report;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = batches(train, cfg.batch_size, cfg.seed + epoch, true);
        double loss_sum = 0.0;
        for (const auto& idx : order) {
            auto [x, y] = gather(train, idx);
            ModelCache cache;
            model.forward(x, &cache);
            Tensor dlogits;
            const double loss = softmax_cross_entropy(cache.logits, y, &dlogits);
            if (!std::isfinite(loss)) {
                throw NumericError("train_baseline: loss diverged at epoch " +
                                   std::to_string(epoch));
            }
            loss_sum += loss;
            ModelGrads grads;
            model.backward(cache, dlogits, &grads);
            opt.step(grads);
        }
        const double acc = evaluate_accuracy(model, eval_set);
        report.epoch_loss.push_back(loss_sum / order.size());
        report.epoch_accuracy.push_back(acc);
        if (cfg.verbose) {
            std::fprintf(stderr, "[train] epoch %d loss %.4f test-acc %.2f%%\n", epoch + 1,
                         loss_sum / order.size(), 100.0 * acc);
        }
        opt.set_learning_rate(opt.learning_rate() * cfg.lr_decay);
    }
    report.final_accuracy = report.epoch_accuracy.empty() ? 0.0 : report.epoch_accuracy.back();
    return report;
}

FinetuneReport finetune_hybrid(ChipInstance& chip, QuantizedModel& model, const Dataset& train,
                               const Dataset& test, const FinetuneConfig& cfg) {
    cfg.validate();
    if (!chip.programmed()) throw StateError("finetune_hybrid: chip is not programmed");

    const Dataset eval_set = cfg.eval_samples > 0 ? test.head(cfg.eval_samples) : test;
    FinetuneReport report;
    report.accuracy_before = evaluate_accuracy(chip, eval_set);
    report.curve.push_back({0, report.accuracy_before});

    SgdMomentum opt(model, cfg.learning_rate, cfg.momentum);
    int iteration = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = batches(train, cfg.batch_size, cfg.seed + epoch, true);
        for (const auto& idx : order) {
            auto [x, y] = gather(train, idx);
            ModelCache cache;
            chip.forward(x, &cache); // distorted activations saved for backprop
            Tensor dlogits;
            const double loss = softmax_cross_entropy(cache.logits, y, &dlogits);
            if (!std::isfinite(loss)) {
                throw NumericError("finetune_hybrid: loss diverged at iteration " +
                                   std::to_string(iteration));
            }
            ModelGrads grads;
            // The cache carries the quantized weights the chip forward used,
            // so backward is straight-through on the distorted activations.
            model.backward(cache, dlogits, &grads);
            opt.step(grads);
            chip.program(model); // new weights onto the cells
            ++iteration;
            if (cfg.eval_interval > 0 && iteration % cfg.eval_interval == 0) {
                report.curve.push_back({iteration, evaluate_accuracy(chip, eval_set)});
            }
        }
    }
    report.accuracy_after = evaluate_accuracy(chip, eval_set);
    report.curve.push_back({iteration, report.accuracy_after});
    if (cfg.verbose) {
        std::fprintf(stderr, "[finetune] before %.2f%% after %.2f%% (%d iterations)\n",
                     100.0 * report.accuracy_before, 100.0 * report.accuracy_after, iteration);
    }
    return report;
}

} // namespace cimsim
