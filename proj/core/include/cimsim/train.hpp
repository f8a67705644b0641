#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cimsim/chip.hpp"
#include "cimsim/dataset.hpp"
#include "cimsim/model.hpp"

namespace cimsim {

struct TrainConfig {
    int epochs = 3;
    int batch_size = 100;
    double learning_rate = 0.05;
    double momentum = 0.9;
    /// Multiplies the learning rate after each epoch.
    double lr_decay = 0.5;
    std::uint64_t seed = 1;
    /// Samples used for the one-shot activation-clip calibration.
    int calibration_samples = 512;
    double calibration_percentile = 99.9;
    /// Evaluate on this many held-out samples after each epoch (0 = all).
    int eval_samples = 0;
    bool verbose = true;

    void validate() const;
};

struct FinetuneConfig {
    int epochs = 1;
    int batch_size = 200;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    /// Record an accuracy point every this many iterations (0 = epoch ends only).
    int eval_interval = 50;
    int eval_samples = 2000;
    bool verbose = true;

    void validate() const;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy; // on the eval split
    double final_accuracy = 0.0;
};

/// One point of a retrain curve: accuracy after `iteration` update steps.
struct CurvePoint {
    int iteration = 0;
    double accuracy = 0.0;
};

struct FinetuneReport {
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    std::vector<CurvePoint> curve;
};

/// SGD with momentum on the float master weights; velocity per parameter.
class SgdMomentum {
public:
    SgdMomentum(QuantizedModel& model, double learning_rate, double momentum);
    void step(const ModelGrads& grads);
    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }

private:
    QuantizedModel& model_;
    double lr_, momentum_;
    std::vector<Tensor> vel_w_, vel_b_;
};

/// Quantization-aware baseline training (the digital path). Calibrates
/// activation clips once, then runs SGD-with-momentum over seeded shuffles.
/// Deterministic for a fixed config. Aborts with NumericError when the loss
/// goes non-finite.
TrainReport train_baseline(QuantizedModel& model, const Dataset& train, const Dataset& test,
                           const TrainConfig& cfg);

/// Hybrid on-chip/off-chip finetune: forward through the chip's crossbars,
/// loss against labels, float backprop through the distorted cache (straight-
/// through estimators), master-weight update, re-quantize, reprogram.
/// Requires the chip to be programmed with the model's current weights.
FinetuneReport finetune_hybrid(ChipInstance& chip, QuantizedModel& model, const Dataset& train,
                               const Dataset& test, const FinetuneConfig& cfg);

/// Batched top-1 accuracy of a model (digital) or chip on a dataset.
double evaluate_accuracy(const QuantizedModel& model, const Dataset& ds, int batch_size = 500);
double evaluate_accuracy(const ChipInstance& chip, const Dataset& ds, int batch_size = 500);

} // namespace cimsim
