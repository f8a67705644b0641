#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cimsim/chip.hpp"
#include "cimsim/model.hpp"

namespace cimsim {

/// Where the attacker's logits and input gradients come from. Digital wraps
/// a pure software model; HybridChip runs inference on a chip and
/// backpropagates through the distorted cache in software.
class GradientSource {
public:
    virtual ~GradientSource() = default;
    virtual std::string name() const = 0;
    virtual Tensor forward(const Tensor& batch, ModelCache* cache) const = 0;
    virtual Tensor input_gradient(const ModelCache& cache, const Tensor& dlogits) const = 0;
};

class DigitalSource final : public GradientSource {
public:
    explicit DigitalSource(const QuantizedModel& model, std::string name = "digital")
        : model_(&model), name_(std::move(name)) {}
    std::string name() const override { return name_; }
    Tensor forward(const Tensor& batch, ModelCache* cache) const override {
        return model_->forward(batch, cache);
    }
    Tensor input_gradient(const ModelCache& cache, const Tensor& dlogits) const override {
        return model_->backward(cache, dlogits, nullptr);
    }

private:
    const QuantizedModel* model_;
    std::string name_;
};

class HybridChipSource final : public GradientSource {
public:
    explicit HybridChipSource(const ChipInstance& chip, std::string name = "hybrid-chip")
        : chip_(&chip), backprop_(chip.readout_model()), name_(std::move(name)) {}
    std::string name() const override { return name_; }
    Tensor forward(const Tensor& batch, ModelCache* cache) const override {
        return chip_->forward(batch, cache);
    }
    Tensor input_gradient(const ModelCache& cache, const Tensor& dlogits) const override {
        return backprop_.backward(cache, dlogits, nullptr);
    }

private:
    const ChipInstance* chip_;
    QuantizedModel backprop_;
    std::string name_;
};

enum class AttackNorm { kL0, kL2, kLinf };

std::string to_string(AttackNorm norm);
AttackNorm attack_norm_from_string(const std::string& s);

struct AttackConfig {
    AttackNorm norm = AttackNorm::kL2;
    double kappa = 0.0;
    int binary_search_steps = 6;
    int max_iterations = 300;
    double step_size = 0.1;
    double initial_c = 0.1;
    bool targeted = false;

    /// L0: fraction of the remaining changed pixels frozen per round (at
    /// least one is always frozen).
    double l0_freeze_fraction = 0.125;
    int l0_max_rounds = 200;

    /// Linf: tau decay per successful round, floor where shrinking stops,
    /// and the abort bound on the misclassification weight c.
    double linf_tau_decay = 0.9;
    double linf_tau_floor = 1.0 / 255.0;
    double linf_c_max = 1e4;

    void validate() const;
};

struct AttackResult {
    AttackNorm norm = AttackNorm::kL2;
    Tensor originals;
    Tensor adversarial;
    std::vector<int> labels;
    std::vector<std::uint8_t> success;
    /// Per-sample distortion in the attack's norm (L2: euclidean distance;
    /// L0: changed pixel count; Linf: max absolute change).
    std::vector<double> distortion;
    /// Accuracy of the attacked source on the adversarial batch.
    double source_accuracy_after = 0.0;
    std::string source_name;
    int total_iterations = 0;

    void save(const std::filesystem::path& path) const;
    static AttackResult load(const std::filesystem::path& path);
};

/// Carlini-Wagner L2: tanh change of variables, plain gradient descent on
/// ||delta||^2 + c * f(x + delta) with the untargeted margin
/// f = max(Z_true - max_{i != true} Z_i, -kappa), outer binary search on c.
/// Keeps the lowest-distortion success per sample. Non-finite gradients fail
/// the sample, not the batch.
AttackResult cw_l2(const GradientSource& source, const Tensor& batch,
                   const std::vector<int>& labels, const AttackConfig& cfg);

/// Carlini-Wagner L0: repeats the L2 attack on a shrinking allowed-pixel
/// set, freezing the pixels with the least gradient*delta contribution,
/// until the attack fails; reports the smallest changed-pixel count found.
AttackResult cw_l0(const GradientSource& source, const Tensor& batch,
                   const std::vector<int>& labels, const AttackConfig& cfg);

/// Carlini-Wagner Linf: gradient descent on c * f + sum_i max(|d_i| - tau, 0)
/// with tau shrinking while the attack keeps succeeding.
AttackResult cw_linf(const GradientSource& source, const Tensor& batch,
                     const std::vector<int>& labels, const AttackConfig& cfg);

AttackResult run_attack(const GradientSource& source, const Tensor& batch,
                        const std::vector<int>& labels, const AttackConfig& cfg);

/// Plain top-1 accuracy of a target on a (possibly adversarial) batch.
double evaluate_on(const GradientSource& target, const Tensor& batch,
                   const std::vector<int>& labels);
double evaluate_on(const QuantizedModel& target, const Tensor& batch,
                   const std::vector<int>& labels);
double evaluate_on(const ChipInstance& target, const Tensor& batch, const std::vector<int>& labels);

} // namespace cimsim
