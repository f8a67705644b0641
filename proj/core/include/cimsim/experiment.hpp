#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cimsim/attack.hpp"
#include "cimsim/chip.hpp"
#include "cimsim/dataset.hpp"
#include "cimsim/train.hpp"

namespace cimsim {

struct ChipGridEntry {
    std::string name;
    AdcKind adc_kind = AdcKind::kSar;
    double wl_param = 10.0;
    std::uint64_t seed = 0;
};

/// Full experiment description; round-trips through JSON (see README for the
/// schema). All seeds are explicit so a config re-run reproduces every byte.
struct ExperimentConfig {
    static constexpr int kFormatVersion = 1;

    std::uint64_t master_seed = 1;

    std::string dataset_kind = "mnist";
    std::filesystem::path data_dir = "data/mnist";
    int train_subset = 0; // 0 = all
    int test_subset = 0;

    std::vector<int> conv_channels = {8, 16};
    QuantConfig quant;

    ArrayConfig array;
    PassRateCurve pass_rate; // wl_param is overridden per chip entry
    std::vector<ChipGridEntry> chips;

    TrainConfig train;
    FinetuneConfig finetune;
    std::vector<AttackConfig> attacks;

    int attack_samples = 1000;
    int quick_attack_samples = 200;
    int clean_eval_samples = 0; // 0 = whole test split
    bool run_transfer_matrix = true;
    bool quick = false;

    std::filesystem::path out_dir = "out";

    void validate() const;
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);

    ChipDescriptor descriptor_for(const ChipGridEntry& entry, int sibling) const;
    int effective_attack_samples() const { return quick ? quick_attack_samples : attack_samples; }
};

/// Everything setup() produces: the baseline model plus, per grid entry, a
/// finetuned (chip1, chip2) pair sharing the entry's ADC configuration but
/// with distinct offset seeds.
struct ChipPairArtifacts {
    ChipGridEntry entry;
    std::unique_ptr<ChipInstance> chip1;
    std::unique_ptr<ChipInstance> chip2;
    QuantizedModel tuned1; // float master weights after finetuning on chip1
    QuantizedModel tuned2;
    FinetuneReport finetune1;
    FinetuneReport finetune2;
    /// chip1 accuracy on the clean eval split right after programming
    /// model0, before any finetuning.
    double clean_before1 = 0.0;
};

struct ExperimentArtifacts {
    Dataset train_set;
    Dataset test_set;
    Dataset eval_set;   // clean-accuracy split
    Tensor attack_batch; // fixed held-out samples shared by every case
    std::vector<int> attack_labels;
    QuantizedModel model0;
    TrainReport train_report;
    double model0_clean = 0.0;
    std::vector<ChipPairArtifacts> pairs;
};

/// One Table-1-shaped row (per chip config x attack norm).
struct CaseRow {
    std::string config_name;
    std::string adc_kind;
    double wl_param = 0.0;
    std::uint64_t seed = 0;
    std::string norm;
    double chip1_clean_before = 0.0;    // programmed, not yet finetuned
    double retrained_accuracy = 0.0;    // chip1 after finetune
    double software_attack_model0 = 0.0;
    double case1_attack_on_chip1 = 0.0;
    double model1_digital_accuracy = 0.0;
    double software_attack_model1 = 0.0;
    double case2_attack_on_chip1 = 0.0;
    double chip2_accuracy_after_attack = 0.0;
    double case3_attack_on_chip1 = 0.0;
};

struct TransferReport {
    std::string dataset;
    double model0_clean = 0.0;
    int attack_sample_count = 0;
    std::vector<CaseRow> rows;
    /// transfer_matrix[norm][i][j]: accuracy of chip_j on the set generated
    /// by attacking chip_i (hybrid), over the grid's chip1 instances.
    std::map<std::string, std::vector<std::vector<double>>> matrix;
    std::vector<std::string> matrix_chip_names;
    std::map<std::string, std::uint64_t> artifact_checksums;
    long long total_attack_iterations = 0;

    std::string to_json(const ExperimentConfig& cfg) const;
    std::string table1_csv() const;
    std::string table2_csv() const;
};

/// Trains (or loads) model0, builds every chip pair, programs model0 and
/// finetunes each chip. Writes model/chip/curve artifacts under cfg.out_dir.
ExperimentArtifacts setup(const ExperimentConfig& cfg);

/// Runs attack case 1 (attack model0), 2 (attack the readout model1), or
/// 3 (hybrid attack on chip2) for one attack config; fills the per-pair rows
/// and serializes the adversarial sets. Rows must be sized to cfg.chips.
void run_case(int which, const ExperimentConfig& cfg, ExperimentArtifacts& artifacts,
              const AttackConfig& attack_cfg, std::vector<CaseRow>& rows, TransferReport& report);

/// Hybrid-attacks every chip1 in the grid and evaluates every chip1 on each
/// adversarial set: entry (i,j) = accuracy of chip j under chip i's set.
std::vector<std::vector<double>> transfer_matrix(const ExperimentConfig& cfg,
                                                 ExperimentArtifacts& artifacts,
                                                 const AttackConfig& attack_cfg,
                                                 TransferReport& report);

/// Writes report.json, report.csv (Table-1 shape) and, when more than one
/// norm was run, table2.csv (Table-2 shape) into dir.
void emit_report(const TransferReport& report, const ExperimentConfig& cfg,
                 const std::filesystem::path& dir);

/// The whole protocol: setup, cases 1-3 per norm, transfer matrix, report.
TransferReport run_experiment(const ExperimentConfig& cfg);

/// Rebuilds the report from the serialized artifacts in cfg.out_dir
/// (checkpoints, chip descriptors, adversarial sets) without re-running
/// training or attacks. Byte-identical to the original report.
TransferReport replay_report(const ExperimentConfig& cfg);

} // namespace cimsim
