#include "cimsim/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace cimsim {

namespace {

std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot hash missing file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes);
}

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
    return buf;
}

nlohmann::ordered_json attack_to_json(const AttackConfig& a) {
    return {{"norm", to_string(a.norm)},
            {"kappa", a.kappa},
            {"binary_search_steps", a.binary_search_steps},
            {"max_iterations", a.max_iterations},
            {"step_size", a.step_size},
            {"initial_c", a.initial_c},
            {"targeted", a.targeted},
            {"l0_freeze_fraction", a.l0_freeze_fraction},
            {"l0_max_rounds", a.l0_max_rounds},
            {"linf_tau_decay", a.linf_tau_decay},
            {"linf_tau_floor", a.linf_tau_floor},
            {"linf_c_max", a.linf_c_max}};
}

AttackConfig attack_from_json(const nlohmann::json& j) {
    AttackConfig a;
    a.norm = attack_norm_from_string(j.value("norm", "l2"));
    a.kappa = j.value("kappa", a.kappa);
    a.binary_search_steps = j.value("binary_search_steps", a.binary_search_steps);
    a.max_iterations = j.value("max_iterations", a.max_iterations);
    a.step_size = j.value("step_size", a.step_size);
    a.initial_c = j.value("initial_c", a.initial_c);
    a.targeted = j.value("targeted", a.targeted);
    a.l0_freeze_fraction = j.value("l0_freeze_fraction", a.l0_freeze_fraction);
    a.l0_max_rounds = j.value("l0_max_rounds", a.l0_max_rounds);
    a.linf_tau_decay = j.value("linf_tau_decay", a.linf_tau_decay);
    a.linf_tau_floor = j.value("linf_tau_floor", a.linf_tau_floor);
    a.linf_c_max = j.value("linf_c_max", a.linf_c_max);
    a.validate();
    return a;
}

} // namespace

void ExperimentConfig::validate() const {
    quant.validate();
    array.validate();
    train.validate();
    finetune.validate();
    if (chips.empty()) throw ConfigError("config: at least one chip entry required");
    for (const auto& c : chips) {
        if (c.name.empty()) throw ConfigError("config: chip entries need names");
    }
    if (attacks.empty()) throw ConfigError("config: at least one attack config required");
    for (const auto& a : attacks) a.validate();
    if (attack_samples < 1 || quick_attack_samples < 1) {
        throw ConfigError("config: attack sample counts must be positive");
    }
    if (dataset_kind != "mnist" && dataset_kind != "cifar10") {
        throw ConfigError("config: dataset must be mnist or cifar10");
    }
}

ChipDescriptor ExperimentConfig::descriptor_for(const ChipGridEntry& entry, int sibling) const {
    ChipDescriptor d;
    // The sibling chip of a config shares everything but the offset seed.
    d.chip_seed = sibling == 1 ? entry.seed : entry.seed ^ 0x9E3779B97F4A7C15ULL;
    d.array = array;
    d.curve = pass_rate;
    d.curve.wl_param = entry.wl_param;
    d.adc_kind = entry.adc_kind;
    d.validate();
    return d;
}

std::string ExperimentConfig::to_json() const {
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["master_seed"] = master_seed;
    j["dataset"] = {{"kind", dataset_kind},
                    {"dir", data_dir.string()},
                    {"train_subset", train_subset},
                    {"test_subset", test_subset}};
    j["network"] = {{"conv_channels", conv_channels}};
    j["quant"] = {{"act_bits", quant.act_bits}, {"weight_bits", quant.weight_bits}};
    j["array"] = {{"rows", array.rows},
                  {"cols", array.cols},
                  {"cell_bits", array.cell_bits},
                  {"rows_per_access", array.rows_per_access},
                  {"adc_bits", array.adc_spec.bits},
                  {"psum_max", array.adc_spec.psum_max},
                  {"step_compression", array.adc_spec.step_compression},
                  {"clip_psum", array.clip_psum}};
    j["pass_rate"] = {{"p_low", pass_rate.p_low},
                      {"p_high", pass_rate.p_high},
                      {"shape_gamma", pass_rate.shape_gamma}};
    if (pass_rate.level_table) j["pass_rate"]["level_table"] = *pass_rate.level_table;
    j["chips"] = nlohmann::ordered_json::array();
    for (const auto& c : chips) {
        j["chips"].push_back({{"name", c.name},
                              {"adc_kind", to_string(c.adc_kind)},
                              {"wl_param", c.wl_param},
                              {"seed", c.seed}});
    }
    j["train"] = {{"epochs", train.epochs},
                  {"batch", train.batch_size},
                  {"lr", train.learning_rate},
                  {"momentum", train.momentum},
                  {"lr_decay", train.lr_decay},
                  {"calibration_samples", train.calibration_samples},
                  {"eval_samples", train.eval_samples}};
    j["finetune"] = {{"epochs", finetune.epochs},
                     {"batch", finetune.batch_size},
                     {"lr", finetune.learning_rate},
                     {"momentum", finetune.momentum},
                     {"eval_interval", finetune.eval_interval},
                     {"eval_samples", finetune.eval_samples}};
    j["attacks"] = nlohmann::ordered_json::array();
    for (const auto& a : attacks) j["attacks"].push_back(attack_to_json(a));
    j["eval"] = {{"attack_samples", attack_samples},
                 {"quick_attack_samples", quick_attack_samples},
                 {"clean_samples", clean_eval_samples}};
    j["run_transfer_matrix"] = run_transfer_matrix;
    return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (j.value("format_version", 1) != kFormatVersion) {
            throw ConfigError("config: unsupported format_version");
        }
        cfg.master_seed = j.value("master_seed", cfg.master_seed);
        if (j.contains("dataset")) {
            const auto& d = j["dataset"];
            cfg.dataset_kind = d.value("kind", cfg.dataset_kind);
            cfg.data_dir = d.value("dir", cfg.data_dir.string());
            cfg.train_subset = d.value("train_subset", cfg.train_subset);
            cfg.test_subset = d.value("test_subset", cfg.test_subset);
        }
        if (j.contains("network")) {
            cfg.conv_channels =
                j["network"].value("conv_channels", cfg.conv_channels);
        }
        if (j.contains("quant")) {
            cfg.quant.act_bits = j["quant"].value("act_bits", cfg.quant.act_bits);
            cfg.quant.weight_bits = j["quant"].value("weight_bits", cfg.quant.weight_bits);
        }
        if (j.contains("array")) {
            const auto& a = j["array"];
            cfg.array.rows = a.value("rows", cfg.array.rows);
            cfg.array.cols = a.value("cols", cfg.array.cols);
            cfg.array.cell_bits = a.value("cell_bits", cfg.array.cell_bits);
            cfg.array.rows_per_access = a.value("rows_per_access", cfg.array.rows_per_access);
            cfg.array.clip_psum = a.value("clip_psum", cfg.array.clip_psum);
            cfg.array.adc_spec = AdcSpec::compressed(a.value("adc_bits", 5), a.value("psum_max", 31),
                                                     a.value("step_compression", 0.0));
        }
        if (j.contains("pass_rate")) {
            const auto& p = j["pass_rate"];
            cfg.pass_rate.p_low = p.value("p_low", cfg.pass_rate.p_low);
            cfg.pass_rate.p_high = p.value("p_high", cfg.pass_rate.p_high);
            cfg.pass_rate.shape_gamma = p.value("shape_gamma", cfg.pass_rate.shape_gamma);
            if (p.contains("level_table")) {
                cfg.pass_rate.level_table = p["level_table"].get<std::vector<double>>();
            }
        }
        if (j.contains("chips")) {
            cfg.chips.clear();
            for (const auto& c : j["chips"]) {
                ChipGridEntry e;
                e.name = c.at("name").get<std::string>();
                e.adc_kind = adc_kind_from_string(c.at("adc_kind").get<std::string>());
                e.wl_param = c.at("wl_param").get<double>();
                e.seed = c.at("seed").get<std::uint64_t>();
                cfg.chips.push_back(e);
            }
        } else {
            cfg.chips = {{"A", AdcKind::kSar, 9.0, 303}, {"B", AdcKind::kSar, 10.0, 202},
                         {"C", AdcKind::kFlash, 9.0, 404}, {"D", AdcKind::kFlash, 10.0, 606}};
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            cfg.train.epochs = t.value("epochs", cfg.train.epochs);
            cfg.train.batch_size = t.value("batch", cfg.train.batch_size);
            cfg.train.learning_rate = t.value("lr", cfg.train.learning_rate);
            cfg.train.momentum = t.value("momentum", cfg.train.momentum);
            cfg.train.lr_decay = t.value("lr_decay", cfg.train.lr_decay);
            cfg.train.calibration_samples =
                t.value("calibration_samples", cfg.train.calibration_samples);
            cfg.train.eval_samples = t.value("eval_samples", cfg.train.eval_samples);
        }
        if (j.contains("finetune")) {
            const auto& f = j["finetune"];
            cfg.finetune.epochs = f.value("epochs", cfg.finetune.epochs);
            cfg.finetune.batch_size = f.value("batch", cfg.finetune.batch_size);
            cfg.finetune.learning_rate = f.value("lr", cfg.finetune.learning_rate);
            cfg.finetune.momentum = f.value("momentum", cfg.finetune.momentum);
            cfg.finetune.eval_interval = f.value("eval_interval", cfg.finetune.eval_interval);
            cfg.finetune.eval_samples = f.value("eval_samples", cfg.finetune.eval_samples);
        }
        if (j.contains("attacks")) {
            cfg.attacks.clear();
            for (const auto& a : j["attacks"]) cfg.attacks.push_back(attack_from_json(a));
        } else {
            cfg.attacks.push_back(AttackConfig{});
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            cfg.attack_samples = e.value("attack_samples", cfg.attack_samples);
            cfg.quick_attack_samples = e.value("quick_attack_samples", cfg.quick_attack_samples);
            cfg.clean_eval_samples = e.value("clean_samples", cfg.clean_eval_samples);
        }
        cfg.run_transfer_matrix = j.value("run_transfer_matrix", cfg.run_transfer_matrix);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.train.seed = cfg.master_seed;
    cfg.finetune.seed = cfg.master_seed;
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

// ---------------------------------------------------------------------------
// setup
// ---------------------------------------------------------------------------

namespace {

Dataset load_split(const ExperimentConfig& cfg, const std::string& split) {
    Dataset ds = cfg.dataset_kind == "mnist" ? load_mnist(cfg.data_dir, split)
                                             : load_cifar10(cfg.data_dir, split);
    const int subset = split == "train" ? cfg.train_subset : cfg.test_subset;
    return subset > 0 ? ds.head(subset) : ds;
}

ArchSpec arch_for(const ExperimentConfig& cfg, const Dataset& ds) {
    return ArchSpec::desk_cnn({ds.images.shape[1], ds.images.shape[2], ds.images.shape[3]},
                              ds.n_classes, cfg.conv_channels, cfg.quant);
}

/// Cache key for reusing a trained model0 between runs of the same config.
std::uint64_t model0_config_hash(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.master_seed;
    j["dataset"] = {cfg.dataset_kind, cfg.train_subset};
    j["network"] = cfg.conv_channels;
    j["quant"] = {cfg.quant.act_bits, cfg.quant.weight_bits};
    j["train"] = {cfg.train.epochs, cfg.train.batch_size, cfg.train.learning_rate,
                  cfg.train.momentum, cfg.train.lr_decay, cfg.train.calibration_samples};
    return fnv1a64(j.dump());
}

} // namespace

ExperimentArtifacts setup(const ExperimentConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);

    ExperimentArtifacts art;
    art.train_set = load_split(cfg, "train");
    art.test_set = load_split(cfg, "test");
    art.eval_set = cfg.clean_eval_samples > 0 ? art.test_set.head(cfg.clean_eval_samples)
                                              : art.test_set;

    // Fixed held-out attack set, shared by every case so columns compare.
    {
        const int n = std::min(cfg.effective_attack_samples(), art.test_set.size());
        RngStream stream = RngStream::derive(cfg.master_seed, "attack-set");
        std::vector<int> order(art.test_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            const int j = static_cast<int>(stream.next_u64() % static_cast<std::uint64_t>(i + 1));
            std::swap(order[i], order[j]);
        }
        order.resize(n);
        auto [batch, labels] = gather(art.test_set, order);
        art.attack_batch = std::move(batch);
        art.attack_labels = std::move(labels);
    }

    // model0: train once per config hash, reuse across runs.
    const auto ckpt = cfg.out_dir / "model0.ckpt";
    const auto meta = cfg.out_dir / "model0.meta";
    const std::string want_meta = std::to_string(model0_config_hash(cfg));
    bool cached = false;
    if (std::filesystem::exists(ckpt) && std::filesystem::exists(meta)) {
        std::ifstream in(meta);
        std::string have;
        in >> have;
        cached = have == want_meta;
    }
    if (cached) {
        art.model0 = QuantizedModel::load_checkpoint(ckpt);
        std::fprintf(stderr, "[setup] reusing cached baseline %s\n", ckpt.string().c_str());
    } else {
        art.model0 = build_model(arch_for(cfg, art.train_set), cfg.master_seed);
        TrainConfig tc = cfg.train;
        tc.seed = cfg.master_seed;
        art.train_report = train_baseline(art.model0, art.train_set, art.test_set, tc);
        art.model0.save_checkpoint(ckpt);
        std::ofstream out(meta);
        out << want_meta << "\n";
    }
    art.model0_clean = evaluate_accuracy(art.model0, art.eval_set);

    for (const auto& entry : cfg.chips) {
        ChipPairArtifacts pair;
        pair.entry = entry;
        const ChipDescriptor d1 = cfg.descriptor_for(entry, 1);
        const ChipDescriptor d2 = cfg.descriptor_for(entry, 2);
        d1.save(cfg.out_dir / ("chip_" + entry.name + "_1.json"));
        d2.save(cfg.out_dir / ("chip_" + entry.name + "_2.json"));
        pair.chip1 = std::make_unique<ChipInstance>(d1);
        pair.chip2 = std::make_unique<ChipInstance>(d2);

        FinetuneConfig fc = cfg.finetune;
        fc.seed = cfg.master_seed;

        pair.tuned1 = art.model0;
        pair.chip1->program(pair.tuned1);
        pair.clean_before1 = evaluate_accuracy(*pair.chip1, art.eval_set);
        pair.finetune1 = finetune_hybrid(*pair.chip1, pair.tuned1, art.train_set, art.test_set, fc);
        pair.tuned1.save_checkpoint(cfg.out_dir / ("model_" + entry.name + "_1.ckpt"));

        pair.tuned2 = art.model0;
        pair.chip2->program(pair.tuned2);
        pair.finetune2 = finetune_hybrid(*pair.chip2, pair.tuned2, art.train_set, art.test_set, fc);
        pair.tuned2.save_checkpoint(cfg.out_dir / ("model_" + entry.name + "_2.ckpt"));

        // Retrain curve (accuracy vs iteration) for both siblings.
        std::ofstream curve(cfg.out_dir / ("finetune_curve_" + entry.name + ".csv"));
        curve << "iteration,chip1_accuracy,chip2_accuracy\n";
        for (size_t i = 0; i < pair.finetune1.curve.size(); ++i) {
            curve << pair.finetune1.curve[i].iteration << "," << pct(pair.finetune1.curve[i].accuracy)
                  << "," << pct(pair.finetune2.curve[i].accuracy) << "\n";
        }
        art.pairs.push_back(std::move(pair));
    }
    return art;
}

// ---------------------------------------------------------------------------
// cases
// ---------------------------------------------------------------------------

void run_case(int which, const ExperimentConfig& cfg, ExperimentArtifacts& art,
              const AttackConfig& attack_cfg, std::vector<CaseRow>& rows, TransferReport& report) {
    if (rows.size() != art.pairs.size()) throw ConfigError("run_case: row set size mismatch");
    const std::string norm = to_string(attack_cfg.norm);
    auto record = [&](const std::filesystem::path& file, const AttackResult& res) {
        res.save(file);
        report.artifact_checksums[file.filename().string()] = file_hash(file);
        report.total_attack_iterations += res.total_iterations;
    };

    if (which == 1) {
        DigitalSource src(art.model0, "model0");
        AttackResult adv = run_attack(src, art.attack_batch, art.attack_labels, attack_cfg);
        record(cfg.out_dir / ("adv_" + norm + "_model0.bin"), adv);
        for (size_t i = 0; i < art.pairs.size(); ++i) {
            rows[i].software_attack_model0 = adv.source_accuracy_after;
            rows[i].case1_attack_on_chip1 =
                evaluate_on(*art.pairs[i].chip1, adv.adversarial, adv.labels);
        }
    } else if (which == 2) {
        for (size_t i = 0; i < art.pairs.size(); ++i) {
            const QuantizedModel model1 = art.pairs[i].chip1->readout_model();
            rows[i].model1_digital_accuracy = evaluate_accuracy(model1, art.eval_set);
            DigitalSource src(model1, "model1-" + art.pairs[i].entry.name);
            AttackResult adv = run_attack(src, art.attack_batch, art.attack_labels, attack_cfg);
            record(cfg.out_dir / ("adv_" + norm + "_model1_" + art.pairs[i].entry.name + ".bin"),
                   adv);
            rows[i].software_attack_model1 = adv.source_accuracy_after;
            rows[i].case2_attack_on_chip1 =
                evaluate_on(*art.pairs[i].chip1, adv.adversarial, adv.labels);
        }
    } else if (which == 3) {
        for (size_t i = 0; i < art.pairs.size(); ++i) {
            HybridChipSource src(*art.pairs[i].chip2, "chip2-" + art.pairs[i].entry.name);
            AttackResult adv = run_attack(src, art.attack_batch, art.attack_labels, attack_cfg);
            record(cfg.out_dir / ("adv_" + norm + "_chip2_" + art.pairs[i].entry.name + ".bin"),
                   adv);
            rows[i].chip2_accuracy_after_attack = adv.source_accuracy_after;
            rows[i].case3_attack_on_chip1 =
                evaluate_on(*art.pairs[i].chip1, adv.adversarial, adv.labels);
        }
    } else {
        throw ConfigError("run_case: case must be 1, 2 or 3");
    }
}

std::vector<std::vector<double>> transfer_matrix(const ExperimentConfig& cfg,
                                                 ExperimentArtifacts& art,
                                                 const AttackConfig& attack_cfg,
                                                 TransferReport& report) {
    if (art.pairs.size() < 2) throw ConfigError("transfer_matrix: need at least two chips");
    const std::string norm = to_string(attack_cfg.norm);
    const size_t n = art.pairs.size();
    std::vector<std::vector<double>> matrix(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i) {
        HybridChipSource src(*art.pairs[i].chip1, "chip1-" + art.pairs[i].entry.name);
        AttackResult adv = run_attack(src, art.attack_batch, art.attack_labels, attack_cfg);
        const auto file = cfg.out_dir / ("adv_" + norm + "_matrix_" + art.pairs[i].entry.name + ".bin");
        adv.save(file);
        report.artifact_checksums[file.filename().string()] = file_hash(file);
        report.total_attack_iterations += adv.total_iterations;
        for (size_t j = 0; j < n; ++j) {
            matrix[i][j] = evaluate_on(*art.pairs[j].chip1, adv.adversarial, adv.labels);
        }
    }
    return matrix;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

std::string TransferReport::table1_csv() const {
    std::ostringstream out;
    out << "config,adc_type,wl_param,seed,norm,chip1_clean_before,retrained_accuracy,"
           "software_attack_model0,case1_attack_on_chip1,model1_digital_accuracy,"
           "software_attack_model1,case2_attack_on_chip1,chip2_accuracy_after_attack,"
           "case3_attack_on_chip1\n";
    for (const auto& r : rows) {
        out << r.config_name << "," << r.adc_kind << "," << r.wl_param << "," << r.seed << ","
            << r.norm << "," << pct(r.chip1_clean_before) << "," << pct(r.retrained_accuracy) << ","
            << pct(r.software_attack_model0) << "," << pct(r.case1_attack_on_chip1) << ","
            << pct(r.model1_digital_accuracy) << "," << pct(r.software_attack_model1) << ","
            << pct(r.case2_attack_on_chip1) << "," << pct(r.chip2_accuracy_after_attack) << ","
            << pct(r.case3_attack_on_chip1) << "\n";
    }
    return out.str();
}

std::string TransferReport::table2_csv() const {
    // Norm comparison on the first chip config (Table-2 shape).
    std::ostringstream out;
    out << "norm,software_attack_model0,case1_attack_on_chip1,chip2_accuracy_after_attack,"
           "case3_attack_on_chip1\n";
    if (rows.empty()) return out.str();
    const std::string& first = rows.front().config_name;
    for (const auto& r : rows) {
        if (r.config_name != first) continue;
        out << r.norm << "," << pct(r.software_attack_model0) << ","
            << pct(r.case1_attack_on_chip1) << "," << pct(r.chip2_accuracy_after_attack) << ","
            << pct(r.case3_attack_on_chip1) << "\n";
    }
    return out.str();
}

std::string TransferReport::to_json(const ExperimentConfig& cfg) const {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["dataset"] = dataset;
    j["model0_clean_accuracy"] = model0_clean;
    j["attack_sample_count"] = attack_sample_count;
    j["total_attack_iterations"] = total_attack_iterations;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"config", r.config_name},
                             {"adc_type", r.adc_kind},
                             {"wl_param", r.wl_param},
                             {"seed", r.seed},
                             {"norm", r.norm},
                             {"chip1_clean_before", r.chip1_clean_before},
                             {"retrained_accuracy", r.retrained_accuracy},
                             {"software_attack_model0", r.software_attack_model0},
                             {"case1_attack_on_chip1", r.case1_attack_on_chip1},
                             {"model1_digital_accuracy", r.model1_digital_accuracy},
                             {"software_attack_model1", r.software_attack_model1},
                             {"case2_attack_on_chip1", r.case2_attack_on_chip1},
                             {"chip2_accuracy_after_attack", r.chip2_accuracy_after_attack},
                             {"case3_attack_on_chip1", r.case3_attack_on_chip1}});
    }
    j["transfer_matrix"] = nlohmann::ordered_json::object();
    for (const auto& [norm, m] : matrix) j["transfer_matrix"][norm] = m;
    j["transfer_matrix_chips"] = matrix_chip_names;
    j["artifact_checksums"] = nlohmann::ordered_json::object();
    for (const auto& [name, sum] : artifact_checksums) {
        j["artifact_checksums"][name] = sum;
    }
    j["config"] = nlohmann::ordered_json::parse(cfg.to_json());
    return j.dump(2) + "\n";
}

void emit_report(const TransferReport& report, const ExperimentConfig& cfg,
                 const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "report.json", std::ios::binary);
        if (!out) throw DataError("cannot write report.json");
        out << report.to_json(cfg);
    }
    {
        std::ofstream out(dir / "report.csv", std::ios::binary);
        if (!out) throw DataError("cannot write report.csv");
        out << report.table1_csv();
    }
    std::set<std::string> norms;
    for (const auto& r : report.rows) norms.insert(r.norm);
    if (norms.size() > 1) {
        std::ofstream out(dir / "table2.csv", std::ios::binary);
        if (!out) throw DataError("cannot write table2.csv");
        out << report.table2_csv();
    }
}

// ---------------------------------------------------------------------------
// whole protocol + replay
// ---------------------------------------------------------------------------

namespace {

std::vector<CaseRow> blank_rows(const ExperimentConfig& cfg, const std::string& norm) {
    std::vector<CaseRow> rows(cfg.chips.size());
    for (size_t i = 0; i < cfg.chips.size(); ++i) {
        rows[i].config_name = cfg.chips[i].name;
        rows[i].adc_kind = to_string(cfg.chips[i].adc_kind);
        rows[i].wl_param = cfg.chips[i].wl_param;
        rows[i].seed = cfg.chips[i].seed;
        rows[i].norm = norm;
    }
    return rows;
}

} // namespace

TransferReport run_experiment(const ExperimentConfig& cfg) {
    ExperimentArtifacts art = setup(cfg);

    TransferReport report;
    report.dataset = cfg.dataset_kind;
    report.model0_clean = art.model0_clean;
    report.attack_sample_count = art.attack_batch.shape[0];
    for (const auto& p : art.pairs) report.matrix_chip_names.push_back(p.entry.name);

    for (const AttackConfig& attack_cfg : cfg.attacks) {
        auto rows = blank_rows(cfg, to_string(attack_cfg.norm));
        for (size_t i = 0; i < art.pairs.size(); ++i) {
            rows[i].chip1_clean_before = art.pairs[i].clean_before1;
            rows[i].retrained_accuracy = evaluate_accuracy(*art.pairs[i].chip1, art.eval_set);
        }
        run_case(1, cfg, art, attack_cfg, rows, report);
        run_case(2, cfg, art, attack_cfg, rows, report);
        run_case(3, cfg, art, attack_cfg, rows, report);
        if (cfg.run_transfer_matrix && art.pairs.size() >= 2) {
            report.matrix[to_string(attack_cfg.norm)] = transfer_matrix(cfg, art, attack_cfg, report);
        }
        report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }

    emit_report(report, cfg, cfg.out_dir);
    return report;
}

TransferReport replay_report(const ExperimentConfig& cfg) {
    const Dataset test = load_split(cfg, "test");
    const Dataset eval_set = cfg.clean_eval_samples > 0 ? test.head(cfg.clean_eval_samples) : test;
    const QuantizedModel model0 = QuantizedModel::load_checkpoint(cfg.out_dir / "model0.ckpt");

    TransferReport report;
    report.dataset = cfg.dataset_kind;
    report.model0_clean = evaluate_accuracy(model0, eval_set);

    struct LoadedPair {
        std::unique_ptr<ChipInstance> chip1, chip2;
    };
    std::vector<LoadedPair> pairs;
    for (const auto& entry : cfg.chips) {
        LoadedPair p;
        p.chip1 = std::make_unique<ChipInstance>(
            ChipDescriptor::load(cfg.out_dir / ("chip_" + entry.name + "_1.json")));
        p.chip2 = std::make_unique<ChipInstance>(
            ChipDescriptor::load(cfg.out_dir / ("chip_" + entry.name + "_2.json")));
        p.chip1->program(
            QuantizedModel::load_checkpoint(cfg.out_dir / ("model_" + entry.name + "_1.ckpt")));
        p.chip2->program(
            QuantizedModel::load_checkpoint(cfg.out_dir / ("model_" + entry.name + "_2.ckpt")));
        pairs.push_back(std::move(p));
        report.matrix_chip_names.push_back(entry.name);
    }

    for (const AttackConfig& attack_cfg : cfg.attacks) {
        const std::string norm = to_string(attack_cfg.norm);
        auto rows = blank_rows(cfg, norm);

        const auto model0_adv = AttackResult::load(cfg.out_dir / ("adv_" + norm + "_model0.bin"));
        report.attack_sample_count = model0_adv.originals.shape[0];
        report.total_attack_iterations += model0_adv.total_iterations;
        report.artifact_checksums["adv_" + norm + "_model0.bin"] =
            file_hash(cfg.out_dir / ("adv_" + norm + "_model0.bin"));

        for (size_t i = 0; i < pairs.size(); ++i) {
            const std::string& name = cfg.chips[i].name;
            CaseRow& r = rows[i];
            {
                // Programmed-but-untuned accuracy comes from re-programming model0.
                ChipInstance fresh(cfg.descriptor_for(cfg.chips[i], 1));
                fresh.program(model0);
                r.chip1_clean_before = evaluate_accuracy(fresh, eval_set);
            }
            r.retrained_accuracy = evaluate_accuracy(*pairs[i].chip1, eval_set);
            r.software_attack_model0 = model0_adv.source_accuracy_after;
            r.case1_attack_on_chip1 =
                evaluate_on(*pairs[i].chip1, model0_adv.adversarial, model0_adv.labels);

            const auto f1 = cfg.out_dir / ("adv_" + norm + "_model1_" + name + ".bin");
            const auto adv1 = AttackResult::load(f1);
            report.artifact_checksums[f1.filename().string()] = file_hash(f1);
            report.total_attack_iterations += adv1.total_iterations;
            const QuantizedModel model1 = pairs[i].chip1->readout_model();
            r.model1_digital_accuracy = evaluate_accuracy(model1, eval_set);
            r.software_attack_model1 = adv1.source_accuracy_after;
            r.case2_attack_on_chip1 = evaluate_on(*pairs[i].chip1, adv1.adversarial, adv1.labels);

            const auto f2 = cfg.out_dir / ("adv_" + norm + "_chip2_" + name + ".bin");
            const auto adv2 = AttackResult::load(f2);
            report.artifact_checksums[f2.filename().string()] = file_hash(f2);
            report.total_attack_iterations += adv2.total_iterations;
            r.chip2_accuracy_after_attack = adv2.source_accuracy_after;
            r.case3_attack_on_chip1 = evaluate_on(*pairs[i].chip1, adv2.adversarial, adv2.labels);
        }

        if (cfg.run_transfer_matrix && pairs.size() >= 2) {
            std::vector<std::vector<double>> matrix(pairs.size(),
                                                    std::vector<double>(pairs.size(), 0.0));
            for (size_t i = 0; i < pairs.size(); ++i) {
                const auto fm =
                    cfg.out_dir / ("adv_" + norm + "_matrix_" + cfg.chips[i].name + ".bin");
                const auto adv = AttackResult::load(fm);
                report.artifact_checksums[fm.filename().string()] = file_hash(fm);
                report.total_attack_iterations += adv.total_iterations;
                for (size_t j = 0; j < pairs.size(); ++j) {
                    matrix[i][j] = evaluate_on(*pairs[j].chip1, adv.adversarial, adv.labels);
                }
            }
            report.matrix[norm] = matrix;
        }
        report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    }
    return report;
}

} // namespace cimsim
