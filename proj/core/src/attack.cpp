#include "cimsim/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace cimsim {

std::string to_string(AttackNorm norm) {
    switch (norm) {
        case AttackNorm::kL0: return "l0";
        case AttackNorm::kL2: return "l2";
        case AttackNorm::kLinf: return "linf";
    }
    return "l2";
}

AttackNorm attack_norm_from_string(const std::string& s) {
    if (s == "l0") return AttackNorm::kL0;
    if (s == "l2") return AttackNorm::kL2;
    if (s == "linf") return AttackNorm::kLinf;
    throw ConfigError("unknown attack norm: " + s);
}

void AttackConfig::validate() const {
    if (kappa < 0.0) throw ConfigError("AttackConfig: kappa must be >= 0");
    if (binary_search_steps < 1) throw ConfigError("AttackConfig: binary_search_steps must be >= 1");
    if (max_iterations < 0) throw ConfigError("AttackConfig: max_iterations must be >= 0");
    if (!(step_size > 0.0)) throw ConfigError("AttackConfig: step_size must be positive");
    if (!(initial_c > 0.0)) throw ConfigError("AttackConfig: initial_c must be positive");
}

namespace {

struct MarginInfo {
    double f = 0.0;   // margin before the -kappa floor
    int other = 0;    // competing class index
    bool success = false;
};

/// Untargeted: f = Z_true - max_{i != true} Z_i; success when argmax != true.
/// Targeted: f = max_{i != t} Z_i - Z_t with labels holding targets.
MarginInfo margin_of(const double* logits, int classes, int label, bool targeted) {
    int best_other = label == 0 ? 1 : 0;
    for (int i = 0; i < classes; ++i) {
        if (i != label && logits[i] > logits[best_other]) best_other = i;
    }
    int arg = 0;
    for (int i = 1; i < classes; ++i) {
        if (logits[i] > logits[arg]) arg = i;
    }
    MarginInfo m;
    m.other = best_other;
    if (targeted) {
        m.f = logits[best_other] - logits[label];
        m.success = arg == label;
    } else {
        m.f = logits[label] - logits[best_other];
        m.success = arg != label;
    }
    return m;
}

double l2_distance(const double* a, const double* b, std::int64_t d) {
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return std::sqrt(s);
}

/// Shared finalization: re-evaluate the source on the emitted batch so the
/// success flags and reported accuracy are consistent by construction.
void finalize(const GradientSource& source, AttackResult& result) {
    const Tensor logits = source.forward(result.adversarial, nullptr);
    const int classes = logits.shape[1];
    const int n = logits.shape[0];
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        const double* row = &logits.data[static_cast<size_t>(i) * classes];
        int arg = 0;
        for (int c = 1; c < classes; ++c) {
            if (row[c] > row[arg]) arg = c;
        }
        result.success[i] = arg != result.labels[i] ? 1 : 0;
        correct += arg == result.labels[i] ? 1 : 0;
    }
    result.source_accuracy_after = static_cast<double>(correct) / n;
    result.source_name = source.name();
}

constexpr double kTanhGuard = 1.0 - 2e-6;

/// Core batched L2 attack. mask (optional, n x d) freezes pixels at their
/// original value; frozen pixels carry no gradient and no distortion.
AttackResult cw_l2_masked(const GradientSource& source, const Tensor& batch,
                          const std::vector<int>& labels, const AttackConfig& cfg,
                          const std::vector<std::uint8_t>* mask, const Tensor* warm_start) {
    cfg.validate();
    const int n = batch.shape[0];
    if (static_cast<int>(labels.size()) != n) throw ConfigError("cw_l2: labels/batch size mismatch");
    const std::int64_t d = batch.numel() / n;

    AttackResult result;
    result.norm = AttackNorm::kL2;
    result.originals = batch;
    result.adversarial = batch;
    result.labels = labels;
    result.success.assign(n, 0);
    result.distortion.assign(n, 0.0);

    const Tensor& start = warm_start ? *warm_start : batch;
    Tensor v0(batch.shape);
    for (std::int64_t i = 0; i < batch.numel(); ++i) {
        v0.data[i] = std::atanh((2.0 * start.data[i] - 1.0) * kTanhGuard);
    }

    std::vector<double> c(n, cfg.initial_c);
    std::vector<double> c_lo(n, 0.0), c_hi(n, std::numeric_limits<double>::infinity());
    std::vector<double> best_l2(n, std::numeric_limits<double>::infinity());
    std::vector<std::uint8_t> dead(n, 0); // non-finite gradients disable a sample

    Tensor v(batch.shape), x_adv(batch.shape), dlogits;
    for (int bs = 0; bs < cfg.binary_search_steps; ++bs) {
        v = v0;
        std::vector<std::uint8_t> step_success(n, 0);
        for (int it = 0; it < cfg.max_iterations; ++it) {
            for (std::int64_t i = 0; i < v.numel(); ++i) {
                const std::int64_t s = i / d;
                const bool frozen = (mask && !(*mask)[i]) || dead[s];
                x_adv.data[i] = frozen ? batch.data[i] : 0.5 * (std::tanh(v.data[i]) + 1.0);
            }
            ModelCache cache;
            const Tensor logits = source.forward(x_adv, &cache);
            const int classes = logits.shape[1];
            dlogits = Tensor(logits.shape);
            for (int s = 0; s < n; ++s) {
                if (dead[s]) continue;
                const MarginInfo m =
                    margin_of(&logits.data[static_cast<size_t>(s) * classes], classes, labels[s],
                              cfg.targeted);
                if (m.success) {
                    step_success[s] = 1;
                    const double dist = l2_distance(&x_adv.data[static_cast<size_t>(s) * d],
                                                    &batch.data[static_cast<size_t>(s) * d], d);
                    if (dist < best_l2[s]) {
                        best_l2[s] = dist;
                        std::copy_n(&x_adv.data[static_cast<size_t>(s) * d], d,
                                    &result.adversarial.data[static_cast<size_t>(s) * d]);
                        result.distortion[s] = dist;
                        result.success[s] = 1;
                    }
                }
                if (m.f > -cfg.kappa) {
                    double* drow = &dlogits.data[static_cast<size_t>(s) * classes];
                    if (cfg.targeted) {
                        drow[m.other] += c[s];
                        drow[labels[s]] -= c[s];
                    } else {
                        drow[labels[s]] += c[s];
                        drow[m.other] -= c[s];
                    }
                }
            }
            const Tensor dx = source.input_gradient(cache, dlogits);
            ++result.total_iterations;
            for (std::int64_t i = 0; i < v.numel(); ++i) {
                const std::int64_t s = i / d;
                if ((mask && !(*mask)[i]) || dead[s]) continue;
                const double g = dx.data[i] + 2.0 * (x_adv.data[i] - batch.data[i]);
                if (!std::isfinite(g)) {
                    dead[s] = 1;
                    continue;
                }
                const double t = std::tanh(v.data[i]);
                v.data[i] -= cfg.step_size * g * 0.5 * (1.0 - t * t);
            }
        }
        for (int s = 0; s < n; ++s) {
            if (step_success[s]) {
                c_hi[s] = c[s];
                c[s] = 0.5 * (c_lo[s] + c_hi[s]);
            } else {
                c_lo[s] = c[s];
                c[s] = std::isinf(c_hi[s]) ? c[s] * 10.0 : 0.5 * (c_lo[s] + c_hi[s]);
            }
        }
    }

    finalize(source, result);
    // Distortion accounting on the emitted batch.
    for (int s = 0; s < n; ++s) {
        result.distortion[s] = l2_distance(&result.adversarial.data[static_cast<size_t>(s) * d],
                                           &batch.data[static_cast<size_t>(s) * d], d);
    }
    return result;
}

} // namespace

AttackResult cw_l2(const GradientSource& source, const Tensor& batch,
                   const std::vector<int>& labels, const AttackConfig& cfg) {
    return cw_l2_masked(source, batch, labels, cfg, nullptr, nullptr);
}

AttackResult cw_l0(const GradientSource& source, const Tensor& batch,
                   const std::vector<int>& labels, const AttackConfig& cfg) {
    cfg.validate();
    const int n = batch.shape[0];
    const std::int64_t d = batch.numel() / n;

    AttackResult result;
    result.norm = AttackNorm::kL0;
    result.originals = batch;
    result.adversarial = batch;
    result.labels = labels;
    result.success.assign(n, 0);
    result.distortion.assign(n, 0.0);

    // Samples the source already misclassifies need no changed pixels.
    std::vector<std::uint8_t> active(n, 1);
    {
        const Tensor logits = source.forward(batch, nullptr);
        const int classes = logits.shape[1];
        for (int s = 0; s < n; ++s) {
            const MarginInfo m = margin_of(&logits.data[static_cast<size_t>(s) * classes], classes,
                                           labels[s], cfg.targeted);
            if (m.success) {
                active[s] = 0;
                result.success[s] = 1;
            }
        }
    }

    std::vector<std::uint8_t> mask(batch.numel(), 1);
    std::vector<std::uint8_t> have_best(n, 0);
    Tensor warm = batch;
    constexpr double kChangedTol = 1e-6;

    for (int round = 0; round < cfg.l0_max_rounds; ++round) {
        if (std::none_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) break;
        AttackResult inner = cw_l2_masked(source, batch, labels, cfg, &mask, &warm);
        result.total_iterations += inner.total_iterations;

        // Margin gradient at the attack output guides which pixels to freeze.
        ModelCache cache;
        const Tensor logits = source.forward(inner.adversarial, &cache);
        const int classes = logits.shape[1];
        Tensor dlogits(logits.shape);
        for (int s = 0; s < n; ++s) {
            if (!active[s]) continue;
            const MarginInfo m = margin_of(&logits.data[static_cast<size_t>(s) * classes], classes,
                                           labels[s], cfg.targeted);
            double* drow = &dlogits.data[static_cast<size_t>(s) * classes];
            if (cfg.targeted) {
                drow[m.other] += 1.0;
                drow[labels[s]] -= 1.0;
            } else {
                drow[labels[s]] += 1.0;
                drow[m.other] -= 1.0;
            }
        }
        const Tensor grad = source.input_gradient(cache, dlogits);

        for (int s = 0; s < n; ++s) {
            if (!active[s]) continue;
            if (!inner.success[s]) {
                active[s] = 0; // cannot succeed on this pixel set; keep best
                continue;
            }
            const double* adv = &inner.adversarial.data[static_cast<size_t>(s) * d];
            const double* org = &batch.data[static_cast<size_t>(s) * d];
            const double* g = &grad.data[static_cast<size_t>(s) * d];
            std::uint8_t* m = &mask[static_cast<size_t>(s) * d];

            std::vector<std::pair<double, std::int64_t>> changed; // (contribution, pixel)
            for (std::int64_t i = 0; i < d; ++i) {
                if (m[i] && std::fabs(adv[i] - org[i]) > kChangedTol) {
                    changed.emplace_back(std::fabs((adv[i] - org[i]) * g[i]), i);
                }
            }
            const auto count = static_cast<double>(changed.size());
            if (!have_best[s] || count < result.distortion[s]) {
                std::copy_n(adv, d, &result.adversarial.data[static_cast<size_t>(s) * d]);
                result.distortion[s] = count;
                result.success[s] = 1;
                have_best[s] = 1;
            }
            std::copy_n(adv, d, &warm.data[static_cast<size_t>(s) * d]);
            if (changed.empty()) {
                active[s] = 0;
                continue;
            }
            // Freeze the least useful changed pixels (at least one).
            std::sort(changed.begin(), changed.end());
            const auto k = std::max<size_t>(
                1, static_cast<size_t>(cfg.l0_freeze_fraction * changed.size()));
            for (size_t i = 0; i < k && i < changed.size(); ++i) {
                m[changed[i].second] = 0;
                warm.data[static_cast<size_t>(s) * d + changed[i].second] =
                    org[changed[i].second];
            }
        }
    }

    finalize(source, result);
    for (int s = 0; s < n; ++s) {
        const double* adv = &result.adversarial.data[static_cast<size_t>(s) * d];
        const double* org = &batch.data[static_cast<size_t>(s) * d];
        std::int64_t count = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            count += std::fabs(adv[i] - org[i]) > kChangedTol ? 1 : 0;
        }
        result.distortion[s] = static_cast<double>(count);
    }
    return result;
}

AttackResult cw_linf(const GradientSource& source, const Tensor& batch,
                     const std::vector<int>& labels, const AttackConfig& cfg) {
    cfg.validate();
    const int n = batch.shape[0];
    const std::int64_t d = batch.numel() / n;

    AttackResult result;
    result.norm = AttackNorm::kLinf;
    result.originals = batch;
    result.adversarial = batch;
    result.labels = labels;
    result.success.assign(n, 0);
    result.distortion.assign(n, 0.0);

    std::vector<double> tau(n, 1.0);
    std::vector<double> c(n, cfg.initial_c);
    std::vector<std::uint8_t> active(n, 1);
    Tensor delta(batch.shape), x_adv(batch.shape);

    // Rounds bounded by the tau schedule: 1 -> floor under geometric decay.
    const int max_rounds =
        2 + static_cast<int>(std::ceil(std::log(cfg.linf_tau_floor) / std::log(cfg.linf_tau_decay)));
    for (int round = 0; round < max_rounds; ++round) {
        if (std::none_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) break;
        for (int it = 0; it < cfg.max_iterations; ++it) {
            for (std::int64_t i = 0; i < delta.numel(); ++i) {
                x_adv.data[i] = std::clamp(batch.data[i] + delta.data[i], 0.0, 1.0);
            }
            ModelCache cache;
            const Tensor logits = source.forward(x_adv, &cache);
            const int classes = logits.shape[1];
            Tensor dlogits(logits.shape);
            for (int s = 0; s < n; ++s) {
                if (!active[s]) continue;
                const MarginInfo m = margin_of(&logits.data[static_cast<size_t>(s) * classes],
                                               classes, labels[s], cfg.targeted);
                if (m.f > -cfg.kappa) {
                    double* drow = &dlogits.data[static_cast<size_t>(s) * classes];
                    if (cfg.targeted) {
                        drow[m.other] += c[s];
                        drow[labels[s]] -= c[s];
                    } else {
                        drow[labels[s]] += c[s];
                        drow[m.other] -= c[s];
                    }
                }
            }
            const Tensor dx = source.input_gradient(cache, dlogits);
            ++result.total_iterations;
            for (std::int64_t i = 0; i < delta.numel(); ++i) {
                const std::int64_t s = i / d;
                if (!active[s]) continue;
                double g = 0.0;
                const double xv = batch.data[i] + delta.data[i];
                if (xv > 0.0 && xv < 1.0) g += dx.data[i];
                const double excess = std::fabs(delta.data[i]) - tau[s];
                if (excess > 0.0) g += delta.data[i] > 0.0 ? 1.0 : -1.0;
                if (!std::isfinite(g)) {
                    active[s] = 0;
                    continue;
                }
                delta.data[i] -= cfg.step_size * g;
            }
        }

        const Tensor logits = source.forward(x_adv, nullptr);
        const int classes = logits.shape[1];
        for (int s = 0; s < n; ++s) {
            if (!active[s]) continue;
            const MarginInfo m = margin_of(&logits.data[static_cast<size_t>(s) * classes], classes,
                                           labels[s], cfg.targeted);
            double max_abs = 0.0;
            for (std::int64_t i = 0; i < d; ++i) {
                max_abs = std::max(max_abs,
                                   std::fabs(x_adv.data[static_cast<size_t>(s) * d + i] -
                                             batch.data[static_cast<size_t>(s) * d + i]));
            }
            if (m.success && max_abs <= tau[s] + 1e-6) {
                std::copy_n(&x_adv.data[static_cast<size_t>(s) * d], d,
                            &result.adversarial.data[static_cast<size_t>(s) * d]);
                result.success[s] = 1;
                result.distortion[s] = max_abs;
                tau[s] = std::min(tau[s], max_abs) * cfg.linf_tau_decay;
                if (tau[s] < cfg.linf_tau_floor) active[s] = 0;
            } else {
                c[s] *= 2.0;
                if (c[s] > cfg.linf_c_max) active[s] = 0;
            }
        }
    }

    finalize(source, result);
    for (int s = 0; s < n; ++s) {
        double max_abs = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            max_abs = std::max(max_abs, std::fabs(result.adversarial.data[static_cast<size_t>(s) * d + i] -
                                                  batch.data[static_cast<size_t>(s) * d + i]));
        }
        result.distortion[s] = max_abs;
    }
    return result;
}

AttackResult run_attack(const GradientSource& source, const Tensor& batch,
                        const std::vector<int>& labels, const AttackConfig& cfg) {
    switch (cfg.norm) {
        case AttackNorm::kL0: return cw_l0(source, batch, labels, cfg);
        case AttackNorm::kL2: return cw_l2(source, batch, labels, cfg);
        case AttackNorm::kLinf: return cw_linf(source, batch, labels, cfg);
    }
    throw ConfigError("run_attack: bad norm");
}

double evaluate_on(const GradientSource& target, const Tensor& batch,
                   const std::vector<int>& labels) {
    const Tensor logits = target.forward(batch, nullptr);
    return top1_accuracy(logits, labels);
}

double evaluate_on(const QuantizedModel& target, const Tensor& batch,
                   const std::vector<int>& labels) {
    return top1_accuracy(target.forward(batch, nullptr), labels);
}

double evaluate_on(const ChipInstance& target, const Tensor& batch,
                   const std::vector<int>& labels) {
    return top1_accuracy(target.forward(batch), labels);
}

// ---------------------------------------------------------------------------
// Container: "CIMADVS1" magic, u32 JSON header, then originals/adversarial as
// float64 blobs, labels as int32, success bytes, distortion float64.
// ---------------------------------------------------------------------------

namespace {
constexpr char kAdvMagic[8] = {'C', 'I', 'M', 'A', 'D', 'V', 'S', '1'};
}

void AttackResult::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["norm"] = to_string(norm);
    header["source"] = source_name;
    header["shape"] = originals.shape;
    header["source_accuracy_after"] = source_accuracy_after;
    header["total_iterations"] = total_iterations;
    const std::string htxt = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write adversarial set: " + path.string());
    out.write(kAdvMagic, 8);
    const std::uint32_t hlen = static_cast<std::uint32_t>(htxt.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(htxt.data(), hlen);
    out.write(reinterpret_cast<const char*>(originals.ptr()), originals.numel() * 8);
    out.write(reinterpret_cast<const char*>(adversarial.ptr()), adversarial.numel() * 8);
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    out.write(reinterpret_cast<const char*>(lab.data()), lab.size() * 4);
    out.write(reinterpret_cast<const char*>(success.data()), success.size());
    out.write(reinterpret_cast<const char*>(distortion.data()), distortion.size() * 8);
    if (!out) throw DataError("adversarial set write failed: " + path.string());
}

AttackResult AttackResult::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open adversarial set: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kAdvMagic, 8) != 0) {
        throw DataError("not an adversarial-set file: " + path.string());
    }
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    std::string htxt(hlen, '\0');
    in.read(htxt.data(), hlen);
    if (!in) throw DataError("truncated adversarial-set header: " + path.string());
    const auto header = nlohmann::json::parse(htxt);

    AttackResult r;
    r.norm = attack_norm_from_string(header.at("norm").get<std::string>());
    r.source_name = header.at("source").get<std::string>();
    r.source_accuracy_after = header.at("source_accuracy_after").get<double>();
    r.total_iterations = header.at("total_iterations").get<int>();
    const auto shape = header.at("shape").get<std::vector<int>>();
    r.originals = Tensor(shape);
    r.adversarial = Tensor(shape);
    const int n = shape[0];
    in.read(reinterpret_cast<char*>(r.originals.ptr()), r.originals.numel() * 8);
    in.read(reinterpret_cast<char*>(r.adversarial.ptr()), r.adversarial.numel() * 8);
    std::vector<std::int32_t> lab(n);
    in.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()) * 4);
    r.labels.assign(lab.begin(), lab.end());
    r.success.resize(n);
    in.read(reinterpret_cast<char*>(r.success.data()), n);
    r.distortion.resize(n);
    in.read(reinterpret_cast<char*>(r.distortion.data()), static_cast<std::streamsize>(n) * 8);
    if (!in) throw DataError("truncated adversarial set: " + path.string());
    return r;
}

} // namespace cimsim
