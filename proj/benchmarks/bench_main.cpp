#include <benchmark/benchmark.h>

#include "cimsim/chip.hpp"

using namespace cimsim;

namespace {

ChipDescriptor bench_descriptor(AdcKind kind) {
    ChipDescriptor d;
    d.chip_seed = 7;
    d.array.rows = 128;
    d.array.cols = 128;
    d.array.cell_bits = 2;
    d.array.rows_per_access = 16;
    d.array.adc_spec = AdcSpec::uniform(5, 48);
    d.curve.p_low = 0.98;
    d.curve.p_high = 0.70;
    d.curve.wl_param = 9.0;
    d.adc_kind = kind;
    return d;
}

QuantizedModel bench_model() {
    QuantConfig q;
    q.act_bits = 8;
    q.weight_bits = 2;
    return build_model(ArchSpec::desk_cnn({1, 28, 28}, 10, {8, 16}, q), 1);
}

Tensor bench_batch(int n) {
    RngStream s(3);
    Tensor x({n, 1, 28, 28});
    for (auto& v : x.data) v = s.uniform_open01();
    return x;
}

void BM_AdcConvert(benchmark::State& state) {
    const AdcSpec spec = AdcSpec::uniform(5, 48);
    PassRateCurve curve;
    curve.p_high = 0.7;
    const SigmaProfile prof = sigma_profile(curve, spec);
    RngStream s(1);
    const AdcInstance inst =
        sample_instance(spec, prof, state.range(0) ? AdcKind::kSar : AdcKind::kFlash, s);
    double v = 0.0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(convert(inst, v));
        v = v >= 48.0 ? 0.0 : v + 0.37;
    }
}
BENCHMARK(BM_AdcConvert)->Arg(0)->Arg(1);

void BM_VmmExact(benchmark::State& state) {
    RngStream s(2);
    SubArray sub;
    sub.rows = 128;
    sub.cols = 64;
    sub.cells.resize(static_cast<size_t>(sub.rows) * sub.cols);
    for (auto& c : sub.cells) c = static_cast<std::uint8_t>(s.next_u64() % 4);
    sub.col_out.resize(sub.cols);
    sub.col_significance.assign(sub.cols, 1);
    std::vector<std::uint8_t> bits(16);
    for (auto& b : bits) b = static_cast<std::uint8_t>(s.next_u64() % 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(vmm_exact(sub, bits, 32));
    }
}
BENCHMARK(BM_VmmExact);

void BM_DigitalForward(benchmark::State& state) {
    const QuantizedModel model = bench_model();
    const Tensor x = bench_batch(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(x, nullptr));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DigitalForward)->Arg(1)->Arg(32);

void BM_ChipForward(benchmark::State& state) {
    const QuantizedModel model = bench_model();
    ChipInstance chip(bench_descriptor(state.range(1) ? AdcKind::kSar : AdcKind::kFlash));
    chip.program(model);
    const Tensor x = bench_batch(static_cast<int>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(chip.forward(x));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ChipForward)->Args({1, 0})->Args({1, 1})->Args({32, 0})->Args({32, 1});

void BM_ChipProgram(benchmark::State& state) {
    const QuantizedModel model = bench_model();
    ChipInstance chip(bench_descriptor(AdcKind::kSar));
    for (auto _ : state) {
        chip.program(model);
    }
}
BENCHMARK(BM_ChipProgram);

} // namespace

BENCHMARK_MAIN();
