// Decode-path benchmarks on a synthetic checkpoint: plain greedy decoding,
// decoding under an attention probe, and decoding under a head mask.

#include <benchmark/benchmark.h>

#include <filesystem>

#include "flipscope/chat.hpp"
#include "flipscope/model.hpp"
#include "flipscope/probe.hpp"
#include "flipscope/synthetic.hpp"

namespace {

namespace fs = std::filesystem;
using namespace flipscope;

const fs::path& bench_dir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "flipscope-bench";
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

const Model& bench_model() {
    static const Model model = [] {
        const fs::path w = bench_dir() / "model.safetensors";
        const fs::path t = bench_dir() / "tokenizer.json";
        make_ascii_tokenizer().save(t);
        write_tiny_model(w, tiny_model_config(4, 8, 4, 32, 1024), 7);
        return Model::load(w, t);
    }();
    return model;
}

TokenSequence bench_prompt(std::size_t approx_len) {
    const Model& model = bench_model();
    std::string text;
    while (text.size() < approx_len) {
        text += "The copper kettle in the harbor market holds forty silver buttons. ";
    }
    TokenSequence p = model.tokenizer().encode(text);
    p.resize(std::min(p.size(), approx_len));
    return p;
}

void BM_decode(benchmark::State& state) {
    const Model& model = bench_model();
    const TokenSequence prompt = bench_prompt(128);
    const int max_new = int(state.range(0));
    for (auto _ : state) {
        DecodeResult res = generate(model, prompt, max_new);
        benchmark::DoNotOptimize(res.generated.data());
    }
    state.SetItemsProcessed(state.iterations() * max_new);
}
BENCHMARK(BM_decode)->Arg(8)->Arg(32);

void BM_decode_traced(benchmark::State& state) {
    const Model& model = bench_model();
    const ModelConfig& mc = model.config();
    const TokenSequence prompt = bench_prompt(128);
    const int max_new = int(state.range(0));
    for (auto _ : state) {
        AttentionTrace trace(mc.n_layers, mc.n_heads, 1);
        TraceProbe probe(trace);
        DecodeResult res = generate(model, prompt, max_new, &probe);
        benchmark::DoNotOptimize(trace.entry_count());
        benchmark::DoNotOptimize(res.generated.data());
    }
    state.SetItemsProcessed(state.iterations() * max_new);
}
BENCHMARK(BM_decode_traced)->Arg(8)->Arg(32);

void BM_decode_masked(benchmark::State& state) {
    const Model& model = bench_model();
    const TokenSequence prompt = bench_prompt(128);
    const int max_new = int(state.range(0));
    MaskPlan plan;
    plan.heads = {{0, 1}, {1, 3}, {2, 5}, {3, 7}};
    plan.scope = MaskScope::whole_conversation;
    plan.id = "bench";
    for (auto _ : state) {
        DecodeResult res = generate(model, prompt, max_new, nullptr, &plan);
        benchmark::DoNotOptimize(res.generated.data());
    }
    state.SetItemsProcessed(state.iterations() * max_new);
}
BENCHMARK(BM_decode_masked)->Arg(8)->Arg(32);

void BM_prefill(benchmark::State& state) {
    const Model& model = bench_model();
    const TokenSequence prompt = bench_prompt(std::size_t(state.range(0)));
    for (auto _ : state) {
        DecodeResult res = generate(model, prompt, 1);
        benchmark::DoNotOptimize(res.generated.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_prefill)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
