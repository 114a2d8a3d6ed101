// Harness-side benchmarks: tokenization, haystack assembly, and per-head
// retrieval scoring over synthetic traces.

#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>

#include "flipscope/haystack.hpp"
#include "flipscope/metrics.hpp"
#include "flipscope/synthetic.hpp"
#include "flipscope/tokenizer.hpp"
#include "flipscope/util.hpp"

namespace {

namespace fs = std::filesystem;
using namespace flipscope;

const Tokenizer& bench_tokenizer() {
    static const Tokenizer tok = make_ascii_tokenizer();
    return tok;
}

const CorpusSource& bench_corpus() {
    static const CorpusSource corpus = [] {
        const fs::path dir = fs::temp_directory_path() / "flipscope-bench" / "corpus";
        fs::create_directories(dir);
        write_demo_corpus(dir, 3, 60000);
        return CorpusSource::load(dir.string(), bench_tokenizer());
    }();
    return corpus;
}

NeedleSpec bench_needle() {
    NeedleSpec n;
    n.id = "bench-needle";
    n.needle_text = "The copper kettle in the harbor market holds exactly forty silver buttons.";
    n.question = "How many silver buttons does the copper kettle hold?";
    n.answer_text = "forty silver buttons";
    return n;
}

void BM_tokenize(benchmark::State& state) {
    const Tokenizer& tok = bench_tokenizer();
    std::string text;
    while (text.size() < std::size_t(state.range(0))) {
        text += "The quiet weaver carries the woven basket past the harbor stalls. ";
    }
    for (auto _ : state) {
        TokenSequence toks = tok.encode(text);
        benchmark::DoNotOptimize(toks.data());
    }
    state.SetBytesProcessed(state.iterations() * std::int64_t(text.size()));
}
BENCHMARK(BM_tokenize)->Arg(1024)->Arg(16384);

void BM_build_sample(benchmark::State& state) {
    const CorpusSource& corpus = bench_corpus();
    const NeedleSpec needle = bench_needle();
    std::uint64_t seed = 1;
    for (auto _ : state) {
        HaystackSample s = build_sample(corpus, needle, bench_tokenizer(),
                                        std::size_t(state.range(0)), 0.5, false, seed++);
        benchmark::DoNotOptimize(s.context.data());
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_build_sample)->Arg(2048)->Arg(8192);

void BM_retrieval_scores(benchmark::State& state) {
    const int n_layers = 32, n_heads = 32;
    const int n_ctx = 512, n_gen = 32;
    std::mt19937_64 rng(7);
    TokenSequence context(n_ctx);
    for (Token& t : context) t = Token(rng() % 200);
    SpanRange span{100, 120};
    TokenSequence generated(n_gen);
    for (int i = 0; i < n_gen; ++i) generated[std::size_t(i)] = context[std::size_t(100 + i % 20)];

    AttentionTrace trace(n_layers, n_heads, 1);
    for (int s = 0; s < n_gen; ++s) {
        trace.begin_step(n_ctx + s, 0);
        for (int l = 0; l < n_layers; ++l) {
            for (int h = 0; h < n_heads; ++h) {
                TraceEntry e;
                e.pos = std::int32_t(rng() % n_ctx);
                e.token = context[std::size_t(e.pos)];
                e.weight = 1.0f;
                trace.set_entry(s, l, h, 0, e);
            }
        }
    }
    for (auto _ : state) {
        std::vector<double> scores = retrieval_scores_for_sample(trace, span, context, generated, 0);
        benchmark::DoNotOptimize(scores.data());
    }
    state.SetItemsProcessed(state.iterations() * n_layers * n_heads);
}
BENCHMARK(BM_retrieval_scores);

}  // namespace

BENCHMARK_MAIN();
