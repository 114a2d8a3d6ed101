#include "flipscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "flipscope/util.hpp"

namespace flipscope {

const char* metric_kind_name(MetricKind kind) {
    switch (kind) {
        case MetricKind::retrieval: return "retrieval";
        case MetricKind::activation: return "activation";
    }
    return "?";
}

MetricKind metric_kind_from_name(const std::string& name) {
    if (name == "retrieval") return MetricKind::retrieval;
    if (name == "activation") return MetricKind::activation;
    throw std::runtime_error("unknown metric kind '" + name + "'");
}

HeadScoreTable::HeadScoreTable(int layers, int heads, MetricKind k)
    : n_layers(layers), n_heads(heads), kind(k),
      scores(std::size_t(layers) * std::size_t(heads), 0.0) {}

std::vector<double> retrieval_scores_for_sample(const AttentionTrace& trace, SpanRange needle_abs,
                                                std::span<const Token> history,
                                                std::span<const Token> generated, int turn) {
    std::vector<int> steps;
    for (int s = 0; s < trace.steps(); ++s) {
        if (trace.step_turn(s) == turn) steps.push_back(s);
    }
    if (steps.size() != generated.size()) {
        throw std::runtime_error("trace/sample mismatch: " + std::to_string(steps.size()) +
                                 " traced steps for " + std::to_string(generated.size()) +
                                 " generated tokens");
    }
    if (needle_abs.end > history.size() || needle_abs.begin >= needle_abs.end) {
        throw std::runtime_error("needle span outside history");
    }
    std::unordered_set<Token> needle_set(history.begin() + std::ptrdiff_t(needle_abs.begin),
                                         history.begin() + std::ptrdiff_t(needle_abs.end));

    const std::size_t total = std::size_t(trace.n_layers()) * std::size_t(trace.n_heads());
    std::vector<double> out(total, 0.0);
    long denom = 0;
    for (const Token t : generated) {
        if (needle_set.count(t)) ++denom;
    }
    if (denom == 0) return out;

    for (int l = 0; l < trace.n_layers(); ++l) {
        for (int h = 0; h < trace.n_heads(); ++h) {
            long hits = 0;
            for (std::size_t si = 0; si < steps.size(); ++si) {
                const Token want = generated[si];
                if (!needle_set.count(want)) continue;
                const TraceEntry& e = trace.at(steps[si], l, h, 0);
                if (e.pos >= 0 && std::size_t(e.pos) >= needle_abs.begin &&
                    std::size_t(e.pos) < needle_abs.end && e.token == want) {
                    ++hits;
                }
            }
            out[std::size_t(l) * std::size_t(trace.n_heads()) + std::size_t(h)] =
                double(hits) / double(denom);
        }
    }
    return out;
}

ScoreAccumulator::ScoreAccumulator(int n_layers, int n_heads, MetricKind kind)
    : sums_(n_layers, n_heads, kind) {}

void ScoreAccumulator::add_sample(std::span<const double> per_head) {
    if (per_head.size() != sums_.scores.size()) {
        throw std::runtime_error("score vector size mismatch");
    }
    for (std::size_t i = 0; i < per_head.size(); ++i) sums_.scores[i] += per_head[i];
    ++n_samples_;
}

HeadScoreTable ScoreAccumulator::table() const {
    if (n_samples_ == 0) throw std::runtime_error("no samples accumulated");
    HeadScoreTable t = sums_;
    for (double& s : t.scores) s /= double(n_samples_);
    t.n_samples = n_samples_;
    return t;
}

RecallResult recall_score(const std::string& answer, const std::string& reference) {
    const std::vector<std::string> ref_words = normalize_words(reference);
    if (ref_words.empty()) {
        throw std::runtime_error("recall reference has no words");
    }
    std::map<std::string, long> bag;
    for (const std::string& w : normalize_words(answer)) ++bag[w];
    RecallResult r;
    r.total = long(ref_words.size());
    for (const std::string& w : ref_words) {
        auto it = bag.find(w);
        if (it != bag.end() && it->second > 0) {
            --it->second;
            ++r.matched;
        }
    }
    r.recall = double(r.matched) / double(r.total);
    return r;
}

AnswerTokenAlphabet AnswerTokenAlphabet::build(const Tokenizer& tokenizer,
                                               const std::vector<std::string>& yes_variants,
                                               const std::vector<std::string>& no_variants) {
    AnswerTokenAlphabet a;
    auto collect = [&](const std::vector<std::string>& variants, std::vector<Token>& out) {
        for (const std::string& v : variants) {
            const Token t = tokenizer.single_token(v);
            if (t >= 0 && std::find(out.begin(), out.end(), t) == out.end()) {
                out.push_back(t);
            }
        }
    };
    collect(yes_variants, a.yes_ids);
    collect(no_variants, a.no_ids);
    if (a.yes_ids.empty() || a.no_ids.empty()) {
        throw std::runtime_error("answer alphabet: no single-token yes or no variant in vocabulary");
    }
    for (const Token t : a.yes_ids) {
        if (a.is_no(t)) {
            throw std::runtime_error("answer alphabet: token " + std::to_string(t) +
                                     " is both yes and no");
        }
    }
    return a;
}

bool AnswerTokenAlphabet::is_yes(Token t) const {
    return std::find(yes_ids.begin(), yes_ids.end(), t) != yes_ids.end();
}

bool AnswerTokenAlphabet::is_no(Token t) const {
    return std::find(no_ids.begin(), no_ids.end(), t) != no_ids.end();
}

std::vector<std::uint8_t> activation_flags(const AttentionTrace& trace,
                                           std::span<const Token> targets, int turn) {
    const std::size_t total = std::size_t(trace.n_layers()) * std::size_t(trace.n_heads());
    std::vector<std::uint8_t> out(total, 0);
    for (int s = 0; s < trace.steps(); ++s) {
        if (trace.step_turn(s) != turn) continue;
        for (int l = 0; l < trace.n_layers(); ++l) {
            for (int h = 0; h < trace.n_heads(); ++h) {
                const std::size_t i = std::size_t(l) * std::size_t(trace.n_heads()) + std::size_t(h);
                if (out[i]) continue;
                const Token t = trace.at(s, l, h, 0).token;
                if (std::find(targets.begin(), targets.end(), t) != targets.end()) out[i] = 1;
            }
        }
    }
    return out;
}

BandHistogram band_histogram(const HeadScoreTable& table) {
    BandHistogram b;
    for (double s : table.scores) {
        if (s < -1e-12 || s > 1.0 + 1e-9) {
            throw std::runtime_error("band histogram: score outside [0, 1]");
        }
        s = std::clamp(s, 0.0, 1.0);
        if (s == 0.0) ++b.zero;
        else if (s <= 0.1) ++b.low;
        else if (s < 0.5) ++b.mid;
        else ++b.high;
    }
    return b;
}

std::vector<HeadId> top_k_heads(const HeadScoreTable& table, int k) {
    if (k < 0) throw std::runtime_error("top-k: negative k");
    if (std::size_t(k) > table.total_heads()) {
        throw std::runtime_error("top-k: k " + std::to_string(k) + " exceeds head census " +
                                 std::to_string(table.total_heads()));
    }
    std::vector<std::size_t> idx(table.total_heads());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (table.scores[a] != table.scores[b]) return table.scores[a] > table.scores[b];
        return a < b;
    });
    std::vector<HeadId> out;
    out.reserve(std::size_t(k));
    for (int i = 0; i < k; ++i) {
        out.push_back({int(idx[std::size_t(i)]) / table.n_heads,
                       int(idx[std::size_t(i)]) % table.n_heads});
    }
    return out;
}

static std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_score_table_tsv(const std::string& path, const HeadScoreTable& table) {
    std::string out = "layer\thead\tmetric\tscore\tn_samples\n";
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            out += std::to_string(l) + "\t" + std::to_string(h) + "\t" +
                   metric_kind_name(table.kind) + "\t" + fmt_g17(table.at({l, h})) + "\t" +
                   std::to_string(table.n_samples) + "\n";
        }
    }
    write_text_file(path, out);
}

HeadScoreTable read_score_table_tsv(const std::string& path) {
    const std::vector<std::string> lines = split_lines(read_text_file(path));
    if (lines.empty() || lines[0] != "layer\thead\tmetric\tscore\tn_samples") {
        throw std::runtime_error("score table '" + path + "': bad header");
    }
    struct Row {
        int layer, head;
        MetricKind kind;
        double score;
        long n;
    };
    std::vector<Row> rows;
    int max_layer = -1, max_head = -1;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::istringstream ss(lines[i]);
        std::string ls, hs, ms, score_s, ns;
        if (!std::getline(ss, ls, '\t') || !std::getline(ss, hs, '\t') ||
            !std::getline(ss, ms, '\t') || !std::getline(ss, score_s, '\t') ||
            !std::getline(ss, ns, '\t')) {
            throw std::runtime_error("score table '" + path + "' line " + std::to_string(i + 1) +
                                     ": malformed row");
        }
        Row r{std::stoi(ls), std::stoi(hs), metric_kind_from_name(ms), std::stod(score_s),
              std::stol(ns)};
        max_layer = std::max(max_layer, r.layer);
        max_head = std::max(max_head, r.head);
        rows.push_back(r);
    }
    if (rows.empty()) throw std::runtime_error("score table '" + path + "': no rows");
    HeadScoreTable t(max_layer + 1, max_head + 1, rows[0].kind);
    t.n_samples = rows[0].n;
    std::vector<char> seen(t.total_heads(), 0);
    for (const Row& r : rows) {
        if (r.kind != t.kind || r.n != t.n_samples) {
            throw std::runtime_error("score table '" + path + "': inconsistent rows");
        }
        const std::size_t i = std::size_t(r.layer) * std::size_t(t.n_heads) + std::size_t(r.head);
        if (seen[i]) throw std::runtime_error("score table '" + path + "': duplicate head row");
        seen[i] = 1;
        t.scores[i] = r.score;
    }
    if (rows.size() != t.total_heads()) {
        throw std::runtime_error("score table '" + path + "': missing head rows");
    }
    return t;
}

void write_band_histogram_tsv(const std::string& path, const BandHistogram& bands,
                              const std::string& label) {
    std::string out = "label\tband\tcount\n";
    out += label + "\tzero\t" + std::to_string(bands.zero) + "\n";
    out += label + "\t(0,0.1]\t" + std::to_string(bands.low) + "\n";
    out += label + "\t(0.1,0.5)\t" + std::to_string(bands.mid) + "\n";
    out += label + "\t[0.5,1]\t" + std::to_string(bands.high) + "\n";
    write_text_file(path, out);
}

}  // namespace flipscope
