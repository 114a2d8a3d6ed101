#pragma once

#include <span>
#include <string>
#include <vector>

#include "flipscope/probe.hpp"
#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

enum class MetricKind {
    retrieval,
    activation,
};

const char* metric_kind_name(MetricKind kind);
MetricKind metric_kind_from_name(const std::string& name);

/// One score per head, layer-major, averaged over `n_samples` conversations.
struct HeadScoreTable {
    int n_layers = 0;
    int n_heads = 0;
    MetricKind kind = MetricKind::retrieval;
    long n_samples = 0;
    std::vector<double> scores;

    HeadScoreTable() = default;
    HeadScoreTable(int layers, int heads, MetricKind k);

    double at(HeadId id) const { return scores[std::size_t(id.layer) * n_heads + id.head]; }
    std::size_t total_heads() const { return scores.size(); }
};

/// Per-head copy-paste fraction for one first-turn answer: of the steps that
/// emitted a needle token, how many had this head's attention argmax sitting
/// on that same token inside the needle span. No needle tokens emitted -> all
/// zeros. Only steps tagged `turn` count; they must line up 1:1 with
/// `generated`.
std::vector<double> retrieval_scores_for_sample(const AttentionTrace& trace, SpanRange needle_abs,
                                                std::span<const Token> context,
                                                std::span<const Token> generated, int turn);

/// Arithmetic mean across samples, one sample at a time.
class ScoreAccumulator {
public:
    ScoreAccumulator(int n_layers, int n_heads, MetricKind kind);
    void add_sample(std::span<const double> per_head);
    HeadScoreTable table() const;
    long n_samples() const { return n_samples_; }

private:
    HeadScoreTable sums_;
    long n_samples_ = 0;
};

struct RecallResult {
    double recall = 0.0;  // matched / total reference words
    long matched = 0;
    long total = 0;
};

/// Word-bag recall of the reference answer inside the model answer:
/// both sides normalized to lowercase alphanumeric words, multiplicity capped
/// by the answer's own counts.
RecallResult recall_score(const std::string& answer, const std::string& reference);

/// Token ids whose text reads as yes / no, for attention-target membership.
/// Built from surface variants ("yes", " Yes", ...); variants that are not a
/// single token in this vocabulary are skipped.
struct AnswerTokenAlphabet {
    std::vector<Token> yes_ids;
    std::vector<Token> no_ids;

    static AnswerTokenAlphabet build(const Tokenizer& tokenizer,
                                     const std::vector<std::string>& yes_variants,
                                     const std::vector<std::string>& no_variants);

    bool is_yes(Token t) const;
    bool is_no(Token t) const;
};

/// Binary per-head activation over one turn: 1 iff any traced step has the
/// head's attention argmax on a token from `targets`.
std::vector<std::uint8_t> activation_flags(const AttentionTrace& trace,
                                           std::span<const Token> targets, int turn);

/// Score distribution buckets: [0], (0, 0.1], (0.1, 0.5), [0.5, 1].
struct BandHistogram {
    long zero = 0;
    long low = 0;
    long mid = 0;
    long high = 0;

    long total() const { return zero + low + mid + high; }
};

BandHistogram band_histogram(const HeadScoreTable& table);

/// Heads ranked by score descending, ties broken layer-major ascending.
std::vector<HeadId> top_k_heads(const HeadScoreTable& table, int k);

void write_score_table_tsv(const std::string& path, const HeadScoreTable& table);
HeadScoreTable read_score_table_tsv(const std::string& path);

void write_band_histogram_tsv(const std::string& path, const BandHistogram& bands,
                              const std::string& label);

}  // namespace flipscope
