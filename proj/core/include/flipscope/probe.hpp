#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "flipscope/types.hpp"

namespace flipscope {

enum class MaskScope { whole_conversation, second_turn_only };

const char* mask_scope_name(MaskScope s);
MaskScope mask_scope_from_name(const std::string& s);

/// Set of heads to silence plus the conversation turns it applies to.
/// An empty plan is a no-op.
struct MaskPlan {
    std::vector<HeadId> heads;
    MaskScope scope = MaskScope::second_turn_only;
    std::string id;  // label used in records and manifests
};

bool mask_covers_turn(MaskScope scope, int turn);

/// MaskPlan validated against a model config and flattened for O(1) lookup.
class CompiledMask {
public:
    CompiledMask() = default;  // empty, covers nothing
    CompiledMask(const MaskPlan& plan, const ModelConfig& config);

    bool masked(int layer, int head, int turn) const {
        if (flags_.empty() || !mask_covers_turn(scope_, turn)) return false;
        return flags_[std::size_t(layer) * std::size_t(n_heads_) + std::size_t(head)] != 0;
    }
    bool empty() const { return flags_.empty(); }

private:
    std::vector<std::uint8_t> flags_;  // layer-major
    int n_heads_ = 0;
    MaskScope scope_ = MaskScope::whole_conversation;
};

/// Zeroes the per-head output vectors covered by the mask at `turn`.
/// `head_outputs` is n_heads x d_head, flattened head-major.
void apply_mask(std::span<float> head_outputs, int d_head, int layer,
                const CompiledMask& mask, int turn);

/// Strongest-attended source per (step, head): position, the token there, and
/// the attention weight. Slots beyond 0 exist only when tracing top-k > 1.
struct TraceEntry {
    std::int32_t pos = -1;
    Token token = -1;
    float weight = 0.0f;
};

class AttentionTrace {
public:
    AttentionTrace(int n_layers, int n_heads, int top_k = 1);

    void begin_step(int qpos, int turn);
    /// Drops the most recent step. Used when a decoded token turns out to be
    /// a stop token, which does not count as a generation step.
    void pop_step();
    /// Records the top-k targets of one normalized attention row for the
    /// current step. Ties by weight resolve to the lowest source position.
    void record_row(int layer, int head, std::span<const float> row,
                    std::span<const Token> tokens);
    /// Direct write, used by scripted backends and synthetic traces.
    void set_entry(int step, int layer, int head, int slot, TraceEntry entry);

    int steps() const { return int(step_qpos_.size()); }
    int n_layers() const { return n_layers_; }
    int n_heads() const { return n_heads_; }
    int top_k() const { return top_k_; }
    const TraceEntry& at(int step, int layer, int head, int slot = 0) const;
    int step_qpos(int step) const { return step_qpos_[std::size_t(step)]; }
    int step_turn(int step) const { return step_turn_[std::size_t(step)]; }
    std::size_t entry_count() const { return entries_.size(); }

    /// One JSON record per (step, head) line: step, layer, head, argmax_pos,
    /// argmax_token, argmax_weight, turn (plus slot when top-k > 1).
    void export_jsonl(std::ostream& out) const;
    void export_jsonl(const std::filesystem::path& path) const;

private:
    std::size_t index(int step, int layer, int head, int slot) const;

    int n_layers_;
    int n_heads_;
    int top_k_;
    std::vector<TraceEntry> entries_;
    std::vector<std::int32_t> step_qpos_;
    std::vector<std::int32_t> step_turn_;
};

/// Hook point exposed by the decoding loop. `row` spans source positions
/// [0, qpos]; `tokens` is the sequence up to and including qpos.
struct AttentionObserver {
    virtual ~AttentionObserver() = default;
    virtual void begin_step(int /*qpos*/, int /*turn*/) {}
    /// The step just observed was discarded (its token was a stop token).
    virtual void cancel_step() {}
    virtual void on_attention_row(int layer, int head, std::span<const float> row,
                                  std::span<const Token> tokens, int qpos, int turn) = 0;
};

/// Observer that captures argmax targets into an AttentionTrace.
class TraceProbe final : public AttentionObserver {
public:
    explicit TraceProbe(AttentionTrace& trace) : trace_(trace) {}

    void begin_step(int qpos, int turn) override { trace_.begin_step(qpos, turn); }
    void cancel_step() override { trace_.pop_step(); }
    void on_attention_row(int layer, int head, std::span<const float> row,
                          std::span<const Token> tokens, int, int) override {
        trace_.record_row(layer, head, row, tokens);
    }

private:
    AttentionTrace& trace_;
};

}  // namespace flipscope
