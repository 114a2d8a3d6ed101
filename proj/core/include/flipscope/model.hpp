#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flipscope/probe.hpp"
#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// Per-generation mutable state: KV cache plus scratch buffers. Never shared
/// between in-flight generations.
struct InferenceState {
    explicit InferenceState(const ModelConfig& config);

    int cache_len = 0;
    std::vector<std::vector<float>> key_cache;    // per layer, [max_context * kv_dim]
    std::vector<std::vector<float>> value_cache;

    // scratch
    std::vector<float> x, xn, q, k, v, head_out, att_row, ffn_gate, ffn_up, logits;
};

/// Immutable decoder-only transformer: weights, tokenizer, config. Shareable
/// across threads once loaded; all mutation lives in InferenceState.
class Model {
public:
    /// Loads a named-tensor container plus a tokenizer file. The container's
    /// metadata declares the architecture; every tensor is validated against
    /// it and loading fails naming the offending tensor.
    static Model load(const std::filesystem::path& weights_path,
                      const std::filesystem::path& tokenizer_path);

    const ModelConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }

    /// One decoding pass: consumes `token` at position state.cache_len,
    /// appends its K/V, writes next-token logits into state.logits.
    /// `history` must hold the sequence through this token. The observer, when
    /// set, sees every attention row of this pass; the mask applies whenever
    /// its scope covers `turn`.
    void forward(InferenceState& state, Token token, int turn, const CompiledMask* mask,
                 AttentionObserver* observer, std::span<const Token> history) const;

private:
    Model() = default;

    struct LayerWeights {
        std::vector<float> attn_norm;
        std::vector<float> wq, wk, wv, wo;
        std::vector<float> ffn_norm;
        std::vector<float> w_gate, w_up, w_down;
    };

    ModelConfig config_;
    std::vector<float> embed_;      // [vocab, d_model]
    std::vector<float> final_norm_;
    std::vector<float> lm_head_;    // empty when tied to embed_
    std::vector<LayerWeights> layers_;
    std::vector<float> rope_inv_freq_;  // [d_head / 2]
    std::shared_ptr<Tokenizer> tokenizer_;
};

struct DecodeResult {
    TokenSequence generated;  // stop token excluded
    std::string text;
    int steps = 0;
    bool hit_stop = false;
};

/// Greedy argmax with ties broken toward the lowest token id.
Token argmax_logits(std::span<const float> logits);

/// Single-shot greedy decode with a fresh state. Stops on `stop` tokens or the
/// tokenizer's stop set. Throws when prompt length + max_new exceeds the
/// context window. The observer sees only the `max_new` generation passes.
DecodeResult generate(const Model& model, const TokenSequence& prompt, int max_new,
                      AttentionObserver* observer = nullptr, const MaskPlan* mask = nullptr,
                      const std::vector<Token>& stop = {});

}  // namespace flipscope
