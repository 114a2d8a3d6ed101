#pragma once

#include <filesystem>
#include <vector>

#include "flipscope/chat.hpp"
#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// What a scripted head's attention argmax points at during one turn.
struct ScriptedBehavior {
    enum class Kind {
        background,  // position 0 (the default for unscripted heads)
        copy,        // first occurrence of the token being emitted
        token,       // first occurrence of a fixed token
        position,    // a fixed absolute position
    };
    Kind kind = Kind::background;
    Token token = -1;       // for Kind::token
    std::size_t pos = 0;    // for Kind::position
};

struct ScriptedOverride {
    std::vector<HeadId> heads;
    bool require_all = true;  // false: any listed head masked triggers it
    std::string text;
};

struct ScriptedTurn {
    std::string text;
    std::vector<std::pair<HeadId, ScriptedBehavior>> heads;
    std::vector<ScriptedOverride> masked_overrides;  // first match wins
};

struct ScriptedSample {
    ScriptedTurn turn1;
    ScriptedTurn turn2;
};

/// Deterministic canned backend: replies come from a script instead of a
/// model, and attention traces are synthesized from per-head behaviors. A
/// sample's second-turn text can change when specific heads are masked, which
/// is how masking "changes behavior" without any weights. Samples repeat
/// modulo the script length.
class ScriptedBackend final : public ChatBackend {
public:
    ScriptedBackend(ModelConfig config, Tokenizer tokenizer, std::vector<ScriptedSample> samples);

    /// JSON script: {"n_layers": L, "n_heads": H, "samples": [{"turn1":
    /// {"text": ..., "heads": {"(l, h)": "copy" | "token:<text>" |
    /// "pos:<n>"}}, "turn2": {..., "masked_overrides": [{"heads": [...],
    /// "require": "all" | "any", "text": ...}]}}]}. Always uses the built-in
    /// ascii tokenizer.
    static ScriptedBackend load(const std::filesystem::path& path);

    const Tokenizer& tokenizer() const override { return tokenizer_; }
    const ModelConfig& config() const override { return config_; }
    std::unique_ptr<ChatSession> open_session(std::size_t sample_index) override;

    std::size_t n_samples() const { return samples_.size(); }

private:
    friend class ScriptedSession;
    ModelConfig config_;
    Tokenizer tokenizer_;
    std::vector<ScriptedSample> samples_;
};

}  // namespace flipscope
