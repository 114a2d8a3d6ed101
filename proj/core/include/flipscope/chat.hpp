#pragma once

#include <memory>
#include <string>
#include <vector>

#include "flipscope/model.hpp"
#include "flipscope/probe.hpp"
#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// Role-marker wrapping for conversation turns. Placeholder "{content}" in the
/// user template is replaced at the token level, so pre-tokenized material
/// (haystack contexts with known needle spans) keeps its token identity.
struct ChatTemplate {
    std::string begin_of_text   = "<|begin_of_text|>";  // empty disables
    std::string system_template = "<|start_header_id|>system<|end_header_id|>\n\n{content}<|eot_id|>";
    std::string user_template   = "<|start_header_id|>user<|end_header_id|>\n\n{content}<|eot_id|>";
    std::string assistant_prefix = "<|start_header_id|>assistant<|end_header_id|>\n\n";
    std::string assistant_suffix = "<|eot_id|>";
};

struct GenerationOutput {
    TokenSequence tokens;  // stop token excluded
    std::string text;
    int steps = 0;
    bool hit_stop = false;
};

/// One two-turn (or longer) conversation. Implementations: ModelChatSession
/// (real decoding) and ScriptedSession (canned test backend). A mask plan is
/// installed once per conversation; its scope decides which turns it bites.
class ChatSession {
public:
    virtual ~ChatSession() = default;

    virtual void set_mask(const MaskPlan* plan) = 0;

    /// Opens user turn N (0-based) with pre-tokenized content. Returns the
    /// absolute position of content[0] in the conversation token stream.
    virtual std::size_t begin_user_turn(const TokenSequence& content) = 0;

    /// Greedy-decodes the assistant reply for the open turn. When `trace` is
    /// given, each generation step appends one entry per head (tagged with
    /// the current turn).
    virtual GenerationOutput generate_reply(int max_new, AttentionTrace* trace) = 0;

    /// Writes an assistant reply verbatim instead of decoding one.
    virtual void force_reply(const TokenSequence& content) = 0;

    virtual int turn_index() const = 0;      // -1 before the first user turn
    virtual std::size_t length() const = 0;  // tokens in the stream so far
    virtual const TokenSequence& history() const = 0;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual const Tokenizer& tokenizer() const = 0;
    virtual const ModelConfig& config() const = 0;
    /// `sample_index` keys scripted behavior; real backends ignore it.
    virtual std::unique_ptr<ChatSession> open_session(std::size_t sample_index) = 0;
};

class ModelChatBackend final : public ChatBackend {
public:
    ModelChatBackend(const Model& model, ChatTemplate tmpl, std::string system_prompt = "");

    const Tokenizer& tokenizer() const override { return model_.tokenizer(); }
    const ModelConfig& config() const override { return model_.config(); }
    std::unique_ptr<ChatSession> open_session(std::size_t sample_index) override;

    const Model& model() const { return model_; }
    const ChatTemplate& chat_template() const { return tmpl_; }
    const std::string& system_prompt() const { return system_prompt_; }

private:
    const Model& model_;
    ChatTemplate tmpl_;
    std::string system_prompt_;
};

class ModelChatSession final : public ChatSession {
public:
    explicit ModelChatSession(const ModelChatBackend& backend);

    void set_mask(const MaskPlan* plan) override;
    std::size_t begin_user_turn(const TokenSequence& content) override;
    GenerationOutput generate_reply(int max_new, AttentionTrace* trace) override;
    void force_reply(const TokenSequence& content) override;
    int turn_index() const override { return turn_; }
    std::size_t length() const override { return history_.size(); }
    const TokenSequence& history() const override { return history_; }

private:
    void append_tokens(const TokenSequence& toks);
    void advance_to_tail(AttentionObserver* obs);

    const ModelChatBackend& backend_;
    InferenceState state_;
    TokenSequence history_;
    std::vector<int> turn_of_;  // turn each history token was appended in
    CompiledMask mask_;
    bool has_mask_ = false;
    int turn_ = -1;
};

}  // namespace flipscope
