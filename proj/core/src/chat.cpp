#include "flipscope/chat.hpp"

#include <stdexcept>

namespace flipscope {

static std::pair<std::string, std::string> split_placeholder(const std::string& tmpl,
                                                             const char* what) {
    const std::string ph = "{content}";
    const std::size_t at = tmpl.find(ph);
    if (at == std::string::npos) {
        throw std::runtime_error(std::string(what) + " template is missing {content}");
    }
    return {tmpl.substr(0, at), tmpl.substr(at + ph.size())};
}

ModelChatBackend::ModelChatBackend(const Model& model, ChatTemplate tmpl, std::string system_prompt)
    : model_(model), tmpl_(std::move(tmpl)), system_prompt_(std::move(system_prompt)) {
    split_placeholder(tmpl_.user_template, "user");  // validate early
    if (!system_prompt_.empty()) {
        split_placeholder(tmpl_.system_template, "system");
    }
}

std::unique_ptr<ChatSession> ModelChatBackend::open_session(std::size_t) {
    return std::make_unique<ModelChatSession>(*this);
}

ModelChatSession::ModelChatSession(const ModelChatBackend& backend)
    : backend_(backend), state_(backend.config()) {}

void ModelChatSession::set_mask(const MaskPlan* plan) {
    if (plan && !plan->heads.empty()) {
        mask_ = CompiledMask(*plan, backend_.config());
        has_mask_ = true;
    } else {
        mask_ = CompiledMask();
        has_mask_ = false;
    }
}

void ModelChatSession::append_tokens(const TokenSequence& toks) {
    if (history_.size() + toks.size() > std::size_t(backend_.config().max_context)) {
        throw std::runtime_error("context overflow: conversation exceeds max_context");
    }
    history_.insert(history_.end(), toks.begin(), toks.end());
    turn_of_.resize(history_.size(), turn_);
}

// Forwards every token except the pending tail. The tail is consumed by the
// next generation step (its pass produces the first new logits). Each pass
// runs under the turn its input token was appended in, so mask scoping stays
// correct when a previous turn's suffix is forwarded lazily.
void ModelChatSession::advance_to_tail(AttentionObserver* obs) {
    while (std::size_t(state_.cache_len) + 1 < history_.size()) {
        const std::size_t i = std::size_t(state_.cache_len);
        backend_.model().forward(state_, history_[i], turn_of_[i], has_mask_ ? &mask_ : nullptr,
                                 obs, std::span<const Token>(history_.data(), i + 1));
    }
}

std::size_t ModelChatSession::begin_user_turn(const TokenSequence& content) {
    const Tokenizer& tok = backend_.tokenizer();
    const ChatTemplate& t = backend_.chat_template();
    ++turn_;

    TokenSequence lead;
    if (turn_ == 0) {
        if (!t.begin_of_text.empty()) {
            TokenSequence bos = tok.encode(t.begin_of_text, true);
            lead.insert(lead.end(), bos.begin(), bos.end());
        }
        if (!backend_.system_prompt().empty()) {
            std::string sys = t.system_template;
            const auto [pre, post] = split_placeholder(sys, "system");
            TokenSequence s = tok.encode(pre + backend_.system_prompt() + post, true);
            lead.insert(lead.end(), s.begin(), s.end());
        }
    }
    const auto [upre, upost] = split_placeholder(t.user_template, "user");
    TokenSequence pre = tok.encode(upre, true);
    lead.insert(lead.end(), pre.begin(), pre.end());
    append_tokens(lead);

    const std::size_t content_offset = history_.size();
    append_tokens(content);
    append_tokens(tok.encode(upost, true));
    return content_offset;
}

GenerationOutput ModelChatSession::generate_reply(int max_new, AttentionTrace* trace) {
    if (turn_ < 0) {
        throw std::runtime_error("generate_reply before any user turn");
    }
    const Tokenizer& tok = backend_.tokenizer();
    append_tokens(tok.encode(backend_.chat_template().assistant_prefix, true));
    advance_to_tail(nullptr);

    AttentionObserver* obs = nullptr;
    std::unique_ptr<TraceProbe> probe;
    if (trace) {
        probe = std::make_unique<TraceProbe>(*trace);
        obs = probe.get();
    }

    GenerationOutput out;
    for (int s = 0; s < max_new; ++s) {
        const std::size_t i = std::size_t(state_.cache_len);
        backend_.model().forward(state_, history_[i], turn_of_[i], has_mask_ ? &mask_ : nullptr,
                                 obs, std::span<const Token>(history_.data(), i + 1));
        const Token next = argmax_logits(state_.logits);
        if (tok.is_stop(next)) {
            if (obs) obs->cancel_step();
            append_tokens(TokenSequence{next});  // the stop token closes the turn
            out.hit_stop = true;
            break;
        }
        out.tokens.push_back(next);
        append_tokens(TokenSequence{next});
    }
    if (!out.hit_stop) {
        append_tokens(tok.encode(backend_.chat_template().assistant_suffix, true));
    }
    out.steps = int(out.tokens.size());
    out.text = tok.decode(out.tokens);
    return out;
}

void ModelChatSession::force_reply(const TokenSequence& content) {
    if (turn_ < 0) {
        throw std::runtime_error("force_reply before any user turn");
    }
    const Tokenizer& tok = backend_.tokenizer();
    append_tokens(tok.encode(backend_.chat_template().assistant_prefix, true));
    append_tokens(content);
    append_tokens(tok.encode(backend_.chat_template().assistant_suffix, true));
}

}  // namespace flipscope
