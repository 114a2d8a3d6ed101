#include "flipscope/scripted.hpp"

#include <algorithm>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/probe.hpp"
#include "flipscope/synthetic.hpp"
#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

namespace {

class ScriptedSession final : public ChatSession {
public:
    ScriptedSession(const ScriptedBackend& backend, const ScriptedSample& sample)
        : backend_(backend), sample_(sample) {}

    void set_mask(const MaskPlan* plan) override {
        if (plan && !plan->heads.empty()) {
            mask_ = CompiledMask(*plan, backend_.config());
            plan_ = *plan;
            has_mask_ = true;
        } else {
            mask_ = CompiledMask();
            has_mask_ = false;
        }
    }

    std::size_t begin_user_turn(const TokenSequence& content) override {
        ++turn_;
        const std::size_t offset = history_.size();
        history_.insert(history_.end(), content.begin(), content.end());
        return offset;
    }

    GenerationOutput generate_reply(int max_new, AttentionTrace* trace) override {
        if (turn_ < 0) throw std::runtime_error("generate_reply before any user turn");
        const ScriptedTurn& script = turn_ == 0 ? sample_.turn1 : sample_.turn2;
        std::string text = script.text;
        if (has_mask_ && mask_covers_turn(plan_.scope, turn_)) {
            for (const ScriptedOverride& ov : script.masked_overrides) {
                if (triggered(ov)) {
                    text = ov.text;
                    break;
                }
            }
        }
        TokenSequence reply = backend_.tokenizer().encode(text, false);
        if (int(reply.size()) > max_new) reply.resize(std::size_t(max_new));

        GenerationOutput out;
        for (const Token t : reply) {
            const std::size_t qpos = history_.size() - 1;
            if (trace) {
                trace->begin_step(int(qpos), turn_);
                for (int l = 0; l < backend_.config().n_layers; ++l) {
                    for (int h = 0; h < backend_.config().n_heads; ++h) {
                        trace->set_entry(trace->steps() - 1, l, h, 0, entry_for({l, h}, script, t, qpos));
                    }
                }
            }
            history_.push_back(t);
            out.tokens.push_back(t);
        }
        out.steps = int(out.tokens.size());
        out.text = backend_.tokenizer().decode(out.tokens);
        out.hit_stop = true;
        return out;
    }

    void force_reply(const TokenSequence& content) override {
        if (turn_ < 0) throw std::runtime_error("force_reply before any user turn");
        history_.insert(history_.end(), content.begin(), content.end());
    }

    int turn_index() const override { return turn_; }
    std::size_t length() const override { return history_.size(); }
    const TokenSequence& history() const override { return history_; }

private:
    bool triggered(const ScriptedOverride& ov) const {
        if (ov.heads.empty()) return false;
        std::size_t hit = 0;
        for (const HeadId& h : ov.heads) {
            if (mask_.masked(h.layer, h.head, turn_)) ++hit;
        }
        return ov.require_all ? hit == ov.heads.size() : hit > 0;
    }

    TraceEntry entry_for(HeadId id, const ScriptedTurn& script, Token emitting,
                         std::size_t qpos) const {
        ScriptedBehavior b;
        for (const auto& [head, beh] : script.heads) {
            if (head == id) {
                b = beh;
                break;
            }
        }
        TraceEntry e;
        e.weight = b.kind == ScriptedBehavior::Kind::background ? 0.5f : 1.0f;
        switch (b.kind) {
            case ScriptedBehavior::Kind::background: e.pos = 0; break;
            case ScriptedBehavior::Kind::copy: e.pos = find_first(emitting, qpos); break;
            case ScriptedBehavior::Kind::token: e.pos = find_first(b.token, qpos); break;
            case ScriptedBehavior::Kind::position:
                e.pos = std::int32_t(std::min(b.pos, qpos));
                break;
        }
        e.token = history_[std::size_t(e.pos)];
        return e;
    }

    std::int32_t find_first(Token t, std::size_t qpos) const {
        for (std::size_t p = 0; p <= qpos; ++p) {
            if (history_[p] == t) return std::int32_t(p);
        }
        return 0;
    }

    const ScriptedBackend& backend_;
    const ScriptedSample& sample_;
    TokenSequence history_;
    MaskPlan plan_;
    CompiledMask mask_;
    bool has_mask_ = false;
    int turn_ = -1;
};

}  // namespace

ScriptedBackend::ScriptedBackend(ModelConfig config, Tokenizer tokenizer,
                                 std::vector<ScriptedSample> samples)
    : config_(config), tokenizer_(std::move(tokenizer)), samples_(std::move(samples)) {
    config_.validate();
    if (samples_.empty()) throw std::runtime_error("scripted backend: no samples");
    auto check_turn = [&](const ScriptedTurn& turn) {
        for (const auto& [head, beh] : turn.heads) {
            if (!config_.contains(head)) {
                throw std::runtime_error("scripted head " + to_string(head) +
                                         " outside model bounds");
            }
            (void) beh;
        }
        for (const ScriptedOverride& ov : turn.masked_overrides) {
            for (const HeadId& h : ov.heads) {
                if (!config_.contains(h)) {
                    throw std::runtime_error("scripted override head " + to_string(h) +
                                             " outside model bounds");
                }
            }
        }
    };
    for (const ScriptedSample& s : samples_) {
        check_turn(s.turn1);
        check_turn(s.turn2);
    }
}

std::unique_ptr<ChatSession> ScriptedBackend::open_session(std::size_t sample_index) {
    return std::make_unique<ScriptedSession>(*this, samples_[sample_index % samples_.size()]);
}

static ScriptedBehavior parse_behavior(const std::string& text, const Tokenizer& tokenizer) {
    ScriptedBehavior b;
    if (text == "copy") {
        b.kind = ScriptedBehavior::Kind::copy;
    } else if (text.rfind("token:", 0) == 0) {
        b.kind = ScriptedBehavior::Kind::token;
        b.token = tokenizer.single_token(text.substr(6));
        if (b.token < 0) {
            throw std::runtime_error("scripted behavior '" + text +
                                     "': not a single token in this vocabulary");
        }
    } else if (text.rfind("pos:", 0) == 0) {
        b.kind = ScriptedBehavior::Kind::position;
        b.pos = std::stoul(text.substr(4));
    } else {
        throw std::runtime_error("unknown scripted behavior '" + text + "'");
    }
    return b;
}

static ScriptedTurn parse_turn(const ordered_json& j, const Tokenizer& tokenizer) {
    ScriptedTurn t;
    t.text = j.at("text").get<std::string>();
    if (j.contains("heads")) {
        for (const auto& [key, value] : j["heads"].items()) {
            t.heads.emplace_back(head_id_from_string(key),
                                 parse_behavior(value.get<std::string>(), tokenizer));
        }
    }
    if (j.contains("masked_overrides")) {
        for (const auto& jov : j["masked_overrides"]) {
            ScriptedOverride ov;
            for (const auto& h : jov.at("heads")) {
                ov.heads.push_back(head_id_from_string(h.get<std::string>()));
            }
            ov.require_all = jov.value("require", std::string("all")) == "all";
            ov.text = jov.at("text").get<std::string>();
            t.masked_overrides.push_back(std::move(ov));
        }
    }
    return t;
}

ScriptedBackend ScriptedBackend::load(const std::filesystem::path& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path.string()));
    } catch (const std::exception& e) {
        throw std::runtime_error("script file '" + path.string() + "': " + e.what());
    }
    Tokenizer tok = make_ascii_tokenizer();
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_kv_heads = c.n_heads;
    c.d_head = 8;
    c.d_model = c.n_heads * 8;
    c.d_ff = 2 * c.d_model;
    c.vocab_size = tok.n_ids();
    c.max_context = 1 << 20;
    std::vector<ScriptedSample> samples;
    for (const auto& js : j.at("samples")) {
        ScriptedSample s;
        s.turn1 = parse_turn(js.at("turn1"), tok);
        s.turn2 = parse_turn(js.at("turn2"), tok);
        samples.push_back(std::move(s));
    }
    return ScriptedBackend(c, std::move(tok), std::move(samples));
}

}  // namespace flipscope
