#include "flipscope/flip.hpp"

#include <cctype>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

const char* answer_class_name(AnswerClass c) {
    switch (c) {
        case AnswerClass::yes: return "yes";
        case AnswerClass::no: return "no";
        case AnswerClass::incoherent: return "incoherent";
    }
    return "?";
}

AnswerClass answer_class_from_name(const std::string& name) {
    if (name == "yes") return AnswerClass::yes;
    if (name == "no") return AnswerClass::no;
    if (name == "incoherent") return AnswerClass::incoherent;
    throw std::runtime_error("unknown answer class '" + name + "'");
}

AnswerClass parse_answer(const std::string& text) {
    std::size_t i = 0;
    while (i < text.size() && !std::isalpha((unsigned char) text[i])) ++i;
    std::string word;
    while (i < text.size() && std::isalpha((unsigned char) text[i])) {
        word.push_back((char) std::tolower((unsigned char) text[i]));
        ++i;
    }
    if (word == "yes") return AnswerClass::yes;
    if (word == "no") return AnswerClass::no;
    return AnswerClass::incoherent;
}

bool ConversationRecord::flipped() const {
    if (turn2_class == AnswerClass::incoherent) return false;
    return expected_yes ? turn2_class == AnswerClass::no : turn2_class == AnswerClass::yes;
}

static TokenSequence first_turn_content(const HaystackSample& sample, const Tokenizer& tokenizer,
                                        const FlipConfig& cfg) {
    const std::string ph = "{question}";
    std::string q = cfg.question_template;
    const std::size_t at = q.find(ph);
    if (at == std::string::npos) {
        throw std::runtime_error("question template is missing {question}");
    }
    q.replace(at, ph.size(), sample.needle.question);
    TokenSequence content = sample.context;
    const TokenSequence q_toks = tokenizer.encode(q, false);
    content.insert(content.end(), q_toks.begin(), q_toks.end());
    return content;
}

FirstTurnResult run_first_turn(ChatSession& session, const HaystackSample& sample,
                               const Tokenizer& tokenizer, const FlipConfig& cfg,
                               AttentionTrace* trace) {
    FirstTurnResult r;
    r.content_offset = session.begin_user_turn(first_turn_content(sample, tokenizer, cfg));
    r.needle_abs = {r.content_offset + sample.needle_span.begin,
                    r.content_offset + sample.needle_span.end};
    r.reply = session.generate_reply(cfg.max_new_first, trace);
    const RecallResult rec = recall_score(r.reply.text, sample.needle.answer_text);
    r.recall = rec.recall;
    r.correct = rec.recall >= cfg.correctness_threshold;
    return r;
}

void run_reevaluation(ChatSession& session, ConversationRecord& record, const Tokenizer& tokenizer,
                      const FlipConfig& cfg, AttentionTrace* trace) {
    session.begin_user_turn(tokenizer.encode(cfg.reevaluation_prompt, false));
    const GenerationOutput out = session.generate_reply(cfg.max_new_second, trace);
    record.turn2_raw = out.text;
    record.turn2_class = parse_answer(out.text);
}

FirstTurnResult force_first_turn(ChatSession& session, const HaystackSample& sample,
                                 const std::string& wrong_answer, const Tokenizer& tokenizer,
                                 const FlipConfig& cfg) {
    const RecallResult rec = recall_score(wrong_answer, sample.needle.answer_text);
    if (rec.recall >= cfg.correctness_threshold) {
        throw std::runtime_error("wrong answer '" + wrong_answer + "' scores as correct for '" +
                                 sample.needle.id + "'");
    }
    FirstTurnResult r;
    r.content_offset = session.begin_user_turn(first_turn_content(sample, tokenizer, cfg));
    r.needle_abs = {r.content_offset + sample.needle_span.begin,
                    r.content_offset + sample.needle_span.end};
    session.force_reply(tokenizer.encode(wrong_answer, false));
    r.reply.text = wrong_answer;
    r.recall = rec.recall;
    r.correct = false;
    return r;
}

static std::vector<CaseLabel> label_cases_impl(const ConversationRecord& record,
                                               const AttentionTrace& trace,
                                               std::span<const Token> bad_side,
                                               std::span<const Token> good_side,
                                               AnswerClass bad_answer, int turn) {
    std::vector<CaseLabel> labels;
    if (record.turn2_class == AnswerClass::incoherent) return labels;
    const bool flip = record.turn2_class == bad_answer;
    const std::vector<std::uint8_t> attends_bad = activation_flags(trace, bad_side, turn);
    const std::vector<std::uint8_t> attends_good = activation_flags(trace, good_side, turn);
    for (int l = 0; l < trace.n_layers(); ++l) {
        for (int h = 0; h < trace.n_heads(); ++h) {
            const std::size_t i = std::size_t(l) * std::size_t(trace.n_heads()) + std::size_t(h);
            if (attends_bad[i]) labels.push_back({{l, h}, flip ? 1 : 3});
            if (attends_good[i]) labels.push_back({{l, h}, flip ? 2 : 4});
        }
    }
    return labels;
}

std::vector<CaseLabel> label_cases(const ConversationRecord& record, const AttentionTrace& trace,
                                   const AnswerTokenAlphabet& alphabet, int turn) {
    if (!record.expected_yes) {
        throw std::runtime_error("label_cases expects a correct-turn-1 record");
    }
    // Bad outcome is answering no; attending no supports it.
    return label_cases_impl(record, trace, alphabet.no_ids, alphabet.yes_ids, AnswerClass::no,
                            turn);
}

std::vector<CaseLabel> label_cases_mirrored(const ConversationRecord& record,
                                            const AttentionTrace& trace,
                                            const AnswerTokenAlphabet& alphabet, int turn) {
    if (record.expected_yes) {
        throw std::runtime_error("label_cases_mirrored expects a forced-wrong record");
    }
    // Bad outcome is answering yes (sticking with the planted error).
    return label_cases_impl(record, trace, alphabet.yes_ids, alphabet.no_ids, AnswerClass::yes,
                            turn);
}

double YesStats::yes_fraction() const { return total == 0 ? 0.0 : double(yes) / double(total); }
double YesStats::flip_fraction() const { return total == 0 ? 0.0 : double(flips) / double(total); }

YesStats tally_answers(std::span<const ConversationRecord> records) {
    if (records.empty()) throw std::runtime_error("no records to tally");
    YesStats s;
    for (const ConversationRecord& r : records) {
        switch (r.turn2_class) {
            case AnswerClass::yes: ++s.yes; break;
            case AnswerClass::no: ++s.no; break;
            case AnswerClass::incoherent: ++s.incoherent; break;
        }
        if (r.flipped()) ++s.flips;
        ++s.total;
    }
    s.total = long(records.size());
    return s;
}

void write_records_jsonl(const std::string& path, std::span<const ConversationRecord> records) {
    std::string out;
    for (const ConversationRecord& r : records) {
        ordered_json j;
        j["sample_id"] = r.sample_id;
        j["needle_id"] = r.needle_id;
        j["factual"] = r.factual;
        j["mask_id"] = r.mask_id;
        j["seed"] = r.seed;
        j["turn1_answer"] = r.turn1_answer;
        j["turn1_recall"] = format_fixed(r.turn1_recall, 4);
        j["turn1_correct"] = r.turn1_correct;
        j["forced_turn1"] = r.forced_turn1;
        j["turn2_raw"] = r.turn2_raw;
        j["turn2_class"] = answer_class_name(r.turn2_class);
        j["expected_yes"] = r.expected_yes;
        // model text can carry arbitrary bytes; substitute rather than throw
        out += j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<ConversationRecord> read_records_jsonl(const std::string& path) {
    std::vector<ConversationRecord> records;
    int line_no = 0;
    for (const std::string& line : split_lines(read_text_file(path))) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("records file '" + path + "' line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
        ConversationRecord r;
        r.sample_id = j.at("sample_id").get<std::string>();
        r.needle_id = j.at("needle_id").get<std::string>();
        r.factual = j.at("factual").get<bool>();
        r.mask_id = j.at("mask_id").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.turn1_answer = j.at("turn1_answer").get<std::string>();
        r.turn1_recall = std::stod(j.at("turn1_recall").get<std::string>());
        r.turn1_correct = j.at("turn1_correct").get<bool>();
        r.forced_turn1 = j.at("forced_turn1").get<bool>();
        r.turn2_raw = j.at("turn2_raw").get<std::string>();
        r.turn2_class = answer_class_from_name(j.at("turn2_class").get<std::string>());
        r.expected_yes = j.at("expected_yes").get<bool>();
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace flipscope
