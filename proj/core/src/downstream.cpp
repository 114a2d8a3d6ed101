#include "flipscope/downstream.hpp"

#include <cctype>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

std::vector<MCQItem> load_mcq(const std::string& path) {
    std::vector<MCQItem> items;
    int line_no = 0;
    for (const std::string& line : split_lines(read_text_file(path))) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("mcq file '" + path + "' line " + std::to_string(line_no) +
                                     ": " + why);
        };
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            fail(e.what());
        }
        MCQItem item;
        if (!j.contains("id") || !j["id"].is_string()) fail("missing string field 'id'");
        if (!j.contains("question") || !j["question"].is_string()) {
            fail("missing string field 'question'");
        }
        if (!j.contains("choices") || !j["choices"].is_object()) {
            fail("missing object field 'choices'");
        }
        if (!j.contains("gold") || !j["gold"].is_string()) fail("missing string field 'gold'");
        item.id = j["id"].get<std::string>();
        item.question = j["question"].get<std::string>();
        item.gold = j["gold"].get<std::string>();
        for (const auto& [label, text] : j["choices"].items()) {
            if (!text.is_string()) fail("choice '" + label + "' is not a string");
            if (label.empty() || !std::isalpha((unsigned char) label[0])) {
                fail("choice label '" + label + "' must start with a letter");
            }
            item.choices.emplace_back(label, text.get<std::string>());
        }
        if (item.choices.size() < 2) fail("needs at least two choices");
        bool gold_found = false;
        for (const auto& [label, _] : item.choices) {
            if (label == item.gold) gold_found = true;
        }
        if (!gold_found) fail("gold label '" + item.gold + "' not among choices");
        items.push_back(std::move(item));
    }
    if (items.empty()) throw std::runtime_error("mcq file '" + path + "' contains no items");
    return items;
}

ChoiceParse parse_choice(const std::string& reply, const MCQItem& item) {
    std::size_t i = 0;
    while (i < reply.size() && !std::isalnum((unsigned char) reply[i])) ++i;
    ChoiceParse p;
    if (i == reply.size()) return p;
    // A bare letter: next char must not extend it into a word.
    if (i + 1 < reply.size() && std::isalnum((unsigned char) reply[i + 1])) return p;
    const char letter = (char) std::toupper((unsigned char) reply[i]);
    for (const auto& [label, _] : item.choices) {
        if (std::toupper((unsigned char) label[0]) == letter) {
            p.ok = true;
            p.label = label;
            return p;
        }
    }
    return p;
}

static std::string render_first_turn(const MCQItem& item, const DownstreamConfig& cfg) {
    std::string text = cfg.first_turn_template;
    const auto sub = [&](const std::string& ph, const std::string& value) {
        const std::size_t at = text.find(ph);
        if (at == std::string::npos) {
            throw std::runtime_error("downstream template is missing " + ph);
        }
        text.replace(at, ph.size(), value);
    };
    std::string choices;
    for (const auto& [label, body] : item.choices) {
        choices += label + ". " + body + "\n";
    }
    if (!choices.empty()) choices.pop_back();
    sub("{question}", item.question);
    sub("{choices}", choices);
    return text;
}

double DownstreamReport::accuracy() const {
    return n == 0 ? 0.0 : double(n_correct) / double(n);
}
double DownstreamReport::yes_rate_correct() const {
    return n_correct == 0 ? 0.0 : double(yes_given_correct) / double(n_correct);
}
double DownstreamReport::yes_rate_incorrect() const {
    return n_incorrect == 0 ? 0.0 : double(yes_given_incorrect) / double(n_incorrect);
}

DownstreamReport run_downstream(ChatBackend& backend, std::span<const MCQItem> items,
                                const MaskPlan* mask, const DownstreamConfig& cfg,
                                const std::string& dataset_name, const std::string& mask_name,
                                std::vector<MCQRecord>* out_records) {
    if (items.empty()) throw std::runtime_error("downstream: no items");
    MaskPlan scoped;
    if (mask) {
        scoped = *mask;
        scoped.scope = MaskScope::second_turn_only;  // first-turn accuracy stays definitional
    }
    DownstreamReport rep;
    rep.dataset = dataset_name;
    rep.mask_setting = mask_name;
    const Tokenizer& tok = backend.tokenizer();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const MCQItem& item = items[i];
        auto session = backend.open_session(i);
        if (mask) session->set_mask(&scoped);
        session->begin_user_turn(tok.encode(render_first_turn(item, cfg), false));
        const GenerationOutput reply = session->generate_reply(cfg.max_new_first, nullptr);
        const ChoiceParse pick = parse_choice(reply.text, item);
        MCQRecord rec;
        rec.item_id = item.id;
        rec.picked = pick.label;
        rec.parse_failed = !pick.ok;
        rec.correct = pick.ok && pick.label == item.gold;

        session->begin_user_turn(tok.encode(cfg.reevaluation_prompt, false));
        const GenerationOutput check = session->generate_reply(cfg.max_new_second, nullptr);
        rec.turn2_class = parse_answer(check.text);

        ++rep.n;
        if (rec.parse_failed) ++rep.parse_failures;
        if (rec.correct) {
            ++rep.n_correct;
            if (rec.turn2_class == AnswerClass::yes) ++rep.yes_given_correct;
        } else {
            ++rep.n_incorrect;
            if (rec.turn2_class == AnswerClass::yes) ++rep.yes_given_incorrect;
        }
        if (rec.turn2_class == AnswerClass::incoherent) ++rep.incoherent_turn2;
        if (out_records) out_records->push_back(std::move(rec));
    }
    return rep;
}

void write_downstream_tsv(const std::string& path, std::span<const DownstreamReport> reports) {
    std::string out =
        "dataset\tmask\tn\taccuracy\tyes_given_correct\tyes_given_incorrect"
        "\tn_correct\tn_incorrect\tparse_failures\tincoherent_turn2\n";
    for (const DownstreamReport& r : reports) {
        out += r.dataset + "\t" + r.mask_setting + "\t" + std::to_string(r.n) + "\t" +
               format_fixed(r.accuracy(), 4) + "\t" + format_fixed(r.yes_rate_correct(), 4) +
               "\t" + format_fixed(r.yes_rate_incorrect(), 4) + "\t" +
               std::to_string(r.n_correct) + "\t" + std::to_string(r.n_incorrect) + "\t" +
               std::to_string(r.parse_failures) + "\t" + std::to_string(r.incoherent_turn2) + "\n";
    }
    write_text_file(path, out);
}

}  // namespace flipscope
