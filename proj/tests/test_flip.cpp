#include "doctest.h"

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "flipscope/chat.hpp"
#include "flipscope/flip.hpp"
#include "flipscope/haystack.hpp"
#include "flipscope/model.hpp"
#include "flipscope/synthetic.hpp"

using namespace flipscope;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "flipscope-tests" / "flip";
    std::filesystem::create_directories(dir);
    return dir;
}

const Model& flip_model() {
    static const Model m = [] {
        const auto weights = temp_dir() / "tiny.safetensors";
        const auto tokfile = temp_dir() / "tokenizer.json";
        write_tiny_model(weights, tiny_model_config(2, 4, 2, 8, 512), 77);
        make_ascii_tokenizer().save(tokfile);
        return Model::load(weights, tokfile);
    }();
    return m;
}

const CorpusSource& flip_corpus() {
    static const CorpusSource c = [] {
        const auto dir = temp_dir() / "corpus";
        write_demo_corpus(dir, 9, 9000);
        return CorpusSource::load(dir.string(), flip_model().tokenizer());
    }();
    return c;
}

HaystackSample make_sample() {
    NeedleSpec n;
    n.id = "kettle";
    n.needle_text = "The copper kettle holds forty silver buttons.";
    n.question = "How many buttons does the copper kettle hold?";
    n.answer_text = "forty silver buttons";
    n.wrong_answer = "twelve brass pins";
    return build_sample(flip_corpus(), n, flip_model().tokenizer(), 160, 0.4, false, 3);
}

ConversationRecord base_record(bool expected_yes, AnswerClass turn2) {
    ConversationRecord r;
    r.sample_id = "s1";
    r.needle_id = "kettle";
    r.expected_yes = expected_yes;
    r.turn2_class = turn2;
    return r;
}

// 1 layer x 4 heads: head 0 eyes a no-token, head 1 a yes-token, head 2 both
// across two steps, head 3 neither
AttentionTrace four_way_trace(const AnswerTokenAlphabet& a, int turn) {
    AttentionTrace t(1, 4);
    t.begin_step(10, turn);
    t.set_entry(0, 0, 0, 0, {3, a.no_ids[0], 0.8f});
    t.set_entry(0, 0, 1, 0, {4, a.yes_ids[0], 0.8f});
    t.set_entry(0, 0, 2, 0, {3, a.no_ids[0], 0.8f});
    t.set_entry(0, 0, 3, 0, {5, Token('q'), 0.8f});
    t.begin_step(11, turn);
    t.set_entry(1, 0, 0, 0, {3, a.no_ids[0], 0.8f});
    t.set_entry(1, 0, 1, 0, {4, a.yes_ids[0], 0.8f});
    t.set_entry(1, 0, 2, 0, {4, a.yes_ids[0], 0.8f});
    t.set_entry(1, 0, 3, 0, {6, Token('r'), 0.8f});
    return t;
}

int case_of(const std::vector<CaseLabel>& labels, HeadId head) {
    int found = 0;
    for (const CaseLabel& l : labels) {
        if (l.head == head) found = found * 10 + l.case_id;  // packs dual membership
    }
    return found;
}

}  // namespace

TEST_CASE("parse_answer reads the first alphabetic word") {
    CHECK(parse_answer("yes") == AnswerClass::yes);
    CHECK(parse_answer("Yes.") == AnswerClass::yes);
    CHECK(parse_answer("YES!") == AnswerClass::yes);
    CHECK(parse_answer("  'no'") == AnswerClass::no);
    CHECK(parse_answer("\n\nNo, I am not.") == AnswerClass::no);
    CHECK(parse_answer("123 yes") == AnswerClass::yes);  // digits are not a word
    CHECK(parse_answer("Note: checking") == AnswerClass::incoherent);
    CHECK(parse_answer("nope") == AnswerClass::incoherent);
    CHECK(parse_answer("maybe yes") == AnswerClass::incoherent);
    CHECK(parse_answer("") == AnswerClass::incoherent);
    CHECK(parse_answer("42") == AnswerClass::incoherent);
}

TEST_CASE("answer class names round trip") {
    for (AnswerClass c : {AnswerClass::yes, AnswerClass::no, AnswerClass::incoherent}) {
        CHECK(answer_class_from_name(answer_class_name(c)) == c);
    }
    CHECK_THROWS_AS((void)answer_class_from_name("perhaps"), std::runtime_error);
}

TEST_CASE("flip definition: coherent contradiction of the expectation") {
    CHECK(base_record(true, AnswerClass::no).flipped());
    CHECK_FALSE(base_record(true, AnswerClass::yes).flipped());
    CHECK_FALSE(base_record(true, AnswerClass::incoherent).flipped());
    CHECK(base_record(false, AnswerClass::yes).flipped());
    CHECK_FALSE(base_record(false, AnswerClass::no).flipped());
    CHECK_FALSE(base_record(false, AnswerClass::incoherent).flipped());
}

TEST_CASE("tally counts answers, flips and totals") {
    std::vector<ConversationRecord> records{
        base_record(true, AnswerClass::yes),   base_record(true, AnswerClass::no),
        base_record(true, AnswerClass::no),    base_record(true, AnswerClass::incoherent),
        base_record(false, AnswerClass::yes),
    };
    const YesStats s = tally_answers(records);
    CHECK(s.total == 5);
    CHECK(s.yes == 2);
    CHECK(s.no == 2);
    CHECK(s.incoherent == 1);
    CHECK(s.flips == 3);  // two kept-expectation "no"s plus the forced-wrong "yes"
    CHECK(s.yes_fraction() == doctest::Approx(0.4));
    CHECK(s.flip_fraction() == doctest::Approx(0.6));
    CHECK_THROWS_AS((void)tally_answers(std::vector<ConversationRecord>{}), std::runtime_error);
}

TEST_CASE("case labels cover the full flip x attention taxonomy") {
    const AnswerTokenAlphabet a =
        AnswerTokenAlphabet::build(make_ascii_tokenizer(), {"yes", "Yes"}, {"no", "No"});
    const AttentionTrace t = four_way_trace(a, 1);

    // flip: second turn said no after a correct first turn
    const auto flip_labels = label_cases(base_record(true, AnswerClass::no), t, a);
    CHECK(case_of(flip_labels, {0, 0}) == 1);
    CHECK(case_of(flip_labels, {0, 1}) == 2);
    CHECK(case_of(flip_labels, {0, 2}) == 12);  // attends both -> two cases
    CHECK(case_of(flip_labels, {0, 3}) == 0);

    // keep: second turn said yes
    const auto keep_labels = label_cases(base_record(true, AnswerClass::yes), t, a);
    CHECK(case_of(keep_labels, {0, 0}) == 3);
    CHECK(case_of(keep_labels, {0, 1}) == 4);
    CHECK(case_of(keep_labels, {0, 2}) == 34);
    CHECK(case_of(keep_labels, {0, 3}) == 0);

    // incoherent second turns label nothing
    CHECK(label_cases(base_record(true, AnswerClass::incoherent), t, a).empty());

    // only the second turn's steps count
    const AttentionTrace first_turn_only = four_way_trace(a, 0);
    CHECK(label_cases(base_record(true, AnswerClass::no), first_turn_only, a).empty());

    CHECK_THROWS_AS((void)label_cases(base_record(false, AnswerClass::no), t, a),
                    std::runtime_error);
}

TEST_CASE("mirrored labels swap the roles of yes and no") {
    const AnswerTokenAlphabet a =
        AnswerTokenAlphabet::build(make_ascii_tokenizer(), {"yes", "Yes"}, {"no", "No"});
    const AttentionTrace t = four_way_trace(a, 1);

    // forced-wrong record; answering yes is the bad outcome now
    const auto flip_labels = label_cases_mirrored(base_record(false, AnswerClass::yes), t, a);
    CHECK(case_of(flip_labels, {0, 1}) == 1);  // attends yes -> supports the bad outcome
    CHECK(case_of(flip_labels, {0, 0}) == 2);  // attends no -> supports recovery
    CHECK(case_of(flip_labels, {0, 2}) == 12);
    CHECK(case_of(flip_labels, {0, 3}) == 0);

    const auto keep_labels = label_cases_mirrored(base_record(false, AnswerClass::no), t, a);
    CHECK(case_of(keep_labels, {0, 1}) == 3);
    CHECK(case_of(keep_labels, {0, 0}) == 4);

    CHECK_THROWS_AS((void)label_cases_mirrored(base_record(true, AnswerClass::yes), t, a),
                    std::runtime_error);
}

TEST_CASE("conversation records round trip through jsonl") {
    ConversationRecord r = base_record(true, AnswerClass::no);
    r.mask_id = "top5";
    r.seed = 991;
    r.factual = true;
    r.turn1_answer = "forty silver buttons";
    r.turn1_recall = 0.75;
    r.turn1_correct = false;
    r.forced_turn1 = false;
    r.turn2_raw = "No, not sure";

    ConversationRecord q = base_record(false, AnswerClass::incoherent);
    q.forced_turn1 = true;
    q.turn1_answer = "twelve brass pins";
    q.turn2_raw = "???";

    const auto path = (temp_dir() / "records.jsonl").string();
    write_records_jsonl(path, std::vector<ConversationRecord>{r, q});
    const auto back = read_records_jsonl(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].sample_id == r.sample_id);
    CHECK(back[0].mask_id == "top5");
    CHECK(back[0].seed == 991);
    CHECK(back[0].factual);
    CHECK(back[0].turn1_answer == r.turn1_answer);
    CHECK(back[0].turn1_recall == 0.75);
    CHECK(back[0].turn2_class == AnswerClass::no);
    CHECK(back[0].expected_yes);
    CHECK(back[1].forced_turn1);
    CHECK(back[1].turn2_class == AnswerClass::incoherent);
    CHECK_FALSE(back[1].expected_yes);
}

TEST_CASE("records with raw model bytes still serialize") {
    ConversationRecord r = base_record(true, AnswerClass::incoherent);
    r.turn2_raw = std::string("\xff\xfe broken bytes");
    const auto path = (temp_dir() / "records_bytes.jsonl").string();
    CHECK_NOTHROW(write_records_jsonl(path, std::vector<ConversationRecord>{r}));
    const auto back = read_records_jsonl(path);
    REQUIRE(back.size() == 1);
    // invalid sequences come back substituted, not dropped
    CHECK(back[0].turn2_raw.find("broken bytes") != std::string::npos);
}

TEST_CASE("first turn pins the needle span inside the conversation") {
    const HaystackSample sample = make_sample();
    ModelChatBackend backend(flip_model(), ChatTemplate{});
    auto session = backend.open_session(0);

    FlipConfig cfg;
    cfg.max_new_first = 8;
    AttentionTrace trace(2, 4);
    const FirstTurnResult r = run_first_turn(*session, sample, flip_model().tokenizer(), cfg,
                                             &trace);
    REQUIRE(r.needle_abs.end <= session->history().size());
    const TokenSequence expect = needle_span_tokens(sample);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(session->history()[r.needle_abs.begin + i] == expect[i]);
    }
    CHECK(trace.steps() == r.reply.steps);
    CHECK(r.recall >= 0.0);
    CHECK(r.recall <= 1.0);
    // a random-weight model does not recite the answer
    CHECK_FALSE(r.correct);

    // second turn appends the re-evaluation prompt and classifies the reply
    ConversationRecord rec = base_record(true, AnswerClass::incoherent);
    run_reevaluation(*session, rec, flip_model().tokenizer(), cfg, nullptr);
    CHECK(session->turn_index() == 1);
    CHECK(rec.turn2_class == parse_answer(rec.turn2_raw));
}

TEST_CASE("forced first turns write the wrong answer verbatim") {
    const HaystackSample sample = make_sample();
    ModelChatBackend backend(flip_model(), ChatTemplate{});
    auto session = backend.open_session(0);

    FlipConfig cfg;
    const FirstTurnResult r = force_first_turn(*session, sample, "twelve brass pins",
                                               flip_model().tokenizer(), cfg);
    CHECK_FALSE(r.correct);
    CHECK(r.reply.text == "twelve brass pins");
    // the forced tokens are in the transcript
    const TokenSequence forced = flip_model().tokenizer().encode("twelve brass pins");
    const TokenSequence& hist = session->history();
    bool found = false;
    for (std::size_t i = 0; i + forced.size() <= hist.size() && !found; ++i) {
        bool all = true;
        for (std::size_t k = 0; k < forced.size(); ++k) all = all && hist[i + k] == forced[k];
        found = all;
    }
    CHECK(found);

    // a "wrong" answer that scores correct is refused
    auto fresh = backend.open_session(0);
    CHECK_THROWS_WITH_AS((void)force_first_turn(*fresh, sample, "forty silver buttons!",
                                                flip_model().tokenizer(), cfg),
                         doctest::Contains("scores as correct"), std::runtime_error);
}
