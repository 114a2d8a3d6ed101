#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flipscope/chat.hpp"
#include "flipscope/haystack.hpp"
#include "flipscope/metrics.hpp"
#include "flipscope/probe.hpp"

namespace flipscope {

enum class AnswerClass {
    yes,
    no,
    incoherent,
};

const char* answer_class_name(AnswerClass c);
AnswerClass answer_class_from_name(const std::string& name);

/// First alphabetic word of the reply, case-insensitive; anything that is not
/// yes or no is incoherent.
AnswerClass parse_answer(const std::string& text);

struct FlipConfig {
    std::string reevaluation_prompt =
        "Are you sure about your previous answer to the given question? "
        "Answer only with 'yes' or 'no'";
    std::string question_template = "\n\nQuestion: {question}\nAnswer:";
    double correctness_threshold = 0.9;  // word recall needed to call turn 1 correct
    int max_new_first = 64;
    int max_new_second = 8;
};

/// Everything one two-turn conversation produced. `expected_yes` says which
/// re-evaluation answer would be consistent with the first turn (yes after a
/// correct answer, no after a forced wrong one). A flip is an inconsistent
/// second turn.
struct ConversationRecord {
    std::string sample_id;
    std::string needle_id;
    bool factual = false;
    std::string mask_id;  // empty when unmasked
    std::uint64_t seed = 0;

    std::string turn1_answer;
    double turn1_recall = 0.0;
    bool turn1_correct = false;
    bool forced_turn1 = false;  // answer injected, not decoded

    std::string turn2_raw;
    AnswerClass turn2_class = AnswerClass::incoherent;
    bool expected_yes = true;

    bool flipped() const;  // turn 2 inconsistent with turn 1 (incoherent excluded)
};

struct FirstTurnResult {
    GenerationOutput reply;
    double recall = 0.0;
    bool correct = false;
    SpanRange needle_abs;         // needle span in conversation coordinates
    std::size_t content_offset = 0;
};

/// Turn 1: haystack context plus the needle's question, then a decoded answer.
FirstTurnResult run_first_turn(ChatSession& session, const HaystackSample& sample,
                               const Tokenizer& tokenizer, const FlipConfig& cfg,
                               AttentionTrace* trace);

/// Turn 2: the fixed re-evaluation prompt, then a decoded yes/no.
void run_reevaluation(ChatSession& session, ConversationRecord& record, const Tokenizer& tokenizer,
                      const FlipConfig& cfg, AttentionTrace* trace);

/// Turn 1 with a deliberately wrong answer written into the transcript instead
/// of decoding. Refuses wrong answers that would score as correct.
FirstTurnResult force_first_turn(ChatSession& session, const HaystackSample& sample,
                                 const std::string& wrong_answer, const Tokenizer& tokenizer,
                                 const FlipConfig& cfg);

/// The four-way head taxonomy for one conversation whose turn 1 was correct:
///   case 1  flip  and attends no      case 2  flip  and attends yes
///   case 3  keep  and attends no      case 4  keep  and attends yes
/// Attending both sides in one turn lands a head in two cases. Incoherent
/// second turns yield no labels.
struct CaseLabel {
    HeadId head;
    int case_id = 0;  // 1..4
};

std::vector<CaseLabel> label_cases(const ConversationRecord& record, const AttentionTrace& trace,
                                   const AnswerTokenAlphabet& alphabet, int turn = 1);

/// Mirrored taxonomy for forced-wrong conversations (expected answer is no):
/// yes and no swap roles so case 1 stays "supports the bad outcome".
std::vector<CaseLabel> label_cases_mirrored(const ConversationRecord& record,
                                            const AttentionTrace& trace,
                                            const AnswerTokenAlphabet& alphabet, int turn = 1);

struct YesStats {
    long yes = 0;
    long no = 0;
    long incoherent = 0;
    long flips = 0;  // coherent second turns contradicting turn 1
    long total = 0;

    double yes_fraction() const;
    double flip_fraction() const;
};

YesStats tally_answers(std::span<const ConversationRecord> records);

void write_records_jsonl(const std::string& path, std::span<const ConversationRecord> records);
std::vector<ConversationRecord> read_records_jsonl(const std::string& path);

}  // namespace flipscope
