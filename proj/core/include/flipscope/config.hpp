#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flipscope/chat.hpp"
#include "flipscope/downstream.hpp"
#include "flipscope/flip.hpp"
#include "flipscope/probe.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// One dataset split: a needle file plus a sampling grid.
struct SplitConfig {
    std::string needles;
    std::vector<std::size_t> lengths;
    std::vector<double> depths;
    int per_cell = 1;
    std::uint64_t seed = 1;
    bool with_bot_marker = false;

    std::size_t cell_total() const;  // lengths x depths x per_cell
};

/// One masking scenario evaluated in the uncertainty pipeline.
///   none       unmasked baseline
///   case_top   top-k of one case's counts
///   pair_sum   top-k of the summed counts of two cases (the "A u B" reading)
///   diff       top-k(case_a) minus top-k(case_b), as list difference
///   heads      an explicit head list
struct ScenarioConfig {
    std::string name;
    std::string kind = "none";
    int case_a = 1;
    int case_b = 2;
    int k = 10;
    std::vector<HeadId> heads;
};

struct ExperimentConfig {
    // model backend
    std::string backend = "model";  // "model" or "scripted"
    std::string weights;
    std::string tokenizer_file;
    std::string script;  // scripted backend input
    std::string system_prompt;
    ChatTemplate chat_template;

    // conversation protocol
    FlipConfig protocol;
    std::vector<std::string> yes_variants{"yes", "Yes", " yes", " Yes"};
    std::vector<std::string> no_variants{"no", "No", " no", " No"};

    // data
    std::string corpus_dir;
    SplitConfig detect_split;   // retrieval-head detection
    SplitConfig flip_split;     // two-turn flip measurement
    SplitConfig label_split;    // case labeling
    SplitConfig test_split;     // held-out masking evaluation
    bool detect_marker_variants = true;  // also run the marker-prefixed variant

    // masking
    std::vector<int> sweep_k_list{10, 20, 30, 50};
    int random_trials = 5;
    std::uint64_t mask_seed = 77;
    MaskScope mask_scope = MaskScope::second_turn_only;
    std::string sweep_variant = "without_marker";  // which detection table feeds the sweep

    // uncertainty pipeline
    std::vector<ScenarioConfig> scenarios;
    bool rate_ranking = false;
    bool labels_include_mirrored = false;  // also label forced-wrong records (off: paper taxonomy)

    // downstream
    struct DownstreamDataset {
        std::string name;
        std::string path;
    };
    std::vector<DownstreamDataset> downstream_datasets;
    DownstreamConfig downstream;

    // execution
    int trace_top_k = 1;
    int threads = 0;  // 0: hardware concurrency
    std::string output_dir = "out";

    /// Paper-shaped defaults: grids sized to the 600/540/400 splits, the
    /// published masked-head counts, and the published scenario list.
    static ExperimentConfig defaults();

    /// defaults() overlaid with a JSON config file; unknown keys are errors.
    static ExperimentConfig load(const std::string& path);

    /// Stable serialization of every result-affecting field; equal experiments
    /// hash equal (threads and output_dir are excluded — they cannot change
    /// results).
    std::string canonical_text() const;
    std::uint64_t config_hash() const;

    void validate() const;
};

void write_config_json(const std::string& path, const ExperimentConfig& config);

}  // namespace flipscope
