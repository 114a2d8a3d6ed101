#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// Byte-level tokenizer for tests and demos: all 256 bytes plus merges that
/// make the yes/no surface forms single tokens, plus llama-style role-marker
/// specials. Deterministic and self-contained.
Tokenizer make_ascii_tokenizer();

/// Small config with sane defaults for synthetic checkpoints.
ModelConfig tiny_model_config(int n_layers, int n_heads, int n_kv_heads, int d_head,
                              int max_context = 2048);

/// Writes a checkpoint with seeded pseudo-random weights in the named-tensor
/// container format. Same seed, same bytes.
void write_tiny_model(const std::filesystem::path& path, const ModelConfig& config,
                      std::uint64_t seed);

/// Plain-text filler files built from a fixed word list. The words are chosen
/// so that tokenizing the corpus never produces a bare yes/no token (no "no"
/// bigram or "yes" trigram inside any word), keeping attention-target counts
/// clean in synthetic runs. Writes until roughly `approx_tokens` of material
/// exists.
void write_demo_corpus(const std::filesystem::path& dir, std::uint64_t seed,
                       std::size_t approx_tokens);

/// Illustrative needle sets (clearly synthetic facts). `which` picks the
/// split: "detect" (3 needles), "label" (mixed factual/non-factual),
/// "test" (unseen, with wrong answers for the forced-error control).
void write_demo_needles(const std::filesystem::path& path, const std::string& which);

/// Small multiple-choice set for the downstream check.
void write_demo_mcq(const std::filesystem::path& path);

}  // namespace flipscope
