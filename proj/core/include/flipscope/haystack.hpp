#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flipscope/tokenizer.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// One fact to hide in a haystack. `answer_text` must survive inside
/// `needle_text` (word-level containment after normalization) so verbatim
/// retrieval is possible. `wrong_answer`, when present, feeds the forced-error
/// control protocol.
struct NeedleSpec {
    std::string id;
    std::string needle_text;
    std::string question;
    std::string answer_text;
    bool factual = false;
    std::string wrong_answer;  // optional

    void validate() const;
};

std::vector<NeedleSpec> load_needles(const std::string& path);
void save_needles(const std::string& path, const std::vector<NeedleSpec>& needles);

/// Filler material: paragraph blocks from a directory of plain-text files,
/// pre-tokenized once. Blocks keep their trailing separator so spliced text
/// stays readable.
class CorpusSource {
public:
    static CorpusSource load(const std::string& dir, const Tokenizer& tokenizer);

    std::size_t n_blocks() const { return blocks_.size(); }
    std::size_t total_tokens() const { return total_tokens_; }
    const TokenSequence& block(std::size_t i) const { return blocks_[i]; }

private:
    std::vector<TokenSequence> blocks_;
    std::size_t total_tokens_ = 0;
};

struct HaystackSample {
    std::string id;
    NeedleSpec needle;
    TokenSequence context;    // filler + needle (+ marker), ready to prompt
    SpanRange needle_span;    // absolute positions of the needle inside context
    std::size_t target_length = 0;
    double depth_target = 0.0;
    double depth_actual = 0.0;
    bool with_bot_marker = false;
    std::uint64_t seed = 0;
};

/// Splices one needle into corpus filler at the requested depth. Filler is
/// drawn block-by-block from a seeded rotation of the corpus; the insertion
/// point snaps to the nearest paragraph boundary unless that would miss the
/// depth tolerance, in which case the covering block is split. With
/// `with_bot_marker` the needle is prefixed by the begin-of-text token and the
/// span widens to include it; everything else is byte-identical to the
/// unmarked build.
HaystackSample build_sample(const CorpusSource& corpus, const NeedleSpec& needle,
                            const Tokenizer& tokenizer, std::size_t target_length, double depth,
                            bool with_bot_marker, std::uint64_t seed);

struct DatasetGrid {
    std::vector<std::size_t> lengths;
    std::vector<double> depths;
    int per_cell = 1;
};

/// Full grid: every needle x length x depth x per_cell replicate, in that
/// nesting order. Per-sample seeds derive from `root_seed` and the sample's
/// grid coordinates, so any sample can be rebuilt in isolation.
std::vector<HaystackSample> generate_dataset(const CorpusSource& corpus,
                                             const std::vector<NeedleSpec>& needles,
                                             const Tokenizer& tokenizer, const DatasetGrid& grid,
                                             bool with_bot_marker, std::uint64_t root_seed);

TokenSequence needle_span_tokens(const HaystackSample& sample);

/// One JSON line per sample: ids, geometry, seed. Enough to audit or rebuild.
void write_dataset_manifest(const std::string& path, const std::vector<HaystackSample>& samples);

}  // namespace flipscope
