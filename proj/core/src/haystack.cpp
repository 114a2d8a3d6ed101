#include "flipscope/haystack.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

void NeedleSpec::validate() const {
    auto fail = [&](const std::string& why) {
        throw std::runtime_error("needle '" + (id.empty() ? "?" : id) + "': " + why);
    };
    if (id.empty()) fail("empty id");
    if (needle_text.empty()) fail("empty needle text");
    if (question.empty()) fail("empty question");
    const auto answer_words = normalize_words(answer_text);
    if (answer_words.empty()) fail("answer has no words");
    if (!contains_word_run(normalize_words(needle_text), answer_words)) {
        fail("answer text does not occur inside the needle text");
    }
    if (!wrong_answer.empty() && normalize_words(wrong_answer) == answer_words) {
        fail("wrong_answer normalizes to the same words as the answer");
    }
}

std::vector<NeedleSpec> load_needles(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<NeedleSpec> needles;
    int line_no = 0;
    for (const std::string& line : split_lines(text)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("needles file '" + path + "' line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        auto field = [&](const char* key) -> std::string {
            if (!j.contains(key) || !j[key].is_string()) {
                throw std::runtime_error("needles file '" + path + "' line " +
                                         std::to_string(line_no) + ": missing string field '" +
                                         key + "'");
            }
            return j[key].get<std::string>();
        };
        NeedleSpec n;
        n.id = field("id");
        n.needle_text = field("needle");
        n.question = field("question");
        n.answer_text = field("answer");
        n.factual = j.value("factual", false);
        n.wrong_answer = j.value("wrong_answer", std::string());
        try {
            n.validate();
        } catch (const std::exception& e) {
            throw std::runtime_error("needles file '" + path + "' line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        needles.push_back(std::move(n));
    }
    if (needles.empty()) {
        throw std::runtime_error("needles file '" + path + "' contains no needles");
    }
    for (std::size_t i = 0; i < needles.size(); ++i) {
        for (std::size_t k = i + 1; k < needles.size(); ++k) {
            if (needles[i].id == needles[k].id) {
                throw std::runtime_error("needles file '" + path + "': duplicate id '" +
                                         needles[i].id + "'");
            }
        }
    }
    return needles;
}

void save_needles(const std::string& path, const std::vector<NeedleSpec>& needles) {
    std::string out;
    for (const NeedleSpec& n : needles) {
        ordered_json j;
        j["id"] = n.id;
        j["needle"] = n.needle_text;
        j["question"] = n.question;
        j["answer"] = n.answer_text;
        j["factual"] = n.factual;
        if (!n.wrong_answer.empty()) j["wrong_answer"] = n.wrong_answer;
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

CorpusSource CorpusSource::load(const std::string& dir, const Tokenizer& tokenizer) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("corpus directory '" + dir + "' does not exist");
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw std::runtime_error("corpus directory '" + dir + "' has no .txt files");
    }

    CorpusSource src;
    for (const std::string& file : files) {
        const std::string text = read_text_file(file);
        std::string block;
        auto flush = [&]() {
            if (block.find_first_not_of(" \t\r\n") == std::string::npos) {
                block.clear();
                return;
            }
            TokenSequence toks = tokenizer.encode(block + "\n\n", false);
            if (!toks.empty()) {
                src.total_tokens_ += toks.size();
                src.blocks_.push_back(std::move(toks));
            }
            block.clear();
        };
        for (const std::string& line : split_lines(text)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) {
                flush();
            } else {
                block += line;
                block += '\n';
            }
        }
        flush();
    }
    if (src.blocks_.empty()) {
        throw std::runtime_error("corpus directory '" + dir + "' yielded no paragraph blocks");
    }
    return src;
}

HaystackSample build_sample(const CorpusSource& corpus, const NeedleSpec& needle,
                            const Tokenizer& tokenizer, std::size_t target_length, double depth,
                            bool with_bot_marker, std::uint64_t seed) {
    needle.validate();
    if (depth < 0.0 || depth > 1.0) {
        throw std::runtime_error("depth " + format_fixed(depth, 2) + " outside [0, 1]");
    }
    const TokenSequence needle_tokens = tokenizer.encode(needle.needle_text, false);
    const TokenSequence sep_tokens = tokenizer.encode("\n\n", false);
    if (needle_tokens.size() + sep_tokens.size() > target_length) {
        throw std::runtime_error("target length " + std::to_string(target_length) +
                                 " too small for needle '" + needle.id + "' (" +
                                 std::to_string(needle_tokens.size()) + " tokens)");
    }
    if (with_bot_marker && tokenizer.begin_of_text() < 0) {
        throw std::runtime_error("tokenizer has no begin-of-text token for the marker variant");
    }

    // Filler: rotate through corpus blocks from a seeded start, trimming the
    // last block so the filler hits the budget exactly.
    const std::size_t budget = target_length - needle_tokens.size() - sep_tokens.size();
    if (corpus.total_tokens() < budget) {
        throw std::runtime_error("corpus exhausted: need " + std::to_string(budget) +
                                 " filler tokens, corpus has " +
                                 std::to_string(corpus.total_tokens()));
    }
    const std::size_t start_block = std::size_t(mix_seed(seed, 0x66696c6c) % corpus.n_blocks());
    TokenSequence filler;
    filler.reserve(budget);
    std::vector<std::size_t> boundaries{0};
    for (std::size_t i = 0; i < corpus.n_blocks() && filler.size() < budget; ++i) {
        const TokenSequence& block = corpus.block((start_block + i) % corpus.n_blocks());
        const std::size_t take = std::min(block.size(), budget - filler.size());
        filler.insert(filler.end(), block.begin(), block.begin() + std::ptrdiff_t(take));
        boundaries.push_back(filler.size());
    }

    // Insertion point: snap to the nearest paragraph boundary when that stays
    // inside the depth tolerance, otherwise split the covering block exactly.
    const double want = depth * double(target_length);
    const std::size_t target_start = std::min(budget, std::size_t(std::llround(want)));
    const double tol = 0.05 * double(target_length);
    std::size_t insert_at = target_start;
    std::size_t best_dist = std::size_t(-1);
    for (std::size_t b : boundaries) {
        const std::size_t dist = b > target_start ? b - target_start : target_start - b;
        if (dist < best_dist) {
            best_dist = dist;
            if (double(dist) <= tol) insert_at = b;
        }
    }
    if (std::abs(double(insert_at) - want) > tol + 1e-9) {
        throw std::runtime_error("depth " + format_fixed(depth, 2) + " unreachable at length " +
                                 std::to_string(target_length) + " with needle '" + needle.id +
                                 "' (" + std::to_string(needle_tokens.size()) + " tokens)");
    }

    HaystackSample s;
    s.needle = needle;
    s.target_length = target_length;
    s.depth_target = depth;
    s.depth_actual = double(insert_at) / double(target_length);
    s.with_bot_marker = with_bot_marker;
    s.seed = seed;
    s.context.reserve(target_length + 1);
    s.context.insert(s.context.end(), filler.begin(), filler.begin() + std::ptrdiff_t(insert_at));
    const std::size_t span_begin = s.context.size();
    if (with_bot_marker) s.context.push_back(tokenizer.begin_of_text());
    s.context.insert(s.context.end(), needle_tokens.begin(), needle_tokens.end());
    s.needle_span = {span_begin, s.context.size()};
    s.context.insert(s.context.end(), sep_tokens.begin(), sep_tokens.end());
    s.context.insert(s.context.end(), filler.begin() + std::ptrdiff_t(insert_at), filler.end());
    return s;
}

std::vector<HaystackSample> generate_dataset(const CorpusSource& corpus,
                                             const std::vector<NeedleSpec>& needles,
                                             const Tokenizer& tokenizer, const DatasetGrid& grid,
                                             bool with_bot_marker, std::uint64_t root_seed) {
    if (needles.empty() || grid.lengths.empty() || grid.depths.empty() || grid.per_cell < 1) {
        throw std::runtime_error("dataset grid is empty");
    }
    std::vector<HaystackSample> out;
    out.reserve(needles.size() * grid.lengths.size() * grid.depths.size() *
                std::size_t(grid.per_cell));
    for (std::size_t ni = 0; ni < needles.size(); ++ni) {
        for (std::size_t li = 0; li < grid.lengths.size(); ++li) {
            for (std::size_t di = 0; di < grid.depths.size(); ++di) {
                for (int rep = 0; rep < grid.per_cell; ++rep) {
                    const std::uint64_t seed =
                        mix_seed(root_seed, ni, li * 1000 + di, std::uint64_t(rep));
                    HaystackSample s = build_sample(corpus, needles[ni], tokenizer,
                                                    grid.lengths[li], grid.depths[di],
                                                    with_bot_marker, seed);
                    s.id = needles[ni].id + "-L" + std::to_string(grid.lengths[li]) + "-d" +
                           std::to_string(int(std::llround(grid.depths[di] * 100))) + "-r" +
                           std::to_string(rep) + (with_bot_marker ? "-m" : "");
                    out.push_back(std::move(s));
                }
            }
        }
    }
    return out;
}

TokenSequence needle_span_tokens(const HaystackSample& sample) {
    return TokenSequence(sample.context.begin() + std::ptrdiff_t(sample.needle_span.begin),
                         sample.context.begin() + std::ptrdiff_t(sample.needle_span.end));
}

void write_dataset_manifest(const std::string& path, const std::vector<HaystackSample>& samples) {
    std::string out;
    for (const HaystackSample& s : samples) {
        ordered_json j;
        j["id"] = s.id;
        j["needle_id"] = s.needle.id;
        j["factual"] = s.needle.factual;
        j["with_bot_marker"] = s.with_bot_marker;
        j["target_length"] = s.target_length;
        j["context_length"] = s.context.size();
        j["span_begin"] = s.needle_span.begin;
        j["span_end"] = s.needle_span.end;
        j["depth_target"] = format_fixed(s.depth_target, 4);
        j["depth_actual"] = format_fixed(s.depth_actual, 4);
        j["seed"] = s.seed;
        out += j.dump();
        out += '\n';
    }
    write_text_file(path, out);
}

}  // namespace flipscope
