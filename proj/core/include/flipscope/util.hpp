#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace flipscope {

// 64-bit FNV-1a. Used for config hashes; stable across platforms and runs.
std::uint64_t fnv1a64(const std::string& data);
std::string hex64(std::uint64_t v);

// splitmix64 step; used to derive independent per-sample seeds from one root.
std::uint64_t mix_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

// Byte string <-> UTF-8 where every byte maps to codepoint U+00..U+FF.
// Lets arbitrary byte-level tokens live inside JSON strings.
std::string bytes_to_utf8(const std::string& bytes);
std::string utf8_to_bytes(const std::string& utf8);  // throws on codepoints > 0xFF

// Fixed-point decimal formatting, locale independent.
std::string format_fixed(double v, int decimals);

std::vector<std::string> split_lines(const std::string& text);

// Lowercased alphanumeric words, punctuation stripped. The normalization used
// for recall scoring and needle/answer containment checks.
std::vector<std::string> normalize_words(const std::string& text);

// True when `run` occurs as a contiguous subsequence of `words`.
bool contains_word_run(const std::vector<std::string>& words,
                       const std::vector<std::string>& run);

// k distinct values from [0, n) by partial Fisher-Yates; deterministic in the rng state.
std::vector<int> sample_without_replacement(std::mt19937_64& rng, int n, int k);

}  // namespace flipscope
