#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flipscope/types.hpp"

namespace flipscope {

/// Byte-level BPE tokenizer loaded from a JSON vocabulary/merge file.
///
/// The vocabulary must contain every single byte as a token, so encoding is
/// total: any byte string round-trips exactly. Special tokens (role markers,
/// begin-of-text, stop tokens) are literal strings matched before BPE and only
/// when the caller opts in.
class Tokenizer {
public:
    static Tokenizer load(const std::filesystem::path& path);
    static Tokenizer from_tables(
        std::unordered_map<std::string, Token> vocab,
        std::vector<std::pair<std::string, std::string>> merges,
        std::unordered_map<std::string, Token> special_tokens,
        std::string begin_of_text_literal,
        std::vector<std::string> stop_token_literals);

    TokenSequence encode(std::string_view text, bool allow_special = false) const;
    std::string decode(const TokenSequence& ids) const;
    std::string decode_token(Token id) const;

    /// Highest id + 1 across vocab and special tokens.
    int n_ids() const { return n_ids_; }

    Token begin_of_text() const { return begin_of_text_; }  // -1 when absent
    const std::vector<Token>& stop_tokens() const { return stop_tokens_; }
    bool is_stop(Token id) const;

    /// Id of `text` when it encodes to exactly one token (specials allowed),
    /// -1 otherwise.
    Token single_token(std::string_view text) const;

    void save(const std::filesystem::path& path) const;

private:
    Tokenizer() = default;
    void build_index();
    TokenSequence encode_piece(std::string_view piece) const;

    std::unordered_map<std::string, Token> vocab_;           // byte string -> id
    std::vector<std::pair<std::string, std::string>> merges_;
    std::unordered_map<std::string, Token> special_;
    std::vector<std::string> id_to_text_;                    // "" for unused ids
    std::vector<bool> id_used_;
    std::unordered_map<std::uint64_t, std::pair<int, Token>> merge_index_;  // (l,r) -> (rank, merged)
    Token byte_ids_[256] = {};
    Token begin_of_text_ = -1;
    std::string begin_of_text_literal_;
    std::vector<std::string> stop_literals_;
    std::vector<Token> stop_tokens_;
    int n_ids_ = 0;
};

}  // namespace flipscope
