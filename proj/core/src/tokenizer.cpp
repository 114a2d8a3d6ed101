#include "flipscope/tokenizer.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "flipscope/util.hpp"

namespace flipscope {

using nlohmann::json;

static std::uint64_t pack_pair(Token a, Token b) {
    return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const std::exception& e) {
        throw std::runtime_error("tokenizer file " + path.string() + ": " + e.what());
    }

    std::unordered_map<std::string, Token> vocab;
    for (auto it = j.at("vocab").begin(); it != j.at("vocab").end(); ++it) {
        vocab[utf8_to_bytes(it.key())] = it.value().get<Token>();
    }
    std::vector<std::pair<std::string, std::string>> merges;
    for (const auto& m : j.value("merges", json::array())) {
        if (!m.is_array() || m.size() != 2) {
            throw std::runtime_error("tokenizer merges must be [left, right] pairs");
        }
        merges.emplace_back(utf8_to_bytes(m[0].get<std::string>()),
                            utf8_to_bytes(m[1].get<std::string>()));
    }
    std::unordered_map<std::string, Token> special;
    const json specials = j.value("special_tokens", json::object());
    for (auto it = specials.begin(); it != specials.end(); ++it) {
        special[it.key()] = it.value().get<Token>();
    }
    return from_tables(std::move(vocab), std::move(merges), std::move(special),
                       j.value("begin_of_text", std::string()),
                       j.value("stop_tokens", std::vector<std::string>()));
}

Tokenizer Tokenizer::from_tables(
    std::unordered_map<std::string, Token> vocab,
    std::vector<std::pair<std::string, std::string>> merges,
    std::unordered_map<std::string, Token> special_tokens,
    std::string begin_of_text_literal,
    std::vector<std::string> stop_token_literals) {
    Tokenizer t;
    t.vocab_ = std::move(vocab);
    t.merges_ = std::move(merges);
    t.special_ = std::move(special_tokens);
    t.begin_of_text_literal_ = std::move(begin_of_text_literal);
    t.stop_literals_ = std::move(stop_token_literals);
    t.build_index();
    return t;
}

void Tokenizer::build_index() {
    Token max_id = -1;
    for (const auto& [text, id] : vocab_) {
        if (id < 0) throw std::runtime_error("tokenizer: negative token id for vocab entry");
        max_id = std::max(max_id, id);
    }
    for (const auto& [text, id] : special_) {
        if (id < 0) throw std::runtime_error("tokenizer: negative special token id");
        max_id = std::max(max_id, id);
    }
    n_ids_ = max_id + 1;

    id_to_text_.assign(std::size_t(n_ids_), std::string());
    id_used_.assign(std::size_t(n_ids_), false);
    auto claim = [&](const std::string& text, Token id, const char* what) {
        if (id_used_[std::size_t(id)]) {
            throw std::runtime_error(std::string("tokenizer: duplicate id for ") + what +
                                     " entry '" + text + "'");
        }
        id_used_[std::size_t(id)] = true;
        id_to_text_[std::size_t(id)] = text;
    };
    for (const auto& [text, id] : vocab_) claim(text, id, "vocab");
    for (const auto& [text, id] : special_) claim(text, id, "special");

    for (int b = 0; b < 256; ++b) {
        std::string s(1, char(b));
        auto it = vocab_.find(s);
        if (it == vocab_.end()) {
            throw std::runtime_error(
                "tokenizer: vocabulary is missing single-byte token " + std::to_string(b) +
                " (byte fallback requires all 256)");
        }
        byte_ids_[b] = it->second;
    }

    merge_index_.clear();
    for (std::size_t rank = 0; rank < merges_.size(); ++rank) {
        const auto& [l, r] = merges_[rank];
        auto lit = vocab_.find(l);
        auto rit = vocab_.find(r);
        auto cit = vocab_.find(l + r);
        if (lit == vocab_.end() || rit == vocab_.end() || cit == vocab_.end()) {
            throw std::runtime_error("tokenizer: merge rank " + std::to_string(rank) +
                                     " references tokens outside the vocabulary");
        }
        // first (lowest-rank) entry wins for duplicate pairs
        merge_index_.emplace(pack_pair(lit->second, rit->second),
                             std::make_pair(int(rank), cit->second));
    }

    begin_of_text_ = -1;
    if (!begin_of_text_literal_.empty()) {
        auto it = special_.find(begin_of_text_literal_);
        if (it == special_.end()) {
            throw std::runtime_error("tokenizer: begin_of_text literal '" +
                                     begin_of_text_literal_ + "' is not a special token");
        }
        begin_of_text_ = it->second;
    }
    stop_tokens_.clear();
    for (const auto& lit : stop_literals_) {
        auto it = special_.find(lit);
        if (it == special_.end()) {
            throw std::runtime_error("tokenizer: stop token literal '" + lit +
                                     "' is not a special token");
        }
        stop_tokens_.push_back(it->second);
    }
}

bool Tokenizer::is_stop(Token id) const {
    return std::find(stop_tokens_.begin(), stop_tokens_.end(), id) != stop_tokens_.end();
}

static bool is_break_char(char c) {
    return c == '\n' || c == '\r' || c == '\t';
}

// Piece boundaries: a space that starts a new word leads that word; runs of
// newline-class characters form their own pieces. Concatenating the pieces
// reproduces the input, so encoding stays total and exact.
static std::vector<std::string_view> pretokenize(std::string_view s) {
    std::vector<std::string_view> pieces;
    std::size_t start = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
        const char prev = s[i - 1];
        const char cur  = s[i];
        bool boundary = false;
        if (cur == ' ' && prev != ' ') boundary = true;
        if (is_break_char(cur) != is_break_char(prev)) boundary = true;
        if (is_break_char(cur) && cur != prev) boundary = true;
        if (boundary) {
            pieces.push_back(s.substr(start, i - start));
            start = i;
        }
    }
    if (start < s.size()) {
        pieces.push_back(s.substr(start));
    }
    return pieces;
}

TokenSequence Tokenizer::encode_piece(std::string_view piece) const {
    TokenSequence syms;
    syms.reserve(piece.size());
    for (unsigned char c : piece) {
        syms.push_back(byte_ids_[c]);
    }
    while (syms.size() >= 2) {
        int best_rank = std::numeric_limits<int>::max();
        std::size_t best_pos = 0;
        Token best_merged = -1;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = merge_index_.find(pack_pair(syms[i], syms[i + 1]));
            if (it != merge_index_.end() && it->second.first < best_rank) {
                best_rank = it->second.first;
                best_pos = i;
                best_merged = it->second.second;
            }
        }
        if (best_merged < 0) break;
        syms[best_pos] = best_merged;
        syms.erase(syms.begin() + std::ptrdiff_t(best_pos) + 1);
    }
    return syms;
}

TokenSequence Tokenizer::encode(std::string_view text, bool allow_special) const {
    TokenSequence out;
    if (text.empty()) return out;

    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t next_special = text.size();
        std::size_t special_len = 0;
        Token special_id = -1;
        if (allow_special) {
            for (const auto& [lit, id] : special_) {
                std::size_t at = text.find(lit, pos);
                if (at == std::string_view::npos) continue;
                if (at < next_special || (at == next_special && lit.size() > special_len)) {
                    next_special = at;
                    special_len = lit.size();
                    special_id = id;
                }
            }
        }
        std::string_view raw = text.substr(pos, next_special - pos);
        for (std::string_view piece : pretokenize(raw)) {
            TokenSequence ids = encode_piece(piece);
            out.insert(out.end(), ids.begin(), ids.end());
        }
        if (special_id >= 0) {
            out.push_back(special_id);
            pos = next_special + special_len;
        } else {
            pos = text.size();
        }
    }
    return out;
}

std::string Tokenizer::decode(const TokenSequence& ids) const {
    std::string out;
    for (Token id : ids) {
        out += decode_token(id);
    }
    return out;
}

std::string Tokenizer::decode_token(Token id) const {
    if (id < 0 || id >= n_ids_ || !id_used_[std::size_t(id)]) {
        throw std::runtime_error("tokenizer: unknown token id " + std::to_string(id));
    }
    return id_to_text_[std::size_t(id)];
}

Token Tokenizer::single_token(std::string_view text) const {
    TokenSequence ids = encode(text, /*allow_special=*/true);
    return ids.size() == 1 ? ids[0] : -1;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    json vocab = json::object();
    for (const auto& [text, id] : vocab_) {
        vocab[bytes_to_utf8(text)] = id;
    }
    json merges = json::array();
    for (const auto& [l, r] : merges_) {
        merges.push_back({bytes_to_utf8(l), bytes_to_utf8(r)});
    }
    json special = json::object();
    for (const auto& [text, id] : special_) {
        special[text] = id;
    }
    json j = {
        {"type", "byte_bpe"},
        {"vocab", vocab},
        {"merges", merges},
        {"special_tokens", special},
        {"begin_of_text", begin_of_text_literal_},
        {"stop_tokens", stop_literals_},
    };
    write_text_file(path, j.dump(2) + "\n");
}

}  // namespace flipscope
