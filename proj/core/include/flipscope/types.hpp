#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace flipscope {

using Token = std::int32_t;

// Plain id list; round-trips through the tokenizer byte-exactly.
using TokenSequence = std::vector<Token>;

/// (layer, head) coordinate of one attention head. Ordering is layer-major so
/// top-k tie-breaks are deterministic across platforms.
struct HeadId {
    int layer = 0;
    int head  = 0;

    auto operator<=>(const HeadId&) const = default;
};

struct HeadIdHash {
    std::size_t operator()(const HeadId& h) const noexcept {
        return std::hash<std::int64_t>{}((std::int64_t(h.layer) << 32) | std::uint32_t(h.head));
    }
};

std::string to_string(const HeadId& h);          // "(layer, head)"
HeadId head_id_from_string(const std::string&);  // parses "(l, h)" or "l.h"

/// Hyperparameters of a loaded decoder-only model. Populated from the weight
/// container metadata and validated against tensor shapes.
struct ModelConfig {
    int    n_layers    = 0;
    int    n_heads     = 0;
    int    n_kv_heads  = 0;
    int    d_model     = 0;
    int    d_head      = 0;
    int    d_ff        = 0;
    int    vocab_size  = 0;
    int    max_context = 0;
    float  rope_base   = 10000.0f;
    float  norm_eps    = 1e-5f;

    // Optional long-context rope frequency scaling (disabled when factor == 1).
    float  rope_scale_factor      = 1.0f;
    float  rope_low_freq_factor   = 1.0f;
    float  rope_high_freq_factor  = 4.0f;
    int    rope_original_context  = 8192;

    bool   tied_embeddings = false;

    int total_heads() const { return n_layers * n_heads; }
    int head_index(const HeadId& h) const { return h.layer * n_heads + h.head; }
    bool contains(const HeadId& h) const {
        return h.layer >= 0 && h.layer < n_layers && h.head >= 0 && h.head < n_heads;
    }

    // Throws std::runtime_error when a structural invariant is broken.
    void validate() const;
};

/// Half-open token range [begin, end) in absolute sequence coordinates.
struct SpanRange {
    std::size_t begin = 0;
    std::size_t end   = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t pos) const { return pos >= begin && pos < end; }
    auto operator<=>(const SpanRange&) const = default;
};

}  // namespace flipscope
