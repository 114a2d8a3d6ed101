#include "flipscope/types.hpp"

#include <cstdio>
#include <stdexcept>

namespace flipscope {

std::string to_string(const HeadId& h) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "(%d, %d)", h.layer, h.head);
    return std::string(buf);
}

HeadId head_id_from_string(const std::string& s) {
    int layer = 0;
    int head  = 0;
    if (std::sscanf(s.c_str(), "(%d, %d)", &layer, &head) == 2 ||
        std::sscanf(s.c_str(), "(%d,%d)", &layer, &head) == 2 ||
        std::sscanf(s.c_str(), "%d.%d", &layer, &head) == 2) {
        return HeadId{layer, head};
    }
    throw std::runtime_error("cannot parse head id: " + s);
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::runtime_error("model config: " + msg); };
    if (n_layers <= 0) fail("n_layers must be positive");
    if (n_heads <= 0) fail("n_heads must be positive");
    if (n_kv_heads <= 0 || n_heads % n_kv_heads != 0) fail("n_kv_heads must divide n_heads");
    if (d_model <= 0 || d_head <= 0) fail("d_model and d_head must be positive");
    if (d_ff <= 0) fail("d_ff must be positive");
    if (vocab_size <= 0) fail("vocab_size must be positive");
    if (max_context < 1) fail("max_context must be >= 1");
    if (rope_base <= 0.0f) fail("rope_base must be positive");
    if (norm_eps <= 0.0f) fail("norm_eps must be positive");
    if (rope_scale_factor <= 0.0f) fail("rope_scale_factor must be positive");
}

}  // namespace flipscope
