#include "doctest.h"

#include <stdexcept>

#include "flipscope/types.hpp"

using namespace flipscope;

TEST_CASE("HeadId ordering is layer-major") {
    CHECK(HeadId{0, 5} < HeadId{1, 0});
    CHECK(HeadId{2, 3} < HeadId{2, 4});
    CHECK(HeadId{1, 1} == HeadId{1, 1});
    CHECK(HeadId{1, 1} != HeadId{1, 2});
}

TEST_CASE("HeadId string round trip") {
    CHECK(to_string(HeadId{3, 7}) == "(3, 7)");
    CHECK(head_id_from_string("(3, 7)") == HeadId{3, 7});
    CHECK(head_id_from_string("(3,7)") == HeadId{3, 7});
    CHECK(head_id_from_string("3.7") == HeadId{3, 7});
    CHECK(head_id_from_string(to_string(HeadId{12, 0})) == HeadId{12, 0});
    CHECK_THROWS_AS((void)head_id_from_string("nonsense"), std::runtime_error);
    CHECK_THROWS_AS((void)head_id_from_string(""), std::runtime_error);
}

TEST_CASE("ModelConfig head arithmetic") {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 8;
    CHECK(c.total_heads() == 32);
    CHECK(c.head_index(HeadId{0, 0}) == 0);
    CHECK(c.head_index(HeadId{1, 0}) == 8);
    CHECK(c.head_index(HeadId{3, 7}) == 31);
    CHECK(c.contains(HeadId{3, 7}));
    CHECK_FALSE(c.contains(HeadId{4, 0}));
    CHECK_FALSE(c.contains(HeadId{0, 8}));
    CHECK_FALSE(c.contains(HeadId{-1, 0}));
}

TEST_CASE("ModelConfig validate rejects broken shapes") {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_model = 32;
    c.d_head = 8;
    c.d_ff = 64;
    c.vocab_size = 300;
    c.max_context = 128;
    CHECK_NOTHROW(c.validate());

    ModelConfig bad = c;
    bad.n_kv_heads = 3;  // heads must divide evenly into kv groups
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);

    bad = c;
    bad.n_layers = 0;
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);

    bad = c;
    bad.max_context = 0;
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);

    bad = c;
    bad.vocab_size = 0;
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);

    bad = c;
    bad.rope_scale_factor = 0.0f;
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("SpanRange membership") {
    const SpanRange s{10, 14};
    CHECK(s.size() == 4);
    CHECK(s.contains(10));
    CHECK(s.contains(13));
    CHECK_FALSE(s.contains(14));
    CHECK_FALSE(s.contains(9));
    CHECK(SpanRange{3, 3}.size() == 0);
}
