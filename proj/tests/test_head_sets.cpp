#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <vector>

#include "flipscope/head_sets.hpp"
#include "flipscope/util.hpp"

using namespace flipscope;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "flipscope-tests" / "head-sets";
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<CaseLabel> labels(std::initializer_list<CaseLabel> ls) { return {ls}; }

// brute-force membership check against which the sorted-vector ops are verified
bool slow_contains(const HeadSet& s, HeadId id) {
    for (const HeadId& m : s.members) {
        if (m == id) return true;
    }
    return false;
}

HeadSet random_set(std::mt19937_64& rng, int n_layers, int n_heads, const char* name) {
    std::vector<HeadId> picks;
    for (int l = 0; l < n_layers; ++l) {
        for (int h = 0; h < n_heads; ++h) {
            if (rng() % 2) picks.push_back({l, h});
        }
    }
    return head_set_from(picks, n_layers, n_heads, name);
}

}  // namespace

TEST_CASE("case table accumulates labels and per-case record counts") {
    CaseCountTable t(2, 3);
    CHECK(t.total_heads() == 6);

    // flip record touching two heads, one of them in both flip cases
    t.add_labels(labels({{{0, 1}, 1}, {{1, 2}, 1}, {{1, 2}, 2}}), true);
    // keep record
    t.add_labels(labels({{{0, 1}, 3}, {{0, 0}, 4}}), false);
    // a record may carry no labels but still counts toward the denominators
    t.add_labels({}, true);
    t.add_labels({}, false);

    CHECK(t.count({0, 1}, 1) == 1);
    CHECK(t.count({1, 2}, 1) == 1);
    CHECK(t.count({1, 2}, 2) == 1);
    CHECK(t.count({0, 1}, 3) == 1);
    CHECK(t.count({0, 0}, 4) == 1);
    CHECK(t.count({0, 0}, 1) == 0);
    CHECK(t.n_records == std::array<long, 4>{2, 2, 2, 2});

    CHECK(t.rate({0, 1}, 1) == doctest::Approx(0.5));
    CHECK(t.rate({1, 2}, 2) == doctest::Approx(0.5));
    CHECK(t.rate({0, 0}, 4) == doctest::Approx(0.5));
    CHECK(t.rate({0, 0}, 1) == 0.0);
}

TEST_CASE("case table rejects malformed labels") {
    CaseCountTable t(2, 3);
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{0, 0}, 5}}), true),
                         doctest::Contains("outside 1..4"), std::runtime_error);
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{0, 0}, 0}}), false),
                         doctest::Contains("outside 1..4"), std::runtime_error);
    // flip cases from a keep record and vice versa
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{0, 0}, 1}}), false),
                         doctest::Contains("label from a keep record"), std::runtime_error);
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{0, 0}, 3}}), true),
                         doctest::Contains("label from a flip record"), std::runtime_error);
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{2, 0}, 1}}), true),
                         doctest::Contains("outside model bounds"), std::runtime_error);
    CHECK_THROWS_WITH_AS(t.add_labels(labels({{{0, 3}, 1}}), true),
                         doctest::Contains("outside model bounds"), std::runtime_error);
    CHECK_THROWS_WITH_AS(t.count({0, 0}, 5), doctest::Contains("outside 1..4"),
                         std::runtime_error);
}

TEST_CASE("rate uses the record count of the queried case") {
    CaseCountTable t(1, 2);
    t.add_labels(labels({{{0, 0}, 1}}), true);
    t.add_labels(labels({{{0, 0}, 1}}), true);
    t.add_labels(labels({{{0, 0}, 1}, {{0, 1}, 2}}), true);
    t.add_labels(labels({{{0, 1}, 3}}), false);
    // 3 flip records, 1 keep record
    CHECK(t.rate({0, 0}, 1) == 1.0);
    CHECK(t.rate({0, 1}, 2) == doctest::Approx(1.0 / 3.0));
    CHECK(t.rate({0, 1}, 3) == 1.0);
    CHECK(t.rate({0, 0}, 4) == 0.0);

    CaseCountTable empty(1, 1);
    CHECK(empty.rate({0, 0}, 1) == 0.0);  // no records yet, not a division by zero
}

TEST_CASE("case table TSV round trips") {
    CaseCountTable t(3, 2);
    std::mt19937_64 rng(404);
    for (int i = 0; i < 40; ++i) {
        const HeadId h{int(rng() % 3), int(rng() % 2)};
        const bool flip = rng() % 2;
        const int case_id = flip ? 1 + int(rng() % 2) : 3 + int(rng() % 2);
        t.add_labels(labels({{h, case_id}}), flip);
    }
    const auto path = (temp_dir() / "cases.tsv").string();
    write_case_table_tsv(path, t);

    const CaseCountTable back = read_case_table_tsv(path);
    CHECK(back.n_layers == t.n_layers);
    CHECK(back.n_heads == t.n_heads);
    CHECK(back.n_records == t.n_records);
    CHECK(back.counts == t.counts);
}

TEST_CASE("case table TSV rejects damaged files") {
    const auto write = [](const char* name, const std::string& text) {
        const auto path = (temp_dir() / name).string();
        write_text_file(path, text);
        return path;
    };
    CHECK_THROWS_WITH_AS(read_case_table_tsv(write("h.tsv", "layer\thead\tcase1\n1\n2\n")),
                         doctest::Contains("bad header"), std::runtime_error);
    CHECK_THROWS_WITH_AS(
        read_case_table_tsv(write("r.tsv", "layer\thead\tcase1\tcase2\tcase3\tcase4\n"
                                           "# records\t-\t1\t1\n"
                                           "0\t0\t0\t0\t0\t0\n")),
        doctest::Contains("bad records line"), std::runtime_error);
    CHECK_THROWS_WITH_AS(
        read_case_table_tsv(write("m.tsv", "layer\thead\tcase1\tcase2\tcase3\tcase4\n"
                                           "# records\t-\t1\t1\t1\t1\n"
                                           "0\t0\t0\t0\n")),
        doctest::Contains("malformed row"), std::runtime_error);
    // grid with a hole: max indices say 2x2 but only 3 rows present
    CHECK_THROWS_WITH_AS(
        read_case_table_tsv(write("w.tsv", "layer\thead\tcase1\tcase2\tcase3\tcase4\n"
                                           "# records\t-\t1\t1\t1\t1\n"
                                           "0\t0\t0\t0\t0\t0\n"
                                           "0\t1\t0\t0\t0\t0\n"
                                           "1\t1\t0\t0\t0\t0\n")),
        doctest::Contains("wrong row count"), std::runtime_error);
}

TEST_CASE("top heads ranked by count with layer-major ties") {
    CaseCountTable t(2, 2);
    // case 1 counts: (0,0)=2 (0,1)=5 (1,0)=2 (1,1)=0
    for (int i = 0; i < 2; ++i) t.add_labels(labels({{{0, 0}, 1}}), true);
    for (int i = 0; i < 5; ++i) t.add_labels(labels({{{0, 1}, 1}}), true);
    for (int i = 0; i < 2; ++i) t.add_labels(labels({{{1, 0}, 1}}), true);

    const HeadSet top1 = top_heads_for_case(t, 1, 1);
    CHECK(top1.members == std::vector<HeadId>{{0, 1}});
    CHECK(top1.provenance == "top1(case1)");

    // tie between (0,0) and (1,0) resolves to the lower flat index
    const HeadSet top2 = top_heads_for_case(t, 1, 2);
    CHECK(top2.members == std::vector<HeadId>{{0, 0}, {0, 1}});

    const HeadSet all = top_heads_for_case(t, 1, 4);
    CHECK(all.members == std::vector<HeadId>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    CHECK(all.n_layers == 2);
    CHECK(all.n_heads == 2);

    CHECK(top_heads_for_case(t, 1, 0).members.empty());
    CHECK_THROWS_WITH_AS(top_heads_for_case(t, 1, 5), doctest::Contains("outside 0..4"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(top_heads_for_case(t, 1, -1), doctest::Contains("head selection"),
                         std::runtime_error);
}

TEST_CASE("rate ranking can reorder heads relative to count ranking") {
    CaseCountTable t(1, 2);
    // head 0 fires in 3 of 6 flip records (count 3, rate 0.5);
    // head 1 fires in the single keep record (count 1, rate 1.0)
    for (int i = 0; i < 3; ++i) t.add_labels(labels({{{0, 0}, 1}}), true);
    for (int i = 0; i < 3; ++i) t.add_labels({}, true);
    t.add_labels(labels({{{0, 1}, 3}}), false);

    CHECK(top_heads_for_case(t, 1, 1).members == std::vector<HeadId>{{0, 0}});
    CHECK(top_heads_for_case(t, 3, 1).members == std::vector<HeadId>{{0, 1}});
    CHECK(top_heads_for_case(t, 1, 1, true).provenance == "top1(case1,rate)");

    // pair ranking sums the two cases; counts pick head 0 (3+0 vs 0+1),
    // rates pick head 1 (0.5+0.0 vs 0.0+1.0)
    CHECK(top_heads_for_case_pair(t, 1, 3, 1).members == std::vector<HeadId>{{0, 0}});
    CHECK(top_heads_for_case_pair(t, 1, 3, 1, true).members == std::vector<HeadId>{{0, 1}});
    CHECK(top_heads_for_case_pair(t, 1, 2, 1).provenance == "top1(case1+case2)");
    CHECK(top_heads_for_case_pair(t, 1, 2, 1, true).provenance == "top1(case1+case2,rate)");
}

TEST_CASE("head_set_from sorts, dedupes, and bounds-checks") {
    const std::vector<HeadId> raw = {{1, 0}, {0, 2}, {1, 0}, {0, 0}};
    const HeadSet s = head_set_from(raw, 2, 3, "picked");
    CHECK(s.members == std::vector<HeadId>{{0, 0}, {0, 2}, {1, 0}});
    CHECK(s.provenance == "picked");
    CHECK(s.contains({0, 2}));
    CHECK(!s.contains({1, 2}));

    const std::vector<HeadId> bad = {{0, 3}};
    CHECK_THROWS_WITH_AS(head_set_from(bad, 2, 3, "oob"),
                         doctest::Contains("outside model bounds"), std::runtime_error);
    CHECK(head_set_from({}, 2, 3, "empty").members.empty());
}

TEST_CASE("set algebra on explicit sets") {
    const HeadSet a = head_set_from(std::vector<HeadId>{{0, 0}, {0, 1}, {1, 1}}, 2, 2, "A");
    const HeadSet b = head_set_from(std::vector<HeadId>{{0, 1}, {1, 0}}, 2, 2, "B");

    const HeadSet u = set_union(a, b);
    CHECK(u.members == std::vector<HeadId>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    CHECK(u.provenance == "(A) u (B)");

    const HeadSet i = set_intersection(a, b);
    CHECK(i.members == std::vector<HeadId>{{0, 1}});
    CHECK(i.provenance == "(A) n (B)");

    const HeadSet d = set_difference(a, b);
    CHECK(d.members == std::vector<HeadId>{{0, 0}, {1, 1}});
    CHECK(d.provenance == "(A) \\ (B)");

    const HeadSet other = head_set_from(std::vector<HeadId>{{0, 0}}, 3, 2, "C");
    CHECK_THROWS_WITH_AS(set_union(a, other), doctest::Contains("different head censuses"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(set_intersection(a, other),
                         doctest::Contains("different head censuses"), std::runtime_error);
    CHECK_THROWS_WITH_AS(set_difference(a, other),
                         doctest::Contains("different head censuses"), std::runtime_error);
}

TEST_CASE("set algebra laws hold on random sets") {
    std::mt19937_64 rng(2718);
    const int L = 3, H = 4;
    std::vector<HeadId> everything;
    for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) everything.push_back({l, h});
    }
    const HeadSet full = head_set_from(everything, L, H, "all");

    for (int trial = 0; trial < 200; ++trial) {
        const HeadSet a = random_set(rng, L, H, "a");
        const HeadSet b = random_set(rng, L, H, "b");
        const HeadSet c = random_set(rng, L, H, "c");

        CHECK(set_union(a, b).members == set_union(b, a).members);
        CHECK(set_intersection(a, b).members == set_intersection(b, a).members);
        CHECK(set_union(set_union(a, b), c).members == set_union(a, set_union(b, c)).members);
        CHECK(set_intersection(a, set_union(b, c)).members ==
              set_union(set_intersection(a, b), set_intersection(a, c)).members);
        // De Morgan through complements against the full census
        CHECK(set_difference(full, set_union(a, b)).members ==
              set_intersection(set_difference(full, a), set_difference(full, b)).members);
        CHECK(set_difference(a, b).members ==
              set_intersection(a, set_difference(full, b)).members);
        CHECK(set_union(a, a).members == a.members);
        CHECK(set_union(set_intersection(a, b), a).members == a.members);
        CHECK(set_difference(a, a).members.empty());

        // membership agrees with the brute-force scan
        for (const HeadId& h : everything) {
            CHECK(set_union(a, b).contains(h) == (slow_contains(a, h) || slow_contains(b, h)));
            CHECK(set_intersection(a, b).contains(h) ==
                  (slow_contains(a, h) && slow_contains(b, h)));
            CHECK(set_difference(a, b).contains(h) ==
                  (slow_contains(a, h) && !slow_contains(b, h)));
        }
    }
}

TEST_CASE("mask plans carry the set and scope") {
    const HeadSet s = head_set_from(std::vector<HeadId>{{1, 2}, {0, 1}}, 2, 4, "top2(case1)");
    const MaskPlan plan = mask_plan_from(s, MaskScope::second_turn_only);
    CHECK(plan.heads == std::vector<HeadId>{{0, 1}, {1, 2}});
    CHECK(plan.scope == MaskScope::second_turn_only);
    CHECK(plan.id == "top2(case1) @ second-turn-only");
}

TEST_CASE("head set JSON round trips") {
    const HeadSet s =
        head_set_from(std::vector<HeadId>{{2, 3}, {0, 0}, {1, 7}}, 4, 8, "top3(case1+case2)");
    const auto path = (temp_dir() / "set.json").string();
    write_head_set_json(path, s);

    const HeadSet back = read_head_set_json(path);
    CHECK(back.members == s.members);
    CHECK(back.n_layers == 4);
    CHECK(back.n_heads == 8);
    CHECK(back.provenance == s.provenance);

    const auto bad = (temp_dir() / "bad.json").string();
    write_text_file(bad, "not json");
    CHECK_THROWS_WITH_AS(read_head_set_json(bad), doctest::Contains("head set file"),
                         std::runtime_error);
    const auto missing = (temp_dir() / "missing-key.json").string();
    write_text_file(missing, "{\"n_layers\": 2}");
    CHECK_THROWS(read_head_set_json(missing));
}
