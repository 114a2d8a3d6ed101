#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "flipscope/flip.hpp"
#include "flipscope/probe.hpp"
#include "flipscope/types.hpp"

namespace flipscope {

/// Per-head occurrence counts for the four flip/attend cases, plus how many
/// labeled conversations fed each case (flip records feed cases 1-2, keep
/// records cases 3-4), so rates are available alongside raw counts.
struct CaseCountTable {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<std::array<long, 4>> counts;  // layer-major, [case-1]
    std::array<long, 4> n_records{0, 0, 0, 0};

    CaseCountTable() = default;
    CaseCountTable(int layers, int heads);

    void add_labels(std::span<const CaseLabel> labels, bool flip_record);
    long count(HeadId id, int case_id) const;
    double rate(HeadId id, int case_id) const;  // count / records feeding that case
    std::size_t total_heads() const { return counts.size(); }
};

void write_case_table_tsv(const std::string& path, const CaseCountTable& table);
CaseCountTable read_case_table_tsv(const std::string& path);

/// A named selection of heads. `provenance` spells out how it was built
/// ("top10(case1)", "top5(case1+case2)", "top10(case1) \\ top10(case3)", ...)
/// and travels with the set through files and mask plans.
struct HeadSet {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<HeadId> members;  // sorted layer-major, unique
    std::string provenance;

    bool contains(HeadId id) const;
};

/// Heads ranked by one case's count (or rate), top k. Ties layer-major.
HeadSet top_heads_for_case(const CaseCountTable& table, int case_id, int k,
                           bool rate_ranking = false);

/// Heads ranked by the sum of two cases' counts (or rates), top k. This is
/// the default reading of "top heads of case A u case B".
HeadSet top_heads_for_case_pair(const CaseCountTable& table, int case_a, int case_b, int k,
                                bool rate_ranking = false);

HeadSet set_union(const HeadSet& a, const HeadSet& b);
HeadSet set_intersection(const HeadSet& a, const HeadSet& b);
HeadSet set_difference(const HeadSet& a, const HeadSet& b);

HeadSet head_set_from(std::span<const HeadId> heads, int n_layers, int n_heads,
                      std::string provenance);

MaskPlan mask_plan_from(const HeadSet& set, MaskScope scope);

void write_head_set_json(const std::string& path, const HeadSet& set);
HeadSet read_head_set_json(const std::string& path);

}  // namespace flipscope
