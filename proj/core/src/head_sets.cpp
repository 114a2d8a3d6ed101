#include "flipscope/head_sets.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

CaseCountTable::CaseCountTable(int layers, int heads)
    : n_layers(layers), n_heads(heads),
      counts(std::size_t(layers) * std::size_t(heads), {0, 0, 0, 0}) {}

void CaseCountTable::add_labels(std::span<const CaseLabel> labels, bool flip_record) {
    for (const CaseLabel& lab : labels) {
        if (lab.case_id < 1 || lab.case_id > 4) {
            throw std::runtime_error("case id " + std::to_string(lab.case_id) + " outside 1..4");
        }
        const bool flip_case = lab.case_id <= 2;
        if (flip_case != flip_record) {
            throw std::runtime_error("case " + std::to_string(lab.case_id) + " label from a " +
                                     (flip_record ? "flip" : "keep") + " record");
        }
        if (lab.head.layer < 0 || lab.head.layer >= n_layers || lab.head.head < 0 ||
            lab.head.head >= n_heads) {
            throw std::runtime_error("case label head " + to_string(lab.head) +
                                     " outside model bounds");
        }
        ++counts[std::size_t(lab.head.layer) * std::size_t(n_heads) + std::size_t(lab.head.head)]
                [std::size_t(lab.case_id - 1)];
    }
    if (flip_record) {
        ++n_records[0];
        ++n_records[1];
    } else {
        ++n_records[2];
        ++n_records[3];
    }
}

long CaseCountTable::count(HeadId id, int case_id) const {
    if (case_id < 1 || case_id > 4) {
        throw std::runtime_error("case id " + std::to_string(case_id) + " outside 1..4");
    }
    return counts[std::size_t(id.layer) * std::size_t(n_heads) + std::size_t(id.head)]
                 [std::size_t(case_id - 1)];
}

double CaseCountTable::rate(HeadId id, int case_id) const {
    const long n = n_records[std::size_t(case_id - 1)];
    return n == 0 ? 0.0 : double(count(id, case_id)) / double(n);
}

void write_case_table_tsv(const std::string& path, const CaseCountTable& table) {
    std::string out = "layer\thead\tcase1\tcase2\tcase3\tcase4\n";
    out += "# records\t-\t" + std::to_string(table.n_records[0]) + "\t" +
           std::to_string(table.n_records[1]) + "\t" + std::to_string(table.n_records[2]) + "\t" +
           std::to_string(table.n_records[3]) + "\n";
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            out += std::to_string(l) + "\t" + std::to_string(h);
            for (int c = 1; c <= 4; ++c) {
                out += "\t" + std::to_string(table.count({l, h}, c));
            }
            out += "\n";
        }
    }
    write_text_file(path, out);
}

CaseCountTable read_case_table_tsv(const std::string& path) {
    const std::vector<std::string> lines = split_lines(read_text_file(path));
    if (lines.size() < 3 || lines[0] != "layer\thead\tcase1\tcase2\tcase3\tcase4" ||
        lines[1].rfind("# records\t", 0) != 0) {
        throw std::runtime_error("case table '" + path + "': bad header");
    }
    std::array<long, 4> n_records{};
    {
        std::istringstream ss(lines[1]);
        std::string tag, dash, v;
        std::getline(ss, tag, '\t');
        std::getline(ss, dash, '\t');
        for (int c = 0; c < 4; ++c) {
            if (!std::getline(ss, v, '\t')) {
                throw std::runtime_error("case table '" + path + "': bad records line");
            }
            n_records[std::size_t(c)] = std::stol(v);
        }
    }
    struct Row {
        int layer, head;
        std::array<long, 4> c;
    };
    std::vector<Row> rows;
    int max_layer = -1, max_head = -1;
    for (std::size_t i = 2; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::istringstream ss(lines[i]);
        std::string f;
        Row r{};
        if (!std::getline(ss, f, '\t')) continue;
        r.layer = std::stoi(f);
        if (!std::getline(ss, f, '\t')) {
            throw std::runtime_error("case table '" + path + "': malformed row");
        }
        r.head = std::stoi(f);
        for (int c = 0; c < 4; ++c) {
            if (!std::getline(ss, f, '\t')) {
                throw std::runtime_error("case table '" + path + "': malformed row");
            }
            r.c[std::size_t(c)] = std::stol(f);
        }
        max_layer = std::max(max_layer, r.layer);
        max_head = std::max(max_head, r.head);
        rows.push_back(r);
    }
    CaseCountTable t(max_layer + 1, max_head + 1);
    t.n_records = n_records;
    if (rows.size() != t.total_heads()) {
        throw std::runtime_error("case table '" + path + "': wrong row count");
    }
    for (const Row& r : rows) {
        t.counts[std::size_t(r.layer) * std::size_t(t.n_heads) + std::size_t(r.head)] = r.c;
    }
    return t;
}

bool HeadSet::contains(HeadId id) const {
    return std::binary_search(members.begin(), members.end(), id);
}

static HeadSet ranked_heads(const CaseCountTable& table, int k, std::string provenance,
                            const std::vector<double>& key) {
    if (k < 0 || std::size_t(k) > table.total_heads()) {
        throw std::runtime_error("head selection: k " + std::to_string(k) +
                                 " outside 0.." + std::to_string(table.total_heads()));
    }
    std::vector<std::size_t> idx(table.total_heads());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (key[a] != key[b]) return key[a] > key[b];
        return a < b;
    });
    HeadSet s;
    s.n_layers = table.n_layers;
    s.n_heads = table.n_heads;
    s.provenance = std::move(provenance);
    for (int i = 0; i < k; ++i) {
        s.members.push_back({int(idx[std::size_t(i)]) / table.n_heads,
                             int(idx[std::size_t(i)]) % table.n_heads});
    }
    std::sort(s.members.begin(), s.members.end());
    return s;
}

HeadSet top_heads_for_case(const CaseCountTable& table, int case_id, int k, bool rate_ranking) {
    std::vector<double> key(table.total_heads());
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            const std::size_t i = std::size_t(l) * std::size_t(table.n_heads) + std::size_t(h);
            key[i] = rate_ranking ? table.rate({l, h}, case_id)
                                  : double(table.count({l, h}, case_id));
        }
    }
    return ranked_heads(table, k,
                        "top" + std::to_string(k) + "(case" + std::to_string(case_id) +
                            (rate_ranking ? ",rate" : "") + ")",
                        key);
}

HeadSet top_heads_for_case_pair(const CaseCountTable& table, int case_a, int case_b, int k,
                                bool rate_ranking) {
    std::vector<double> key(table.total_heads());
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_heads; ++h) {
            const std::size_t i = std::size_t(l) * std::size_t(table.n_heads) + std::size_t(h);
            key[i] = rate_ranking
                         ? table.rate({l, h}, case_a) + table.rate({l, h}, case_b)
                         : double(table.count({l, h}, case_a) + table.count({l, h}, case_b));
        }
    }
    return ranked_heads(table, k,
                        "top" + std::to_string(k) + "(case" + std::to_string(case_a) + "+case" +
                            std::to_string(case_b) + (rate_ranking ? ",rate" : "") + ")",
                        key);
}

static void check_same_census(const HeadSet& a, const HeadSet& b, const char* op) {
    if (a.n_layers != b.n_layers || a.n_heads != b.n_heads) {
        throw std::runtime_error(std::string("head set ") + op +
                                 ": operands from different head censuses");
    }
}

HeadSet set_union(const HeadSet& a, const HeadSet& b) {
    check_same_census(a, b, "union");
    HeadSet s;
    s.n_layers = a.n_layers;
    s.n_heads = a.n_heads;
    std::set_union(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                   std::back_inserter(s.members));
    s.provenance = "(" + a.provenance + ") u (" + b.provenance + ")";
    return s;
}

HeadSet set_intersection(const HeadSet& a, const HeadSet& b) {
    check_same_census(a, b, "intersection");
    HeadSet s;
    s.n_layers = a.n_layers;
    s.n_heads = a.n_heads;
    std::set_intersection(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                          std::back_inserter(s.members));
    s.provenance = "(" + a.provenance + ") n (" + b.provenance + ")";
    return s;
}

HeadSet set_difference(const HeadSet& a, const HeadSet& b) {
    check_same_census(a, b, "difference");
    HeadSet s;
    s.n_layers = a.n_layers;
    s.n_heads = a.n_heads;
    std::set_difference(a.members.begin(), a.members.end(), b.members.begin(), b.members.end(),
                        std::back_inserter(s.members));
    s.provenance = "(" + a.provenance + ") \\ (" + b.provenance + ")";
    return s;
}

HeadSet head_set_from(std::span<const HeadId> heads, int n_layers, int n_heads,
                      std::string provenance) {
    HeadSet s;
    s.n_layers = n_layers;
    s.n_heads = n_heads;
    s.provenance = std::move(provenance);
    s.members.assign(heads.begin(), heads.end());
    std::sort(s.members.begin(), s.members.end());
    s.members.erase(std::unique(s.members.begin(), s.members.end()), s.members.end());
    for (const HeadId& h : s.members) {
        if (h.layer < 0 || h.layer >= n_layers || h.head < 0 || h.head >= n_heads) {
            throw std::runtime_error("head set '" + s.provenance + "': head " + to_string(h) +
                                     " outside model bounds");
        }
    }
    return s;
}

MaskPlan mask_plan_from(const HeadSet& set, MaskScope scope) {
    MaskPlan plan;
    plan.heads = set.members;
    plan.scope = scope;
    plan.id = set.provenance + " @ " + mask_scope_name(scope);
    return plan;
}

void write_head_set_json(const std::string& path, const HeadSet& set) {
    ordered_json j;
    j["n_layers"] = set.n_layers;
    j["n_heads"] = set.n_heads;
    j["provenance"] = set.provenance;
    ordered_json arr = ordered_json::array();
    for (const HeadId& h : set.members) arr.push_back(to_string(h));
    j["heads"] = arr;
    write_text_file(path, j.dump(2) + "\n");
}

HeadSet read_head_set_json(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const std::exception& e) {
        throw std::runtime_error("head set file '" + path + "': " + e.what());
    }
    std::vector<HeadId> heads;
    for (const auto& item : j.at("heads")) {
        heads.push_back(head_id_from_string(item.get<std::string>()));
    }
    return head_set_from(heads, j.at("n_layers").get<int>(), j.at("n_heads").get<int>(),
                         j.at("provenance").get<std::string>());
}

}  // namespace flipscope
