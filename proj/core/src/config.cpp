#include "flipscope/config.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

std::size_t SplitConfig::cell_total() const {
    return lengths.size() * depths.size() * std::size_t(per_cell);
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;

    // Detection: 4 lengths x 10 depths x 5 = 200 per needle; 3 needles -> 600.
    c.detect_split.lengths = {1250, 2500, 3750, 5000};
    for (int i = 0; i < 10; ++i) c.detect_split.depths.push_back(0.05 + 0.1 * i);
    c.detect_split.per_cell = 5;
    c.detect_split.seed = 11;

    // Flip measurement: 4 x 10 x 10 = 400 per needle; 1 test needle -> 400.
    c.flip_split.lengths = c.detect_split.lengths;
    c.flip_split.depths = c.detect_split.depths;
    c.flip_split.per_cell = 10;
    c.flip_split.seed = 13;

    // Case labeling: reduced-variability preset, 20 per needle; 27 -> 540.
    c.label_split.lengths = {3000};
    c.label_split.depths = {0.2, 0.4, 0.6, 0.8};
    c.label_split.per_cell = 5;
    c.label_split.seed = 17;

    // Held-out masking evaluation: 80 per needle; 5 -> 400.
    c.test_split.lengths = {3000};
    c.test_split.depths = {0.2, 0.4, 0.6, 0.8};
    c.test_split.per_cell = 20;
    c.test_split.seed = 19;

    auto scenario = [&](std::string name, std::string kind, int a, int b, int k,
                        std::vector<HeadId> heads = {}) {
        ScenarioConfig s;
        s.name = std::move(name);
        s.kind = std::move(kind);
        s.case_a = a;
        s.case_b = b;
        s.k = k;
        s.heads = std::move(heads);
        c.scenarios.push_back(std::move(s));
    };
    scenario("no-mask", "none", 0, 0, 0);
    scenario("case1-minus-case3", "diff", 1, 3, 10);
    scenario("case1-union-case2-k5", "pair_sum", 1, 2, 5);
    scenario("case1-union-case2-k10", "pair_sum", 1, 2, 10);
    scenario("case1-union-case2-k15", "pair_sum", 1, 2, 15);
    scenario("case1-union-case2-k20", "pair_sum", 1, 2, 20);
    scenario("head-11-23", "heads", 0, 0, 0, {{11, 23}});
    scenario("heads-11-23-17-25", "heads", 0, 0, 0, {{11, 23}, {17, 25}});
    return c;
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& why) { throw std::runtime_error("config: " + why); };
    if (backend != "model" && backend != "scripted") {
        fail("backend must be 'model' or 'scripted', got '" + backend + "'");
    }
    if (backend == "model" && (weights.empty() || tokenizer_file.empty())) {
        fail("model backend needs 'weights' and 'tokenizer'");
    }
    if (backend == "scripted" && script.empty()) {
        fail("scripted backend needs 'script'");
    }
    auto check_split = [&](const SplitConfig& s, const char* name) {
        for (double d : s.depths) {
            if (d < 0.0 || d > 1.0) fail(std::string(name) + ": depth outside [0, 1]");
        }
        for (std::size_t l : s.lengths) {
            if (l == 0) fail(std::string(name) + ": zero length");
        }
        if (s.per_cell < 1) fail(std::string(name) + ": per_cell < 1");
    };
    check_split(detect_split, "detect split");
    check_split(flip_split, "flip split");
    check_split(label_split, "label split");
    check_split(test_split, "test split");
    if (protocol.correctness_threshold < 0.0 || protocol.correctness_threshold > 1.0) {
        fail("correctness threshold outside [0, 1]");
    }
    if (protocol.max_new_first < 1 || protocol.max_new_second < 1) {
        fail("max_new must be at least 1");
    }
    for (int k : sweep_k_list) {
        if (k < 1) fail("sweep k list must be positive");
    }
    if (random_trials < 1) fail("random_trials < 1");
    if (trace_top_k < 1) fail("trace_top_k < 1");
    if (threads < 0) fail("threads < 0");
    if (yes_variants.empty() || no_variants.empty()) fail("empty answer variant list");
    std::set<std::string> names;
    for (const ScenarioConfig& s : scenarios) {
        if (s.name.empty()) fail("scenario with empty name");
        if (!names.insert(s.name).second) fail("duplicate scenario name '" + s.name + "'");
        if (s.kind == "none") continue;
        if (s.kind == "heads") {
            if (s.heads.empty()) fail("scenario '" + s.name + "': empty head list");
        } else if (s.kind == "case_top") {
            if (s.case_a < 1 || s.case_a > 4) fail("scenario '" + s.name + "': case outside 1..4");
            if (s.k < 1) fail("scenario '" + s.name + "': k < 1");
        } else if (s.kind == "pair_sum" || s.kind == "diff") {
            if (s.case_a < 1 || s.case_a > 4 || s.case_b < 1 || s.case_b > 4) {
                fail("scenario '" + s.name + "': case outside 1..4");
            }
            if (s.k < 1) fail("scenario '" + s.name + "': k < 1");
        } else {
            fail("scenario '" + s.name + "': unknown kind '" + s.kind + "'");
        }
    }
    for (const auto& d : downstream_datasets) {
        if (d.name.empty() || d.path.empty()) fail("downstream dataset needs name and path");
    }
}

// Doubles are written as fixed-format strings for readability; accept both
// that form and plain JSON numbers on the way in.
static double as_double(const ordered_json& v, const std::string& what) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        try {
            return std::stod(v.get<std::string>());
        } catch (const std::exception&) {
        }
    }
    throw std::runtime_error("config: '" + what + "' is not a number");
}

static void check_keys(const ordered_json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end()) {
            throw std::runtime_error("config: unknown key '" + where + key + "'");
        }
    }
}

static void overlay_split(SplitConfig& s, const ordered_json& j, const std::string& where) {
    check_keys(j, where, {"needles", "lengths", "depths", "per_cell", "seed", "with_bot_marker"});
    if (j.contains("needles")) s.needles = j["needles"].get<std::string>();
    if (j.contains("lengths")) s.lengths = j["lengths"].get<std::vector<std::size_t>>();
    if (j.contains("depths")) {
        s.depths.clear();
        for (const auto& d : j["depths"]) s.depths.push_back(as_double(d, where + "depths"));
    }
    if (j.contains("per_cell")) s.per_cell = j["per_cell"].get<int>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("with_bot_marker")) s.with_bot_marker = j["with_bot_marker"].get<bool>();
}

static std::vector<HeadId> parse_head_list(const ordered_json& arr) {
    std::vector<HeadId> heads;
    for (const auto& h : arr) heads.push_back(head_id_from_string(h.get<std::string>()));
    return heads;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const std::exception& e) {
        throw std::runtime_error("config file '" + path + "': " + e.what());
    }
    ExperimentConfig c = defaults();
    check_keys(j, "", {"backend", "weights", "tokenizer", "script", "system_prompt",
                       "chat_template", "protocol", "answers", "corpus_dir", "splits",
                       "detect_marker_variants", "masking", "uncertainty", "downstream",
                       "trace_top_k", "threads", "output_dir"});
    if (j.contains("backend")) c.backend = j["backend"].get<std::string>();
    if (j.contains("weights")) c.weights = j["weights"].get<std::string>();
    if (j.contains("tokenizer")) c.tokenizer_file = j["tokenizer"].get<std::string>();
    if (j.contains("script")) c.script = j["script"].get<std::string>();
    if (j.contains("system_prompt")) c.system_prompt = j["system_prompt"].get<std::string>();
    if (j.contains("chat_template")) {
        const auto& t = j["chat_template"];
        check_keys(t, "chat_template.",
                   {"begin_of_text", "system", "user", "assistant_prefix", "assistant_suffix"});
        if (t.contains("begin_of_text")) {
            c.chat_template.begin_of_text = t["begin_of_text"].get<std::string>();
        }
        if (t.contains("system")) c.chat_template.system_template = t["system"].get<std::string>();
        if (t.contains("user")) c.chat_template.user_template = t["user"].get<std::string>();
        if (t.contains("assistant_prefix")) {
            c.chat_template.assistant_prefix = t["assistant_prefix"].get<std::string>();
        }
        if (t.contains("assistant_suffix")) {
            c.chat_template.assistant_suffix = t["assistant_suffix"].get<std::string>();
        }
    }
    if (j.contains("protocol")) {
        const auto& p = j["protocol"];
        check_keys(p, "protocol.", {"reevaluation_prompt", "question_template",
                                    "correctness_threshold", "max_new_first", "max_new_second"});
        if (p.contains("reevaluation_prompt")) {
            c.protocol.reevaluation_prompt = p["reevaluation_prompt"].get<std::string>();
        }
        if (p.contains("question_template")) {
            c.protocol.question_template = p["question_template"].get<std::string>();
        }
        if (p.contains("correctness_threshold")) {
            c.protocol.correctness_threshold =
                as_double(p["correctness_threshold"], "protocol.correctness_threshold");
        }
        if (p.contains("max_new_first")) c.protocol.max_new_first = p["max_new_first"].get<int>();
        if (p.contains("max_new_second")) {
            c.protocol.max_new_second = p["max_new_second"].get<int>();
        }
    }
    if (j.contains("answers")) {
        const auto& a = j["answers"];
        check_keys(a, "answers.", {"yes", "no"});
        if (a.contains("yes")) c.yes_variants = a["yes"].get<std::vector<std::string>>();
        if (a.contains("no")) c.no_variants = a["no"].get<std::vector<std::string>>();
    }
    if (j.contains("corpus_dir")) c.corpus_dir = j["corpus_dir"].get<std::string>();
    if (j.contains("splits")) {
        const auto& s = j["splits"];
        check_keys(s, "splits.", {"detect", "flip", "label", "test"});
        if (s.contains("detect")) overlay_split(c.detect_split, s["detect"], "splits.detect.");
        if (s.contains("flip")) overlay_split(c.flip_split, s["flip"], "splits.flip.");
        if (s.contains("label")) overlay_split(c.label_split, s["label"], "splits.label.");
        if (s.contains("test")) overlay_split(c.test_split, s["test"], "splits.test.");
    }
    if (j.contains("detect_marker_variants")) {
        c.detect_marker_variants = j["detect_marker_variants"].get<bool>();
    }
    if (j.contains("masking")) {
        const auto& m = j["masking"];
        check_keys(m, "masking.", {"k_list", "random_trials", "seed", "scope", "sweep_variant"});
        if (m.contains("k_list")) c.sweep_k_list = m["k_list"].get<std::vector<int>>();
        if (m.contains("random_trials")) c.random_trials = m["random_trials"].get<int>();
        if (m.contains("seed")) c.mask_seed = m["seed"].get<std::uint64_t>();
        if (m.contains("scope")) c.mask_scope = mask_scope_from_name(m["scope"].get<std::string>());
        if (m.contains("sweep_variant")) c.sweep_variant = m["sweep_variant"].get<std::string>();
    }
    if (j.contains("uncertainty")) {
        const auto& u = j["uncertainty"];
        check_keys(u, "uncertainty.", {"scenarios", "rate_ranking", "labels_include_mirrored"});
        if (u.contains("rate_ranking")) c.rate_ranking = u["rate_ranking"].get<bool>();
        if (u.contains("labels_include_mirrored")) {
            c.labels_include_mirrored = u["labels_include_mirrored"].get<bool>();
        }
        if (u.contains("scenarios")) {
            c.scenarios.clear();
            for (const auto& js : u["scenarios"]) {
                check_keys(js, "uncertainty.scenarios[].", {"name", "kind", "cases", "k", "heads"});
                ScenarioConfig s;
                s.name = js.at("name").get<std::string>();
                s.kind = js.value("kind", std::string("none"));
                if (js.contains("cases")) {
                    const auto cases = js["cases"].get<std::vector<int>>();
                    if (cases.size() >= 1) s.case_a = cases[0];
                    if (cases.size() >= 2) s.case_b = cases[1];
                }
                if (js.contains("k")) s.k = js["k"].get<int>();
                if (js.contains("heads")) s.heads = parse_head_list(js["heads"]);
                c.scenarios.push_back(std::move(s));
            }
        }
    }
    if (j.contains("downstream")) {
        const auto& d = j["downstream"];
        check_keys(d, "downstream.", {"datasets", "first_turn_template", "reevaluation_prompt",
                                      "max_new_first", "max_new_second"});
        if (d.contains("datasets")) {
            for (const auto& jd : d["datasets"]) {
                check_keys(jd, "downstream.datasets[].", {"name", "path"});
                c.downstream_datasets.push_back(
                    {jd.at("name").get<std::string>(), jd.at("path").get<std::string>()});
            }
        }
        if (d.contains("first_turn_template")) {
            c.downstream.first_turn_template = d["first_turn_template"].get<std::string>();
        }
        if (d.contains("reevaluation_prompt")) {
            c.downstream.reevaluation_prompt = d["reevaluation_prompt"].get<std::string>();
        }
        if (d.contains("max_new_first")) c.downstream.max_new_first = d["max_new_first"].get<int>();
        if (d.contains("max_new_second")) {
            c.downstream.max_new_second = d["max_new_second"].get<int>();
        }
    }
    if (j.contains("trace_top_k")) c.trace_top_k = j["trace_top_k"].get<int>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    c.validate();
    return c;
}

static ordered_json split_json(const SplitConfig& s) {
    ordered_json j;
    j["needles"] = s.needles;
    j["lengths"] = s.lengths;
    ordered_json depths = ordered_json::array();
    for (double d : s.depths) depths.push_back(format_fixed(d, 4));
    j["depths"] = depths;
    j["per_cell"] = s.per_cell;
    j["seed"] = s.seed;
    j["with_bot_marker"] = s.with_bot_marker;
    return j;
}

static ordered_json config_json(const ExperimentConfig& c) {
    ordered_json j;
    j["backend"] = c.backend;
    j["weights"] = c.weights;
    j["tokenizer"] = c.tokenizer_file;
    j["script"] = c.script;
    j["system_prompt"] = c.system_prompt;
    {
        ordered_json t;
        t["begin_of_text"] = c.chat_template.begin_of_text;
        t["system"] = c.chat_template.system_template;
        t["user"] = c.chat_template.user_template;
        t["assistant_prefix"] = c.chat_template.assistant_prefix;
        t["assistant_suffix"] = c.chat_template.assistant_suffix;
        j["chat_template"] = t;
    }
    {
        ordered_json p;
        p["reevaluation_prompt"] = c.protocol.reevaluation_prompt;
        p["question_template"] = c.protocol.question_template;
        p["correctness_threshold"] = format_fixed(c.protocol.correctness_threshold, 4);
        p["max_new_first"] = c.protocol.max_new_first;
        p["max_new_second"] = c.protocol.max_new_second;
        j["protocol"] = p;
    }
    {
        ordered_json a;
        a["yes"] = c.yes_variants;
        a["no"] = c.no_variants;
        j["answers"] = a;
    }
    j["corpus_dir"] = c.corpus_dir;
    {
        ordered_json s;
        s["detect"] = split_json(c.detect_split);
        s["flip"] = split_json(c.flip_split);
        s["label"] = split_json(c.label_split);
        s["test"] = split_json(c.test_split);
        j["splits"] = s;
    }
    j["detect_marker_variants"] = c.detect_marker_variants;
    {
        ordered_json m;
        m["k_list"] = c.sweep_k_list;
        m["random_trials"] = c.random_trials;
        m["seed"] = c.mask_seed;
        m["scope"] = mask_scope_name(c.mask_scope);
        m["sweep_variant"] = c.sweep_variant;
        j["masking"] = m;
    }
    {
        ordered_json u;
        ordered_json arr = ordered_json::array();
        for (const ScenarioConfig& s : c.scenarios) {
            ordered_json js;
            js["name"] = s.name;
            js["kind"] = s.kind;
            js["cases"] = std::vector<int>{s.case_a, s.case_b};
            js["k"] = s.k;
            ordered_json heads = ordered_json::array();
            for (const HeadId& h : s.heads) heads.push_back(to_string(h));
            js["heads"] = heads;
            arr.push_back(js);
        }
        u["scenarios"] = arr;
        u["rate_ranking"] = c.rate_ranking;
        u["labels_include_mirrored"] = c.labels_include_mirrored;
        j["uncertainty"] = u;
    }
    {
        ordered_json d;
        ordered_json arr = ordered_json::array();
        for (const auto& ds : c.downstream_datasets) {
            ordered_json jd;
            jd["name"] = ds.name;
            jd["path"] = ds.path;
            arr.push_back(jd);
        }
        d["datasets"] = arr;
        d["first_turn_template"] = c.downstream.first_turn_template;
        d["reevaluation_prompt"] = c.downstream.reevaluation_prompt;
        d["max_new_first"] = c.downstream.max_new_first;
        d["max_new_second"] = c.downstream.max_new_second;
        j["downstream"] = d;
    }
    j["trace_top_k"] = c.trace_top_k;
    j["threads"] = c.threads;
    j["output_dir"] = c.output_dir;
    return j;
}

std::string ExperimentConfig::canonical_text() const {
    ordered_json j = config_json(*this);
    // execution-incidental fields: they cannot change results, so two runs of
    // the same experiment hash the same regardless of them
    j.erase("threads");
    j.erase("output_dir");
    return j.dump();
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a64(canonical_text()); }

void write_config_json(const std::string& path, const ExperimentConfig& config) {
    write_text_file(path, config_json(config).dump(2) + "\n");
}

}  // namespace flipscope
