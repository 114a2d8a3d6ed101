#include "doctest.h"

#include <atomic>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "flipscope/commands.hpp"
#include "flipscope/flip.hpp"
#include "flipscope/haystack.hpp"
#include "flipscope/head_sets.hpp"
#include "flipscope/util.hpp"

using namespace flipscope;

namespace {

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "flipscope-tests" / "commands";
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
    return split_lines(read_text_file(p.string()));
}

}  // namespace

TEST_CASE("parallel_for_samples visits every index exactly once") {
    for (const int threads : {1, 4}) {
        const std::size_t n = 50;
        std::vector<std::atomic<int>> hits(n);
        parallel_for_samples(n, threads, [&](std::size_t i) { ++hits[i]; });
        for (std::size_t i = 0; i < n; ++i) CHECK(hits[i] == 1);
    }
    parallel_for_samples(0, 4, [](std::size_t) { FAIL("called on empty range"); });
}

TEST_CASE("parallel_for_samples propagates worker exceptions") {
    auto boom = [](std::size_t i) {
        if (i == 3) throw std::runtime_error("sample 3 failed");
    };
    CHECK_THROWS_WITH_AS(parallel_for_samples(10, 1, boom), doctest::Contains("sample 3"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(parallel_for_samples(10, 4, boom), doctest::Contains("sample 3"),
                         std::runtime_error);
}

TEST_CASE("command context validates its config up front") {
    ExperimentConfig c = ExperimentConfig::defaults();  // model backend, no weights
    CHECK_THROWS_WITH_AS(CommandContext{c}, doctest::Contains("needs 'weights'"),
                         std::runtime_error);
    c.weights = (temp_dir() / "missing.safetensors").string();
    c.tokenizer_file = (temp_dir() / "missing.json").string();
    CHECK_THROWS(CommandContext{c});  // files do not exist
}

TEST_CASE("demo workspace and the scripted pipeline end to end") {
    const std::filesystem::path base = temp_dir() / "demo";
    std::filesystem::remove_all(base);
    REQUIRE(cmd_make_demo(base.string()) == 0);

    // --- inventory -------------------------------------------------------
    for (const char* f :
         {"tokenizer.json", "model.safetensors", "needles_detect.jsonl", "needles_label.jsonl",
          "needles_test.jsonl", "needles_flip.jsonl", "mcq.jsonl", "config.json",
          "config_scripted.json", "script.json"}) {
        CAPTURE(f);
        CHECK(std::filesystem::exists(base / f));
    }
    CHECK(std::filesystem::is_directory(base / "corpus"));
    CHECK(!std::filesystem::is_empty(base / "corpus"));

    const ExperimentConfig model_cfg = ExperimentConfig::load((base / "config.json").string());
    CHECK(model_cfg.backend == "model");
    CHECK(std::filesystem::exists(model_cfg.weights));
    CHECK(std::filesystem::exists(model_cfg.tokenizer_file));
    CHECK(std::filesystem::is_directory(model_cfg.corpus_dir));
    CHECK(load_needles(model_cfg.detect_split.needles).size() == 3);
    CHECK(load_needles(model_cfg.label_split.needles).size() == 9);
    CHECK(load_needles(model_cfg.test_split.needles).size() == 5);

    ExperimentConfig scfg = ExperimentConfig::load((base / "config_scripted.json").string());
    CHECK(scfg.backend == "scripted");
    ScriptedBackend script = ScriptedBackend::load(scfg.script);
    CHECK(script.config().n_layers == 4);
    CHECK(script.config().n_heads == 4);
    CHECK(script.n_samples() == 18);  // 9 label needles x 2 replies

    // --- uncertainty pipeline on the scripted backend --------------------
    // script: every third conversation flips to "No" unless heads (1,2) and
    // (2,3) are both masked, in which case it answers "Yes" again
    REQUIRE(cmd_uncertainty_pipeline(scfg) == 0);
    const std::filesystem::path out(scfg.output_dir);

    const CaseCountTable cases =
        read_case_table_tsv((out / "uncertainty/case_counts.tsv").string());
    CHECK(cases.n_layers == 4);
    CHECK(cases.n_heads == 4);
    CHECK(cases.count({1, 2}, 1) == 6);
    CHECK(cases.count({2, 3}, 1) == 6);
    CHECK(cases.count({1, 2}, 4) == 12);
    CHECK(cases.n_records[0] == 6);   // flip conversations
    CHECK(cases.n_records[2] == 12);  // keep conversations
    long case1_total = 0;
    for (int l = 0; l < 4; ++l) {
        for (int h = 0; h < 4; ++h) case1_total += cases.count({l, h}, 1);
    }
    CHECK(case1_total == 12);  // nothing but the two scripted heads

    const HeadSet top2 = read_head_set_json((out / "uncertainty/sets/case1-top2.json").string());
    CHECK(top2.members == std::vector<HeadId>{{1, 2}, {2, 3}});

    const std::vector<std::string> results = lines_of(out / "uncertainty/results.tsv");
    REQUIRE(results.size() >= 5);
    CHECK(results[0] == "scenario\tmasked_heads\tn\tyes\tno\tincoherent\tflips\tyes_pct");
    CHECK(results[1] == "no-mask\t0\t18\t12\t6\t0\t6\t66.7");
    CHECK(results[2] == "case1-top2\t2\t18\t18\t0\t0\t0\t100.0");
    CHECK(results[3] == "case1-union-case2-k2\t2\t18\t18\t0\t0\t0\t100.0");
    CHECK(results[4] == "uncertainty-pair\t2\t18\t18\t0\t0\t0\t100.0");

    const std::vector<ConversationRecord> label_records =
        read_records_jsonl((out / "uncertainty/label_records.jsonl").string());
    CHECK(label_records.size() == 18);
    for (const ConversationRecord& r : label_records) {
        CHECK(r.turn1_correct);
        CHECK(r.expected_yes);
    }
    CHECK(lines_of(out / "uncertainty/label_dataset.jsonl").size() == 18);
    CHECK(lines_of(out / "uncertainty/results_by_needle.tsv").size() == 1 + 4 * 9);
    CHECK(std::filesystem::exists(out / "uncertainty/manifest.json"));

    // --- rerun determinism ----------------------------------------------
    ExperimentConfig scfg2 = scfg;
    scfg2.output_dir = (base / "out-scripted-rerun").string();
    REQUIRE(cmd_uncertainty_pipeline(scfg2) == 0);
    const std::filesystem::path out2(scfg2.output_dir);
    for (const char* f : {"uncertainty/results.tsv", "uncertainty/case_counts.tsv",
                          "uncertainty/label_records.jsonl", "uncertainty/results_by_needle.tsv",
                          "uncertainty/sets/case1-top2.json"}) {
        CAPTURE(f);
        CHECK(read_text_file((out / f).string()) == read_text_file((out2 / f).string()));
    }

    // --- control: forced-wrong first turns, same masks -------------------
    REQUIRE(cmd_control(scfg) == 0);
    const std::vector<std::string> control = lines_of(out / "control/control.tsv");
    REQUIRE(control.size() >= 5);
    CHECK(control[0] == "setting\tmasked_heads\tn\tno\tyes\tincoherent\tno_pct");
    CHECK(control[1] == "none\t0\t18\t6\t12\t0\t33.3");
    CHECK(control[2] == "case1-top2\t2\t18\t0\t18\t0\t0.0");
    CHECK(control[3] == "case1-union-case2-k2\t2\t18\t0\t18\t0\t0.0");
    CHECK(control[4] == "uncertainty-pair\t2\t18\t0\t18\t0\t0.0");
    const std::vector<ConversationRecord> control_records =
        read_records_jsonl((out / "control/records_none.jsonl").string());
    CHECK(control_records.size() == 18);
    for (const ConversationRecord& r : control_records) {
        CHECK(r.forced_turn1);
        CHECK(!r.expected_yes);
        CHECK(!r.turn1_correct);
    }

    // --- downstream over the demo MCQ file -------------------------------
    REQUIRE(cmd_downstream(scfg) == 0);
    const std::vector<std::string> ds = lines_of(out / "downstream/downstream.tsv");
    REQUIRE(ds.size() == 5);  // header + (none + 3 head sets) x 1 dataset
    CHECK(ds[0].rfind("dataset\tmask\tn\taccuracy", 0) == 0);
    for (int i = 1; i <= 4; ++i) {
        CHECK(ds[std::size_t(i)].rfind("demo-mcq\t", 0) == 0);
        CHECK(ds[std::size_t(i)].find("\t8\t") != std::string::npos);  // 8 items scored
    }
    CHECK(std::filesystem::exists(out / "downstream/records_demo-mcq_none.jsonl"));
    CHECK(std::filesystem::exists(out / "downstream/records_demo-mcq_uncertainty-pair.jsonl"));

    // --- report distills whatever is present ------------------------------
    REQUIRE(cmd_report(scfg) == 0);
    const std::filesystem::path report = out / "report";
    const std::vector<std::string> main_table = lines_of(report / "table_main.tsv");
    REQUIRE(main_table.size() >= 5);
    CHECK(main_table[0] == "scenario\tmasked_heads\tyes_pct");
    CHECK(main_table[1] == "no-mask\t0\t66.7");
    CHECK(main_table[2] == "case1-top2\t2\t100.0");
    CHECK(std::filesystem::exists(report / "control_summary.tsv"));
    CHECK(std::filesystem::exists(report / "downstream_summary.tsv"));
    CHECK(std::filesystem::exists(report / "fig_needle_yes.tsv"));
    // no detect/sweep/flip outputs were produced, so those tables are skipped
    CHECK(!std::filesystem::exists(report / "table_incoherent.tsv"));
    CHECK(!std::filesystem::exists(report / "table_bands.tsv"));
    CHECK(!std::filesystem::exists(report / "fig_flip_outcomes.tsv"));

    // control before uncertainty has nothing to mask with
    ExperimentConfig fresh = scfg;
    fresh.output_dir = (base / "out-empty").string();
    CHECK_THROWS_WITH_AS(cmd_control(fresh), doctest::Contains("run uncertainty first"),
                         std::runtime_error);
    // mask-sweep needs the detection table
    CHECK_THROWS_WITH_AS(cmd_mask_sweep(fresh), doctest::Contains("run detect-heads first"),
                         std::runtime_error);
}
