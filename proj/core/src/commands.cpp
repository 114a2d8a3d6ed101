#include "flipscope/commands.hpp"

#include <algorithm>
#include <atomic>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "json.hpp"

#include "flipscope/downstream.hpp"
#include "flipscope/flip.hpp"
#include "flipscope/haystack.hpp"
#include "flipscope/head_sets.hpp"
#include "flipscope/metrics.hpp"
#include "flipscope/synthetic.hpp"
#include "flipscope/util.hpp"

namespace flipscope {

using ordered_json = nlohmann::ordered_json;

// Model output can contain arbitrary bytes; replace invalid UTF-8 rather than
// refusing to persist the record.
static std::string dump_lossy(const ordered_json& j) {
    return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

CommandContext::CommandContext(ExperimentConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.backend == "model") {
        model_ = std::make_unique<Model>(Model::load(config_.weights, config_.tokenizer_file));
        backend_ = std::make_unique<ModelChatBackend>(*model_, config_.chat_template,
                                                      config_.system_prompt);
    } else {
        backend_ = std::make_unique<ScriptedBackend>(ScriptedBackend::load(config_.script));
    }
}

std::filesystem::path CommandContext::out(const std::string& rel) const {
    std::filesystem::path p = std::filesystem::path(config_.output_dir) / rel;
    std::filesystem::create_directories(p.parent_path());
    return p;
}

void parallel_for_samples(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = threads > 0 ? std::size_t(threads)
                                      : std::size_t(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
#ifdef _OPENMP
    const int omp_before = omp_get_max_threads();
    omp_set_num_threads(1);
#endif
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
#ifdef _OPENMP
    omp_set_num_threads(omp_before);
#endif
    if (err) std::rethrow_exception(err);
}

static std::vector<NeedleSpec> needles_for(const SplitConfig& split, const char* what) {
    if (split.needles.empty()) {
        throw std::runtime_error(std::string("config: ") + what + " split needs a needles file");
    }
    return load_needles(split.needles);
}

static std::vector<HaystackSample> dataset_for(const CorpusSource& corpus,
                                               const std::vector<NeedleSpec>& needles,
                                               const Tokenizer& tok, const SplitConfig& split,
                                               bool with_marker) {
    DatasetGrid grid;
    grid.lengths = split.lengths;
    grid.depths = split.depths;
    grid.per_cell = split.per_cell;
    return generate_dataset(corpus, needles, tok, grid, with_marker, split.seed);
}

static void write_manifest(const CommandContext& ctx, const std::string& family,
                           const std::vector<std::string>& outputs) {
    ordered_json j;
    j["command"] = family;
    j["config_hash"] = hex64(ctx.config().config_hash());
    j["outputs"] = outputs;
    write_text_file(ctx.out(family + "/manifest.json"), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// shared batch runners

struct FlipBatchOptions {
    const MaskPlan* plan = nullptr;
    bool force_wrong = false;  // plant the needle's wrong answer as turn 1
    bool collect_labels = false;
    const AnswerTokenAlphabet* alphabet = nullptr;
    bool mirrored_labels = false;  // label forced-wrong records with the mirrored taxonomy
};

struct FlipBatchResult {
    std::vector<ConversationRecord> records;
    std::vector<std::vector<CaseLabel>> labels;  // parallel to records
};

static FlipBatchResult run_flip_batch(CommandContext& ctx,
                                      const std::vector<HaystackSample>& samples,
                                      const FlipBatchOptions& opt) {
    if (opt.collect_labels && !opt.alphabet) {
        throw std::runtime_error("label collection needs an answer alphabet");
    }
    const ModelConfig& mc = ctx.model_config();
    const Tokenizer& tok = ctx.tokenizer();
    const FlipConfig& proto = ctx.config().protocol;

    FlipBatchResult out;
    out.records.resize(samples.size());
    out.labels.resize(samples.size());
    parallel_for_samples(samples.size(), ctx.config().threads, [&](std::size_t i) {
        const HaystackSample& s = samples[i];
        auto session = ctx.backend().open_session(i);
        if (opt.plan) session->set_mask(opt.plan);

        ConversationRecord rec;
        rec.sample_id = s.id;
        rec.needle_id = s.needle.id;
        rec.factual = s.needle.factual;
        rec.mask_id = opt.plan ? opt.plan->id : "";
        rec.seed = s.seed;

        if (opt.force_wrong) {
            if (s.needle.wrong_answer.empty()) {
                throw std::runtime_error("needle '" + s.needle.id +
                                         "' has no wrong_answer for the control run");
            }
            const FirstTurnResult ft =
                force_first_turn(*session, s, s.needle.wrong_answer, tok, proto);
            rec.turn1_answer = s.needle.wrong_answer;
            rec.turn1_recall = ft.recall;
            rec.turn1_correct = false;
            rec.forced_turn1 = true;
            rec.expected_yes = false;
        } else {
            const FirstTurnResult ft = run_first_turn(*session, s, tok, proto, nullptr);
            rec.turn1_answer = ft.reply.text;
            rec.turn1_recall = ft.recall;
            rec.turn1_correct = ft.correct;
            rec.expected_yes = true;
        }

        std::optional<AttentionTrace> trace;
        if (opt.collect_labels) {
            trace.emplace(mc.n_layers, mc.n_heads, ctx.config().trace_top_k);
        }
        run_reevaluation(*session, rec, tok, proto, trace ? &*trace : nullptr);

        if (opt.collect_labels && rec.turn2_class != AnswerClass::incoherent) {
            if (rec.expected_yes && rec.turn1_correct) {
                out.labels[i] = label_cases(rec, *trace, *opt.alphabet, 1);
            } else if (!rec.expected_yes && opt.mirrored_labels) {
                out.labels[i] = label_cases_mirrored(rec, *trace, *opt.alphabet, 1);
            }
        }
        out.records[i] = std::move(rec);
    });
    return out;
}

struct DetectBatchResult {
    HeadScoreTable table;
    std::vector<ConversationRecord> answers;  // turn-1 only records
};

static DetectBatchResult run_detect_batch(CommandContext& ctx,
                                          const std::vector<HaystackSample>& samples) {
    const ModelConfig& mc = ctx.model_config();
    const Tokenizer& tok = ctx.tokenizer();
    const FlipConfig& proto = ctx.config().protocol;

    std::vector<std::vector<double>> per_sample(samples.size());
    std::vector<ConversationRecord> answers(samples.size());
    parallel_for_samples(samples.size(), ctx.config().threads, [&](std::size_t i) {
        const HaystackSample& s = samples[i];
        auto session = ctx.backend().open_session(i);
        AttentionTrace trace(mc.n_layers, mc.n_heads, ctx.config().trace_top_k);
        const FirstTurnResult ft = run_first_turn(*session, s, tok, proto, &trace);
        per_sample[i] = retrieval_scores_for_sample(
            trace, ft.needle_abs, session->history(), ft.reply.tokens, 0);
        ConversationRecord rec;
        rec.sample_id = s.id;
        rec.needle_id = s.needle.id;
        rec.factual = s.needle.factual;
        rec.seed = s.seed;
        rec.turn1_answer = ft.reply.text;
        rec.turn1_recall = ft.recall;
        rec.turn1_correct = ft.correct;
        answers[i] = std::move(rec);
    });

    ScoreAccumulator acc(mc.n_layers, mc.n_heads, MetricKind::retrieval);
    for (const std::vector<double>& scores : per_sample) acc.add_sample(scores);
    return {acc.table(), std::move(answers)};
}

static void write_answers_jsonl(const std::filesystem::path& path,
                                std::span<const ConversationRecord> answers) {
    std::string out;
    for (const ConversationRecord& r : answers) {
        ordered_json j;
        j["sample_id"] = r.sample_id;
        j["needle_id"] = r.needle_id;
        j["answer"] = r.turn1_answer;
        j["recall"] = format_fixed(r.turn1_recall, 4);
        j["correct"] = r.turn1_correct;
        out += dump_lossy(j);
        out += '\n';
    }
    write_text_file(path, out);
}

static const char* kStatsHeader =
    "setting\tmasked_heads\tn\tyes\tno\tincoherent\tflips\tyes_pct\n";

static std::string stats_row(const std::string& setting, std::size_t masked_heads,
                             const YesStats& s) {
    return setting + "\t" + std::to_string(masked_heads) + "\t" + std::to_string(s.total) + "\t" +
           std::to_string(s.yes) + "\t" + std::to_string(s.no) + "\t" +
           std::to_string(s.incoherent) + "\t" + std::to_string(s.flips) + "\t" +
           format_fixed(100.0 * s.yes_fraction(), 1) + "\n";
}

// ---------------------------------------------------------------------------
// detect-heads

int cmd_detect_heads(const ExperimentConfig& config) {
    CommandContext ctx(config);
    const std::vector<NeedleSpec> needles = needles_for(config.detect_split, "detect");
    const CorpusSource corpus = CorpusSource::load(config.corpus_dir, ctx.tokenizer());

    std::vector<bool> variants;
    if (config.detect_marker_variants) {
        variants = {false, true};
    } else {
        variants = {config.detect_split.with_bot_marker};
    }

    std::vector<std::string> outputs;
    for (const bool marker : variants) {
        const std::string name = marker ? "with_marker" : "without_marker";
        const std::vector<HaystackSample> samples =
            dataset_for(corpus, needles, ctx.tokenizer(), config.detect_split, marker);
        write_dataset_manifest(ctx.out("detect/dataset_" + name + ".jsonl").string(), samples);

        const DetectBatchResult res = run_detect_batch(ctx, samples);
        write_score_table_tsv(ctx.out("detect/retrieval_" + name + ".tsv").string(), res.table);
        const BandHistogram bands = band_histogram(res.table);
        write_band_histogram_tsv(ctx.out("detect/bands_" + name + ".tsv").string(), bands, name);
        write_answers_jsonl(ctx.out("detect/answers_" + name + ".jsonl"), res.answers);

        const std::vector<HeadId> top = top_k_heads(res.table, std::min<int>(5, int(res.table.total_heads())));
        std::string top_tsv = "rank\tlayer\thead\tscore\n";
        for (std::size_t r = 0; r < top.size(); ++r) {
            top_tsv += std::to_string(r + 1) + "\t" + std::to_string(top[r].layer) + "\t" +
                       std::to_string(top[r].head) + "\t" +
                       format_fixed(res.table.at(top[r]), 3) + "\n";
        }
        write_text_file(ctx.out("detect/top_heads_" + name + ".tsv"), top_tsv);

        for (const char* f : {"dataset_", "retrieval_", "bands_", "answers_", "top_heads_"}) {
            outputs.push_back("detect/" + std::string(f) + name +
                              (std::string(f) == "dataset_" || std::string(f) == "answers_"
                                   ? ".jsonl"
                                   : ".tsv"));
        }
        std::cout << "[detect] " << name << ": " << samples.size() << " samples, bands "
                  << bands.zero << "/" << bands.low << "/" << bands.mid << "/" << bands.high
                  << " (zero/low/mid/high)\n";
    }
    write_manifest(ctx, "detect", outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// flip-eval

int cmd_flip_eval(const ExperimentConfig& config) {
    CommandContext ctx(config);
    const std::vector<NeedleSpec> needles = needles_for(config.flip_split, "flip");
    const CorpusSource corpus = CorpusSource::load(config.corpus_dir, ctx.tokenizer());
    const std::vector<HaystackSample> samples = dataset_for(
        corpus, needles, ctx.tokenizer(), config.flip_split, config.flip_split.with_bot_marker);
    write_dataset_manifest(ctx.out("flip/dataset.jsonl").string(), samples);

    const FlipBatchResult batch = run_flip_batch(ctx, samples, {});
    write_records_jsonl(ctx.out("flip/records.jsonl").string(), batch.records);

    const YesStats all = tally_answers(batch.records);
    std::vector<ConversationRecord> correct;
    for (const ConversationRecord& r : batch.records) {
        if (r.turn1_correct) correct.push_back(r);
    }
    std::string summary = kStatsHeader;
    summary += stats_row("all", 0, all);
    if (!correct.empty()) {
        summary += stats_row("turn1_correct", 0, tally_answers(correct));
    } else {
        summary += "turn1_correct\t0\t0\t0\t0\t0\t0\t0.0\n";
    }
    write_text_file(ctx.out("flip/summary.tsv"), summary);
    write_manifest(ctx, "flip", {"flip/dataset.jsonl", "flip/records.jsonl", "flip/summary.tsv"});

    std::cout << "[flip] " << all.total << " conversations: " << all.yes << " yes, " << all.no
              << " no, " << all.incoherent << " incoherent ("
              << format_fixed(100.0 * all.yes_fraction(), 1) << "% yes); turn-1 correct: "
              << correct.size() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// mask-sweep

int cmd_mask_sweep(const ExperimentConfig& config) {
    CommandContext ctx(config);
    const std::filesystem::path table_path =
        std::filesystem::path(config.output_dir) / ("detect/retrieval_" + config.sweep_variant + ".tsv");
    if (!std::filesystem::exists(table_path)) {
        throw std::runtime_error("mask sweep needs '" + table_path.string() +
                                 "'; run detect-heads first");
    }
    const HeadScoreTable table = read_score_table_tsv(table_path.string());
    const ModelConfig& mc = ctx.model_config();
    if (table.n_layers != mc.n_layers || table.n_heads != mc.n_heads) {
        throw std::runtime_error("detection table census " + std::to_string(table.n_layers) + "x" +
                                 std::to_string(table.n_heads) + " does not match the model");
    }
    const int census = int(table.total_heads());
    for (const int k : config.sweep_k_list) {
        if (k > census) {
            throw std::runtime_error("sweep k " + std::to_string(k) + " exceeds head census " +
                                     std::to_string(census));
        }
    }

    const std::vector<NeedleSpec> needles = needles_for(config.flip_split, "flip");
    const CorpusSource corpus = CorpusSource::load(config.corpus_dir, ctx.tokenizer());
    const std::vector<HaystackSample> samples = dataset_for(
        corpus, needles, ctx.tokenizer(), config.flip_split, config.flip_split.with_bot_marker);

    struct SweepRun {
        std::string strategy;
        int k = 0;
        int trial = -1;
        MaskPlan plan;  // empty heads = unmasked
    };
    std::vector<SweepRun> runs;
    runs.push_back({"none", 0, -1, {}});
    for (const int k : config.sweep_k_list) {
        SweepRun r{"top", k, -1, {}};
        r.plan.heads = top_k_heads(table, k);
        r.plan.scope = config.mask_scope;
        r.plan.id = "top" + std::to_string(k);
        runs.push_back(std::move(r));
    }
    for (const int k : config.sweep_k_list) {
        for (int trial = 0; trial < config.random_trials; ++trial) {
            std::mt19937_64 rng(mix_seed(config.mask_seed, std::uint64_t(k), std::uint64_t(trial)));
            SweepRun r{"random", k, trial, {}};
            for (const int flat : sample_without_replacement(rng, census, k)) {
                r.plan.heads.push_back({flat / mc.n_heads, flat % mc.n_heads});
            }
            std::sort(r.plan.heads.begin(), r.plan.heads.end());
            r.plan.scope = config.mask_scope;
            r.plan.id = "random" + std::to_string(k) + "-t" + std::to_string(trial);
            runs.push_back(std::move(r));
        }
    }

    std::string rows = "strategy\tk\ttrial\tn\tyes\tno\tincoherent\tflips\tyes_pct\n";
    std::map<std::pair<std::string, int>, std::vector<YesStats>> grouped;
    std::vector<std::string> outputs{"sweep/sweep.tsv", "sweep/sweep_summary.tsv"};
    for (const SweepRun& run : runs) {
        FlipBatchOptions opt;
        opt.plan = run.plan.heads.empty() ? nullptr : &run.plan;
        const FlipBatchResult batch = run_flip_batch(ctx, samples, opt);
        const std::string rec_name = "sweep/records_" +
                                     (run.plan.heads.empty() ? std::string("none") : run.plan.id) +
                                     ".jsonl";
        write_records_jsonl(ctx.out(rec_name).string(), batch.records);
        outputs.push_back(rec_name);
        if (!run.plan.heads.empty()) {
            const HeadSet set = head_set_from(run.plan.heads, mc.n_layers, mc.n_heads, run.plan.id);
            const std::string set_name = "sweep/plans/" + run.plan.id + ".json";
            write_head_set_json(ctx.out(set_name).string(), set);
            outputs.push_back(set_name);
        }
        const YesStats s = tally_answers(batch.records);
        rows += run.strategy + "\t" + std::to_string(run.k) + "\t" + std::to_string(run.trial) +
                "\t" + std::to_string(s.total) + "\t" + std::to_string(s.yes) + "\t" +
                std::to_string(s.no) + "\t" + std::to_string(s.incoherent) + "\t" +
                std::to_string(s.flips) + "\t" + format_fixed(100.0 * s.yes_fraction(), 1) + "\n";
        grouped[{run.strategy, run.k}].push_back(s);
        std::cout << "[sweep] " << run.strategy << " k=" << run.k
                  << (run.trial >= 0 ? " trial=" + std::to_string(run.trial) : "") << ": "
                  << format_fixed(100.0 * s.yes_fraction(), 1) << "% yes, " << s.incoherent
                  << " incoherent\n";
    }
    write_text_file(ctx.out("sweep/sweep.tsv"), rows);

    std::string summary = "strategy\tk\truns\tmean_yes_pct\tmean_incoherent\n";
    for (const auto& [key, stats] : grouped) {
        double yes_sum = 0.0, inc_sum = 0.0;
        for (const YesStats& s : stats) {
            yes_sum += 100.0 * s.yes_fraction();
            inc_sum += double(s.incoherent);
        }
        summary += key.first + "\t" + std::to_string(key.second) + "\t" +
                   std::to_string(stats.size()) + "\t" +
                   format_fixed(yes_sum / double(stats.size()), 1) + "\t" +
                   format_fixed(inc_sum / double(stats.size()), 1) + "\n";
    }
    write_text_file(ctx.out("sweep/sweep_summary.tsv"), summary);
    write_manifest(ctx, "sweep", outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// uncertainty pipeline

static HeadSet scenario_head_set(const ScenarioConfig& s, const CaseCountTable& table,
                                 bool rate_ranking, int n_layers, int n_heads) {
    if (s.kind == "case_top") {
        return top_heads_for_case(table, s.case_a, s.k, rate_ranking);
    }
    if (s.kind == "pair_sum") {
        return top_heads_for_case_pair(table, s.case_a, s.case_b, s.k, rate_ranking);
    }
    if (s.kind == "diff") {
        return set_difference(top_heads_for_case(table, s.case_a, s.k, rate_ranking),
                              top_heads_for_case(table, s.case_b, s.k, rate_ranking));
    }
    if (s.kind == "heads") {
        return head_set_from(s.heads, n_layers, n_heads, s.name);
    }
    throw std::runtime_error("scenario '" + s.name + "': no head set for kind '" + s.kind + "'");
}

int cmd_uncertainty_pipeline(const ExperimentConfig& config) {
    CommandContext ctx(config);
    const ModelConfig& mc = ctx.model_config();
    const CorpusSource corpus = CorpusSource::load(config.corpus_dir, ctx.tokenizer());
    const AnswerTokenAlphabet alphabet =
        AnswerTokenAlphabet::build(ctx.tokenizer(), config.yes_variants, config.no_variants);

    // Phase 1: label split, traced, case counting.
    const std::vector<NeedleSpec> label_needles = needles_for(config.label_split, "label");
    const std::vector<HaystackSample> label_samples =
        dataset_for(corpus, label_needles, ctx.tokenizer(), config.label_split,
                    config.label_split.with_bot_marker);
    write_dataset_manifest(ctx.out("uncertainty/label_dataset.jsonl").string(), label_samples);

    FlipBatchOptions label_opt;
    label_opt.collect_labels = true;
    label_opt.alphabet = &alphabet;
    label_opt.mirrored_labels = config.labels_include_mirrored;
    const FlipBatchResult label_batch = run_flip_batch(ctx, label_samples, label_opt);
    write_records_jsonl(ctx.out("uncertainty/label_records.jsonl").string(), label_batch.records);

    CaseCountTable cases(mc.n_layers, mc.n_heads);
    for (std::size_t i = 0; i < label_batch.records.size(); ++i) {
        const ConversationRecord& r = label_batch.records[i];
        if (r.turn2_class == AnswerClass::incoherent) continue;
        if (r.expected_yes && r.turn1_correct) {
            cases.add_labels(label_batch.labels[i], r.turn2_class == AnswerClass::no);
        } else if (!r.expected_yes && config.labels_include_mirrored) {
            cases.add_labels(label_batch.labels[i], r.turn2_class == AnswerClass::yes);
        }
    }
    write_case_table_tsv(ctx.out("uncertainty/case_counts.tsv").string(), cases);
    std::cout << "[uncertainty] labeled " << cases.n_records[0] << " flip and "
              << cases.n_records[2] << " keep conversations\n";

    std::vector<ScenarioConfig> scenarios = config.scenarios;
    if (cases.n_records[0] == 0) {
        std::cerr << "[uncertainty] warning: no flips in the label split; "
                     "emitting the no-mask row only\n";
        std::erase_if(scenarios, [](const ScenarioConfig& s) { return s.kind != "none"; });
    }

    // Phase 2: scenario masks on the held-out test split.
    const std::vector<NeedleSpec> test_needles = needles_for(config.test_split, "test");
    const std::vector<HaystackSample> test_samples =
        dataset_for(corpus, test_needles, ctx.tokenizer(), config.test_split,
                    config.test_split.with_bot_marker);
    write_dataset_manifest(ctx.out("uncertainty/test_dataset.jsonl").string(), test_samples);

    std::string results = "scenario\tmasked_heads\tn\tyes\tno\tincoherent\tflips\tyes_pct\n";
    std::string by_needle = "scenario\tneedle_id\tfactual\tn\tyes\tyes_pct\n";
    std::vector<std::string> outputs{"uncertainty/label_dataset.jsonl",
                                     "uncertainty/label_records.jsonl",
                                     "uncertainty/case_counts.tsv",
                                     "uncertainty/test_dataset.jsonl",
                                     "uncertainty/results.tsv",
                                     "uncertainty/results_by_needle.tsv"};
    for (const ScenarioConfig& sc : scenarios) {
        MaskPlan plan;
        FlipBatchOptions opt;
        if (sc.kind != "none") {
            const HeadSet set =
                scenario_head_set(sc, cases, config.rate_ranking, mc.n_layers, mc.n_heads);
            const std::string set_name = "uncertainty/sets/" + sc.name + ".json";
            write_head_set_json(ctx.out(set_name).string(), set);
            outputs.push_back(set_name);
            plan = mask_plan_from(set, config.mask_scope);
            if (!plan.heads.empty()) opt.plan = &plan;
        }
        const FlipBatchResult batch = run_flip_batch(ctx, test_samples, opt);
        const std::string rec_name = "uncertainty/records_" + sc.name + ".jsonl";
        write_records_jsonl(ctx.out(rec_name).string(), batch.records);
        outputs.push_back(rec_name);

        const YesStats s = tally_answers(batch.records);
        results += stats_row(sc.name, plan.heads.size(), s);
        std::cout << "[uncertainty] " << sc.name << " (mh=" << plan.heads.size()
                  << "): " << format_fixed(100.0 * s.yes_fraction(), 1) << "% yes\n";

        for (const NeedleSpec& n : test_needles) {
            std::vector<ConversationRecord> subset;
            for (const ConversationRecord& r : batch.records) {
                if (r.needle_id == n.id) subset.push_back(r);
            }
            if (subset.empty()) continue;
            const YesStats ns = tally_answers(subset);
            by_needle += sc.name + "\t" + n.id + "\t" + (n.factual ? "true" : "false") + "\t" +
                         std::to_string(ns.total) + "\t" + std::to_string(ns.yes) + "\t" +
                         format_fixed(100.0 * ns.yes_fraction(), 1) + "\n";
        }
    }
    write_text_file(ctx.out("uncertainty/results.tsv"), results);
    write_text_file(ctx.out("uncertainty/results_by_needle.tsv"), by_needle);
    write_manifest(ctx, "uncertainty", outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// control

int cmd_control(const ExperimentConfig& config) {
    CommandContext ctx(config);
    const std::filesystem::path sets_dir =
        std::filesystem::path(config.output_dir) / "uncertainty/sets";

    std::vector<std::pair<std::string, MaskPlan>> settings;
    settings.emplace_back("none", MaskPlan{});
    if (std::filesystem::is_directory(sets_dir)) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(sets_dir)) {
            if (e.path().extension() == ".json") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const HeadSet set = read_head_set_json(f.string());
            settings.emplace_back(f.stem().string(), mask_plan_from(set, config.mask_scope));
        }
    }
    if (settings.size() == 1) {
        throw std::runtime_error("control needs head sets under '" + sets_dir.string() +
                                 "'; run uncertainty first");
    }

    const std::vector<NeedleSpec> test_needles = needles_for(config.test_split, "test");
    for (const NeedleSpec& n : test_needles) {
        if (n.wrong_answer.empty()) {
            throw std::runtime_error("needle '" + n.id +
                                     "' has no wrong_answer; the control run needs one");
        }
    }
    const CorpusSource corpus = CorpusSource::load(config.corpus_dir, ctx.tokenizer());
    const std::vector<HaystackSample> samples =
        dataset_for(corpus, test_needles, ctx.tokenizer(), config.test_split,
                    config.test_split.with_bot_marker);

    std::string table = "setting\tmasked_heads\tn\tno\tyes\tincoherent\tno_pct\n";
    std::vector<std::string> outputs{"control/control.tsv"};
    for (const auto& [name, plan] : settings) {
        FlipBatchOptions opt;
        opt.force_wrong = true;
        if (!plan.heads.empty()) opt.plan = &plan;
        const FlipBatchResult batch = run_flip_batch(ctx, samples, opt);
        const std::string rec_name = "control/records_" + name + ".jsonl";
        write_records_jsonl(ctx.out(rec_name).string(), batch.records);
        outputs.push_back(rec_name);
        const YesStats s = tally_answers(batch.records);
        const double no_pct = s.total == 0 ? 0.0 : 100.0 * double(s.no) / double(s.total);
        table += name + "\t" + std::to_string(plan.heads.size()) + "\t" +
                 std::to_string(s.total) + "\t" + std::to_string(s.no) + "\t" +
                 std::to_string(s.yes) + "\t" + std::to_string(s.incoherent) + "\t" +
                 format_fixed(no_pct, 1) + "\n";
        std::cout << "[control] " << name << ": " << format_fixed(no_pct, 1) << "% no\n";
    }
    write_text_file(ctx.out("control/control.tsv"), table);
    write_manifest(ctx, "control", outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// downstream

int cmd_downstream(const ExperimentConfig& config) {
    CommandContext ctx(config);
    if (config.downstream_datasets.empty()) {
        throw std::runtime_error("config: downstream needs at least one dataset");
    }

    std::vector<std::pair<std::string, MaskPlan>> settings;
    settings.emplace_back("none", MaskPlan{});
    const std::filesystem::path sets_dir =
        std::filesystem::path(config.output_dir) / "uncertainty/sets";
    if (std::filesystem::is_directory(sets_dir)) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(sets_dir)) {
            if (e.path().extension() == ".json") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const HeadSet set = read_head_set_json(f.string());
            settings.emplace_back(f.stem().string(),
                                  mask_plan_from(set, MaskScope::second_turn_only));
        }
    } else {
        std::cerr << "[downstream] warning: no head sets under '" << sets_dir.string()
                  << "'; running unmasked only\n";
    }

    std::vector<DownstreamReport> reports;
    std::vector<std::string> outputs{"downstream/downstream.tsv"};
    for (const auto& ds : config.downstream_datasets) {
        const std::vector<MCQItem> items = load_mcq(ds.path);
        for (const auto& [name, plan] : settings) {
            std::vector<MCQRecord> records;
            const DownstreamReport rep =
                run_downstream(ctx.backend(), items, plan.heads.empty() ? nullptr : &plan,
                               config.downstream, ds.name, name, &records);
            std::string rec_out;
            for (const MCQRecord& r : records) {
                ordered_json j;
                j["item_id"] = r.item_id;
                j["picked"] = r.picked;
                j["correct"] = r.correct;
                j["parse_failed"] = r.parse_failed;
                j["turn2_class"] = answer_class_name(r.turn2_class);
                rec_out += dump_lossy(j);
                rec_out += '\n';
            }
            const std::string rec_name = "downstream/records_" + ds.name + "_" + name + ".jsonl";
            write_text_file(ctx.out(rec_name), rec_out);
            outputs.push_back(rec_name);
            reports.push_back(rep);
            std::cout << "[downstream] " << ds.name << " / " << name << ": acc "
                      << format_fixed(rep.accuracy(), 3) << ", yes|correct "
                      << format_fixed(rep.yes_rate_correct(), 3) << ", yes|incorrect "
                      << format_fixed(rep.yes_rate_incorrect(), 3) << "\n";
        }
    }
    write_downstream_tsv(ctx.out("downstream/downstream.tsv").string(), reports);
    write_manifest(ctx, "downstream", outputs);
    return 0;
}

// ---------------------------------------------------------------------------
// report

static std::vector<std::string> tsv_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (const char c : line) {
        if (c == '\t') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

// Rows of a TSV file, header checked and dropped.
static std::optional<std::vector<std::vector<std::string>>> read_table(
    const std::filesystem::path& path, const std::string& header) {
    if (!std::filesystem::exists(path)) return std::nullopt;
    const std::vector<std::string> lines = split_lines(read_text_file(path));
    if (lines.empty() || lines[0] != header) {
        throw std::runtime_error("table '" + path.string() + "': unexpected header");
    }
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (!lines[i].empty()) rows.push_back(tsv_fields(lines[i]));
    }
    return rows;
}

int cmd_report(const ExperimentConfig& config) {
    const std::filesystem::path base(config.output_dir);
    const std::filesystem::path report_dir = base / "report";
    std::filesystem::create_directories(report_dir);
    auto skip = [](const std::string& what, const std::filesystem::path& missing) {
        std::cout << "report: skipping " << what << " (missing " << missing.string() << ")\n";
    };
    int written = 0;

    // Main results (scenario vs %yes).
    {
        const std::filesystem::path src = base / "uncertainty/results.tsv";
        auto rows = read_table(src, "scenario\tmasked_heads\tn\tyes\tno\tincoherent\tflips\tyes_pct");
        if (rows) {
            std::string out = "scenario\tmasked_heads\tyes_pct\n";
            for (const auto& r : *rows) out += r[0] + "\t" + r[1] + "\t" + r[7] + "\n";
            write_text_file(report_dir / "table_main.tsv", out);
            ++written;
        } else {
            skip("main results table", src);
        }
    }
    // Incoherent counts by strategy (top vs random).
    {
        const std::filesystem::path src = base / "sweep/sweep_summary.tsv";
        auto rows = read_table(src, "strategy\tk\truns\tmean_yes_pct\tmean_incoherent");
        if (rows) {
            std::map<int, std::pair<std::string, std::string>> by_k;  // k -> (top, random)
            std::string none_inc = "0.0";
            for (const auto& r : *rows) {
                if (r[0] == "none") none_inc = r[4];
                if (r[0] == "top") by_k[std::stoi(r[1])].first = r[4];
                if (r[0] == "random") by_k[std::stoi(r[1])].second = r[4];
            }
            std::string out = "masked_heads\ttop_incoherent\trandom_incoherent\n";
            out += "0\t" + none_inc + "\t" + none_inc + "\n";
            for (const auto& [k, v] : by_k) {
                out += std::to_string(k) + "\t" + v.first + "\t" + v.second + "\n";
            }
            write_text_file(report_dir / "table_incoherent.tsv", out);
            ++written;
        } else {
            skip("incoherent-output table", src);
        }
    }
    // Retrieval-score bands, marker vs no marker.
    {
        const std::filesystem::path with = base / "detect/bands_with_marker.tsv";
        const std::filesystem::path without = base / "detect/bands_without_marker.tsv";
        auto rw = read_table(with, "label\tband\tcount");
        auto rwo = read_table(without, "label\tband\tcount");
        if (rwo) {
            std::string out = "band\twith_marker\twithout_marker\n";
            for (std::size_t i = 0; i < rwo->size(); ++i) {
                const std::string w = rw && i < rw->size() ? (*rw)[i][2] : "-";
                out += (*rwo)[i][1] + "\t" + w + "\t" + (*rwo)[i][2] + "\n";
            }
            write_text_file(report_dir / "table_bands.tsv", out);
            ++written;
        } else {
            skip("score-band table", without);
        }
    }
    // Top retrieval heads per variant.
    {
        bool any = false;
        std::string out = "variant\trank\tlayer\thead\tscore\n";
        for (const char* variant : {"with_marker", "without_marker"}) {
            const std::filesystem::path src =
                base / ("detect/top_heads_" + std::string(variant) + ".tsv");
            auto rows = read_table(src, "rank\tlayer\thead\tscore");
            if (!rows) continue;
            any = true;
            for (const auto& r : *rows) {
                out += std::string(variant) + "\t" + r[0] + "\t" + r[1] + "\t" + r[2] + "\t" +
                       r[3] + "\n";
            }
        }
        if (any) {
            write_text_file(report_dir / "table_top_heads.tsv", out);
            ++written;
        } else {
            skip("top-head table", base / "detect/top_heads_without_marker.tsv");
        }
    }
    // Flip outcome counts (from the persisted records).
    {
        const std::filesystem::path src = base / "flip/records.jsonl";
        if (std::filesystem::exists(src)) {
            const std::vector<ConversationRecord> records = read_records_jsonl(src.string());
            std::string out = "scope\tclass\tcount\tpct\n";
            auto emit = [&](const std::string& scope,
                            const std::vector<ConversationRecord>& recs) {
                if (recs.empty()) return;
                const YesStats s = tally_answers(recs);
                auto row = [&](const char* cls, long count) {
                    out += scope + "\t" + cls + "\t" + std::to_string(count) + "\t" +
                           format_fixed(100.0 * double(count) / double(s.total), 1) + "\n";
                };
                row("yes", s.yes);
                row("no", s.no);
                row("incoherent", s.incoherent);
            };
            emit("all", records);
            std::vector<ConversationRecord> correct;
            for (const ConversationRecord& r : records) {
                if (r.turn1_correct) correct.push_back(r);
            }
            emit("turn1_correct", correct);
            write_text_file(report_dir / "fig_flip_outcomes.tsv", out);
            ++written;
        } else {
            skip("flip outcome figure data", src);
        }
    }
    // Masked-head count vs %yes series (top strategy).
    {
        const std::filesystem::path src = base / "sweep/sweep_summary.tsv";
        auto rows = read_table(src, "strategy\tk\truns\tmean_yes_pct\tmean_incoherent");
        if (rows) {
            std::string out = "masked_heads\tyes_pct\n";
            for (const auto& r : *rows) {
                if (r[0] == "none") out += "0\t" + r[3] + "\n";
            }
            std::map<int, std::string> ordered;
            for (const auto& r : *rows) {
                if (r[0] == "top") ordered[std::stoi(r[1])] = r[3];
            }
            for (const auto& [k, v] : ordered) out += std::to_string(k) + "\t" + v + "\n";
            write_text_file(report_dir / "fig_masked_yes.tsv", out);
            ++written;
        } else {
            skip("masked-heads series", src);
        }
    }
    // Per-needle %yes grouped by the factual flag.
    {
        const std::filesystem::path src = base / "uncertainty/results_by_needle.tsv";
        auto rows = read_table(src, "scenario\tneedle_id\tfactual\tn\tyes\tyes_pct");
        if (rows) {
            std::stable_sort(rows->begin(), rows->end(),
                             [](const auto& a, const auto& b) { return a[2] > b[2]; });
            std::string out = "scenario\tfactual\tneedle_id\tn\tyes\tyes_pct\n";
            for (const auto& r : *rows) {
                out += r[0] + "\t" + r[2] + "\t" + r[1] + "\t" + r[3] + "\t" + r[4] + "\t" +
                       r[5] + "\n";
            }
            write_text_file(report_dir / "fig_needle_yes.tsv", out);
            ++written;
        } else {
            skip("per-needle figure data", src);
        }
    }
    // Control and downstream summaries pass through.
    {
        const std::filesystem::path src = base / "control/control.tsv";
        auto rows = read_table(src, "setting\tmasked_heads\tn\tno\tyes\tincoherent\tno_pct");
        if (rows) {
            std::string out = "setting\tmasked_heads\tn\tno_pct\n";
            for (const auto& r : *rows) {
                out += r[0] + "\t" + r[1] + "\t" + r[2] + "\t" + r[6] + "\n";
            }
            write_text_file(report_dir / "control_summary.tsv", out);
            ++written;
        } else {
            skip("control summary", src);
        }
    }
    {
        const std::filesystem::path src = base / "downstream/downstream.tsv";
        if (std::filesystem::exists(src)) {
            write_text_file(report_dir / "downstream_summary.tsv", read_text_file(src));
            ++written;
        } else {
            skip("downstream summary", src);
        }
    }
    std::cout << "report: wrote " << written << " file(s) under " << report_dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// make-demo

static void write_demo_script(const std::filesystem::path& path,
                              const std::vector<NeedleSpec>& label_needles, int per_needle) {
    ordered_json j;
    j["n_layers"] = 4;
    j["n_heads"] = 4;
    ordered_json samples = ordered_json::array();
    int idx = 0;
    for (const NeedleSpec& n : label_needles) {
        for (int r = 0; r < per_needle; ++r, ++idx) {
            const bool flip = idx % 3 == 0;
            ordered_json turn1;
            turn1["text"] = n.answer_text;
            turn1["heads"] = ordered_json{{"(0, 1)", "copy"}};
            ordered_json turn2;
            turn2["text"] = flip ? "No" : "Yes";
            if (flip) {
                turn2["heads"] = ordered_json{{"(1, 2)", "token:no"}, {"(2, 3)", "token:no"}};
                turn2["masked_overrides"] = ordered_json::array(
                    {ordered_json{{"heads", ordered_json::array({"(1, 2)", "(2, 3)"})},
                                  {"require", "all"},
                                  {"text", "Yes"}}});
            } else {
                turn2["heads"] = ordered_json{{"(1, 2)", "token:yes"}};
            }
            ordered_json sample;
            sample["turn1"] = turn1;
            sample["turn2"] = turn2;
            samples.push_back(sample);
        }
    }
    j["samples"] = samples;
    write_text_file(path, j.dump(2) + "\n");
}

int cmd_make_demo(const std::string& dir) {
    const std::filesystem::path base(dir);
    std::filesystem::create_directories(base);

    const Tokenizer tok = make_ascii_tokenizer();
    tok.save(base / "tokenizer.json");
    const ModelConfig mc = tiny_model_config(4, 8, 4, 32, 1024);
    write_tiny_model(base / "model.safetensors", mc, 7);
    write_demo_corpus(base / "corpus", 3, 20000);
    write_demo_needles(base / "needles_detect.jsonl", "detect");
    write_demo_needles(base / "needles_label.jsonl", "label");
    write_demo_needles(base / "needles_test.jsonl", "test");
    write_demo_needles(base / "needles_flip.jsonl", "flip");
    write_demo_mcq(base / "mcq.jsonl");

    ExperimentConfig cfg = ExperimentConfig::defaults();
    cfg.backend = "model";
    cfg.weights = (base / "model.safetensors").string();
    cfg.tokenizer_file = (base / "tokenizer.json").string();
    cfg.corpus_dir = (base / "corpus").string();
    cfg.protocol.max_new_first = 48;
    cfg.protocol.max_new_second = 8;
    cfg.detect_split = {(base / "needles_detect.jsonl").string(), {256}, {0.1, 0.4, 0.7}, 2, 11,
                        false};
    cfg.flip_split = {(base / "needles_flip.jsonl").string(), {256}, {0.1, 0.4, 0.7}, 4, 13,
                      false};
    cfg.label_split = {(base / "needles_label.jsonl").string(), {256}, {0.1, 0.4, 0.7}, 1, 17,
                       false};
    cfg.test_split = {(base / "needles_test.jsonl").string(), {256}, {0.1, 0.4, 0.7}, 1, 19,
                      false};
    cfg.sweep_k_list = {2, 4, 8};
    cfg.random_trials = 2;
    cfg.scenarios.clear();
    {
        auto add = [&](const char* name, const char* kind, int a, int b, int k) {
            ScenarioConfig s;
            s.name = name;
            s.kind = kind;
            s.case_a = a;
            s.case_b = b;
            s.k = k;
            cfg.scenarios.push_back(std::move(s));
        };
        add("no-mask", "none", 0, 0, 0);
        add("case1-minus-case3", "diff", 1, 3, 4);
        add("case1-union-case2-k2", "pair_sum", 1, 2, 2);
        add("case1-union-case2-k4", "pair_sum", 1, 2, 4);
    }
    cfg.downstream_datasets = {{"demo-mcq", (base / "mcq.jsonl").string()}};
    cfg.output_dir = (base / "out").string();
    write_config_json((base / "config.json").string(), cfg);

    const std::vector<NeedleSpec> label_needles = load_needles((base / "needles_label.jsonl").string());
    write_demo_script(base / "script.json", label_needles, 2);
    ExperimentConfig scfg = cfg;
    scfg.backend = "scripted";
    scfg.weights.clear();
    scfg.tokenizer_file.clear();
    scfg.script = (base / "script.json").string();
    // Script samples are keyed by dataset index, so every split points at the
    // label needles with the same 2-samples-per-needle grid the script uses.
    const SplitConfig aligned{(base / "needles_label.jsonl").string(), {192}, {0.3, 0.6}, 1, 17,
                              false};
    scfg.detect_split = aligned;
    scfg.flip_split = aligned;
    scfg.label_split = aligned;
    scfg.test_split = aligned;
    scfg.sweep_k_list = {2, 4};
    scfg.scenarios.clear();
    {
        auto add = [&](const char* name, const char* kind, int a, int b, int k,
                       std::vector<HeadId> heads = {}) {
            ScenarioConfig s;
            s.name = name;
            s.kind = kind;
            s.case_a = a;
            s.case_b = b;
            s.k = k;
            s.heads = std::move(heads);
            scfg.scenarios.push_back(std::move(s));
        };
        add("no-mask", "none", 0, 0, 0);
        add("case1-top2", "case_top", 1, 0, 2);
        add("case1-union-case2-k2", "pair_sum", 1, 2, 2);
        add("uncertainty-pair", "heads", 0, 0, 0, {{1, 2}, {2, 3}});
    }
    scfg.output_dir = (base / "out-scripted").string();
    write_config_json((base / "config_scripted.json").string(), scfg);

    std::cout << "demo workspace ready under " << base.string() << "\n"
              << "  model config:    " << (base / "config.json").string() << "\n"
              << "  scripted config: " << (base / "config_scripted.json").string() << "\n";
    return 0;
}

}  // namespace flipscope
