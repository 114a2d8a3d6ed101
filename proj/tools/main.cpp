// flipscope CLI: drives the detection / flip / masking pipeline from a single
// JSON config. Every subcommand is deterministic given the config file.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "flipscope/commands.hpp"
#include "flipscope/config.hpp"

using namespace flipscope;

int main(int argc, char** argv) {
    CLI::App app{"uncertainty-head experiments over an instrumented transformer"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir_override;
    int threads_override = -1;

    auto add_experiment = [&](const char* name, const char* help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", config_path, "experiment config (JSON)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--output-dir", output_dir_override, "override the config's output_dir");
        sub->add_option("--threads", threads_override,
                        "override the config's worker count (0: hardware)");
        return sub;
    };

    CLI::App* detect = add_experiment(
        "detect-heads", "score every head's copy-paste retrieval behavior on needle haystacks");
    CLI::App* flip = add_experiment(
        "flip-eval", "two-turn conversations: answer, then re-evaluate under 'are you sure'");
    CLI::App* sweep = add_experiment(
        "mask-sweep", "mask top-k retrieval heads (and random baselines) during re-evaluation");
    CLI::App* uncertainty = add_experiment(
        "uncertainty", "label flip/attend cases, build head sets, evaluate them on held-out data");
    CLI::App* control = add_experiment(
        "control", "force wrong first answers and measure whether masking hurts self-correction");
    CLI::App* downstream = add_experiment(
        "downstream", "multiple-choice accuracy and self-check rates with and without masks");
    CLI::App* report = add_experiment(
        "report", "assemble result tables and figure data from completed runs");

    std::string demo_dir;
    CLI::App* make_demo =
        app.add_subcommand("make-demo", "write a self-contained demo workspace (tiny model, "
                                        "corpus, needles, configs)");
    make_demo->add_option("-d,--dir", demo_dir, "target directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (make_demo->parsed()) return cmd_make_demo(demo_dir);

        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        if (!output_dir_override.empty()) cfg.output_dir = output_dir_override;
        if (threads_override >= 0) cfg.threads = threads_override;

        if (detect->parsed()) return cmd_detect_heads(cfg);
        if (flip->parsed()) return cmd_flip_eval(cfg);
        if (sweep->parsed()) return cmd_mask_sweep(cfg);
        if (uncertainty->parsed()) return cmd_uncertainty_pipeline(cfg);
        if (control->parsed()) return cmd_control(cfg);
        if (downstream->parsed()) return cmd_downstream(cfg);
        if (report->parsed()) return cmd_report(cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
