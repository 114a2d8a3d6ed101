#pragma once

#include <filesystem>
#include <functional>
#include <memory>

#include "flipscope/chat.hpp"
#include "flipscope/config.hpp"
#include "flipscope/model.hpp"
#include "flipscope/scripted.hpp"

namespace flipscope {

/// Owns the backend (real model or scripted) for one run and resolves paths
/// under the configured output directory.
class CommandContext {
public:
    explicit CommandContext(ExperimentConfig config);

    ChatBackend& backend() { return *backend_; }
    const ExperimentConfig& config() const { return config_; }
    const ModelConfig& model_config() const { return backend_->config(); }
    const Tokenizer& tokenizer() const { return backend_->tokenizer(); }

    /// output_dir / rel, with parent directories created.
    std::filesystem::path out(const std::string& rel) const;

private:
    ExperimentConfig config_;
    std::unique_ptr<Model> model_;
    std::unique_ptr<ChatBackend> backend_;
};

/// Bounded worker pool over sample indices. Workers pull indices from a shared
/// counter; results must be written into index-addressed slots so the merge
/// order never depends on scheduling. Model-internal threading is parked while
/// more than one worker runs.
void parallel_for_samples(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// Experiment commands. Each writes line-delimited records plus result tables
// under the config's output directory and returns a process exit code.
int cmd_detect_heads(const ExperimentConfig& config);
int cmd_flip_eval(const ExperimentConfig& config);
int cmd_mask_sweep(const ExperimentConfig& config);
int cmd_uncertainty_pipeline(const ExperimentConfig& config);
int cmd_control(const ExperimentConfig& config);
int cmd_downstream(const ExperimentConfig& config);
int cmd_report(const ExperimentConfig& config);

/// Writes a self-contained demo workspace: tiny checkpoint, tokenizer, filler
/// corpus, needle/MCQ files, a model-backend config, and a scripted-backend
/// config with an aligned script.
int cmd_make_demo(const std::string& dir);

}  // namespace flipscope
