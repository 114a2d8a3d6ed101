#include "flipscope/probe.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

namespace flipscope {

const char* mask_scope_name(MaskScope s) {
    return s == MaskScope::whole_conversation ? "whole-conversation" : "second-turn-only";
}

MaskScope mask_scope_from_name(const std::string& s) {
    if (s == "whole-conversation") return MaskScope::whole_conversation;
    if (s == "second-turn-only") return MaskScope::second_turn_only;
    throw std::runtime_error("unknown mask scope: " + s);
}

bool mask_covers_turn(MaskScope scope, int turn) {
    return scope == MaskScope::whole_conversation || turn >= 1;
}

CompiledMask::CompiledMask(const MaskPlan& plan, const ModelConfig& config) {
    scope_ = plan.scope;
    n_heads_ = config.n_heads;
    if (plan.heads.empty()) return;
    flags_.assign(std::size_t(config.total_heads()), 0);
    for (const HeadId& h : plan.heads) {
        if (!config.contains(h)) {
            throw std::runtime_error("mask plan '" + plan.id + "': head " + to_string(h) +
                                     " outside model bounds");
        }
        flags_[std::size_t(config.head_index(h))] = 1;
    }
}

void apply_mask(std::span<float> head_outputs, int d_head, int layer,
                const CompiledMask& mask, int turn) {
    if (mask.empty()) return;
    const int n_heads = int(head_outputs.size()) / d_head;
    for (int h = 0; h < n_heads; ++h) {
        if (mask.masked(layer, h, turn)) {
            std::fill_n(head_outputs.begin() + std::ptrdiff_t(h) * d_head, d_head, 0.0f);
        }
    }
}

AttentionTrace::AttentionTrace(int n_layers, int n_heads, int top_k)
    : n_layers_(n_layers), n_heads_(n_heads), top_k_(top_k) {
    if (n_layers <= 0 || n_heads <= 0 || top_k <= 0) {
        throw std::runtime_error("attention trace: dims must be positive");
    }
}

std::size_t AttentionTrace::index(int step, int layer, int head, int slot) const {
    return ((std::size_t(step) * std::size_t(n_layers_) + std::size_t(layer)) *
                std::size_t(n_heads_) + std::size_t(head)) * std::size_t(top_k_) +
           std::size_t(slot);
}

void AttentionTrace::begin_step(int qpos, int turn) {
    step_qpos_.push_back(qpos);
    step_turn_.push_back(turn);
    entries_.resize(entries_.size() +
                    std::size_t(n_layers_) * std::size_t(n_heads_) * std::size_t(top_k_));
}

void AttentionTrace::pop_step() {
    if (steps() == 0) {
        throw std::runtime_error("attention trace: pop_step on empty trace");
    }
    step_qpos_.pop_back();
    step_turn_.pop_back();
    entries_.resize(entries_.size() -
                    std::size_t(n_layers_) * std::size_t(n_heads_) * std::size_t(top_k_));
}

void AttentionTrace::record_row(int layer, int head, std::span<const float> row,
                                std::span<const Token> tokens) {
    if (steps() == 0) {
        throw std::runtime_error("attention trace: record_row before begin_step");
    }
    if (tokens.size() < row.size()) {
        throw std::runtime_error("attention trace: token history shorter than row");
    }
    const int step = steps() - 1;
    // selection sort of the top-k positions; ties keep the earlier position
    std::vector<int> taken;
    taken.reserve(std::size_t(top_k_));
    for (int slot = 0; slot < top_k_; ++slot) {
        int best = -1;
        for (int j = 0; j < int(row.size()); ++j) {
            if (std::find(taken.begin(), taken.end(), j) != taken.end()) continue;
            if (best < 0 || row[std::size_t(j)] > row[std::size_t(best)]) best = j;
        }
        TraceEntry e;
        if (best >= 0) {
            taken.push_back(best);
            e.pos = best;
            e.token = tokens[std::size_t(best)];
            e.weight = row[std::size_t(best)];
        }
        entries_[index(step, layer, head, slot)] = e;
    }
}

void AttentionTrace::set_entry(int step, int layer, int head, int slot, TraceEntry entry) {
    entries_.at(index(step, layer, head, slot)) = entry;
}

const TraceEntry& AttentionTrace::at(int step, int layer, int head, int slot) const {
    return entries_.at(index(step, layer, head, slot));
}

void AttentionTrace::export_jsonl(std::ostream& out) const {
    for (int s = 0; s < steps(); ++s) {
        for (int l = 0; l < n_layers_; ++l) {
            for (int h = 0; h < n_heads_; ++h) {
                for (int k = 0; k < top_k_; ++k) {
                    const TraceEntry& e = at(s, l, h, k);
                    nlohmann::json j = {
                        {"step", s},
                        {"layer", l},
                        {"head", h},
                        {"argmax_pos", e.pos},
                        {"argmax_token", e.token},
                        {"argmax_weight", e.weight},
                        {"turn", step_turn(s)},
                    };
                    if (top_k_ > 1) j["slot"] = k;
                    out << j.dump() << '\n';
                }
            }
        }
    }
}

void AttentionTrace::export_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write trace file: " + path.string());
    }
    export_jsonl(out);
}

}  // namespace flipscope
