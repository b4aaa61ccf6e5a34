#pragma once

#include <span>
#include <string>
#include <vector>

#include "config.hpp"

namespace moelab {

// Exact integer parameter accounting, split the way the fairness comparison
// needs it. The tied embedding is counted once.
struct ParamBreakdown {
    int64_t embedding = 0;
    int64_t non_ffn_blocks = 0;      // attention + per-layer norms + final norm
    int64_t ffn_or_expert_total = 0; // dense FFNs or all experts
    int64_t router = 0;
    int64_t total = 0;
    int64_t active = 0; // per-token path: total minus unselected experts

    std::string table(const std::string& label) const;
};

ParamBreakdown count_params(const ModelConfig& cfg);

enum class BudgetKind { Active, Total };

struct BudgetConstraints {
    int64_t vocab = 30008;
    int64_t n_layers = 4;
    int64_t head_dim = 64;
    int64_t n_kv_heads = 2;
    int64_t context_len = 512;
    // ffn width searched on a coarse ratio grid: conventional widths only
    double ffn_ratio_min = 3.0;
    double ffn_ratio_max = 4.5;
    double ffn_ratio_step = 0.5;
    int64_t d_model_granularity = 32;
    int64_t d_model_min = 64;
    int64_t d_model_max = 1024;
};

struct BudgetMatch {
    ModelConfig config;
    ParamBreakdown breakdown;
    double rel_error = 0.0;
};

// Grid search over dense (d_model, ffn_hidden) minimizing the relative
// distance of the chosen count kind to the target. Deterministic: the grid is
// scanned in a fixed order and ties keep the first candidate.
BudgetMatch match_budget(BudgetKind kind, int64_t target_count, const BudgetConstraints& c);

struct GapSeries {
    std::vector<double> active_gap; // dense_active - moe, per checkpoint
    std::vector<double> total_gap;  // moe - dense_total, per checkpoint
    double best_active_gap = 0.0;   // gaps of the per-run best (minimum) values
    double best_total_gap = 0.0;
};

GapSeries fairness_gaps(std::span<const double> dense_active, std::span<const double> moe,
                        std::span<const double> dense_total);

} // namespace moelab
