#pragma once

#include <vector>

#include "moe.hpp"

namespace moelab {

// Routing health for one layer at one evaluation point.
struct LayerDiag {
    double busiest_fraction = 0.0;     // max_e assignments_e / (tokens * top_k)
    double usage_variance = 0.0;       // variance of per-expert assignment fractions
    double mean_entropy = 0.0;         // mean -sum p ln p over tokens
    double mean_logz = 0.0;            // mean router log-sum-exp
    double mean_top_gate = 0.0;        // mean largest router prob
    double mean_top1_top2_margin = 0.0;
};

// Accumulates router decisions across eval batches for one layer.
class DiagAccumulator {
  public:
    void add(const RouterDecision& d);
    bool empty() const { return tokens_ == 0; }
    LayerDiag finalize() const;

  private:
    std::vector<int64_t> counts_;
    int64_t tokens_ = 0;
    int64_t assignments_ = 0;
    double sum_entropy_ = 0.0;
    double sum_logz_ = 0.0;
    double sum_top_gate_ = 0.0;
    double sum_margin_ = 0.0;
};

// Single-batch convenience wrapper.
LayerDiag collect(const RouterDecision& d);

// A layer counts as collapsed when its busiest-expert fraction exceeds the
// threshold at the latest eval point.
std::vector<bool> collapse_detector(const std::vector<LayerDiag>& latest, double threshold = 0.9);

} // namespace moelab
