#pragma once

#include <string>
#include <vector>

#include "budget.hpp"
#include "trainer.hpp"

namespace moelab {

// Sample mean and standard deviation (n-1 denominator; 0 when n < 2).
struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
    size_t n = 0;
};
MeanStd mean_std(const std::vector<double>& xs);

// One finished run on disk: summary.json + metrics.jsonl.
struct RunSeries {
    std::string dir;
    std::string name;
    uint64_t seed = 0;
    double best_val_ce = 0.0;
    std::vector<EvalPoint> evals;
};

RunSeries load_run(const std::string& dir);

void write_run_summary(const std::string& dir, const std::string& name, uint64_t seed,
                       const RunRecord& rec, const ParamBreakdown& params);

struct GapSummary {
    struct PerSeed {
        uint64_t seed = 0;
        double active_gap = 0.0;
        double total_gap = 0.0;
    };
    std::vector<PerSeed> per_seed; // one row per matched seed triple
    MeanStd active_gap;
    MeanStd total_gap;
};

struct CurveExport {
    std::string csv; // per-checkpoint means (and stds for multi-seed input)
    GapSummary gaps;
};

// Aligns the three families' eval series (identical step sequences required),
// averages per checkpoint, and derives per-checkpoint and best-val gaps.
// Per-seed gaps pair runs across families by ascending seed.
CurveExport export_curves(const std::vector<RunSeries>& dense_active,
                          const std::vector<RunSeries>& moe,
                          const std::vector<RunSeries>& dense_total);

// Per-family mean +/- std of best validation loss (and perplexity), grouped by
// run name, rendered as a fixed-width table.
std::string summarize_runs(const std::vector<RunSeries>& runs);

} // namespace moelab
