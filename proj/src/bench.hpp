#pragma once

#include <string>
#include <vector>

#include "moe.hpp"

namespace moelab {

struct BenchShape {
    int64_t tokens = 4096;
    int64_t d_model = 256;
    int64_t n_experts = 4;
    int64_t expert_hidden = 1024;
    int64_t top_k = 2;
    uint64_t seed = 1337;
};

struct BenchPathResult {
    std::string path;
    double tok_per_s = 0.0;
};

struct BenchReport {
    BenchShape shape;
    int repeats = 0;
    std::vector<BenchPathResult> paths; // naive, grouped, stacked
    double max_rel_deviation = 0.0;     // cross-path output disagreement
};

// Times one forward+backward of the routed layer per path on a shared random
// workload (same routing decision for all paths). tok/s is the median over
// repeats, with one untimed warmup iteration.
BenchReport bench_dispatch(const BenchShape& shape, int repeats);

std::string bench_report_text(const BenchReport& rep);

} // namespace moelab
