#include "diagnostics.hpp"

#include <algorithm>
#include <cmath>

namespace moelab {

void DiagAccumulator::add(const RouterDecision& d) {
    if (counts_.empty()) {
        counts_.assign(static_cast<size_t>(d.n_experts), 0);
    } else if (static_cast<int64_t>(counts_.size()) != d.n_experts) {
        fail("diagnostics: expert count changed mid-accumulation");
    }
    for (int64_t id : d.topk) counts_[static_cast<size_t>(id)] += 1;
    assignments_ += static_cast<int64_t>(d.topk.size());

    const int64_t T = d.tokens, E = d.n_experts;
    dispatch(d.probs.dtype(), [&](auto tag) {
        using T_ = decltype(tag);
        auto pv = d.probs.vals<T_>();
        auto lv = d.logits_lse.vals<T_>();
        for (int64_t t = 0; t < T; ++t) {
            const T_* row = pv.data() + t * E;
            double entropy = 0.0;
            double top1 = -1.0, top2 = -1.0;
            for (int64_t e = 0; e < E; ++e) {
                const double p = static_cast<double>(row[e]);
                if (p > 0.0) entropy -= p * std::log(p);
                if (p > top1) {
                    top2 = top1;
                    top1 = p;
                } else if (p > top2) {
                    top2 = p;
                }
            }
            sum_entropy_ += entropy;
            sum_top_gate_ += top1;
            sum_margin_ += E > 1 ? top1 - top2 : 0.0;
            sum_logz_ += static_cast<double>(lv[t]);
        }
    });
    tokens_ += T;
}

LayerDiag DiagAccumulator::finalize() const {
    if (tokens_ == 0) fail("diagnostics: no tokens accumulated");
    LayerDiag d;
    const double n = static_cast<double>(tokens_);
    const double assigns = static_cast<double>(assignments_);
    const int64_t E = static_cast<int64_t>(counts_.size());

    int64_t busiest = *std::max_element(counts_.begin(), counts_.end());
    d.busiest_fraction = static_cast<double>(busiest) / assigns;

    const double mean_frac = 1.0 / static_cast<double>(E);
    double var = 0.0;
    for (int64_t c : counts_) {
        const double f = static_cast<double>(c) / assigns;
        var += (f - mean_frac) * (f - mean_frac);
    }
    d.usage_variance = var / static_cast<double>(E);

    d.mean_entropy = sum_entropy_ / n;
    d.mean_logz = sum_logz_ / n;
    d.mean_top_gate = sum_top_gate_ / n;
    d.mean_top1_top2_margin = sum_margin_ / n;
    return d;
}

LayerDiag collect(const RouterDecision& d) {
    DiagAccumulator acc;
    acc.add(d);
    return acc.finalize();
}

std::vector<bool> collapse_detector(const std::vector<LayerDiag>& latest, double threshold) {
    std::vector<bool> collapsed;
    collapsed.reserve(latest.size());
    for (const LayerDiag& d : latest) collapsed.push_back(d.busiest_fraction > threshold);
    return collapsed;
}

} // namespace moelab
