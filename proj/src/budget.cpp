#include "budget.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tensor.hpp"

namespace moelab {

ParamBreakdown count_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t hd = cfg.resolved_head_dim();
    const int64_t q_width = cfg.n_query_heads * hd;
    const int64_t kv_width = cfg.n_kv_heads * hd;

    ParamBreakdown b;
    b.embedding = cfg.vocab_size * d;

    const int64_t attn_per_layer = d * q_width + 2 * d * kv_width + q_width * d;
    const int64_t norms = cfg.n_layers * 2 * d + d; // two gains per layer + final norm
    b.non_ffn_blocks = cfg.n_layers * attn_per_layer + norms;

    if (cfg.is_moe()) {
        const int64_t E = cfg.moe->n_experts;
        const int64_t h = cfg.moe->expert_hidden;
        const int64_t expert_per_layer = E * 3 * d * h;
        b.ffn_or_expert_total = cfg.n_layers * expert_per_layer;
        b.router = cfg.n_layers * d * E;
        b.total = b.embedding + b.non_ffn_blocks + b.ffn_or_expert_total + b.router;
        // active = shared params + the top_k routed path; the router is
        // exercised on every token so it stays inside active
        b.active = b.total - (E - cfg.moe->top_k) * (b.ffn_or_expert_total / E);
    } else {
        b.ffn_or_expert_total = cfg.n_layers * 3 * d * cfg.ffn_hidden;
        b.router = 0;
        b.total = b.embedding + b.non_ffn_blocks + b.ffn_or_expert_total;
        b.active = b.total;
    }
    return b;
}

std::string ParamBreakdown::table(const std::string& label) const {
    auto m = [](int64_t v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(v) / 1e6);
        return std::string(buf);
    };
    std::string out;
    out += label + "\n";
    out += "  embedding         " + m(embedding) + "  (" + std::to_string(embedding) + ")\n";
    out += "  non-FFN blocks    " + m(non_ffn_blocks) + "  (" + std::to_string(non_ffn_blocks) + ")\n";
    out += "  FFN/expert total  " + m(ffn_or_expert_total) + "  (" + std::to_string(ffn_or_expert_total) + ")\n";
    if (router > 0) {
        out += "  router            " + m(router) + "  (" + std::to_string(router) + ")\n";
    }
    out += "  total             " + m(total) + "  (" + std::to_string(total) + ")\n";
    out += "  active            " + m(active) + "  (" + std::to_string(active) + ")\n";
    return out;
}

BudgetMatch match_budget(BudgetKind kind, int64_t target_count, const BudgetConstraints& c) {
    if (target_count < 1) fail("match_budget: target must be positive");
    bool found = false;
    BudgetMatch best;
    std::string binding = "d_model range [" + std::to_string(c.d_model_min) + "," +
                          std::to_string(c.d_model_max) + "] granularity " +
                          std::to_string(c.d_model_granularity) + ", head_dim " +
                          std::to_string(c.head_dim) + ", ffn ratio [" +
                          std::to_string(c.ffn_ratio_min) + "," + std::to_string(c.ffn_ratio_max) +
                          "]";

    for (int64_t d = c.d_model_min; d <= c.d_model_max; d += c.d_model_granularity) {
        if (d % c.head_dim != 0) continue;
        const int64_t n_q = d / c.head_dim;
        if (n_q < c.n_kv_heads || n_q % c.n_kv_heads != 0) continue;
        for (double ratio = c.ffn_ratio_min; ratio <= c.ffn_ratio_max + 1e-9;
             ratio += c.ffn_ratio_step) {
            const int64_t ffn = std::llround(ratio * static_cast<double>(d));
            if (ffn < 1) continue;
            ModelConfig cfg;
            cfg.vocab_size = c.vocab;
            cfg.d_model = d;
            cfg.n_layers = c.n_layers;
            cfg.n_query_heads = n_q;
            cfg.n_kv_heads = c.n_kv_heads;
            cfg.context_len = c.context_len;
            cfg.ffn_hidden = ffn;
            const ParamBreakdown pb = count_params(cfg);
            const int64_t got = kind == BudgetKind::Active ? pb.active : pb.total;
            const double err = std::abs(static_cast<double>(got - target_count)) /
                               static_cast<double>(target_count);
            if (!found || err < best.rel_error) {
                found = true;
                best.config = cfg;
                best.breakdown = pb;
                best.rel_error = err;
            }
        }
    }
    if (!found) fail("match_budget: empty feasible set (" + binding + ")");
    return best;
}

GapSeries fairness_gaps(std::span<const double> dense_active, std::span<const double> moe,
                        std::span<const double> dense_total) {
    if (dense_active.size() != moe.size() || moe.size() != dense_total.size()) {
        fail("fairness_gaps: misaligned series (" + std::to_string(dense_active.size()) + "/" +
             std::to_string(moe.size()) + "/" + std::to_string(dense_total.size()) + ")");
    }
    if (moe.empty()) fail("fairness_gaps: empty series");
    GapSeries g;
    g.active_gap.reserve(moe.size());
    g.total_gap.reserve(moe.size());
    for (size_t i = 0; i < moe.size(); ++i) {
        g.active_gap.push_back(dense_active[i] - moe[i]);
        g.total_gap.push_back(moe[i] - dense_total[i]);
    }
    const double best_da = *std::min_element(dense_active.begin(), dense_active.end());
    const double best_moe = *std::min_element(moe.begin(), moe.end());
    const double best_dt = *std::min_element(dense_total.begin(), dense_total.end());
    g.best_active_gap = best_da - best_moe;
    g.best_total_gap = best_moe - best_dt;
    return g;
}

} // namespace moelab
