#include "losses.hpp"

#include <cmath>

#include "ops.hpp"

namespace moelab {

namespace O = ops;

Tensor next_token_ce(const Tensor& logits, std::span<const int64_t> tokens, int64_t batch,
                     int64_t window) {
    if (window < 2) fail("next_token_ce: window length must be >= 2");
    if (logits.rank() != 3 || logits.dim(0) != batch || logits.dim(1) != window) {
        fail("next_token_ce: logits shape " + shape_str(logits.shape()) + " does not match " +
             std::to_string(batch) + " rows of " + std::to_string(window) + " tokens");
    }
    if (static_cast<int64_t>(tokens.size()) != batch * window) {
        fail("next_token_ce: token count mismatch");
    }
    // shift: position t predicts token t+1; the last position has no target
    constexpr int64_t kIgnore = -1;
    std::vector<int64_t> targets(static_cast<size_t>(batch * window), kIgnore);
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t + 1 < window; ++t) {
            targets[static_cast<size_t>(b * window + t)] = tokens[static_cast<size_t>(b * window + t + 1)];
        }
    }
    Tensor flat = O::reshape(logits, {batch * window, logits.dim(2)});
    return O::cross_entropy(flat, targets, kIgnore);
}

Objective total_objective(const Tensor& ce, const std::vector<Tensor>& bal_per_layer,
                          const std::vector<Tensor>& z_per_layer, double lambda_bal,
                          double lambda_z) {
    if (lambda_bal < 0 || lambda_z < 0) fail("total_objective: negative lambda");
    if (bal_per_layer.size() != z_per_layer.size()) {
        fail("total_objective: aux term count mismatch");
    }

    Objective obj;
    obj.parts.lambda_bal = lambda_bal;
    obj.parts.lambda_z = lambda_z;
    obj.parts.ce = ce.item();

    Tensor total = ce;
    if (!bal_per_layer.empty()) {
        // aux terms summed over layers (the Switch / ST-MoE convention); the
        // per-layer pressure this gives is what actually reproduces the
        // stabilized busiest-expert fractions
        Tensor bal = bal_per_layer[0];
        Tensor z = z_per_layer[0];
        for (size_t i = 1; i < bal_per_layer.size(); ++i) {
            bal = O::add(bal, bal_per_layer[i]);
            z = O::add(z, z_per_layer[i]);
        }
        obj.parts.bal = bal.item();
        obj.parts.z = z.item();
        total = O::add(total, O::add(O::scale(bal, lambda_bal), O::scale(z, lambda_z)));
    }
    obj.total = total;
    obj.parts.total = total.item();
    return obj;
}

double perplexity(double ce) { return std::exp(ce); }

} // namespace moelab
