#pragma once

#include <span>
#include <vector>

#include "tensor.hpp"

namespace moelab {

struct ObjectiveBreakdown {
    double ce = 0.0;
    double bal = 0.0;
    double z = 0.0;
    double total = 0.0;
    double lambda_bal = 0.0;
    double lambda_z = 0.0;
};

// Mean next-token cross-entropy: logits (B, L, V) against tokens shifted by
// one; each L-token row contributes L-1 prediction targets.
Tensor next_token_ce(const Tensor& logits, std::span<const int64_t> tokens, int64_t batch,
                     int64_t window);

struct Objective {
    Tensor total; // scalar, on the tape
    ObjectiveBreakdown parts;
};

// total = ce + lambda_bal * sum(bal) + lambda_z * sum(z), aux summed over
// layers. Dense models pass empty aux vectors.
Objective total_objective(const Tensor& ce, const std::vector<Tensor>& bal_per_layer,
                          const std::vector<Tensor>& z_per_layer, double lambda_bal,
                          double lambda_z);

double perplexity(double ce);

} // namespace moelab
