#pragma once

#include <vector>

#include "config.hpp"
#include "tensor.hpp"

namespace moelab {

// Stacked expert weights for one routed layer.
struct MoEWeights {
    Tensor router; // (d, E)
    Tensor gate;   // (E, d, h)
    Tensor up;     // (E, d, h)
    Tensor down;   // (E, h, d)
};

// Per-token routing output. probs/gates/logits_lse stay on the tape so the
// router receives gradient through the gate values and the auxiliary losses;
// the discrete top-k selection itself carries no gradient.
struct RouterDecision {
    Tensor probs;              // (T, E)
    Tensor gates;              // (T, k)
    Tensor logits_lse;         // (T,)
    std::vector<int64_t> topk; // T*k expert ids, per-token slots in descending prob
    int64_t tokens = 0;
    int64_t n_experts = 0;
    int64_t top_k = 0;
};

// Softmax routing with lowest-index tie-break. Gates are the selected probs
// renormalized to sum 1 for k >= 2; for k == 1 the raw selected probability is
// used (a renormalized single gate is the constant 1 and would detach the
// router from the loss entirely).
RouterDecision route(const Tensor& x, const Tensor& router_w, int64_t top_k);

// Switch-style load balance: n_experts * sum_e f_e * P_e, where f_e counts
// top-k assignments (each weighted 1/top_k) and P_e is the mean router prob.
Tensor balance_loss(const RouterDecision& d);

// Mean squared log-sum-exp of the router logits.
Tensor z_loss(const RouterDecision& d);

// The dropless dispatch plan: every (token, selected expert) pair exactly once.
struct ExpertAssignment {
    std::vector<std::vector<int64_t>> rows;  // per expert: token row ids
    std::vector<std::vector<int64_t>> slots; // per expert: flat gate slot (row*k + j)
    int64_t total = 0;
};

ExpertAssignment build_assignment(const RouterDecision& d);

// Three algebraically identical execution paths for the routed layer.
Tensor dispatch_naive(const Tensor& x, const MoEWeights& w, const RouterDecision& d);
Tensor dispatch_grouped(const Tensor& x, const MoEWeights& w, const RouterDecision& d);
Tensor dispatch_stacked(const Tensor& x, const MoEWeights& w, const RouterDecision& d);

Tensor dispatch(const Tensor& x, const MoEWeights& w, const RouterDecision& d, DispatchPath path);

struct MoEForwardOut {
    Tensor y; // (T, d)
    RouterDecision decision;
    Tensor balance;
    Tensor z;
};

// route + dispatch + output dropout + auxiliary losses for one layer.
MoEForwardOut moe_forward(const Tensor& x, const MoEWeights& w, const MoEConfig& cfg,
                          double dropout_p, const FwdCtx& ctx);

} // namespace moelab
