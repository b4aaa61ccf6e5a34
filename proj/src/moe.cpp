#include "moe.hpp"

#include <algorithm>
#include <numeric>

#include "model.hpp"
#include "ops.hpp"

namespace moelab {

namespace O = ops;

RouterDecision route(const Tensor& x, const Tensor& router_w, int64_t top_k) {
    if (x.rank() != 2) fail("route: input must be (tokens, d_model)");
    const int64_t T = x.dim(0);
    const int64_t E = router_w.dim(1);
    if (top_k < 1 || top_k > E) {
        fail("route: top_k " + std::to_string(top_k) + " out of range for " + std::to_string(E) +
             " experts");
    }
    if (T < 1) fail("route: empty token batch");

    Tensor logits = O::matmul(x, router_w); // (T, E)
    RouterDecision d;
    d.probs = O::softmax(logits);
    d.logits_lse = O::logsumexp(logits);
    d.tokens = T;
    d.n_experts = E;
    d.top_k = top_k;

    // discrete selection on prob values: k largest, ties to the lowest index
    d.topk.resize(static_cast<size_t>(T * top_k));
    std::vector<int64_t> order(static_cast<size_t>(E));
    dispatch(d.probs.dtype(), [&](auto tag) {
        using Tv = decltype(tag);
        auto pv = d.probs.vals<Tv>();
        for (int64_t t = 0; t < T; ++t) {
            const Tv* row = pv.data() + t * E;
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int64_t a, int64_t b) { return row[a] > row[b]; });
            for (int64_t j = 0; j < top_k; ++j) {
                d.topk[static_cast<size_t>(t * top_k + j)] = order[static_cast<size_t>(j)];
            }
        }
    });

    Tensor sel = O::gather_last(d.probs, d.topk, top_k); // (T, k)
    if (top_k == 1) {
        d.gates = sel;
    } else {
        d.gates = O::div(sel, O::sum(sel, -1, /*keepdim=*/true));
    }
    return d;
}

Tensor balance_loss(const RouterDecision& d) {
    if (d.tokens < 1) fail("balance_loss: empty batch");
    const int64_t E = d.n_experts;
    std::vector<double> f(static_cast<size_t>(E), 0.0);
    for (int64_t id : d.topk) f[static_cast<size_t>(id)] += 1.0;
    const double denom = static_cast<double>(d.tokens * d.top_k);
    Tensor f_t = Tensor::zeros({E}, d.probs.dtype());
    dispatch(f_t.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = f_t.vals<T>();
        for (int64_t e = 0; e < E; ++e) v[static_cast<size_t>(e)] = static_cast<T>(f[static_cast<size_t>(e)] / denom);
    });
    Tensor mean_probs = O::mean(d.probs, 0); // (E,)
    return O::scale(O::sum_all(O::mul(mean_probs, f_t)), static_cast<double>(E));
}

Tensor z_loss(const RouterDecision& d) {
    if (d.tokens < 1) fail("z_loss: empty batch");
    return O::mean_all(O::square(d.logits_lse));
}

ExpertAssignment build_assignment(const RouterDecision& d) {
    ExpertAssignment a;
    a.rows.resize(static_cast<size_t>(d.n_experts));
    a.slots.resize(static_cast<size_t>(d.n_experts));
    for (int64_t t = 0; t < d.tokens; ++t) {
        for (int64_t j = 0; j < d.top_k; ++j) {
            const int64_t e = d.topk[static_cast<size_t>(t * d.top_k + j)];
            if (j > 0 && e == d.topk[static_cast<size_t>(t * d.top_k + j - 1)]) {
                fail("dispatch plan: duplicate expert assignment for token " + std::to_string(t));
            }
            a.rows[static_cast<size_t>(e)].push_back(t);
            a.slots[static_cast<size_t>(e)].push_back(t * d.top_k + j);
            ++a.total;
        }
    }
    if (a.total != d.tokens * d.top_k) {
        fail("dispatch plan: expected " + std::to_string(d.tokens * d.top_k) +
             " assignments, built " + std::to_string(a.total));
    }
    return a;
}

namespace {

struct ExpertView {
    Tensor gate, up, down; // (d,h), (d,h), (h,d)
};

ExpertView expert_view(const MoEWeights& w, int64_t e) {
    const int64_t d = w.gate.dim(1), h = w.gate.dim(2);
    ExpertView v;
    v.gate = O::reshape(O::index_select(w.gate, 0, {e}), {d, h});
    v.up = O::reshape(O::index_select(w.up, 0, {e}), {d, h});
    v.down = O::reshape(O::index_select(w.down, 0, {e}), {h, d});
    return v;
}

} // namespace

Tensor dispatch_naive(const Tensor& x, const MoEWeights& w, const RouterDecision& d) {
    const int64_t T = d.tokens, k = d.top_k, E = d.n_experts;
    std::vector<ExpertView> views;
    views.reserve(static_cast<size_t>(E));
    for (int64_t e = 0; e < E; ++e) views.push_back(expert_view(w, e));

    std::vector<Tensor> out_rows;
    out_rows.reserve(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        Tensor xt = O::index_select(x, 0, {t}); // (1, d)
        Tensor gt = O::slice(d.gates, 0, t, t + 1); // (1, k)
        Tensor acc;
        for (int64_t j = 0; j < k; ++j) {
            const int64_t e = d.topk[static_cast<size_t>(t * k + j)];
            const ExpertView& ev = views[static_cast<size_t>(e)];
            Tensor he = swiglu_ffn(xt, ev.gate, ev.up, ev.down); // (1, d)
            Tensor term = O::mul(he, O::slice(gt, 1, j, j + 1));  // (1,d)*(1,1)
            acc = j == 0 ? term : O::add(acc, term);
        }
        out_rows.push_back(acc);
    }
    return O::concat(out_rows, 0);
}

Tensor dispatch_grouped(const Tensor& x, const MoEWeights& w, const RouterDecision& d) {
    const int64_t T = d.tokens, k = d.top_k, E = d.n_experts;
    const ExpertAssignment asg = build_assignment(d);
    Tensor gates_flat = O::reshape(d.gates, {T * k, 1});

    std::vector<Tensor> contribs;
    std::vector<int64_t> all_rows;
    for (int64_t e = 0; e < E; ++e) {
        const auto& rows = asg.rows[static_cast<size_t>(e)];
        if (rows.empty()) continue; // dropless: an idle expert simply contributes nothing
        const ExpertView ev = expert_view(w, e);
        Tensor xe = O::index_select(x, 0, rows);
        Tensor he = swiglu_ffn(xe, ev.gate, ev.up, ev.down);
        Tensor ge = O::index_select(gates_flat, 0, asg.slots[static_cast<size_t>(e)]);
        contribs.push_back(O::mul(he, ge));
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }
    return O::scatter_add(O::concat(contribs, 0), 0, all_rows, T);
}

Tensor dispatch_stacked(const Tensor& x, const MoEWeights& w, const RouterDecision& d) {
    const int64_t T = d.tokens, k = d.top_k, E = d.n_experts;
    const ExpertAssignment asg = build_assignment(d);

    std::vector<int64_t> perm_rows, perm_slots, offsets(1, 0);
    perm_rows.reserve(static_cast<size_t>(T * k));
    perm_slots.reserve(static_cast<size_t>(T * k));
    for (int64_t e = 0; e < E; ++e) {
        const auto& rows = asg.rows[static_cast<size_t>(e)];
        perm_rows.insert(perm_rows.end(), rows.begin(), rows.end());
        const auto& slots = asg.slots[static_cast<size_t>(e)];
        perm_slots.insert(perm_slots.end(), slots.begin(), slots.end());
        offsets.push_back(static_cast<int64_t>(perm_rows.size()));
    }

    Tensor xs = O::index_select(x, 0, perm_rows); // (T*k, d) grouped by expert
    Tensor hg = O::grouped_matmul(xs, w.gate, offsets);
    Tensor hu = O::grouped_matmul(xs, w.up, offsets);
    Tensor hidden = O::mul(O::silu(hg), hu);
    Tensor out = O::grouped_matmul(hidden, w.down, offsets); // (T*k, d)
    Tensor gates_perm = O::index_select(O::reshape(d.gates, {T * k, 1}), 0, perm_slots);
    return O::scatter_add(O::mul(out, gates_perm), 0, perm_rows, T);
}

Tensor dispatch(const Tensor& x, const MoEWeights& w, const RouterDecision& d,
                DispatchPath path) {
    switch (path) {
    case DispatchPath::Naive: return dispatch_naive(x, w, d);
    case DispatchPath::Grouped: return dispatch_grouped(x, w, d);
    case DispatchPath::Stacked: return dispatch_stacked(x, w, d);
    }
    fail("dispatch: unknown path");
}

MoEForwardOut moe_forward(const Tensor& x, const MoEWeights& w, const MoEConfig& cfg,
                          double dropout_p, const FwdCtx& ctx) {
    MoEForwardOut out;
    out.decision = route(x, w.router, cfg.top_k);
    out.y = dispatch(x, w, out.decision, cfg.dispatch_path);
    out.y = O::dropout(out.y, dropout_p, ctx.train, ctx.next_dropout_stream());
    out.balance = balance_loss(out.decision);
    out.z = z_loss(out.decision);
    return out;
}

} // namespace moelab
