#include "bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "ops.hpp"

namespace moelab {

namespace {

double rel_deviation(const Tensor& a, const Tensor& b) {
    double max_abs = 0.0, max_diff = 0.0;
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = a.vals<T>();
        auto bv = b.vals<T>();
        for (size_t i = 0; i < av.size(); ++i) {
            max_abs = std::max(max_abs, std::abs(static_cast<double>(av[i])));
            max_diff =
                std::max(max_diff, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
        }
    });
    return max_diff / std::max(max_abs, 1e-12);
}

} // namespace

BenchReport bench_dispatch(const BenchShape& s, int repeats) {
    if (repeats < 1) fail("bench: repeats must be >= 1");
    BenchReport rep;
    rep.shape = s;
    rep.repeats = repeats;

    const DType dt = DType::F32;
    Tensor x = Tensor::randn({s.tokens, s.d_model}, dt, rng::Stream(s.seed, "bench.x"), 1.0);
    x.set_requires_grad(true);
    MoEWeights w;
    w.router = Tensor::randn({s.d_model, s.n_experts}, dt, rng::Stream(s.seed, "bench.router"),
                             0.02);
    w.gate = Tensor::randn({s.n_experts, s.d_model, s.expert_hidden}, dt,
                           rng::Stream(s.seed, "bench.gate"), 0.02);
    w.up = Tensor::randn({s.n_experts, s.d_model, s.expert_hidden}, dt,
                         rng::Stream(s.seed, "bench.up"), 0.02);
    w.down = Tensor::randn({s.n_experts, s.expert_hidden, s.d_model}, dt,
                           rng::Stream(s.seed, "bench.down"), 0.02);
    w.router.set_requires_grad(true);
    w.gate.set_requires_grad(true);
    w.up.set_requires_grad(true);
    w.down.set_requires_grad(true);

    const RouterDecision decision = route(x, w.router, s.top_k);

    const DispatchPath paths[] = {DispatchPath::Naive, DispatchPath::Grouped,
                                  DispatchPath::Stacked};
    std::vector<Tensor> outputs;

    for (DispatchPath path : paths) {
        auto run_once = [&]() {
            for (auto* t : {&x, &w.router, &w.gate, &w.up, &w.down}) t->zero_grad();
            RouterDecision d = route(x, w.router, s.top_k);
            Tensor y = dispatch(x, w, d, path);
            backward(ops::sum_all(y));
            return y;
        };

        run_once(); // warmup
        std::vector<double> times;
        times.reserve(static_cast<size_t>(repeats));
        for (int r = 0; r < repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            run_once();
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];

        BenchPathResult pr;
        pr.path = dispatch_path_name(path);
        pr.tok_per_s = static_cast<double>(s.tokens) / median;
        rep.paths.push_back(pr);

        NoGradGuard ng;
        outputs.push_back(dispatch(x, w, decision, path));
    }

    for (size_t i = 0; i < outputs.size(); ++i) {
        for (size_t j = i + 1; j < outputs.size(); ++j) {
            rep.max_rel_deviation =
                std::max(rep.max_rel_deviation, rel_deviation(outputs[i], outputs[j]));
        }
    }
    return rep;
}

std::string bench_report_text(const BenchReport& rep) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf),
                  "dispatch bench: %lld tokens, d_model %lld, %lld experts, hidden %lld, top-%lld, "
                  "%d repeats\n",
                  static_cast<long long>(rep.shape.tokens), static_cast<long long>(rep.shape.d_model),
                  static_cast<long long>(rep.shape.n_experts),
                  static_cast<long long>(rep.shape.expert_hidden),
                  static_cast<long long>(rep.shape.top_k), rep.repeats);
    out += buf;
    for (const BenchPathResult& p : rep.paths) {
        std::snprintf(buf, sizeof(buf), "  %-8s %10.0f tok/s\n", p.path.c_str(), p.tok_per_s);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "  max cross-path relative deviation: %.3g\n",
                  rep.max_rel_deviation);
    out += buf;
    return out;
}

} // namespace moelab
