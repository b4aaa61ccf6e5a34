#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fdcheck.hpp"
#include "ops.hpp"
#include "support/oracles.hpp"

using namespace moelab;
namespace O = ops;

namespace {

Tensor randn64(Shape s, uint64_t seed, double stddev = 1.0) {
    return Tensor::randn(std::move(s), DType::F64, rng::Stream(seed, "test"), stddev);
}

// Weighted scalar readout so gradients are informative even for normalized ops.
Tensor weighted_sum(const Tensor& y, uint64_t seed) {
    Tensor w = Tensor::randn(y.shape(), y.dtype(), rng::Stream(seed, "readout"), 1.0);
    return O::sum_all(O::mul(y, w));
}

double fd_err(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    return finite_difference_check(f, x, 1e-5, 1e-6).max_rel_err;
}

} // namespace

TEST_CASE("matmul scalar product") {
    Tensor a = Tensor::from({1, 1}, std::vector<float>{2.0f});
    Tensor b = Tensor::from({1, 1}, std::vector<float>{3.0f});
    CHECK(O::matmul(a, b).at({0, 0}) == doctest::Approx(6.0));
}

TEST_CASE("matmul matches reference on random shapes") {
    const int64_t M = 5, K = 7, N = 3;
    Tensor a = randn64({M, K}, 11);
    Tensor b = randn64({K, N}, 12);
    Tensor c = O::matmul(a, b);
    std::vector<double> av(a.vals<double>().begin(), a.vals<double>().end());
    std::vector<double> bv(b.vals<double>().begin(), b.vals<double>().end());
    auto ref = oracle::matmul(av, bv, M, K, N);
    for (int64_t i = 0; i < c.numel(); ++i) {
        CHECK(c.flat(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape errors name the op and shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH_AS(O::matmul(a, b), "matmul: shape mismatch (2,3) @ (4,5)",
                         std::runtime_error);
}

TEST_CASE("softmax of uniform logits is uniform and rows sum to 1") {
    Tensor x = Tensor::zeros({4});
    Tensor p = O::softmax(x);
    for (int64_t i = 0; i < 4; ++i) CHECK(p.flat(i) == doctest::Approx(0.25));

    Tensor r = randn64({6, 9}, 21);
    Tensor pr = O::softmax(r);
    for (int64_t i = 0; i < 6; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < 9; ++j) sum += pr.at({i, j});
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("cross-entropy of uniform logits is ln(V)") {
    Tensor logits = Tensor::zeros({2, 30008}, DType::F64);
    Tensor ce = O::cross_entropy(logits, {5, 17});
    CHECK(ce.item() == doctest::Approx(std::log(30008.0)).epsilon(1e-9));
    CHECK(ce.item() == doctest::Approx(10.3095).epsilon(1e-4));
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tensor x = Tensor::from({2}, std::vector<double>{1.0, 2.0});
    x.set_requires_grad(true);
    Tensor loss = O::sum_all(O::mul(x, x));
    backward(loss);
    CHECK(x.grad_flat(0) == doctest::Approx(2.0));
    CHECK(x.grad_flat(1) == doctest::Approx(4.0));
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
    Tensor logits = Tensor::zeros({1, 2}, DType::F64);
    logits.set_requires_grad(true);
    backward(O::cross_entropy(logits, {0}));
    CHECK(logits.grad_flat(0) == doctest::Approx(-0.5));
    CHECK(logits.grad_flat(1) == doctest::Approx(0.5));
}

TEST_CASE("backward guards") {
    Tensor x = randn64({3}, 31);
    x.set_requires_grad(true);
    Tensor y = O::sum_all(x);
    backward(y);
    CHECK_THROWS_AS(backward(y), std::runtime_error); // second sweep without reset

    Tensor vec = O::mul(x, x);
    CHECK_THROWS_AS(backward(vec), std::runtime_error); // non-scalar loss

    Tensor detached = randn64({1}, 32);
    CHECK_THROWS_AS(backward(detached), std::runtime_error); // no graph
}

TEST_CASE("gradient accumulates across separate graphs") {
    Tensor x = Tensor::from({1}, std::vector<double>{3.0});
    x.set_requires_grad(true);
    backward(O::sum_all(O::scale(x, 2.0)));
    backward(O::sum_all(O::scale(x, 5.0)));
    CHECK(x.grad_flat(0) == doctest::Approx(7.0));
}

TEST_CASE("log-sum-exp is shift invariant") {
    Tensor x = randn64({5, 8}, 41);
    Tensor shifted = O::add(x, Tensor::full({}, 3.7, DType::F64));
    Tensor a = O::logsumexp(x);
    Tensor b = O::logsumexp(shifted);
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(b.flat(i) - a.flat(i) == doctest::Approx(3.7).epsilon(1e-9));
    }
}

TEST_CASE("scatter-add then index-select is identity on non-colliding indices") {
    Tensor x = randn64({4, 3}, 51);
    const std::vector<int64_t> idx = {2, 0, 5, 3};
    Tensor scattered = O::scatter_add(x, 0, idx, 6);
    Tensor back = O::index_select(scattered, 0, idx);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.flat(i) == x.flat(i));
}

TEST_CASE("broadcasting matches explicit loops") {
    Tensor a = randn64({3, 4}, 61);
    Tensor b = randn64({4}, 62);
    Tensor c = O::mul(a, b);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(c.at({i, j}) == doctest::Approx(a.at({i, j}) * b.at({j})).epsilon(1e-12));
        }
    }
    Tensor col = randn64({3, 1}, 63);
    Tensor d = O::add(a, col);
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(d.at({i, j}) == doctest::Approx(a.at({i, j}) + col.at({i, 0})).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(O::add(Tensor::zeros({3, 2}), Tensor::zeros({3, 4})), std::runtime_error);
}

TEST_CASE("dropout: eval identity, train scaling, stream determinism") {
    Tensor x = Tensor::full({1000}, 1.0);
    rng::Stream s(7, "drop");
    Tensor eval_out = O::dropout(x, 0.5, /*train=*/false, s);
    CHECK(eval_out.impl() == x.impl()); // same handle, not just same values

    Tensor a = O::dropout(x, 0.25, true, s);
    Tensor b = O::dropout(x, 0.25, true, s);
    int64_t kept = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.flat(i) == b.flat(i)); // same stream -> same mask
        if (a.flat(i) != 0.0) {
            CHECK(a.flat(i) == doctest::Approx(1.0 / 0.75));
            ++kept;
        }
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
    CHECK_THROWS_AS(O::dropout(x, 1.0, true, s), std::runtime_error);
}

TEST_CASE("determinism: identical seeds give bit-identical values and grads") {
    auto run = [](uint64_t seed) {
        Tensor x = Tensor::randn({8, 8}, DType::F32, rng::Stream(seed, "d"), 1.0);
        x.set_requires_grad(true);
        Tensor y = O::sum_all(O::softmax(O::matmul(x, O::transpose(x, 0, 1))));
        backward(y);
        std::vector<float> out;
        auto g = x.grad_vals<float>();
        out.assign(g.begin(), g.end());
        return out;
    };
    auto a = run(123), b = run(123);
    CHECK(a == b);
}

TEST_CASE("transpose, reshape, slice, concat round-trips") {
    Tensor x = randn64({2, 3, 4}, 71);
    Tensor t = O::transpose(O::transpose(x, 0, 2), 0, 2);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.flat(i) == x.flat(i));

    Tensor r = O::reshape(O::reshape(x, {6, 4}), {2, 3, 4});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(r.flat(i) == x.flat(i));

    Tensor left = O::slice(x, 1, 0, 2);
    Tensor right = O::slice(x, 1, 2, 3);
    Tensor joined = O::concat({left, right}, 1);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(joined.flat(i) == x.flat(i));

    CHECK_THROWS_AS(O::slice(x, 1, 2, 5), std::runtime_error);
    CHECK_THROWS_AS(O::reshape(x, {5, 5}), std::runtime_error);
}

TEST_CASE("embedding rejects out-of-range token ids") {
    Tensor table = Tensor::zeros({10, 4});
    CHECK_THROWS_AS(O::embedding(table, {3, 10}), std::runtime_error);
}

TEST_CASE("finite differences: trivial all-ones gradient of sum") {
    Tensor x = randn64({6}, 81);
    auto rep = finite_difference_check([](const Tensor& t) { return O::sum_all(t); }, x, 1e-5,
                                       1e-6);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("finite differences: every differentiable op kind") {
    // each op wrapped in a weighted scalar readout; 64-bit, step 1e-5
    const double tol = 1e-6;

    Tensor x = randn64({4, 6}, 91);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::softmax(t), 1); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::logsumexp(t), 2); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::silu(t), 3); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::sigmoid(t), 4); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::square(t), 5); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::scale(t, -1.7), 6); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::sum(t, 0), 7); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::mean(t, 1, true), 8); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::transpose(t, 0, 1), 9); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::reshape(t, {8, 3}), 10); }, x) < tol);
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::slice(t, 1, 1, 5), 11); }, x) < tol);

    Tensor pos = O::add(O::square(randn64({4, 6}, 92)), Tensor::full({}, 0.5, DType::F64));
    CHECK(fd_err([](const Tensor& t) { return weighted_sum(O::rsqrt(t, 1e-3), 12); }, pos) < tol);

    // binaries: perturb each side
    Tensor other = randn64({4, 6}, 93);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::add(t, other), 13); }, x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::sub(other, t), 14); }, x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::mul(t, other), 15); }, x) < tol);
    Tensor denom = O::add(O::square(randn64({4, 6}, 94)), Tensor::full({}, 1.0, DType::F64));
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::div(t, denom), 16); }, x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::div(other, O::add(O::square(t), Tensor::full({}, 1.0, DType::F64))), 17); }, x) < tol);

    // broadcast both directions
    Tensor vec = randn64({6}, 95);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::mul(t, vec), 18); }, x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::mul(x, t), 19); }, vec) < tol);

    // matmul, both operands, 2d and batched
    Tensor m2 = randn64({6, 5}, 96);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::matmul(t, m2), 20); }, x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::matmul(x, t), 21); }, m2) < tol);
    Tensor a3 = randn64({3, 4, 5}, 97);
    Tensor b3 = randn64({3, 5, 2}, 98);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::matmul(t, b3), 22); }, a3) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::matmul(a3, t), 23); }, b3) < tol);
    Tensor b2 = randn64({5, 2}, 99);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::matmul(a3, t), 24); }, b2) < tol);

    // gathers and scatters
    const std::vector<int64_t> sel = {3, 1, 1, 0};
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::index_select(t, 0, sel), 25); },
                 x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::scatter_add(t, 0, sel, 7), 26); },
                 x) < tol);
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::embedding(t, sel), 27); }, x) <
          tol);
    const std::vector<int64_t> gl = {0, 5, 2, 2, 1, 4, 3, 0};
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::gather_last(t, gl, 2), 28); }, x) <
          tol);

    // concat, masked_fill, rope
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::concat({t, other}, 0), 29); }, x) <
          tol);
    Tensor mask = Tensor::zeros({4, 6}, DType::F64);
    mask.vals<double>()[3] = 1.0;
    mask.vals<double>()[10] = 1.0;
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::masked_fill(t, mask, -3.0), 30); },
                 x) < tol);
    Tensor heads = randn64({2, 5, 8}, 100);
    const std::vector<int64_t> positions = {0, 1, 2, 3, 4};
    CHECK(fd_err(
              [&](const Tensor& t) { return weighted_sum(O::rope(t, positions, 10000.0), 31); },
              heads) < tol);

    // grouped matmul, both operands, with an empty group
    Tensor gx = randn64({7, 4}, 101);
    Tensor gw = randn64({3, 4, 5}, 102);
    const std::vector<int64_t> offsets = {0, 3, 3, 7};
    CHECK(fd_err(
              [&](const Tensor& t) { return weighted_sum(O::grouped_matmul(t, gw, offsets), 32); },
              gx) < tol);
    CHECK(fd_err(
              [&](const Tensor& t) { return weighted_sum(O::grouped_matmul(gx, t, offsets), 33); },
              gw) < tol);

    // cross entropy and dropout
    Tensor logits = randn64({5, 9}, 103);
    CHECK(fd_err([](const Tensor& t) { return O::cross_entropy(t, {1, 8, -1, 0, 4}, -1); },
                 logits) < tol);
    rng::Stream ds(5, "fd.drop");
    CHECK(fd_err([&](const Tensor& t) { return weighted_sum(O::dropout(t, 0.3, true, ds), 34); },
                 x) < tol);
}
