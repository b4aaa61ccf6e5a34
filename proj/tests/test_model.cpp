#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "budget.hpp"
#include "fdcheck.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "support/oracles.hpp"

using namespace moelab;
namespace O = ops;

namespace {

Tensor randn64(Shape s, uint64_t seed, double stddev = 1.0) {
    return Tensor::randn(std::move(s), DType::F64, rng::Stream(seed, "test"), stddev);
}

ModelConfig micro_dense(int64_t vocab = 89) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.context_len = 64;
    cfg.ffn_hidden = 48;
    cfg.dropout_p = 0.0;
    return cfg;
}

} // namespace

TEST_CASE("rmsnorm: ones, scale invariance, hand-evaluated values") {
    Tensor gain = Tensor::full({4}, 1.0, DType::F64);
    Tensor ones = Tensor::full({4}, 1.0, DType::F64);
    Tensor y = rmsnorm(ones, gain, 1e-12);
    for (int64_t i = 0; i < 4; ++i) CHECK(y.flat(i) == doctest::Approx(1.0).epsilon(1e-6));

    Tensor twos = Tensor::full({4}, 2.0, DType::F64);
    Tensor y2 = rmsnorm(twos, gain, 1e-5);
    for (int64_t i = 0; i < 4; ++i) CHECK(y2.flat(i) == doctest::Approx(1.0).epsilon(1e-4));

    Tensor v = Tensor::from({2}, std::vector<double>{3.0, 4.0});
    Tensor g2 = Tensor::full({2}, 1.0, DType::F64);
    Tensor y3 = rmsnorm(v, g2, 0.0);
    CHECK(y3.flat(0) == doctest::Approx(0.848528).epsilon(1e-5));
    CHECK(y3.flat(1) == doctest::Approx(1.131371).epsilon(1e-5));
}

TEST_CASE("rope: identity at position zero, norm preservation, relative phase") {
    Tensor x = randn64({1, 8}, 7);
    Tensor y0 = apply_rope(x, {0}, 10000.0);
    for (int64_t i = 0; i < 8; ++i) CHECK(y0.flat(i) == doctest::Approx(x.flat(i)).epsilon(1e-12));

    Tensor xs = randn64({5, 8}, 8);
    Tensor ys = apply_rope(xs, {0, 3, 9, 40, 63}, 10000.0);
    for (int64_t r = 0; r < 5; ++r) {
        double n_in = 0, n_out = 0;
        for (int64_t i = 0; i < 8; ++i) {
            n_in += xs.at({r, i}) * xs.at({r, i});
            n_out += ys.at({r, i}) * ys.at({r, i});
        }
        CHECK(std::sqrt(n_out) == doctest::Approx(std::sqrt(n_in)).epsilon(1e-6));
    }

    // dot(rope(q, p+delta), rope(k, p)) depends only on delta
    Tensor q = randn64({1, 16}, 9);
    Tensor k = randn64({1, 16}, 10);
    const int64_t delta = 5;
    auto rel_dot = [&](int64_t p) {
        Tensor rq = apply_rope(q, {p + delta}, 10000.0);
        Tensor rk = apply_rope(k, {p}, 10000.0);
        double dot = 0;
        for (int64_t i = 0; i < 16; ++i) dot += rq.flat(i) * rk.flat(i);
        return dot;
    };
    const double d0 = rel_dot(0);
    CHECK(rel_dot(7) == doctest::Approx(d0).epsilon(1e-5));
    CHECK(rel_dot(100) == doctest::Approx(d0).epsilon(1e-5));

    CHECK_THROWS_AS(apply_rope(randn64({1, 7}, 11), {0}, 10000.0), std::runtime_error);
}

TEST_CASE("swiglu: zero input gives zero output, gradient checks") {
    Tensor wg = randn64({6, 10}, 12, 0.3);
    Tensor wu = randn64({6, 10}, 13, 0.3);
    Tensor wd = randn64({10, 6}, 14, 0.3);
    Tensor zero = Tensor::zeros({3, 6}, DType::F64);
    Tensor y = swiglu_ffn(zero, wg, wu, wd);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.flat(i) == 0.0);

    Tensor x = randn64({3, 6}, 15);
    auto readout = [&](const Tensor& out) {
        Tensor w = Tensor::randn(out.shape(), DType::F64, rng::Stream(99, "ro"), 1.0);
        return O::sum_all(O::mul(out, w));
    };
    auto rep = finite_difference_check(
        [&](const Tensor& t) { return readout(swiglu_ffn(t, wg, wu, wd)); }, x, 1e-5, 1e-6);
    CHECK(rep.pass);
    auto rep_w = finite_difference_check(
        [&](const Tensor& t) { return readout(swiglu_ffn(x, t, wu, wd)); }, wg, 1e-5, 1e-6);
    CHECK(rep_w.pass);
}

TEST_CASE("attention: single token attends only to itself") {
    const int64_t d = 8, hd = 4;
    AttentionWeights w;
    w.wq = randn64({d, d}, 21, 0.3);
    w.wk = randn64({d, d}, 22, 0.3);
    w.wv = randn64({d, d}, 23, 0.3);
    w.wo = randn64({d, d}, 24, 0.3);
    Tensor x = randn64({1, 1, d}, 25);
    FwdCtx ctx;
    Tensor y = gqa_attention(x, w, 2, 2, hd, {0}, 10000.0, 0.0, ctx);
    // attention weight to self is 1, so y = (x Wv) Wo
    Tensor expect = O::matmul(O::reshape(O::matmul(O::reshape(x, {1, d}), w.wv), {1, d}), w.wo);
    for (int64_t i = 0; i < d; ++i) {
        CHECK(y.flat(i) == doctest::Approx(expect.flat(i)).epsilon(1e-9));
    }
}

TEST_CASE("attention: causal masking is exact under future perturbation") {
    const int64_t d = 16, L = 6;
    AttentionWeights w;
    w.wq = randn64({d, d}, 31, 0.2);
    w.wk = randn64({d, d}, 32, 0.2);
    w.wv = randn64({d, d}, 33, 0.2);
    w.wo = randn64({d, d}, 34, 0.2);
    Tensor x = randn64({1, L, d}, 35);
    std::vector<int64_t> pos = {0, 1, 2, 3, 4, 5};
    FwdCtx ctx;
    Tensor y1 = gqa_attention(x, w, 4, 4, 4, pos, 10000.0, 0.0, ctx);

    Tensor x2 = x.detach();
    const int64_t t_perturb = 4;
    for (int64_t i = 0; i < d; ++i) {
        x2.vals<double>()[static_cast<size_t>(t_perturb * d + i)] += 2.5;
    }
    Tensor y2 = gqa_attention(x2, w, 4, 4, 4, pos, 10000.0, 0.0, ctx);
    for (int64_t t = 0; t < t_perturb; ++t) {
        for (int64_t i = 0; i < d; ++i) {
            CHECK(y1.at({0, t, i}) == y2.at({0, t, i})); // exact
        }
    }
    double diff_after = 0;
    for (int64_t i = 0; i < d; ++i) {
        diff_after += std::abs(y1.at({0, t_perturb, i}) - y2.at({0, t_perturb, i}));
    }
    CHECK(diff_after > 1e-6);
}

TEST_CASE("attention: ungrouped case equals a reference MHA implementation") {
    const int64_t d = 12, H = 3, hd = 4, L = 5;
    AttentionWeights w;
    w.wq = randn64({d, H * hd}, 41, 0.25);
    w.wk = randn64({d, H * hd}, 42, 0.25);
    w.wv = randn64({d, H * hd}, 43, 0.25);
    w.wo = randn64({H * hd, d}, 44, 0.25);
    Tensor x = randn64({1, L, d}, 45);
    FwdCtx ctx;
    Tensor y = gqa_attention(x, w, H, H, hd, {0, 1, 2, 3, 4}, 10000.0, 0.0, ctx);

    auto vec = [](const Tensor& t) {
        return std::vector<double>(t.vals<double>().begin(), t.vals<double>().end());
    };
    auto ref = oracle::mha_reference(vec(x), L, d, H, hd, vec(w.wq), vec(w.wk), vec(w.wv),
                                     vec(w.wo), 10000.0);
    for (int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.flat(i) == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-9));
    }
}

TEST_CASE("attention: grouped equals ungrouped with duplicated kv heads") {
    const int64_t d = 16, H = 4, hd = 4, L = 6;
    // grouped: 2 kv heads; ungrouped reference: duplicate each kv head twice
    Tensor wk2 = randn64({d, 2 * hd}, 52, 0.25);
    Tensor wv2 = randn64({d, 2 * hd}, 53, 0.25);
    auto duplicate_heads = [&](const Tensor& src) {
        // (d, [h0 h1]) -> (d, [h0 h0 h1 h1])
        Tensor h0 = O::slice(src, 1, 0, hd);
        Tensor h1 = O::slice(src, 1, hd, 2 * hd);
        return O::concat({h0, h0, h1, h1}, 1);
    };
    AttentionWeights grouped;
    grouped.wq = randn64({d, H * hd}, 51, 0.25);
    grouped.wk = wk2;
    grouped.wv = wv2;
    grouped.wo = randn64({H * hd, d}, 54, 0.25);
    AttentionWeights full = grouped;
    full.wk = duplicate_heads(wk2);
    full.wv = duplicate_heads(wv2);

    Tensor x = randn64({1, L, d}, 55);
    FwdCtx ctx;
    std::vector<int64_t> pos = {0, 1, 2, 3, 4, 5};
    Tensor yg = gqa_attention(x, grouped, H, 2, hd, pos, 10000.0, 0.0, ctx);
    Tensor yf = gqa_attention(x, full, H, H, hd, pos, 10000.0, 0.0, ctx);
    for (int64_t i = 0; i < yg.numel(); ++i) {
        CHECK(yg.flat(i) == doctest::Approx(yf.flat(i)).epsilon(1e-9));
    }
}

TEST_CASE("model_forward: logits shape and near-uniform initial loss") {
    ModelConfig cfg = micro_dense(30008);
    cfg.d_model = 64;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.ffn_hidden = 96;
    DecoderModel model(cfg, 1337);
    std::vector<int64_t> tokens = {17, 4000, 29999, 5, 123, 777, 30007, 0, 42, 9, 11, 2};
    FwdCtx ctx;
    ForwardResult fr = model.forward(tokens, 1, static_cast<int64_t>(tokens.size()), ctx);
    CHECK(fr.logits.shape() == Shape{1, 12, 30008});

    const double ce = next_token_ce(fr.logits, tokens, 1, 12).item();
    CHECK(std::abs(ce - std::log(30008.0)) < 0.1);
}

TEST_CASE("model_forward: causality across the full stack") {
    ModelConfig cfg = micro_dense();
    DecoderModel model(cfg, 7);
    std::vector<int64_t> tokens = {1, 2, 3, 4, 5, 6, 7, 8};
    FwdCtx ctx;
    Tensor l1 = model.forward(tokens, 1, 8, ctx).logits;
    std::vector<int64_t> tokens2 = tokens;
    tokens2[5] = 60; // perturb a future token
    Tensor l2 = model.forward(tokens2, 1, 8, ctx).logits;
    for (int64_t t = 0; t < 5; ++t) {
        for (int64_t v = 0; v < cfg.vocab_size; ++v) {
            CHECK(l1.at({0, t, v}) == l2.at({0, t, v})); // bitwise equal
        }
    }
}

TEST_CASE("model_forward: eval mode is a pure function of weights and tokens") {
    ModelConfig cfg = micro_dense();
    cfg.dropout_p = 0.1; // present but inactive in eval
    DecoderModel model(cfg, 99);
    std::vector<int64_t> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
    FwdCtx ctx; // train=false
    Tensor a = model.forward(tokens, 1, 8, ctx).logits;
    Tensor b = model.forward(tokens, 1, 8, ctx).logits;
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.flat(i) == b.flat(i));
}

TEST_CASE("model_forward: rejects overflow and bad token ids") {
    ModelConfig cfg = micro_dense();
    DecoderModel model(cfg, 1);
    FwdCtx ctx;
    std::vector<int64_t> too_long(100, 1);
    CHECK_THROWS_AS(model.forward(too_long, 1, 100, ctx), std::runtime_error);
    std::vector<int64_t> bad = {1, 2, 89};
    CHECK_THROWS_AS(model.forward(bad, 1, 3, ctx), std::runtime_error);
}

TEST_CASE("tied embeddings: input table and output projection share storage") {
    ModelConfig cfg = micro_dense();
    DecoderModel model(cfg, 5);
    // exactly one embedding-shaped parameter, no separate output projection
    int embedding_like = 0;
    for (const auto& p : model.params()) {
        if (p.tensor.shape() == Shape{cfg.vocab_size, cfg.d_model}) ++embedding_like;
    }
    CHECK(embedding_like == 1);

    std::vector<int64_t> tokens = {0, 1, 2, 3};
    FwdCtx ctx;
    Tensor before = model.forward(tokens, 1, 4, ctx).logits;
    // bump one embedding row through the parameter list handle
    NamedParam* emb = model.find_param("embedding");
    REQUIRE(emb != nullptr);
    for (int64_t i = 0; i < cfg.d_model; ++i) {
        emb->tensor.vals<float>()[static_cast<size_t>(7 * cfg.d_model + i)] += 0.5f;
    }
    Tensor after = model.forward(tokens, 1, 4, ctx).logits;
    // the logit column for token 7 must move at every position (output side)
    for (int64_t t = 0; t < 4; ++t) {
        CHECK(std::abs(after.at({0, t, 7}) - before.at({0, t, 7})) > 1e-6);
    }
}

TEST_CASE("model parameter tensors sum to the closed-form accounting") {
    ModelConfig dense_total;
    dense_total.vocab_size = 30008;
    dense_total.d_model = 384;
    dense_total.n_layers = 4;
    dense_total.n_query_heads = 6;
    dense_total.n_kv_heads = 2;
    dense_total.ffn_hidden = 1728;
    DecoderModel model(dense_total, 1);
    const ParamBreakdown pb = count_params(dense_total);
    CHECK(model.param_count() == pb.total);
    CHECK(pb.total == 21062016);

    ModelConfig moe_cfg;
    moe_cfg.vocab_size = 257;
    moe_cfg.d_model = 64;
    moe_cfg.n_layers = 2;
    moe_cfg.n_query_heads = 4;
    moe_cfg.n_kv_heads = 2;
    moe_cfg.moe = MoEConfig{4, 2, 128, 1e-2, 1e-3, DispatchPath::Grouped};
    DecoderModel moe_model(moe_cfg, 1);
    CHECK(moe_model.param_count() == count_params(moe_cfg).total);
}

TEST_CASE("block outputs stay finite over random probes") {
    Tensor gain = Tensor::full({16}, 1.0);
    Tensor wg = Tensor::randn({16, 24}, DType::F32, rng::Stream(61, "p"), 0.5);
    Tensor wu = Tensor::randn({16, 24}, DType::F32, rng::Stream(62, "p"), 0.5);
    Tensor wd = Tensor::randn({24, 16}, DType::F32, rng::Stream(63, "p"), 0.5);
    for (int probe = 0; probe < 1000; ++probe) {
        Tensor x = Tensor::randn({4, 16}, DType::F32, rng::Stream(1000 + probe, "px"), 3.0);
        Tensor a = rmsnorm(x, gain, 1e-5);
        Tensor b = swiglu_ffn(a, wg, wu, wd);
        for (int64_t i = 0; i < b.numel(); ++i) {
            CHECK(std::isfinite(b.flat(i)));
        }
    }
}
