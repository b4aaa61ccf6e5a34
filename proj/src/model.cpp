#include "model.hpp"

#include <cmath>
#include <limits>

#include "ops.hpp"

namespace moelab {

namespace O = ops;

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    Tensor ms = O::mean(O::square(x), -1, /*keepdim=*/true);
    return O::mul(O::mul(x, O::rsqrt(ms, eps)), gain);
}

Tensor apply_rope(const Tensor& x, const std::vector<int64_t>& positions, double base) {
    return O::rope(x, positions, base);
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
    return O::matmul(O::mul(O::silu(O::matmul(x, w_gate)), O::matmul(x, w_up)), w_down);
}

namespace {

Tensor causal_mask(int64_t L, DType dt) {
    Tensor m = Tensor::zeros({L, L}, dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto v = m.vals<T>();
        for (int64_t i = 0; i < L; ++i) {
            for (int64_t j = i + 1; j < L; ++j) v[static_cast<size_t>(i * L + j)] = T(1);
        }
    });
    return m;
}

} // namespace

Tensor gqa_attention(const Tensor& x, const AttentionWeights& w, int64_t n_q, int64_t n_kv,
                     int64_t head_dim, const std::vector<int64_t>& positions, double rope_base,
                     double dropout_p, const FwdCtx& ctx) {
    if (x.rank() != 3) fail("attention: input must be (batch, window, d_model)");
    const int64_t B = x.dim(0), L = x.dim(1);
    const int64_t group = n_q / n_kv;

    auto split_heads = [&](const Tensor& proj, int64_t heads) {
        Tensor t = O::reshape(proj, {B, L, heads, head_dim});
        t = O::transpose(t, 1, 2);
        return O::reshape(t, {B * heads, L, head_dim});
    };

    Tensor q = split_heads(O::matmul(x, w.wq), n_q);
    Tensor k = split_heads(O::matmul(x, w.wk), n_kv);
    Tensor v = split_heads(O::matmul(x, w.wv), n_kv);
    q = O::rope(q, positions, rope_base);
    k = O::rope(k, positions, rope_base);

    if (n_kv != n_q) {
        // each kv head serves `group` consecutive query heads
        std::vector<int64_t> map(static_cast<size_t>(B * n_q));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < n_q; ++h) {
                map[static_cast<size_t>(b * n_q + h)] = b * n_kv + h / group;
            }
        }
        k = O::index_select(k, 0, map);
        v = O::index_select(v, 0, map);
    }

    Tensor scores = O::matmul(q, O::transpose(k, 1, 2)); // (B*n_q, L, L)
    scores = O::scale(scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
    scores = O::masked_fill(scores, causal_mask(L, x.dtype()),
                            -std::numeric_limits<double>::infinity());
    Tensor attn = O::softmax(scores);
    Tensor ctxv = O::matmul(attn, v); // (B*n_q, L, hd)
    ctxv = O::reshape(ctxv, {B, n_q, L, head_dim});
    ctxv = O::transpose(ctxv, 1, 2);
    ctxv = O::reshape(ctxv, {B, L, n_q * head_dim});
    Tensor out = O::matmul(ctxv, w.wo);
    return O::dropout(out, dropout_p, ctx.train, ctx.next_dropout_stream());
}

void DecoderModel::register_param(const std::string& name, Tensor t, bool decay) {
    t.set_requires_grad(true);
    params_.push_back({name, t, decay});
}

NamedParam* DecoderModel::find_param(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

int64_t DecoderModel::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

DecoderModel::DecoderModel(ModelConfig cfg, uint64_t seed, DType dt)
    : cfg_(std::move(cfg)), dtype_(dt) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    const int64_t hd = cfg_.resolved_head_dim();
    const double base_std = 0.02;
    // output-path projections scaled down with depth, residual-stream style
    const double out_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));

    auto init = [&](const std::string& name, Shape shape, double stddev) {
        return Tensor::randn(std::move(shape), dtype_, rng::Stream(seed, name), stddev);
    };

    embedding_ = init("embedding", {cfg_.vocab_size, d}, base_std);
    register_param("embedding", embedding_, /*decay=*/false);

    layers_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int64_t i = 0; i < cfg_.n_layers; ++i) {
        LayerWeights& lw = layers_[static_cast<size_t>(i)];
        const std::string p = "layers." + std::to_string(i) + ".";
        lw.attn_norm = Tensor::full({d}, 1.0, dtype_);
        register_param(p + "attn_norm", lw.attn_norm, false);
        lw.attn.wq = init(p + "wq", {d, cfg_.n_query_heads * hd}, base_std);
        lw.attn.wk = init(p + "wk", {d, cfg_.n_kv_heads * hd}, base_std);
        lw.attn.wv = init(p + "wv", {d, cfg_.n_kv_heads * hd}, base_std);
        lw.attn.wo = init(p + "wo", {cfg_.n_query_heads * hd, d}, out_std);
        register_param(p + "wq", lw.attn.wq, true);
        register_param(p + "wk", lw.attn.wk, true);
        register_param(p + "wv", lw.attn.wv, true);
        register_param(p + "wo", lw.attn.wo, true);
        lw.ffn_norm = Tensor::full({d}, 1.0, dtype_);
        register_param(p + "ffn_norm", lw.ffn_norm, false);
        if (cfg_.is_moe()) {
            const int64_t E = cfg_.moe->n_experts;
            const int64_t h = cfg_.moe->expert_hidden;
            lw.moe.router = init(p + "moe.router", {d, E}, base_std);
            lw.moe.gate = init(p + "moe.gate", {E, d, h}, base_std);
            lw.moe.up = init(p + "moe.up", {E, d, h}, base_std);
            lw.moe.down = init(p + "moe.down", {E, h, d}, out_std);
            register_param(p + "moe.router", lw.moe.router, true);
            register_param(p + "moe.gate", lw.moe.gate, true);
            register_param(p + "moe.up", lw.moe.up, true);
            register_param(p + "moe.down", lw.moe.down, true);
        } else {
            lw.w_gate = init(p + "ffn.w_gate", {d, cfg_.ffn_hidden}, base_std);
            lw.w_up = init(p + "ffn.w_up", {d, cfg_.ffn_hidden}, base_std);
            lw.w_down = init(p + "ffn.w_down", {cfg_.ffn_hidden, d}, out_std);
            register_param(p + "ffn.w_gate", lw.w_gate, true);
            register_param(p + "ffn.w_up", lw.w_up, true);
            register_param(p + "ffn.w_down", lw.w_down, true);
        }
    }
    final_norm_ = Tensor::full({d}, 1.0, dtype_);
    register_param("final_norm", final_norm_, false);
}

ForwardResult DecoderModel::forward(std::span<const int64_t> tokens, int64_t batch,
                                    int64_t window, const FwdCtx& ctx) const {
    if (window < 1 || batch < 1) fail("model: batch and window must be >= 1");
    if (window > cfg_.context_len) {
        fail("model: window length " + std::to_string(window) + " exceeds context_len " +
             std::to_string(cfg_.context_len));
    }
    if (static_cast<int64_t>(tokens.size()) != batch * window) {
        fail("model: expected " + std::to_string(batch * window) + " token ids, got " +
             std::to_string(tokens.size()));
    }
    std::vector<int64_t> ids(tokens.begin(), tokens.end());
    std::vector<int64_t> positions(static_cast<size_t>(window));
    for (int64_t t = 0; t < window; ++t) positions[static_cast<size_t>(t)] = t;

    const int64_t d = cfg_.d_model;
    Tensor h = O::reshape(O::embedding(embedding_, ids), {batch, window, d});

    ForwardResult result;
    for (const LayerWeights& lw : layers_) {
        Tensor a_in = rmsnorm(h, lw.attn_norm, cfg_.rmsnorm_eps);
        Tensor a_out =
            gqa_attention(a_in, lw.attn, cfg_.n_query_heads, cfg_.n_kv_heads,
                          cfg_.resolved_head_dim(), positions, cfg_.rope_base, cfg_.dropout_p, ctx);
        h = O::add(h, a_out);

        Tensor f_in = rmsnorm(h, lw.ffn_norm, cfg_.rmsnorm_eps);
        Tensor f_out;
        if (cfg_.is_moe()) {
            Tensor flat = O::reshape(f_in, {batch * window, d});
            MoEForwardOut mo = moe_forward(flat, lw.moe, *cfg_.moe, cfg_.dropout_p, ctx);
            f_out = O::reshape(mo.y, {batch, window, d});
            result.moe_aux.push_back({std::move(mo.decision), mo.balance, mo.z});
        } else {
            Tensor y = swiglu_ffn(f_in, lw.w_gate, lw.w_up, lw.w_down);
            f_out = O::dropout(y, cfg_.dropout_p, ctx.train, ctx.next_dropout_stream());
        }
        h = O::add(h, f_out);
    }

    h = rmsnorm(h, final_norm_, cfg_.rmsnorm_eps);
    Tensor logits = O::matmul(O::reshape(h, {batch * window, d}), O::transpose(embedding_, 0, 1));
    result.logits = O::reshape(logits, {batch, window, cfg_.vocab_size});
    return result;
}

} // namespace moelab
