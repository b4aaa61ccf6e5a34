#pragma once

#include <span>
#include <string>
#include <vector>

#include "config.hpp"
#include "moe.hpp"
#include "tensor.hpp"

namespace moelab {

// y = x / sqrt(mean(x^2) + eps) * gain, per token (last axis = d_model).
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// Rotary embedding on (..., L, head_dim); head_dim must be even.
Tensor apply_rope(const Tensor& x, const std::vector<int64_t>& positions, double base);

// y = (silu(x Wg) * (x Wu)) Wd, no biases.
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down);

struct AttentionWeights {
    Tensor wq; // (d, n_q*hd)
    Tensor wk; // (d, n_kv*hd)
    Tensor wv; // (d, n_kv*hd)
    Tensor wo; // (n_q*hd, d)
};

// Causal grouped-query attention over x (B, L, d) with RoPE'd queries/keys and
// dropout on the output projection path.
Tensor gqa_attention(const Tensor& x, const AttentionWeights& w, int64_t n_q, int64_t n_kv,
                     int64_t head_dim, const std::vector<int64_t>& positions, double rope_base,
                     double dropout_p, const FwdCtx& ctx);

struct LayerWeights {
    Tensor attn_norm;
    AttentionWeights attn;
    Tensor ffn_norm;
    Tensor w_gate, w_up, w_down; // dense family
    MoEWeights moe;              // routed family
};

struct MoELayerOut {
    RouterDecision decision;
    Tensor balance;
    Tensor z;
};

struct ForwardResult {
    Tensor logits; // (B, L, vocab)
    std::vector<MoELayerOut> moe_aux;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = false;
};

// Pre-norm decoder stack with tied input/output embeddings and no biases.
class DecoderModel {
  public:
    DecoderModel(ModelConfig cfg, uint64_t seed, DType dt = DType::F32);

    // tokens holds batch*window ids, row-major.
    ForwardResult forward(std::span<const int64_t> tokens, int64_t batch, int64_t window,
                          const FwdCtx& ctx) const;

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedParam>& params() { return params_; }
    const std::vector<NamedParam>& params() const { return params_; }
    NamedParam* find_param(const std::string& name);
    int64_t param_count() const;
    DType dtype() const { return dtype_; }

  private:
    ModelConfig cfg_;
    DType dtype_;
    Tensor embedding_; // (vocab, d); also the output projection, transposed
    std::vector<LayerWeights> layers_;
    Tensor final_norm_;
    std::vector<NamedParam> params_;

    void register_param(const std::string& name, Tensor t, bool decay);
};

} // namespace moelab
