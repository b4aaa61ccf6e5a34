#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "rng.hpp"

namespace moelab {

enum class DispatchPath { Naive, Grouped, Stacked };

const char* dispatch_path_name(DispatchPath p);
DispatchPath dispatch_path_from(const std::string& s);

struct MoEConfig {
    int64_t n_experts = 4;
    int64_t top_k = 2;
    int64_t expert_hidden = 1024;
    double lambda_bal = 1e-2;
    double lambda_z = 1e-3;
    DispatchPath dispatch_path = DispatchPath::Grouped;

    void validate() const;
};

// Full architectural description of one model family. Exactly one of
// ffn_hidden (dense) / moe (routed) is set.
struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 0;
    int64_t n_layers = 0;
    int64_t n_query_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t head_dim = 0; // 0 -> d_model / n_query_heads
    int64_t context_len = 512;
    int64_t ffn_hidden = 0;
    std::optional<MoEConfig> moe;
    double dropout_p = 0.1;
    double rmsnorm_eps = 1e-5;
    double rope_base = 10000.0;
    bool tied_embeddings = true;
    bool linear_bias = false;

    bool is_moe() const { return moe.has_value(); }
    int64_t resolved_head_dim() const {
        return head_dim > 0 ? head_dim : d_model / n_query_heads;
    }
    void validate() const;
};

// Per-forward runtime context; the dropout counter advances once per dropout
// site so replaying a (seed, step) pair reproduces the exact masks.
struct FwdCtx {
    bool train = false;
    uint64_t seed = 0;
    uint64_t step = 0;
    mutable uint64_t dropout_call = 0;

    rng::Stream next_dropout_stream() const {
        return rng::Stream(seed, "dropout", step, dropout_call++);
    }
};

} // namespace moelab
