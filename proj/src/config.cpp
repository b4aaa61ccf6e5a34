#include "config.hpp"

#include "tensor.hpp"

namespace moelab {

const char* dispatch_path_name(DispatchPath p) {
    switch (p) {
    case DispatchPath::Naive: return "naive";
    case DispatchPath::Grouped: return "grouped";
    case DispatchPath::Stacked: return "stacked";
    }
    return "?";
}

DispatchPath dispatch_path_from(const std::string& s) {
    if (s == "naive") return DispatchPath::Naive;
    if (s == "grouped") return DispatchPath::Grouped;
    if (s == "stacked") return DispatchPath::Stacked;
    fail("unknown dispatch path '" + s + "' (naive|grouped|stacked)");
}

void MoEConfig::validate() const {
    if (n_experts < 1) fail("moe config: n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts) {
        fail("moe config: top_k " + std::to_string(top_k) + " must be in [1, " +
             std::to_string(n_experts) + "]");
    }
    if (expert_hidden < 1) fail("moe config: expert_hidden must be >= 1");
    if (lambda_bal < 0 || lambda_z < 0) fail("moe config: lambdas must be >= 0");
}

void ModelConfig::validate() const {
    if (vocab_size < 1) fail("model config: vocab_size must be >= 1");
    if (d_model < 1 || n_layers < 1) fail("model config: d_model and n_layers must be >= 1");
    if (n_query_heads < 1 || n_kv_heads < 1) fail("model config: head counts must be >= 1");
    if (n_query_heads % n_kv_heads != 0) {
        fail("model config: n_query_heads " + std::to_string(n_query_heads) +
             " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
    }
    const int64_t hd = resolved_head_dim();
    if (head_dim == 0 && d_model % n_query_heads != 0) {
        fail("model config: d_model " + std::to_string(d_model) + " not divisible by " +
             std::to_string(n_query_heads) + " query heads");
    }
    if (head_dim == 0 && d_model != n_query_heads * hd) {
        fail("model config: d_model != n_query_heads * head_dim");
    }
    if (hd % 2 != 0) fail("model config: head_dim must be even for rotary embedding");
    if (context_len < 1) fail("model config: context_len must be >= 1");
    if ((ffn_hidden > 0) == is_moe()) {
        fail("model config: exactly one of ffn_hidden / moe must be set");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) fail("model config: dropout_p must be in [0,1)");
    if (rmsnorm_eps <= 0.0) fail("model config: rmsnorm_eps must be > 0");
    if (!tied_embeddings) fail("model config: only tied embeddings are supported");
    if (linear_bias) fail("model config: linear biases are not supported");
    if (is_moe()) moe->validate();
}

} // namespace moelab
