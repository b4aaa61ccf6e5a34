#include "expconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "tensor.hpp"

namespace moelab {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) fail("config: section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            fail("config: unknown key '" + where + "." + it.key() + "'");
        }
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace

ordered_json model_config_to_json(const ModelConfig& cfg) {
    ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_layers"] = cfg.n_layers;
    j["n_query_heads"] = cfg.n_query_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["head_dim"] = cfg.head_dim;
    j["context_len"] = cfg.context_len;
    j["ffn_hidden"] = cfg.ffn_hidden;
    j["dropout_p"] = cfg.dropout_p;
    j["rmsnorm_eps"] = cfg.rmsnorm_eps;
    j["rope_base"] = cfg.rope_base;
    j["tied_embeddings"] = cfg.tied_embeddings;
    j["linear_bias"] = cfg.linear_bias;
    return j;
}

ModelConfig model_config_from_json(const json& model_j, const json* moe_j) {
    check_keys(model_j,
               {"vocab_size", "d_model", "n_layers", "n_query_heads", "n_kv_heads", "head_dim",
                "context_len", "ffn_hidden", "dropout_p", "rmsnorm_eps", "rope_base",
                "tied_embeddings", "linear_bias"},
               "model");
    ModelConfig cfg;
    get_to(model_j, "vocab_size", cfg.vocab_size);
    get_to(model_j, "d_model", cfg.d_model);
    get_to(model_j, "n_layers", cfg.n_layers);
    get_to(model_j, "n_query_heads", cfg.n_query_heads);
    get_to(model_j, "n_kv_heads", cfg.n_kv_heads);
    get_to(model_j, "head_dim", cfg.head_dim);
    get_to(model_j, "context_len", cfg.context_len);
    get_to(model_j, "ffn_hidden", cfg.ffn_hidden);
    get_to(model_j, "dropout_p", cfg.dropout_p);
    get_to(model_j, "rmsnorm_eps", cfg.rmsnorm_eps);
    get_to(model_j, "rope_base", cfg.rope_base);
    get_to(model_j, "tied_embeddings", cfg.tied_embeddings);
    get_to(model_j, "linear_bias", cfg.linear_bias);
    if (moe_j != nullptr && !moe_j->is_null()) {
        check_keys(*moe_j,
                   {"n_experts", "top_k", "expert_hidden", "lambda_bal", "lambda_z",
                    "dispatch_path"},
                   "moe");
        MoEConfig mc;
        get_to(*moe_j, "n_experts", mc.n_experts);
        get_to(*moe_j, "top_k", mc.top_k);
        get_to(*moe_j, "expert_hidden", mc.expert_hidden);
        get_to(*moe_j, "lambda_bal", mc.lambda_bal);
        get_to(*moe_j, "lambda_z", mc.lambda_z);
        if (moe_j->contains("dispatch_path")) {
            mc.dispatch_path = dispatch_path_from(moe_j->at("dispatch_path").get<std::string>());
        }
        cfg.moe = mc;
    }
    return cfg;
}

ordered_json train_config_to_json(const TrainConfig& cfg) {
    ordered_json j;
    j["lr_max"] = cfg.lr_max;
    j["lr_min"] = cfg.lr_min;
    j["warmup_frac"] = cfg.warmup_frac;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["weight_decay"] = cfg.weight_decay;
    j["clip_norm"] = cfg.clip_norm;
    j["adam_eps"] = cfg.adam_eps;
    j["batch_size"] = cfg.batch_size;
    j["grad_accum"] = cfg.grad_accum;
    j["total_steps"] = cfg.total_steps;
    j["eval_every"] = cfg.eval_every;
    j["seed"] = cfg.seed;
    j["eval_max_batches"] = cfg.eval_max_batches;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    check_keys(j,
               {"lr_max", "lr_min", "warmup_frac", "beta1", "beta2", "weight_decay", "clip_norm",
                "adam_eps", "batch_size", "grad_accum", "total_steps", "eval_every", "seed",
                "eval_max_batches"},
               "train");
    TrainConfig cfg;
    get_to(j, "lr_max", cfg.lr_max);
    get_to(j, "lr_min", cfg.lr_min);
    get_to(j, "warmup_frac", cfg.warmup_frac);
    get_to(j, "beta1", cfg.beta1);
    get_to(j, "beta2", cfg.beta2);
    get_to(j, "weight_decay", cfg.weight_decay);
    get_to(j, "clip_norm", cfg.clip_norm);
    get_to(j, "adam_eps", cfg.adam_eps);
    get_to(j, "batch_size", cfg.batch_size);
    get_to(j, "grad_accum", cfg.grad_accum);
    get_to(j, "total_steps", cfg.total_steps);
    get_to(j, "eval_every", cfg.eval_every);
    get_to(j, "seed", cfg.seed);
    get_to(j, "eval_max_batches", cfg.eval_max_batches);
    return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(j, {"name", "model", "moe", "train", "data", "output"}, "<root>");
    if (!j.contains("model")) fail("config: missing 'model' section");

    ExperimentConfig cfg;
    get_to(j, "name", cfg.name);
    const json* moe_j = j.contains("moe") ? &j.at("moe") : nullptr;
    cfg.model = model_config_from_json(j.at("model"), moe_j);
    if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"dataset", "train_ratio", "shard_seed"}, "data");
        get_to(d, "dataset", cfg.data.dataset);
        get_to(d, "train_ratio", cfg.data.train_ratio);
        get_to(d, "shard_seed", cfg.data.shard_seed);
    }
    if (j.contains("output")) {
        const json& o = j.at("output");
        check_keys(o, {"dir"}, "output");
        get_to(o, "dir", cfg.output.dir);
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("config: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_experiment_config(ss.str());
}

std::string emit_experiment_config(const ExperimentConfig& cfg) {
    ordered_json j;
    j["name"] = cfg.name;
    j["model"] = model_config_to_json(cfg.model);
    if (cfg.model.is_moe()) {
        ordered_json m;
        m["n_experts"] = cfg.model.moe->n_experts;
        m["top_k"] = cfg.model.moe->top_k;
        m["expert_hidden"] = cfg.model.moe->expert_hidden;
        m["lambda_bal"] = cfg.model.moe->lambda_bal;
        m["lambda_z"] = cfg.model.moe->lambda_z;
        m["dispatch_path"] = dispatch_path_name(cfg.model.moe->dispatch_path);
        j["moe"] = m;
    }
    j["train"] = train_config_to_json(cfg.train);
    j["data"] = {{"dataset", cfg.data.dataset},
                 {"train_ratio", cfg.data.train_ratio},
                 {"shard_seed", cfg.data.shard_seed}};
    j["output"] = {{"dir", cfg.output.dir}};
    return j.dump(2) + "\n";
}

bool operator==(const DataConfig& a, const DataConfig& b) {
    return a.dataset == b.dataset && a.train_ratio == b.train_ratio &&
           a.shard_seed == b.shard_seed;
}
bool operator==(const OutputConfig& a, const OutputConfig& b) { return a.dir == b.dir; }
bool operator==(const MoEConfig& a, const MoEConfig& b) {
    return a.n_experts == b.n_experts && a.top_k == b.top_k &&
           a.expert_hidden == b.expert_hidden && a.lambda_bal == b.lambda_bal &&
           a.lambda_z == b.lambda_z && a.dispatch_path == b.dispatch_path;
}
bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.n_layers == b.n_layers &&
           a.n_query_heads == b.n_query_heads && a.n_kv_heads == b.n_kv_heads &&
           a.head_dim == b.head_dim && a.context_len == b.context_len &&
           a.ffn_hidden == b.ffn_hidden && a.moe.has_value() == b.moe.has_value() &&
           (!a.moe || *a.moe == *b.moe) && a.dropout_p == b.dropout_p &&
           a.rmsnorm_eps == b.rmsnorm_eps && a.rope_base == b.rope_base &&
           a.tied_embeddings == b.tied_embeddings && a.linear_bias == b.linear_bias;
}
bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.lr_max == b.lr_max && a.lr_min == b.lr_min && a.warmup_frac == b.warmup_frac &&
           a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.weight_decay == b.weight_decay &&
           a.clip_norm == b.clip_norm && a.adam_eps == b.adam_eps &&
           a.batch_size == b.batch_size && a.grad_accum == b.grad_accum &&
           a.total_steps == b.total_steps && a.eval_every == b.eval_every && a.seed == b.seed &&
           a.eval_max_batches == b.eval_max_batches;
}
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.name == b.name && a.model == b.model && a.train == b.train && a.data == b.data &&
           a.output == b.output;
}

} // namespace moelab
