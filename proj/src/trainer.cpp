#include "trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "expconfig.hpp"
#include "losses.hpp"
#include "ops.hpp"

namespace moelab {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (!(lr_min > 0 && lr_min <= lr_max)) fail("train config: need 0 < lr_min <= lr_max");
    if (warmup_frac < 0 || warmup_frac >= 1) fail("train config: warmup_frac must be in [0,1)");
    if (total_steps < 1) fail("train config: total_steps must be >= 1");
    if (batch_size < 1 || grad_accum < 1) fail("train config: batch/accum must be >= 1");
    if (eval_every < 1) fail("train config: eval_every must be >= 1");
    if (clip_norm <= 0) fail("train config: clip_norm must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
        fail("train config: betas must be in [0,1)");
    }
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps) {
        fail("lr_at: step " + std::to_string(step) + " outside [0, " +
             std::to_string(cfg.total_steps) + "]");
    }
    const int64_t warmup =
        static_cast<int64_t>(cfg.warmup_frac * static_cast<double>(cfg.total_steps));
    if (warmup > 0 && step <= warmup) {
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const int64_t decay_steps = cfg.total_steps - warmup;
    if (decay_steps == 0) return cfg.lr_max;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(decay_steps);
    return cfg.lr_min +
           0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.141592653589793 * progress));
}

AdamW::AdamW(std::vector<NamedParam>& params, const TrainConfig& cfg)
    : params_(&params), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
    slots_.reserve(params.size());
    for (const NamedParam& p : params) {
        Slot s;
        s.m = Tensor::zeros(p.tensor.shape(), p.tensor.dtype());
        s.v = Tensor::zeros(p.tensor.shape(), p.tensor.dtype());
        slots_.push_back(std::move(s));
    }
}

void AdamW::zero_grad() {
    for (NamedParam& p : *params_) p.tensor.zero_grad();
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_->size(); ++i) {
        NamedParam& p = (*params_)[i];
        Slot& s = slots_[i];
        dispatch(p.tensor.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto w = p.tensor.vals<T>();
            auto m = s.m.vals<T>();
            auto v = s.v.vals<T>();
            const bool has_grad = p.tensor.has_grad();
            std::span<const T> g;
            if (has_grad) {
                g = std::span<const T>(p.tensor.grad_vals<T>().data(), w.size());
                for (size_t j = 0; j < g.size(); ++j) {
                    if (!std::isfinite(static_cast<double>(g[j]))) {
                        fail("adamw: non-finite gradient in " + p.name);
                    }
                }
            }
            const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
            for (size_t j = 0; j < w.size(); ++j) {
                const T gj = has_grad ? g[j] : T(0);
                m[j] = b1 * m[j] + (T(1) - b1) * gj;
                v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
                const double mhat = static_cast<double>(m[j]) / bc1;
                const double vhat = static_cast<double>(v[j]) / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + eps_);
                if (p.decay) upd += lr * weight_decay_ * static_cast<double>(w[j]);
                w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
            }
        });
    }
}

double clip_gradients(std::vector<NamedParam>& params, double max_norm) {
    double sumsq = 0.0;
    for (NamedParam& p : params) {
        if (!p.tensor.has_grad()) continue;
        dispatch(p.tensor.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto g = p.tensor.grad_vals<T>();
            for (size_t j = 0; j < g.size(); ++j) {
                const double x = static_cast<double>(g[j]);
                sumsq += x * x;
            }
        });
    }
    const double norm = std::sqrt(sumsq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (NamedParam& p : params) {
            if (!p.tensor.has_grad()) continue;
            dispatch(p.tensor.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto g = p.tensor.grad_vals<T>();
                for (size_t j = 0; j < g.size(); ++j) {
                    g[j] = static_cast<T>(static_cast<double>(g[j]) * scale);
                }
            });
        }
    }
    return norm;
}

EvalResult evaluate(const DecoderModel& model, const TokenWindowDataset& ds,
                    const std::vector<int64_t>& indices, int64_t batch_size,
                    int64_t max_batches, bool collect_diag) {
    if (indices.empty()) fail("evaluate: empty index set");
    NoGradGuard ng;
    FwdCtx ctx;
    ctx.train = false;

    const int64_t L = ds.window_len;
    double ce_weighted = 0.0;
    int64_t targets = 0;
    std::vector<DiagAccumulator> accs;

    int64_t batches = 0;
    for (size_t pos = 0; pos < indices.size(); pos += static_cast<size_t>(batch_size)) {
        if (max_batches > 0 && batches >= max_batches) break;
        const int64_t rows =
            std::min<int64_t>(batch_size, static_cast<int64_t>(indices.size() - pos));
        std::vector<int64_t> tokens;
        tokens.reserve(static_cast<size_t>(rows * L));
        for (int64_t r = 0; r < rows; ++r) {
            for (int32_t id : ds.window(indices[pos + static_cast<size_t>(r)])) {
                tokens.push_back(id);
            }
        }
        ForwardResult fr = model.forward(tokens, rows, L, ctx);
        const double ce = next_token_ce(fr.logits, tokens, rows, L).item();
        ce_weighted += ce * static_cast<double>(rows * (L - 1));
        targets += rows * (L - 1);
        if (collect_diag && !fr.moe_aux.empty()) {
            if (accs.empty()) accs.resize(fr.moe_aux.size());
            for (size_t l = 0; l < fr.moe_aux.size(); ++l) {
                accs[l].add(fr.moe_aux[l].decision);
            }
        }
        ++batches;
    }

    EvalResult res;
    res.ce = ce_weighted / static_cast<double>(targets);
    for (const DiagAccumulator& a : accs) res.routing.push_back(a.finalize());
    return res;
}

RunRecord train_run(DecoderModel& model, const TrainConfig& cfg, const TokenWindowDataset& ds,
                    const SplitIndices& split, const std::string& checkpoint_dir,
                    const TrainHooks& hooks) {
    cfg.validate();
    if (ds.vocab_size != model.config().vocab_size) {
        fail("train: dataset vocab " + std::to_string(ds.vocab_size) +
             " does not match model vocab " + std::to_string(model.config().vocab_size));
    }
    if (ds.window_len < 2) fail("train: window_len must be >= 2");

    const auto t_start = std::chrono::steady_clock::now();
    BatchIterator train_it(ds, split.train, cfg.batch_size, cfg.seed);
    AdamW opt(model.params(), cfg);

    const bool is_moe = model.config().is_moe();
    const double lambda_bal = is_moe ? model.config().moe->lambda_bal : 0.0;
    const double lambda_z = is_moe ? model.config().moe->lambda_z : 0.0;

    RunRecord rec;
    rec.best_val_ce = std::numeric_limits<double>::infinity();
    std::string last_ckpt;

    double acc_ce = 0, acc_bal = 0, acc_z = 0, acc_total = 0;
    int64_t acc_micro = 0;
    int64_t tokens_since_eval = 0;
    auto t_last_eval = t_start;

    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        const double lr = lr_at(step, cfg);
        opt.zero_grad();
        bool epoch_ended = false;

        for (int64_t micro = 0; micro < cfg.grad_accum; ++micro) {
            BatchIterator::Batch b = train_it.next();
            epoch_ended = epoch_ended || b.epoch_end;
            FwdCtx ctx;
            ctx.train = true;
            ctx.seed = cfg.seed;
            ctx.step = static_cast<uint64_t>((step - 1) * cfg.grad_accum + micro);

            ForwardResult fr = model.forward(b.tokens, b.rows, b.window, ctx);
            Tensor ce = next_token_ce(fr.logits, b.tokens, b.rows, b.window);
            std::vector<Tensor> bals, zs;
            for (const MoELayerOut& aux : fr.moe_aux) {
                bals.push_back(aux.balance);
                zs.push_back(aux.z);
            }
            Objective obj = total_objective(ce, bals, zs, lambda_bal, lambda_z);
            if (!std::isfinite(obj.parts.total)) {
                fail("train: non-finite loss at step " + std::to_string(step) +
                     "; last good checkpoint: " + (last_ckpt.empty() ? "none" : last_ckpt));
            }
            backward(ops::scale(obj.total, 1.0 / static_cast<double>(cfg.grad_accum)));

            acc_ce += obj.parts.ce;
            acc_bal += obj.parts.bal;
            acc_z += obj.parts.z;
            acc_total += obj.parts.total;
            ++acc_micro;
            rec.loss_tokens += b.rows * (b.window - 1);
            tokens_since_eval += b.rows * (b.window - 1);
        }

        const double grad_norm = clip_gradients(model.params(), cfg.clip_norm);
        opt.step(lr);

        const bool do_eval =
            step % cfg.eval_every == 0 || step == cfg.total_steps || epoch_ended;
        if (do_eval) {
            EvalResult ev = evaluate(model, ds, split.val, cfg.batch_size, cfg.eval_max_batches,
                                     hooks.collect_diagnostics);
            EvalPoint ep;
            ep.step = step;
            ep.tokens = rec.loss_tokens;
            ep.train_ce = acc_ce / static_cast<double>(acc_micro);
            ep.train_bal = acc_bal / static_cast<double>(acc_micro);
            ep.train_z = acc_z / static_cast<double>(acc_micro);
            ep.train_total = acc_total / static_cast<double>(acc_micro);
            ep.val_ce = ev.ce;
            ep.val_ppl = perplexity(ev.ce);
            ep.lr = lr;
            ep.grad_norm = grad_norm;
            ep.routing = std::move(ev.routing);
            const auto now = std::chrono::steady_clock::now();
            const double dt = std::chrono::duration<double>(now - t_last_eval).count();
            ep.tok_per_s = dt > 0 ? static_cast<double>(tokens_since_eval) / dt : 0.0;
            t_last_eval = now;
            tokens_since_eval = 0;
            acc_ce = acc_bal = acc_z = acc_total = 0;
            acc_micro = 0;

            if (ep.val_ce < rec.best_val_ce) {
                rec.best_val_ce = ep.val_ce;
                rec.best_step = step;
                if (!checkpoint_dir.empty()) {
                    std::filesystem::create_directories(checkpoint_dir);
                    const std::string path = checkpoint_dir + "/best.ckpt";
                    save_checkpoint(path, model, cfg, opt, step, rec.best_val_ce, rec.best_step);
                    last_ckpt = path;
                }
            }
            if (hooks.on_eval) hooks.on_eval(ep);
            rec.evals.push_back(std::move(ep));
        }
        rec.final_step = step;
    }

    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rec;
}

// ---- metrics io ---------------------------------------------------------------

namespace {

ordered_json eval_point_to_json(const EvalPoint& ep) {
    ordered_json j;
    j["step"] = ep.step;
    j["tokens"] = ep.tokens;
    j["split"] = "val";
    j["ce"] = ep.val_ce;
    j["ppl"] = ep.val_ppl;
    j["lr"] = ep.lr;
    j["grad_norm"] = ep.grad_norm;
    j["train"] = {{"ce", ep.train_ce},
                  {"bal", ep.train_bal},
                  {"z", ep.train_z},
                  {"total", ep.train_total}};
    if (!ep.routing.empty()) {
        ordered_json layers = ordered_json::array();
        for (const LayerDiag& d : ep.routing) {
            layers.push_back({{"busiest_fraction", d.busiest_fraction},
                              {"usage_variance", d.usage_variance},
                              {"entropy", d.mean_entropy},
                              {"logz", d.mean_logz},
                              {"top_gate", d.mean_top_gate},
                              {"margin", d.mean_top1_top2_margin}});
        }
        j["routing"] = layers;
    }
    return j;
}

} // namespace

void write_metrics(const std::string& path, const RunRecord& rec) {
    std::ofstream os(path);
    if (!os) fail("write_metrics: cannot open " + path);
    for (const EvalPoint& ep : rec.evals) {
        os << eval_point_to_json(ep).dump() << "\n";
    }
}

std::vector<EvalPoint> read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("read_metrics: cannot open " + path);
    std::vector<EvalPoint> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        EvalPoint ep;
        ep.step = j.at("step").get<int64_t>();
        ep.tokens = j.at("tokens").get<int64_t>();
        ep.val_ce = j.at("ce").get<double>();
        ep.val_ppl = j.at("ppl").get<double>();
        ep.lr = j.value("lr", 0.0);
        ep.grad_norm = j.value("grad_norm", 0.0);
        if (j.contains("train")) {
            ep.train_ce = j["train"].value("ce", 0.0);
            ep.train_bal = j["train"].value("bal", 0.0);
            ep.train_z = j["train"].value("z", 0.0);
            ep.train_total = j["train"].value("total", 0.0);
        }
        if (j.contains("routing")) {
            for (const json& l : j["routing"]) {
                LayerDiag d;
                d.busiest_fraction = l.value("busiest_fraction", 0.0);
                d.usage_variance = l.value("usage_variance", 0.0);
                d.mean_entropy = l.value("entropy", 0.0);
                d.mean_logz = l.value("logz", 0.0);
                d.mean_top_gate = l.value("top_gate", 0.0);
                d.mean_top1_top2_margin = l.value("margin", 0.0);
                ep.routing.push_back(d);
            }
        }
        out.push_back(std::move(ep));
    }
    return out;
}

void write_timing(const std::string& path, const RunRecord& rec) {
    std::ofstream os(path);
    if (!os) fail("write_timing: cannot open " + path);
    for (const EvalPoint& ep : rec.evals) {
        ordered_json j;
        j["step"] = ep.step;
        j["tok_per_s"] = ep.tok_per_s;
        os << j.dump() << "\n";
    }
}

// ---- checkpoint io -------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'L', 'C', 'P'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
    const uint64_t lo = get_u32(is);
    const uint64_t hi = get_u32(is);
    return lo | hi << 32;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(t.dtype() == DType::F32 ? 0 : 1);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
    const auto& data = t.impl()->data;
    put_u64(os, data.size());
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size()));
}

std::pair<std::string, Tensor> read_tensor(std::istream& is) {
    const uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dt_byte = is.get();
    const DType dt = dt_byte == 0 ? DType::F32 : DType::F64;
    const uint32_t rank = get_u32(is);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(get_u64(is));
    const uint64_t nbytes = get_u64(is);
    Tensor t = Tensor::zeros(shape, dt);
    if (t.impl()->data.size() != nbytes) fail("checkpoint: tensor size mismatch for " + name);
    is.read(reinterpret_cast<char*>(t.impl()->data.data()),
            static_cast<std::streamsize>(nbytes));
    return {std::move(name), std::move(t)};
}

} // namespace

void save_checkpoint(const std::string& path, const DecoderModel& model, const TrainConfig& tc,
                     const AdamW& opt, int64_t step, double best_val_ce, int64_t best_step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("save_checkpoint: cannot open " + path);
    os.write(kCkptMagic, 4);
    put_u32(os, kCkptVersion);

    ordered_json hdr;
    hdr["model"] = model_config_to_json(model.config());
    if (model.config().is_moe()) {
        const MoEConfig& m = *model.config().moe;
        hdr["moe"] = {{"n_experts", m.n_experts},
                      {"top_k", m.top_k},
                      {"expert_hidden", m.expert_hidden},
                      {"lambda_bal", m.lambda_bal},
                      {"lambda_z", m.lambda_z},
                      {"dispatch_path", dispatch_path_name(m.dispatch_path)}};
    }
    hdr["train"] = train_config_to_json(tc);
    hdr["step"] = step;
    hdr["best_val_ce"] = best_val_ce;
    hdr["best_step"] = best_step;
    hdr["opt_steps"] = opt.steps_taken();
    const std::string hdr_s = hdr.dump();
    put_u32(os, static_cast<uint32_t>(hdr_s.size()));
    os.write(hdr_s.data(), static_cast<std::streamsize>(hdr_s.size()));

    const auto& params = model.params();
    const auto& slots = opt.slots();
    put_u64(os, params.size() * 3);
    for (size_t i = 0; i < params.size(); ++i) {
        write_tensor(os, params[i].name, params[i].tensor);
        write_tensor(os, "opt.m." + params[i].name, slots[i].m);
        write_tensor(os, "opt.v." + params[i].name, slots[i].v);
    }
    if (!os) fail("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) {
        fail("load_checkpoint: " + path + " is not a checkpoint");
    }
    const uint32_t version = get_u32(is);
    if (version != kCkptVersion) {
        fail("load_checkpoint: unsupported version " + std::to_string(version));
    }
    const uint32_t hdr_len = get_u32(is);
    std::string hdr_s(hdr_len, '\0');
    is.read(hdr_s.data(), hdr_len);
    json hdr = json::parse(hdr_s);

    Checkpoint ck;
    const json* moe_j = hdr.contains("moe") ? &hdr.at("moe") : nullptr;
    ck.model_cfg = model_config_from_json(hdr.at("model"), moe_j);
    ck.train_cfg = train_config_from_json(hdr.at("train"));
    ck.step = hdr.value("step", int64_t{0});
    ck.best_val_ce = hdr.value("best_val_ce", 0.0);
    ck.best_step = hdr.value("best_step", int64_t{-1});

    const uint64_t count = get_u64(is);
    for (uint64_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor(is);
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    if (!is) fail("load_checkpoint: truncated file " + path);
    return ck;
}

void restore_params(DecoderModel& model, const Checkpoint& ckpt) {
    for (NamedParam& p : model.params()) {
        auto it = ckpt.tensors.find(p.name);
        if (it == ckpt.tensors.end()) fail("checkpoint: missing tensor " + p.name);
        if (it->second.shape() != p.tensor.shape()) {
            fail("checkpoint: shape mismatch for " + p.name);
        }
        p.tensor.impl()->data = it->second.impl()->data;
    }
}

} // namespace moelab
