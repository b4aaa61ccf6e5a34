#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "data.hpp"
#include "diagnostics.hpp"
#include "model.hpp"

namespace moelab {

struct TrainConfig {
    double lr_max = 3e-4;
    double lr_min = 3e-5;
    double warmup_frac = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double adam_eps = 1e-8;
    int64_t batch_size = 16;
    int64_t grad_accum = 2;
    int64_t total_steps = 26073;
    int64_t eval_every = 250;
    uint64_t seed = 1337;
    int64_t eval_max_batches = 0; // 0 = full split

    void validate() const;
};

// Linear warmup from 0 to lr_max over floor(warmup_frac * total_steps)
// optimizer steps, then cosine decay to exactly lr_min at total_steps.
double lr_at(int64_t step, const TrainConfig& cfg);

// Decoupled AdamW with bias correction; weight decay applies only to params
// registered with the decay flag (matrices; norms and embedding excluded).
class AdamW {
  public:
    AdamW(std::vector<NamedParam>& params, const TrainConfig& cfg);

    void step(double lr);
    void zero_grad();
    int64_t steps_taken() const { return t_; }

    struct Slot {
        Tensor m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_steps_taken(int64_t t) { t_ = t; }

  private:
    std::vector<NamedParam>* params_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

// Global L2 clipping across all parameter grads; returns the pre-clip norm.
double clip_gradients(std::vector<NamedParam>& params, double max_norm);

struct EvalPoint {
    int64_t step = 0;
    int64_t tokens = 0; // loss-contributing tokens so far
    double train_ce = 0, train_bal = 0, train_z = 0, train_total = 0;
    double val_ce = 0, val_ppl = 0;
    double lr = 0, grad_norm = 0;
    std::vector<LayerDiag> routing; // empty for dense models
    double tok_per_s = 0;           // wall-clock; kept out of the deterministic metrics file
};

struct RunRecord {
    std::vector<EvalPoint> evals;
    double best_val_ce = 0;
    int64_t best_step = -1;
    int64_t final_step = 0;
    int64_t loss_tokens = 0;
    double wall_seconds = 0;
};

struct TrainHooks {
    std::function<void(const EvalPoint&)> on_eval;
    bool collect_diagnostics = true;
};

struct EvalResult {
    double ce = 0;
    std::vector<LayerDiag> routing;
};

// Deterministic evaluation over an index set in fixed order: dropout off,
// auxiliary losses excluded, CE averaged over all prediction targets.
EvalResult evaluate(const DecoderModel& model, const TokenWindowDataset& ds,
                    const std::vector<int64_t>& indices, int64_t batch_size,
                    int64_t max_batches, bool collect_diag);

// Full optimization loop: gradient accumulation, clipping, AdamW, warmup +
// cosine schedule, eval every eval_every steps plus epoch ends, best-val
// checkpointing (when checkpoint_dir is non-empty).
RunRecord train_run(DecoderModel& model, const TrainConfig& cfg, const TokenWindowDataset& ds,
                    const SplitIndices& split, const std::string& checkpoint_dir = "",
                    const TrainHooks& hooks = {});

// ---- run artifacts ----------------------------------------------------------

// Deterministic line-delimited eval records (no timing fields).
void write_metrics(const std::string& path, const RunRecord& rec);
std::vector<EvalPoint> read_metrics(const std::string& path);
// Wall-clock throughput per eval point, one record per line.
void write_timing(const std::string& path, const RunRecord& rec);

struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    int64_t step = 0;
    double best_val_ce = 0;
    int64_t best_step = -1;
    std::map<std::string, Tensor> tensors; // params plus opt.m.* / opt.v.*
};

void save_checkpoint(const std::string& path, const DecoderModel& model, const TrainConfig& tc,
                     const AdamW& opt, int64_t step, double best_val_ce, int64_t best_step);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into a freshly constructed model (by name).
void restore_params(DecoderModel& model, const Checkpoint& ckpt);

} // namespace moelab
