// moelab: tiny-scale dense vs mixture-of-experts pretraining lab.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "bench.hpp"
#include "budget.hpp"
#include "curves.hpp"
#include "data.hpp"
#include "expconfig.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "trainer.hpp"

using namespace moelab;
using nlohmann::ordered_json;

namespace {

void cmd_prepare_data(const std::vector<std::string>& inputs, const std::string& output,
                      int64_t window_len, const std::string& tokenizer, double train_ratio,
                      uint64_t shard_seed, bool no_separator) {
    if (tokenizer != "byte") {
        fail("prepare-data: unknown tokenizer '" + tokenizer + "' (built-in: byte)");
    }
    ByteTokenizer tok;
    std::vector<int64_t> stream;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::ifstream is(inputs[i], std::ios::binary);
        if (!is) fail("prepare-data: cannot open " + inputs[i]);
        std::ostringstream ss;
        ss << is.rdbuf();
        auto ids = tok.encode(ss.str());
        stream.insert(stream.end(), ids.begin(), ids.end());
        if (!no_separator && i + 1 < inputs.size()) stream.push_back(ByteTokenizer::kSep);
    }
    TokenWindowDataset ds = build_windows(stream, window_len, tok.vocab_size());
    save_dataset(ds, output);
    SplitIndices split = split_train_val(ds.count(), train_ratio, shard_seed);
    std::printf("wrote %s\n", output.c_str());
    std::printf("  windows            %lld (x %lld tokens)\n",
                static_cast<long long>(ds.count()), static_cast<long long>(ds.window_len));
    std::printf("  loss tokens        %lld (%lld per window)\n",
                static_cast<long long>(loss_tokens(ds.count(), ds.window_len)),
                static_cast<long long>(ds.window_len - 1));
    std::printf("  split %.2f/%.2f    %zu train / %zu val (seed %llu)\n", train_ratio,
                1.0 - train_ratio, split.train.size(), split.val.size(),
                static_cast<unsigned long long>(shard_seed));
}

std::string run_dir_for(const ExperimentConfig& cfg) {
    const std::string base =
        cfg.output.dir.empty() ? "runs/" + (cfg.name.empty() ? std::string("run") : cfg.name)
                               : cfg.output.dir;
    return base + "/seed-" + std::to_string(cfg.train.seed);
}

void cmd_train(const std::string& config_path, int64_t seed_override,
               const std::string& out_override, bool quiet) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
    if (!out_override.empty()) cfg.output.dir = out_override;
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.data.dataset.empty()) fail("train: config has no data.dataset");

    TokenWindowDataset ds = load_dataset(cfg.data.dataset);
    SplitIndices split = split_train_val(ds.count(), cfg.data.train_ratio, cfg.data.shard_seed);
    const std::string outdir = run_dir_for(cfg);
    std::filesystem::create_directories(outdir);

    DecoderModel model(cfg.model, cfg.train.seed);
    const ParamBreakdown pb = count_params(cfg.model);
    std::printf("%s seed %llu: %.2fM params (%.2fM active), %zu train / %zu val windows\n",
                cfg.name.empty() ? "run" : cfg.name.c_str(),
                static_cast<unsigned long long>(cfg.train.seed), pb.total / 1e6, pb.active / 1e6,
                split.train.size(), split.val.size());

    TrainHooks hooks;
    if (!quiet) {
        hooks.on_eval = [](const EvalPoint& ep) {
            std::printf("step %6lld  tokens %10lld  val ce %.4f  ppl %.3f  lr %.2e  tok/s %.0f\n",
                        static_cast<long long>(ep.step), static_cast<long long>(ep.tokens),
                        ep.val_ce, ep.val_ppl, ep.lr, ep.tok_per_s);
            std::fflush(stdout);
        };
    }
    RunRecord rec = train_run(model, cfg.train, ds, split, outdir, hooks);

    write_metrics(outdir + "/metrics.jsonl", rec);
    write_timing(outdir + "/timing.jsonl", rec);
    write_run_summary(outdir, cfg.name, cfg.train.seed, rec, pb);
    std::ofstream(outdir + "/config.json") << emit_experiment_config(cfg);

    std::printf("done: best val ce %.4f (ppl %.3f) at step %lld; %lld loss tokens in %.1fs\n",
                rec.best_val_ce, perplexity(rec.best_val_ce),
                static_cast<long long>(rec.best_step), static_cast<long long>(rec.loss_tokens),
                rec.wall_seconds);
    std::printf("run dir: %s\n", outdir.c_str());
}

void print_routing_table(const std::vector<LayerDiag>& first,
                         const std::vector<LayerDiag>& last) {
    std::printf("%-6s %-9s %-8s %-8s %-16s %-9s %-9s\n", "Layer", "Entropy", "Gate", "Margin",
                "Logz trend", "Busiest", "Variance");
    for (size_t l = 0; l < last.size(); ++l) {
        std::printf("L%-5zu %-9.3f %-8.3f %-8.3f %6.3f -> %-6.3f %-9.3f %-9.5f\n", l,
                    last[l].mean_entropy, last[l].mean_top_gate, last[l].mean_top1_top2_margin,
                    first[l].mean_logz, last[l].mean_logz, last[l].busiest_fraction,
                    last[l].usage_variance);
    }
}

void cmd_eval(const std::string& ckpt_path, const std::string& dataset_path,
              const std::string& split_name, double train_ratio, uint64_t shard_seed,
              int64_t max_batches) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    DecoderModel model(ck.model_cfg, 0);
    restore_params(model, ck);
    TokenWindowDataset ds = load_dataset(dataset_path);
    SplitIndices split = split_train_val(ds.count(), train_ratio, shard_seed);
    const std::vector<int64_t>& idx = split_name == "train" ? split.train : split.val;
    EvalResult ev = evaluate(model, ds, idx, ck.train_cfg.batch_size, max_batches, true);
    std::printf("%s ce %.4f  ppl %.3f  (%zu windows, checkpoint step %lld)\n",
                split_name.c_str(), ev.ce, perplexity(ev.ce), idx.size(),
                static_cast<long long>(ck.step));
    if (!ev.routing.empty()) print_routing_table(ev.routing, ev.routing);
}

void cmd_count_params(const std::string& config_path, int64_t vocab_override, bool as_json) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (vocab_override > 0) cfg.model.vocab_size = vocab_override;
    const ParamBreakdown b = count_params(cfg.model);
    if (as_json) {
        ordered_json j;
        j["name"] = cfg.name;
        j["embedding"] = b.embedding;
        j["non_ffn_blocks"] = b.non_ffn_blocks;
        j["ffn_or_expert_total"] = b.ffn_or_expert_total;
        j["router"] = b.router;
        j["total"] = b.total;
        j["active"] = b.active;
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("%s", b.table(cfg.name.empty() ? config_path : cfg.name).c_str());
    }
}

void cmd_match_budget(const std::string& target_kind, int64_t count,
                      const std::string& from_config, const BudgetConstraints& constraints,
                      bool as_json) {
    const BudgetKind kind = target_kind == "active" ? BudgetKind::Active : BudgetKind::Total;
    int64_t target = count;
    if (!from_config.empty()) {
        ExperimentConfig cfg = load_experiment_config(from_config);
        const ParamBreakdown b = count_params(cfg.model);
        target = kind == BudgetKind::Active ? b.active : b.total;
    }
    if (target <= 0) fail("match-budget: give --count or --from-config");
    const BudgetMatch m = match_budget(kind, target, constraints);
    if (as_json) {
        ordered_json j;
        j["target"] = target;
        j["kind"] = target_kind;
        j["d_model"] = m.config.d_model;
        j["n_query_heads"] = m.config.n_query_heads;
        j["n_kv_heads"] = m.config.n_kv_heads;
        j["ffn_hidden"] = m.config.ffn_hidden;
        j["achieved_total"] = m.breakdown.total;
        j["achieved_active"] = m.breakdown.active;
        j["rel_error"] = m.rel_error;
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("target %s = %lld\n", target_kind.c_str(), static_cast<long long>(target));
        std::printf("  d_model %lld (%lld query heads, %lld kv heads), ffn_hidden %lld\n",
                    static_cast<long long>(m.config.d_model),
                    static_cast<long long>(m.config.n_query_heads),
                    static_cast<long long>(m.config.n_kv_heads),
                    static_cast<long long>(m.config.ffn_hidden));
        std::printf("  achieved total %lld, active %lld, relative error %.4f%%\n",
                    static_cast<long long>(m.breakdown.total),
                    static_cast<long long>(m.breakdown.active), 100.0 * m.rel_error);
    }
}

void cmd_bench_dispatch(const BenchShape& shape, int repeats, bool as_json) {
    const BenchReport rep = bench_dispatch(shape, repeats);
    if (as_json) {
        ordered_json j;
        j["tokens"] = rep.shape.tokens;
        j["d_model"] = rep.shape.d_model;
        j["n_experts"] = rep.shape.n_experts;
        j["expert_hidden"] = rep.shape.expert_hidden;
        j["top_k"] = rep.shape.top_k;
        j["repeats"] = rep.repeats;
        for (const auto& p : rep.paths) j["tok_per_s"][p.path] = p.tok_per_s;
        j["max_rel_deviation"] = rep.max_rel_deviation;
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("%s", bench_report_text(rep).c_str());
        const double naive = rep.paths[0].tok_per_s;
        const double grouped = rep.paths[1].tok_per_s;
        const double stacked = rep.paths[2].tok_per_s;
        std::printf("  ordering: grouped %s naive, stacked %s grouped\n",
                    grouped >= naive ? ">=" : "<", stacked >= grouped ? ">=" : "<");
    }
}

void cmd_diagnose(const std::string& run_dir) {
    const std::vector<EvalPoint> evals = read_metrics(run_dir + "/metrics.jsonl");
    const EvalPoint* first = nullptr;
    const EvalPoint* last = nullptr;
    for (const EvalPoint& ep : evals) {
        if (ep.routing.empty()) continue;
        if (!first) first = &ep;
        last = &ep;
    }
    if (!first) fail("diagnose: no routing diagnostics in " + run_dir + " (dense run?)");
    std::printf("routing diagnostics for %s (steps %lld -> %lld)\n", run_dir.c_str(),
                static_cast<long long>(first->step), static_cast<long long>(last->step));
    print_routing_table(first->routing, last->routing);
    auto verdicts = collapse_detector(last->routing);
    for (size_t l = 0; l < verdicts.size(); ++l) {
        if (verdicts[l]) std::printf("L%zu: COLLAPSED (busiest > 0.9)\n", l);
    }
}

void cmd_export_curves(const std::vector<std::string>& da_dirs,
                       const std::vector<std::string>& moe_dirs,
                       const std::vector<std::string>& dt_dirs, const std::string& out_csv,
                       std::string gap_path) {
    auto load_all = [](const std::vector<std::string>& dirs) {
        std::vector<RunSeries> out;
        for (const std::string& d : dirs) out.push_back(load_run(d));
        return out;
    };
    const CurveExport ex =
        export_curves(load_all(da_dirs), load_all(moe_dirs), load_all(dt_dirs));
    std::ofstream os(out_csv);
    if (!os) fail("export-curves: cannot open " + out_csv);
    os << ex.csv;

    if (gap_path.empty()) gap_path = out_csv + ".gaps.json";
    ordered_json j;
    j["per_seed"] = ordered_json::array();
    for (const auto& ps : ex.gaps.per_seed) {
        j["per_seed"].push_back(
            {{"seed", ps.seed}, {"active_gap", ps.active_gap}, {"total_gap", ps.total_gap}});
    }
    j["active_gap"] = {{"mean", ex.gaps.active_gap.mean}, {"std", ex.gaps.active_gap.std}};
    j["total_gap"] = {{"mean", ex.gaps.total_gap.mean}, {"std", ex.gaps.total_gap.std}};
    std::ofstream gs(gap_path);
    gs << j.dump(2) << "\n";

    std::printf("wrote %s and %s\n", out_csv.c_str(), gap_path.c_str());
    std::printf("active gap %.4f +/- %.4f, total gap %.4f +/- %.4f (best val, %zu seeds)\n",
                ex.gaps.active_gap.mean, ex.gaps.active_gap.std, ex.gaps.total_gap.mean,
                ex.gaps.total_gap.std, ex.gaps.per_seed.size());
}

void cmd_summarize(const std::vector<std::string>& run_dirs) {
    std::vector<RunSeries> runs;
    for (const std::string& d : run_dirs) runs.push_back(load_run(d));
    std::printf("%s", summarize_runs(runs).c_str());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tiny-scale dense vs mixture-of-experts pretraining lab"};
    app.require_subcommand(1);

    auto* prep = app.add_subcommand("prepare-data", "tokenize text files into a window dataset");
    std::vector<std::string> prep_inputs;
    std::string prep_output, prep_tokenizer = "byte";
    int64_t prep_window = 512;
    double prep_ratio = 0.95;
    uint64_t prep_seed = 1337;
    bool prep_nosep = false;
    prep->add_option("--input", prep_inputs, "input text file(s)")->required();
    prep->add_option("--output", prep_output, "output dataset file")->required();
    prep->add_option("--window-len", prep_window, "tokens per window");
    prep->add_option("--tokenizer", prep_tokenizer, "tokenizer (byte)");
    prep->add_option("--ratio", prep_ratio, "train-side split fraction (report only)");
    prep->add_option("--shard-seed", prep_seed, "split seed (report only)");
    prep->add_flag("--no-separator", prep_nosep, "do not insert document separators");

    auto* train = app.add_subcommand("train", "run one training configuration");
    std::string train_config, train_out;
    int64_t train_seed = -1;
    bool train_quiet = false;
    train->add_option("--config", train_config, "experiment config (json)")->required();
    train->add_option("--seed", train_seed, "override train.seed");
    train->add_option("--out", train_out, "override output.dir");
    train->add_flag("--quiet", train_quiet, "suppress per-eval lines");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string ev_ckpt, ev_data, ev_split = "val";
    double ev_ratio = 0.95;
    uint64_t ev_seed = 1337;
    int64_t ev_max = 0;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--dataset", ev_data, "dataset file")->required();
    ev->add_option("--split", ev_split, "train|val")->check(CLI::IsMember({"train", "val"}));
    ev->add_option("--train-ratio", ev_ratio, "split fraction");
    ev->add_option("--shard-seed", ev_seed, "split seed");
    ev->add_option("--max-batches", ev_max, "cap eval batches (0 = all)");

    auto* cp = app.add_subcommand("count-params", "exact parameter accounting for a config");
    std::string cp_config;
    int64_t cp_vocab = 0;
    bool cp_json = false;
    cp->add_option("--config", cp_config, "experiment config (json)")->required();
    cp->add_option("--vocab", cp_vocab, "override vocab size");
    cp->add_flag("--json", cp_json, "machine-readable output");

    auto* mb = app.add_subcommand("match-budget", "search dense widths for a parameter target");
    std::string mb_kind = "total", mb_from;
    int64_t mb_count = 0;
    bool mb_json = false;
    BudgetConstraints mb_c;
    mb->add_option("--target", mb_kind, "active|total")
        ->check(CLI::IsMember({"active", "total"}));
    mb->add_option("--count", mb_count, "target parameter count");
    mb->add_option("--from-config", mb_from, "take the target from this config's counts");
    mb->add_option("--vocab", mb_c.vocab, "vocab size");
    mb->add_option("--layers", mb_c.n_layers, "layer count");
    mb->add_option("--head-dim", mb_c.head_dim, "head dimension");
    mb->add_option("--n-kv-heads", mb_c.n_kv_heads, "kv head count");
    mb->add_option("--ratio-min", mb_c.ffn_ratio_min, "ffn ratio lower bound");
    mb->add_option("--ratio-max", mb_c.ffn_ratio_max, "ffn ratio upper bound");
    mb->add_option("--ratio-step", mb_c.ffn_ratio_step, "ffn ratio grid step");
    mb->add_option("--granularity", mb_c.d_model_granularity, "d_model grid step");
    mb->add_flag("--json", mb_json, "machine-readable output");

    auto* bd = app.add_subcommand("bench-dispatch", "time the three dispatch paths");
    BenchShape bd_shape;
    int bd_repeats = 5;
    bool bd_json = false;
    bd->add_option("--tokens", bd_shape.tokens, "tokens per iteration");
    bd->add_option("--d-model", bd_shape.d_model, "model width");
    bd->add_option("--experts", bd_shape.n_experts, "expert count");
    bd->add_option("--hidden", bd_shape.expert_hidden, "expert hidden width");
    bd->add_option("--top-k", bd_shape.top_k, "experts per token");
    bd->add_option("--seed", bd_shape.seed, "workload seed");
    bd->add_option("--repeats", bd_repeats, "timed repeats per path");
    bd->add_flag("--json", bd_json, "machine-readable output");

    auto* dg = app.add_subcommand("diagnose", "render routing diagnostics for a run");
    std::string dg_run;
    dg->add_option("--run", dg_run, "run directory")->required();

    auto* ec = app.add_subcommand("export-curves", "aligned loss and gap curves as csv");
    std::vector<std::string> ec_da, ec_moe, ec_dt;
    std::string ec_out, ec_gaps;
    ec->add_option("--dense-active", ec_da, "dense active-match run dir(s)")->required();
    ec->add_option("--moe", ec_moe, "moe run dir(s)")->required();
    ec->add_option("--dense-total", ec_dt, "dense total-match run dir(s)")->required();
    ec->add_option("--out", ec_out, "output csv path")->required();
    ec->add_option("--gap-summary", ec_gaps, "gap summary json path");

    auto* sm = app.add_subcommand("summarize", "mean +/- std of best val loss per model");
    std::vector<std::string> sm_runs;
    sm->add_option("--runs", sm_runs, "run directories")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (prep->parsed()) {
            cmd_prepare_data(prep_inputs, prep_output, prep_window, prep_tokenizer, prep_ratio,
                             prep_seed, prep_nosep);
        } else if (train->parsed()) {
            cmd_train(train_config, train_seed, train_out, train_quiet);
        } else if (ev->parsed()) {
            cmd_eval(ev_ckpt, ev_data, ev_split, ev_ratio, ev_seed, ev_max);
        } else if (cp->parsed()) {
            cmd_count_params(cp_config, cp_vocab, cp_json);
        } else if (mb->parsed()) {
            cmd_match_budget(mb_kind, mb_count, mb_from, mb_c, mb_json);
        } else if (bd->parsed()) {
            cmd_bench_dispatch(bd_shape, bd_repeats, bd_json);
        } else if (dg->parsed()) {
            cmd_diagnose(dg_run);
        } else if (ec->parsed()) {
            cmd_export_curves(ec_da, ec_moe, ec_dt, ec_out, ec_gaps);
        } else if (sm->parsed()) {
            cmd_summarize(sm_runs);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
