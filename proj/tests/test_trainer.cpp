#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "data.hpp"
#include "losses.hpp"
#include "ops.hpp"
#include "support/oracles.hpp"
#include "trainer.hpp"

using namespace moelab;

namespace {

TrainConfig paper_schedule() {
    TrainConfig c;
    c.total_steps = 26073;
    return c;
}

ModelConfig micro_model(int64_t vocab, bool moe) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.context_len = 32;
    cfg.dropout_p = 0.1;
    if (moe) {
        cfg.moe = MoEConfig{4, 2, 48, 1e-2, 1e-3, DispatchPath::Grouped};
    } else {
        cfg.ffn_hidden = 48;
    }
    return cfg;
}

TokenWindowDataset micro_dataset(int64_t windows, int64_t window_len) {
    ByteTokenizer tok;
    std::string text = oracle::synth_corpus(11, static_cast<size_t>(windows * window_len + 64));
    auto ids = tok.encode(text);
    ids.resize(static_cast<size_t>(windows * window_len));
    return build_windows(ids, window_len, tok.vocab_size());
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("lr schedule: warmup end, final step, and cosine midpoint") {
    TrainConfig c = paper_schedule();
    // 3% of 26,073 steps -> warmup ends at step 782 at exactly the max lr
    CHECK(lr_at(782, c) == 3e-4);
    CHECK(lr_at(26073, c) == doctest::Approx(3e-5).epsilon(1e-12));
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(391, c) == doctest::Approx(1.5e-4).epsilon(1e-9));

    TrainConfig small;
    small.total_steps = 1000; // warmup 30, cosine midpoint at 515
    CHECK(lr_at(515, small) == doctest::Approx((3e-4 + 3e-5) / 2).epsilon(1e-12));
    CHECK(lr_at(515, small) == doctest::Approx(1.65e-4).epsilon(1e-9));

    CHECK_THROWS_AS(lr_at(-1, c), std::runtime_error);
    CHECK_THROWS_AS(lr_at(26074, c), std::runtime_error);
}

TEST_CASE("lr schedule: no jumps larger than the slope bounds") {
    TrainConfig c;
    c.total_steps = 2000;
    const int64_t warmup = static_cast<int64_t>(c.warmup_frac * c.total_steps);
    const double warm_bound = c.lr_max / static_cast<double>(warmup) + 1e-15;
    const double cos_bound =
        3.141592653589793 * (c.lr_max - c.lr_min) / (2.0 * (c.total_steps - warmup)) + 1e-15;
    for (int64_t s = 0; s < c.total_steps; ++s) {
        const double d = std::abs(lr_at(s + 1, c) - lr_at(s, c));
        CHECK(d <= (s < warmup ? warm_bound : cos_bound));
    }
}

TEST_CASE("adamw: first-step update is approximately lr times sign") {
    std::vector<NamedParam> params;
    Tensor p = Tensor::from({1}, std::vector<float>{1.0f});
    p.set_requires_grad(true);
    params.push_back({"w", p, false});
    TrainConfig c;
    AdamW opt(params, c);

    p.grad_vals<float>()[0] = 1.0f;
    opt.step(0.1);
    CHECK(p.flat(0) == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw: zero grads leave params unchanged without decay") {
    std::vector<NamedParam> params;
    Tensor p = Tensor::from({2}, std::vector<float>{1.5f, -2.0f});
    p.set_requires_grad(true);
    params.push_back({"w", p, false});
    TrainConfig c;
    c.weight_decay = 0.0;
    AdamW opt(params, c);
    opt.step(0.1);
    CHECK(p.flat(0) == 1.5);
    CHECK(p.flat(1) == -2.0);
}

TEST_CASE("adamw: decoupled decay shrinks decayed matrices by (1 - lr*wd)") {
    std::vector<NamedParam> params;
    Tensor w = Tensor::from({1}, std::vector<float>{2.0f});
    Tensor n = Tensor::from({1}, std::vector<float>{2.0f});
    w.set_requires_grad(true);
    n.set_requires_grad(true);
    params.push_back({"w", w, true});
    params.push_back({"norm", n, false});
    TrainConfig c; // weight_decay 0.1
    AdamW opt(params, c);
    opt.step(0.05);
    CHECK(w.flat(0) == doctest::Approx(2.0 * (1.0 - 0.05 * 0.1)).epsilon(1e-7));
    CHECK(n.flat(0) == 2.0); // decay excluded
}

TEST_CASE("adamw: non-finite gradient errors with the tensor name") {
    std::vector<NamedParam> params;
    Tensor p = Tensor::from({1}, std::vector<float>{1.0f});
    p.set_requires_grad(true);
    params.push_back({"layers.0.wq", p, true});
    TrainConfig c;
    AdamW opt(params, c);
    p.grad_vals<float>()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS(opt.step(0.1), "adamw: non-finite gradient in layers.0.wq",
                         std::runtime_error);
}

TEST_CASE("clip_gradients: scales only above the threshold") {
    std::vector<NamedParam> params;
    Tensor p = Tensor::from({2}, std::vector<float>{0.0f, 0.0f});
    p.set_requires_grad(true);
    params.push_back({"w", p, false});

    auto g = p.grad_vals<float>();
    g[0] = 3.0f;
    g[1] = 4.0f;
    const double pre = clip_gradients(params, 1.0);
    CHECK(pre == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(p.grad_flat(0) == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(p.grad_flat(1) == doctest::Approx(0.8).epsilon(1e-6));

    g = p.grad_vals<float>();
    g[0] = 0.3f;
    g[1] = 0.4f;
    const double pre2 = clip_gradients(params, 1.0);
    CHECK(pre2 == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(p.grad_flat(0) == doctest::Approx(0.3).epsilon(1e-7)); // unchanged

    for (uint64_t s = 0; s < 5; ++s) {
        auto gv = p.grad_vals<float>();
        gv[0] = static_cast<float>(3.0 + s);
        gv[1] = static_cast<float>(4.0 - s);
        clip_gradients(params, 1.0);
        const double post = std::sqrt(p.grad_flat(0) * p.grad_flat(0) +
                                      p.grad_flat(1) * p.grad_flat(1));
        CHECK(post <= 1.0 + 1e-6);
    }
}

TEST_CASE("train_run: micro run descends and bookkeeping is exact") {
    TokenWindowDataset ds = micro_dataset(64, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    // make every batch full so the token formula is exact
    split.train.resize(48);
    ModelConfig mc = micro_model(ds.vocab_size, false);
    DecoderModel model(mc, 1337);

    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 2;
    tc.total_steps = 20;
    tc.eval_every = 10;
    tc.seed = 1337;

    RunRecord rec = train_run(model, tc, ds, split);
    CHECK(rec.loss_tokens == 20 * 2 * 4 * (32 - 1));
    REQUIRE(rec.evals.size() >= 2);
    CHECK(rec.evals.back().train_ce < rec.evals.front().train_ce);
    CHECK(rec.best_val_ce <= rec.evals.front().val_ce);

    // best-val series is non-increasing
    double best = std::numeric_limits<double>::infinity();
    for (const EvalPoint& ep : rec.evals) {
        best = std::min(best, ep.val_ce);
    }
    CHECK(best == rec.best_val_ce);
}

TEST_CASE("train_run: identical seeds give bit-identical metrics files") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.total_steps = 8;
    tc.eval_every = 4;
    tc.seed = 555;

    auto run_once = [&](const std::string& path) {
        ModelConfig mc = micro_model(ds.vocab_size, true); // MoE, with dropout on
        DecoderModel model(mc, tc.seed);
        RunRecord rec = train_run(model, tc, ds, split);
        write_metrics(path, rec);
        return rec;
    };
    RunRecord a = run_once("/tmp/moelab_m1.jsonl");
    RunRecord b = run_once("/tmp/moelab_m2.jsonl");
    CHECK(a.best_val_ce == b.best_val_ce); // bitwise
    for (size_t i = 0; i < a.evals.size(); ++i) {
        CHECK(a.evals[i].val_ce == b.evals[i].val_ce);
        CHECK(a.evals[i].train_total == b.evals[i].train_total);
    }
    CHECK(slurp("/tmp/moelab_m1.jsonl") == slurp("/tmp/moelab_m2.jsonl"));
    std::remove("/tmp/moelab_m1.jsonl");
    std::remove("/tmp/moelab_m2.jsonl");
}

TEST_CASE("train_run: moe metrics carry routing fields, dense ones do not") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.total_steps = 4;
    tc.eval_every = 4;

    ModelConfig dense_cfg = micro_model(ds.vocab_size, false);
    DecoderModel dense(dense_cfg, 1);
    RunRecord rd = train_run(dense, tc, ds, split);
    CHECK(rd.evals.back().routing.empty());
    write_metrics("/tmp/moelab_dense.jsonl", rd);
    CHECK(slurp("/tmp/moelab_dense.jsonl").find("routing") == std::string::npos);
    std::remove("/tmp/moelab_dense.jsonl");

    ModelConfig moe_cfg = micro_model(ds.vocab_size, true);
    DecoderModel moe(moe_cfg, 1);
    RunRecord rm = train_run(moe, tc, ds, split);
    CHECK(rm.evals.back().routing.size() == 2); // one per layer
    for (const LayerDiag& d : rm.evals.back().routing) {
        CHECK(d.busiest_fraction >= 0.25 - 1e-12);
        CHECK(std::isfinite(d.mean_logz));
    }
}

TEST_CASE("train_run: diagnostics collection does not change training") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.total_steps = 6;
    tc.eval_every = 3;

    auto run_with = [&](bool diag) {
        ModelConfig mc = micro_model(ds.vocab_size, true);
        DecoderModel model(mc, 42);
        TrainHooks hooks;
        hooks.collect_diagnostics = diag;
        return train_run(model, tc, ds, split, "", hooks);
    };
    RunRecord with = run_with(true);
    RunRecord without = run_with(false);
    REQUIRE(with.evals.size() == without.evals.size());
    for (size_t i = 0; i < with.evals.size(); ++i) {
        CHECK(with.evals[i].val_ce == without.evals[i].val_ce); // bitwise
        CHECK(with.evals[i].train_total == without.evals[i].train_total);
    }
    CHECK(without.evals.back().routing.empty());
}

TEST_CASE("checkpoint: round-trip restores the model exactly") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    ModelConfig mc = micro_model(ds.vocab_size, true);
    DecoderModel model(mc, 9);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.total_steps = 5;
    tc.eval_every = 2;

    const std::string dir = "/tmp/moelab_ckpt_test";
    std::filesystem::remove_all(dir);
    RunRecord rec = train_run(model, tc, ds, split, dir);
    REQUIRE(std::filesystem::exists(dir + "/best.ckpt"));

    Checkpoint ck = load_checkpoint(dir + "/best.ckpt");
    CHECK(ck.best_val_ce == rec.best_val_ce);
    CHECK(ck.model_cfg.d_model == mc.d_model);
    CHECK(ck.model_cfg.is_moe());

    DecoderModel restored(ck.model_cfg, 12345); // different init seed on purpose
    restore_params(restored, ck);
    EvalResult ours = evaluate(restored, ds, split.val, 4, 0, false);
    CHECK(ours.ce == doctest::Approx(rec.best_val_ce).epsilon(1e-7));
    std::filesystem::remove_all(dir);
}

TEST_CASE("train_run: non-finite loss aborts with a checkpoint reference") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    ModelConfig mc = micro_model(ds.vocab_size, false);
    DecoderModel model(mc, 3);
    model.params()[1].tensor.vals<float>()[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.total_steps = 2;
    try {
        train_run(model, tc, ds, split);
        FAIL("expected abort");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
        CHECK(std::string(e.what()).find("checkpoint") != std::string::npos);
    }
}

TEST_CASE("train_run: rejects a dataset/vocab mismatch") {
    TokenWindowDataset ds = micro_dataset(40, 32);
    SplitIndices split = split_train_val(ds.count(), 0.9, 7);
    ModelConfig mc = micro_model(500, false); // wrong vocab
    DecoderModel model(mc, 3);
    TrainConfig tc;
    tc.total_steps = 1;
    CHECK_THROWS_AS(train_run(model, tc, ds, split), std::runtime_error);
}

TEST_CASE("metrics round-trip through jsonl") {
    RunRecord rec;
    EvalPoint ep;
    ep.step = 250;
    ep.tokens = 4088000;
    ep.val_ce = 2.5;
    ep.val_ppl = perplexity(2.5);
    ep.lr = 1e-4;
    ep.grad_norm = 0.7;
    LayerDiag d;
    d.busiest_fraction = 0.4;
    d.mean_logz = 0.62;
    ep.routing.push_back(d);
    rec.evals.push_back(ep);
    write_metrics("/tmp/moelab_rt.jsonl", rec);
    auto back = read_metrics("/tmp/moelab_rt.jsonl");
    REQUIRE(back.size() == 1);
    CHECK(back[0].step == 250);
    CHECK(back[0].tokens == 4088000);
    CHECK(back[0].val_ce == 2.5);
    REQUIRE(back[0].routing.size() == 1);
    CHECK(back[0].routing[0].busiest_fraction == 0.4);
    CHECK(back[0].routing[0].mean_logz == 0.62);
    std::remove("/tmp/moelab_rt.jsonl");
}
