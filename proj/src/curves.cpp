#include "curves.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "losses.hpp"

namespace moelab {

using nlohmann::json;
using nlohmann::ordered_json;

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    ms.n = xs.size();
    if (xs.empty()) return ms;
    double sum = 0.0;
    for (double x : xs) sum += x;
    ms.mean = sum / static_cast<double>(xs.size());
    if (xs.size() >= 2) {
        double sq = 0.0;
        for (double x : xs) sq += (x - ms.mean) * (x - ms.mean);
        ms.std = std::sqrt(sq / static_cast<double>(xs.size() - 1));
    }
    return ms;
}

RunSeries load_run(const std::string& dir) {
    RunSeries rs;
    rs.dir = dir;
    std::ifstream is(dir + "/summary.json");
    if (!is) fail("load_run: missing " + dir + "/summary.json");
    json j = json::parse(is);
    rs.name = j.value("name", std::string{});
    rs.seed = j.value("seed", uint64_t{0});
    rs.best_val_ce = j.value("best_val_ce", 0.0);
    rs.evals = read_metrics(dir + "/metrics.jsonl");
    if (rs.evals.empty()) fail("load_run: no eval records in " + dir);
    return rs;
}

void write_run_summary(const std::string& dir, const std::string& name, uint64_t seed,
                       const RunRecord& rec, const ParamBreakdown& params) {
    ordered_json j;
    j["name"] = name;
    j["seed"] = seed;
    j["best_val_ce"] = rec.best_val_ce;
    j["best_val_ppl"] = perplexity(rec.best_val_ce);
    j["best_step"] = rec.best_step;
    j["final_step"] = rec.final_step;
    j["loss_tokens"] = rec.loss_tokens;
    j["wall_seconds"] = rec.wall_seconds;
    j["params"] = {{"total", params.total}, {"active", params.active}};
    std::ofstream os(dir + "/summary.json");
    if (!os) fail("write_run_summary: cannot open " + dir + "/summary.json");
    os << j.dump(2) << "\n";
}

namespace {

void check_alignment(const std::vector<const RunSeries*>& runs) {
    const RunSeries* first = runs.front();
    for (const RunSeries* r : runs) {
        if (r->evals.size() != first->evals.size()) {
            fail("export_curves: eval cadence mismatch between " + first->dir + " (" +
                 std::to_string(first->evals.size()) + " points) and " + r->dir + " (" +
                 std::to_string(r->evals.size()) + " points)");
        }
        for (size_t i = 0; i < r->evals.size(); ++i) {
            if (r->evals[i].step != first->evals[i].step) {
                fail("export_curves: step sequence mismatch between " + first->dir + " and " +
                     r->dir);
            }
        }
    }
}

std::vector<const RunSeries*> sorted_by_seed(const std::vector<RunSeries>& runs) {
    std::vector<const RunSeries*> out;
    for (const RunSeries& r : runs) out.push_back(&r);
    std::stable_sort(out.begin(), out.end(),
                     [](const RunSeries* a, const RunSeries* b) { return a->seed < b->seed; });
    return out;
}

} // namespace

CurveExport export_curves(const std::vector<RunSeries>& dense_active,
                          const std::vector<RunSeries>& moe,
                          const std::vector<RunSeries>& dense_total) {
    if (dense_active.empty() || moe.empty() || dense_total.empty()) {
        fail("export_curves: need at least one run per family");
    }
    std::vector<const RunSeries*> all;
    for (const auto* fam : {&dense_active, &moe, &dense_total}) {
        for (const RunSeries& r : *fam) all.push_back(&r);
    }
    check_alignment(all);

    const size_t n_points = dense_active[0].evals.size();
    const bool multi = dense_active.size() > 1 || moe.size() > 1 || dense_total.size() > 1;

    auto family_stats = [&](const std::vector<RunSeries>& fam, size_t i) {
        std::vector<double> vals;
        for (const RunSeries& r : fam) vals.push_back(r.evals[i].val_ce);
        return mean_std(vals);
    };

    std::ostringstream csv;
    csv << "step,tokens";
    for (const char* fam : {"dense_active", "moe", "dense_total"}) {
        csv << "," << fam << "_val_ce";
        if (multi) csv << "," << fam << "_val_ce_std";
    }
    csv << ",active_gap,total_gap\n";

    std::vector<double> da_means, moe_means, dt_means;
    for (size_t i = 0; i < n_points; ++i) {
        const MeanStd da = family_stats(dense_active, i);
        const MeanStd mo = family_stats(moe, i);
        const MeanStd dt = family_stats(dense_total, i);
        da_means.push_back(da.mean);
        moe_means.push_back(mo.mean);
        dt_means.push_back(dt.mean);
        char buf[320];
        if (multi) {
            std::snprintf(buf, sizeof(buf),
                          "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                          static_cast<long long>(dense_active[0].evals[i].step),
                          static_cast<long long>(dense_active[0].evals[i].tokens), da.mean,
                          da.std, mo.mean, mo.std, dt.mean, dt.std, da.mean - mo.mean,
                          mo.mean - dt.mean);
        } else {
            std::snprintf(buf, sizeof(buf), "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                          static_cast<long long>(dense_active[0].evals[i].step),
                          static_cast<long long>(dense_active[0].evals[i].tokens), da.mean,
                          mo.mean, dt.mean, da.mean - mo.mean, mo.mean - dt.mean);
        }
        csv << buf;
    }

    CurveExport out;
    out.csv = csv.str();

    // per-seed best-val gaps, families paired by ascending seed
    const auto da_sorted = sorted_by_seed(dense_active);
    const auto mo_sorted = sorted_by_seed(moe);
    const auto dt_sorted = sorted_by_seed(dense_total);
    const size_t n_seeds =
        std::min({da_sorted.size(), mo_sorted.size(), dt_sorted.size()});
    std::vector<double> agaps, tgaps;
    for (size_t s = 0; s < n_seeds; ++s) {
        GapSummary::PerSeed ps;
        ps.seed = mo_sorted[s]->seed;
        ps.active_gap = da_sorted[s]->best_val_ce - mo_sorted[s]->best_val_ce;
        ps.total_gap = mo_sorted[s]->best_val_ce - dt_sorted[s]->best_val_ce;
        agaps.push_back(ps.active_gap);
        tgaps.push_back(ps.total_gap);
        out.gaps.per_seed.push_back(ps);
    }
    out.gaps.active_gap = mean_std(agaps);
    out.gaps.total_gap = mean_std(tgaps);
    return out;
}

std::string summarize_runs(const std::vector<RunSeries>& runs) {
    if (runs.empty()) fail("summarize: no runs given");
    std::map<std::string, std::vector<const RunSeries*>> groups;
    std::vector<std::string> order;
    for (const RunSeries& r : runs) {
        if (!groups.count(r.name)) order.push_back(r.name);
        groups[r.name].push_back(&r);
    }
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-24s %5s  %-20s %-20s\n", "Model", "Runs", "Val Loss",
                  "PPL");
    os << buf;
    for (const std::string& name : order) {
        std::vector<double> ces, ppls;
        for (const RunSeries* r : groups[name]) {
            ces.push_back(r->best_val_ce);
            ppls.push_back(perplexity(r->best_val_ce));
        }
        const MeanStd ce = mean_std(ces);
        const MeanStd ppl = mean_std(ppls);
        if (ce.n >= 2) {
            std::snprintf(buf, sizeof(buf), "%-24s %5zu  %.4f +/- %.4f   %.3f +/- %.3f\n",
                          name.c_str(), ce.n, ce.mean, ce.std, ppl.mean, ppl.std);
        } else {
            std::snprintf(buf, sizeof(buf), "%-24s %5zu  %-20.4f %-20.3f\n", name.c_str(), ce.n,
                          ce.mean, ppl.mean);
        }
        os << buf;
    }
    return os.str();
}

} // namespace moelab
