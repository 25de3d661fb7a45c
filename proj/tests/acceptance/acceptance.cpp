// One PASS/FAIL line per acceptance criterion. Exit status 1 if any gating
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/arch.hpp"
#include "cascade/hierarchy.hpp"
#include "cascade/trainer.hpp"
#include "cli/app.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"

using namespace cascade;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

ArchSpec shipped(const std::string& id) { return load_arch(std::string(CASCADE_TEST_ARCHS) + "/" + id + ".arch"); }

bool rounds_to(std::int64_t value, double shown, double unit) {
    return std::abs(static_cast<double>(value) - shown) <= 0.5 * unit + 1e-6;
}

double round_to(double v, double unit) { return std::round(v / unit) * unit; }

std::string fmt(const char* f, double v) {
    char b[64];
    std::snprintf(b, sizeof b, f, v);
    return b;
}

// ---- 1 ---------------------------------------------------------------------

Outcome resnet_table() {
    struct Row {
        double flops_m, params_m;
    };
    const std::vector<Row> table = {
        {118, 0.01}, {231, 0.07}, {218, 0.07}, {218, 0.07}, {295, 0.38}, {218, 0.28},
        {218, 0.28}, {218, 0.28}, {295, 1.51}, {218, 1.11}, {218, 1.11}, {218, 1.11},
        {218, 1.11}, {218, 1.11}, {295, 6.03}, {218, 4.46}, {218, 4.46}, {2.05, 2.05},
    };
    const auto stats = count_stats(shipped("resnet50"));
    std::vector<const LayerStats*> rows;
    for (const auto& l : stats.layers)
        if (l.kind == "conv" || l.kind == "block" || l.kind == "dense") rows.push_back(&l);
    if (rows.size() != table.size()) return {false, "row count " + std::to_string(rows.size())};
    int bad = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        const double fu = i + 1 == table.size() ? 0.01e6 : 1e6;
        bad += !rounds_to(rows[i]->flops, table[i].flops_m * 1e6, fu);
        bad += !rounds_to(rows[i]->params, table[i].params_m * 1e6, 0.01e6);
    }
    const auto& t = stats.totals;
    const bool params_ok = rounds_to(t.params, 25.5e6, 0.1e6);
    const bool flops_ok = rounds_to(t.flops, 3.85e9, 0.01e9);
    std::string d = std::to_string(table.size() - bad / 2) + "/" + std::to_string(table.size()) +
                    " rows match; totals " + std::to_string(t.flops) + " FLOPs (" + human_count(t.flops) +
                    ", want 3.85B) " + std::to_string(t.params) + " params (" + human_count(t.params, 1) +
                    ", want 25.5M)";
    return {bad == 0 && params_ok && flops_ok, d};
}

// ---- 2 ---------------------------------------------------------------------

Outcome vgg_totals() {
    const auto t = count_stats(shipped("vgg16-cifar10")).totals;
    const bool totals = rounds_to(t.params, 14.98e6, 0.01e6) && rounds_to(t.flops, 313e6, 1e6);
    const auto r = compression_report(Totals{14'980'000, 313'000'000}, Totals{7'760'000, 134'000'000});
    const bool ratios = round_to(r.param_ratio, 0.1) == round_to(1.9, 0.1) &&
                        round_to(r.flops_ratio, 0.1) == round_to(2.3, 0.1);
    return {totals && ratios, std::to_string(t.params) + " params / " + std::to_string(t.flops) + " FLOPs; ratios " +
                                  fmt("%.3f", r.param_ratio) + "x / " + fmt("%.3f", r.flops_ratio) + "x"};
}

// ---- 3 ---------------------------------------------------------------------

Outcome gradients() {
    const auto checks = oracle::gradient_suite(50, 20261018);
    double worst = 0;
    std::string worst_op;
    bool ok = true;
    for (const auto& c : checks) {
        ok &= c.instances >= 50 && c.worst < 1e-4;
        if (c.worst >= worst) {
            worst = c.worst;
            worst_op = c.op;
        }
    }
    const int conv = oracle::conv_mismatches(100, 20261018);
    return {ok && conv == 0, std::to_string(checks.size()) + " ops, worst " + fmt("%.2e", worst) + " (" + worst_op +
                                 "); conv mismatches " + std::to_string(conv) + "/100"};
}

// ---- 4 ---------------------------------------------------------------------

Outcome masks() {
    const auto r = oracle::mask_properties(1000, 4242);
    const int fails = r.cardinality + r.floor + r.determinism + r.threshold + r.ties + r.repair + r.nesting;
    std::ostringstream d;
    d << r.trials << " trials; failures card " << r.cardinality << " floor " << r.floor << " det " << r.determinism
      << " topk " << r.threshold << " ties " << r.ties << " repair " << r.repair << " nest " << r.nesting;
    return {fails == 0 && r.trials >= 1000, d.str()};
}

// ---- 5 ---------------------------------------------------------------------

Outcome routing() {
    int ok = 0;
    const int seeds = 5;
    for (int s = 1; s <= seeds; ++s) {
        const auto r = scenario::routing_check(static_cast<std::uint64_t>(s));
        ok += r.routed_matches_context && r.applied_matches_routed && r.cross_wired_differs &&
              r.silent_teacher_gives_zero;
    }
    return {ok == seeds, std::to_string(ok) + "/" + std::to_string(seeds) + " seeds bitwise-routed, control differs"};
}

// ---- 6 ---------------------------------------------------------------------

struct SeedResult {
    double student = 0, baseline = 0;
    std::size_t last_hamming = 0;
    bool pass = false;
};

SeedResult desk_run(std::uint64_t seed) {
    DataConfig dc;
    dc.synthetic_seed = seed;
    dc.synthetic_train = 4000;
    dc.synthetic_test = 1000;
    dc.synthetic_classes = 10;
    dc.synthetic_noise = 0.8;  // the default noise is learned perfectly by every width
    const DataSplits data = load_data(dc);

    TrainConfig cfg;
    cfg.keep_ratios = derive_ta_keep_ratios(0.5, {1.5, 2.5});
    cfg.joint_epochs = 8;
    cfg.finetune_epochs = 8;
    cfg.batch_size = 64;
    cfg.schedule.base_lr = 0.05;
    cfg.schedule.cycle_len_epochs = 8;
    cfg.seed = seed;

    const Network net(shipped("toy4"));
    StandaloneModel teacher = StandaloneModel::init(net, seed);
    StandaloneConfig pre;
    pre.epochs = 8;
    pre.batch_size = cfg.batch_size;
    pre.optimizer = cfg.optimizer;
    pre.schedule = cfg.schedule;
    pre.seed = seed;
    train_standalone(net, teacher, data, dc, pre);

    Trainer t(cfg, net, teacher, &data, dc);
    SeedResult r;
    RunOptions ro;
    ro.out_dir = fs::temp_directory_path() / ("cascade-acceptance-desk-" + std::to_string(seed));
    ro.checkpoints = false;
    ro.on_epoch = [&](const Trainer& tr, const std::vector<EvalRow>& rows) {
        for (const auto& e : rows) {
            if (e.slot != 0) continue;
            if (e.stage == Stage::joint && tr.state().stage_epoch == cfg.joint_epochs) r.last_hamming = e.mask_hamming;
            r.student = e.accuracy;
        }
    };
    fs::remove_all(ro.out_dir);
    run_training(t, ro);
    fs::remove_all(ro.out_dir);

    // same epoch budget as the cascade run's joint + fine-tune stages
    const Network half(shipped("toy4-half"));
    StandaloneModel base = StandaloneModel::init(half, seed);
    StandaloneConfig sc = pre;
    sc.epochs = cfg.joint_epochs + cfg.finetune_epochs;
    sc.schedule.cycle_len_epochs = sc.epochs;
    const auto hist = train_standalone(half, base, data, dc, sc);
    r.baseline = hist.back().test_accuracy;
    r.pass = r.student >= r.baseline - 0.02 && r.last_hamming == 0;
    return r;
}

Outcome desk_training() {
    int passed = 0;
    std::string d;
    for (std::uint64_t s : {1u, 2u, 3u}) {
        const SeedResult r = desk_run(s);
        passed += r.pass;
        d += "seed " + std::to_string(s) + ": student " + fmt("%.3f", r.student) + " baseline " +
             fmt("%.3f", r.baseline) + " hamming " + std::to_string(r.last_hamming) + (r.pass ? " ok; " : " no; ");
    }
    d += std::to_string(passed) + "/3 seeds";
    return {passed >= 2, d};
}

// ---- 7 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

int cli(std::vector<std::string> args) {
    std::ostringstream o, e;
    const int c = cli::run(args, o, e);
    if (c != 0) std::cerr << e.str();
    return c;
}

std::vector<std::string> train_args(const fs::path& out) {
    return {"train", "--arch", "toy4", "--dataset", "synthetic", "--synthetic-train", "512",
            "--synthetic-test", "256", "--keep-ratio", "0.5", "--ta-divisors", "1.5", "2.5",
            "--pretrain-epochs", "2", "--joint-epochs", "2", "--finetune-epochs", "2",
            "--batch-size", "64", "--seed", "7", "--out", out.string()};
}

Outcome determinism() {
    const fs::path base = fs::temp_directory_path() / "cascade-acceptance-det";
    fs::remove_all(base);
    const fs::path a = base / "a", b = base / "b", c = base / "c";
    if (cli(train_args(a)) || cli(train_args(b))) return {false, "train failed"};
    auto cut = train_args(c);
    cut.insert(cut.end(), {"--max-epochs", "2"});
    if (cli(cut)) return {false, "interrupted train failed"};
    if (cli({"finetune", "--checkpoint", (c / "checkpoints" / "latest.ckpt").string(), "--out", c.string()}))
        return {false, "resume failed"};
    const bool reruns = slurp(a / "metrics.csv") == slurp(b / "metrics.csv") && !slurp(a / "metrics.csv").empty();
    const bool resume = slurp(a / "metrics.csv") == slurp(c / "metrics.csv") &&
                        slurp(a / "eval.csv") == slurp(c / "eval.csv");
    fs::remove_all(base);
    return {reruns && resume, std::string("reruns ") + (reruns ? "identical" : "differ") + ", resume " +
                                  (resume ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    // optional arguments: criterion ids to run
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all = {
        {1, "resnet50 analyzer rows and totals", 1, resnet_table},
        {2, "vgg16 totals and compression ratios", 1, vgg_totals},
        {3, "gradient oracle suite", 120, gradients},
        {4, "mask properties", 30, masks},
        {5, "cascaded score routing", 10, routing},
        {6, "desk-scale training efficacy", 600, desk_training},
        {7, "determinism and resume", 300, determinism},
    };
    int failed = 0;
    for (const auto& c : all) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = s < c.budget_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::printf("%s  %d  %-38s %7.2fs (budget %gs%s)  %s\n", pass ? "PASS" : "FAIL", c.id, c.name, s, c.budget_s,
                    in_time ? "" : ", exceeded", o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("SKIP  8  full-size vgg16 cifar-10 run            (non-gating; needs the dataset and days of CPU)\n");
    return failed ? 1 : 0;
}
