#include "app.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <tuple>

#include "cascade/arch.hpp"
#include "cascade/error.hpp"
#include "cascade/trainer.hpp"

#ifndef CASCADE_ARCH_DIR
#define CASCADE_ARCH_DIR ""
#endif

namespace cascade::cli {
namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// An existing file, else an id looked up as <id>.arch in $CASCADE_ARCH_DIR
// and then in the directory the shipped specs were built from.
ArchSpec resolve_arch(const std::string& ref) {
    if (fs::is_regular_file(ref)) return load_arch(ref);
    std::vector<fs::path> dirs;
    if (const char* env = std::getenv("CASCADE_ARCH_DIR"); env && *env) dirs.emplace_back(env);
    if (*CASCADE_ARCH_DIR) dirs.emplace_back(CASCADE_ARCH_DIR);
    for (const auto& d : dirs)
        if (fs::is_regular_file(d / (ref + ".arch"))) return load_arch((d / (ref + ".arch")).string());
    throw DataError("arch '" + ref + "' is neither a file nor a shipped arch id");
}

// ---- shared option groups ------------------------------------------------

struct DataOptions {
    DataConfig cfg;
    std::string crop = "random";
    bool no_normalize = false;

    void add(CLI::App* app) {
        app->add_option("--dataset", cfg.kind, "Dataset")
            ->check(CLI::IsMember({"synthetic", "cifar10", "mnist"}))
            ->capture_default_str();
        app->add_option("--data-root", cfg.root, "Dataset directory")->envname("CASCADE_DATA_ROOT");
        app->add_option("--synthetic-seed", cfg.synthetic_seed, "Synthetic dataset seed")->capture_default_str();
        app->add_option("--synthetic-train", cfg.synthetic_train, "Synthetic training samples")
            ->capture_default_str();
        app->add_option("--synthetic-test", cfg.synthetic_test, "Synthetic test samples")->capture_default_str();
        app->add_option("--synthetic-classes", cfg.synthetic_classes, "Synthetic classes")->capture_default_str();
        app->add_option("--synthetic-size", cfg.synthetic_size, "Synthetic image side")->capture_default_str();
        app->add_option("--synthetic-channels", cfg.synthetic_channels, "Synthetic image channels")
            ->capture_default_str();
        app->add_option("--synthetic-noise", cfg.synthetic_noise, "Synthetic pixel noise stddev")
            ->capture_default_str();
        app->add_option("--flip", cfg.flip, "Horizontal flip probability")->capture_default_str();
        app->add_option("--pad", cfg.pad, "Crop padding in pixels")->capture_default_str();
        app->add_option("--crop", crop, "Crop mode")
            ->check(CLI::IsMember({"random", "center"}))
            ->capture_default_str();
        app->add_flag("--no-normalize", no_normalize, "Skip per-channel normalization");
    }

    DataConfig resolved() const {
        DataConfig d = cfg;
        d.crop = crop == "center" ? CropMode::center : CropMode::random;
        d.normalize = !no_normalize;
        return d;
    }
};

struct TrainOptions {
    std::string arch;
    std::optional<double> prune_ratio, keep_ratio;
    std::vector<double> divisors{1.5, 2.5};
    std::vector<double> ratios;
    std::string pretrained;
    int pretrain_epochs = 0;
    std::string optimizer = "sgd_nesterov";
    std::string score_optimizer = "sgd";
    std::string out;
    std::optional<int> max_epochs;
    bool no_checkpoints = false;
    TrainConfig cfg;

    TrainOptions() {
        cfg.joint_epochs = 80;
        cfg.finetune_epochs = 80;
    }

    void add(CLI::App* app) {
        app->add_option("--arch", arch, "Arch spec file or shipped arch id")->required();
        auto* pr = app->add_option("--prune-ratio", prune_ratio, "Student fraction of filters removed");
        auto* kr = app->add_option("--keep-ratio", keep_ratio, "Student fraction of filters kept");
        auto* dv = app->add_option("--ta-divisors", divisors, "TA keep ratios are 1 + (r0 - 1) / d")
                       ->capture_default_str();
        auto* rs = app->add_option("--ratios", ratios, "Explicit keep ratios, student first, ending at 1.0");
        pr->excludes(kr);
        rs->excludes(pr)->excludes(kr)->excludes(dv);
        auto* pt = app->add_option("--pretrained", pretrained, "Pre-trained model checkpoint")
                       ->check(CLI::ExistingFile);
        auto* pe = app->add_option("--pretrain-epochs", pretrain_epochs,
                                   "Pre-train the teacher from scratch for this many epochs instead");
        pt->excludes(pe);
        app->add_option("--min-filters", cfg.min_filters_per_layer, "Per-layer floor of kept filters")
            ->capture_default_str();
        app->add_option("--tau", cfg.distill.tau, "Distillation temperature")->capture_default_str();
        app->add_option("--lambda-kd", cfg.distill.lambda_kd, "KD loss weight")->capture_default_str();
        app->add_option("--lambda-hint", cfg.distill.lambda_hint, "Hint loss weight")->capture_default_str();
        app->add_flag("--complement-task-weight", cfg.distill.complement_task_weight,
                      "Weight the task loss by 1 - lambda-kd");
        app->add_option("--hint-layers", cfg.hint_layers, "Hint layer ids (default: network's last three)");
        app->add_option("--optimizer", optimizer, "Weight optimizer")
            ->check(CLI::IsMember({"sgd_nesterov", "rmsprop"}))
            ->capture_default_str();
        app->add_option("--lr", cfg.schedule.base_lr, "Initial learning rate")->capture_default_str();
        app->add_option("--momentum", cfg.optimizer.momentum, "Nesterov momentum")->capture_default_str();
        app->add_option("--weight-decay", cfg.optimizer.weight_decay, "L2 weight decay")->capture_default_str();
        app->add_option("--cycle-epochs", cfg.schedule.cycle_len_epochs, "Cosine cycle length in epochs")
            ->capture_default_str();
        app->add_option("--cycle-decay", cfg.schedule.cycle_decay, "Per-cycle learning rate decay")
            ->capture_default_str();
        app->add_option("--score-optimizer", score_optimizer, "Importance score optimizer")
            ->check(CLI::IsMember({"sgd", "rmsprop"}))
            ->capture_default_str();
        app->add_option("--score-lr", cfg.score_lr, "Importance score learning rate")->capture_default_str();
        app->add_flag("--own-gamma-grad", cfg.own_gamma_grad, "Add each slot's own score gradient");
        app->add_option("--joint-epochs", cfg.joint_epochs, "Joint training epochs")->capture_default_str();
        app->add_option("--intermediate-epochs", cfg.intermediate_epochs,
                        "Joint epochs with frozen masks before fine-tuning")
            ->capture_default_str();
        app->add_option("--finetune-epochs", cfg.finetune_epochs, "Student fine-tune epochs")
            ->capture_default_str();
        app->add_option("--patience", cfg.promotion_patience, "Epochs the student must beat its teacher")
            ->capture_default_str();
        app->add_option("--batch-size", cfg.batch_size, "Batch size")->capture_default_str();
        app->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--max-epochs", max_epochs, "Stop after this many epochs (resume with finetune)");
        app->add_flag("--no-checkpoints", no_checkpoints, "Skip per-epoch checkpoints");
    }

    TrainConfig resolved() const {
        TrainConfig c = cfg;
        c.optimizer.kind = optimizer == "rmsprop" ? OptimizerKind::rmsprop : OptimizerKind::sgd_nesterov;
        c.score_optimizer = score_optimizer == "rmsprop" ? ScoreOptimizerKind::rmsprop : ScoreOptimizerKind::sgd;
        if (!ratios.empty()) {
            c.keep_ratios = ratios;
        } else {
            if (!prune_ratio && !keep_ratio)
                throw ConfigError("one of --prune-ratio, --keep-ratio or --ratios is required");
            const double r0 = keep_ratio ? *keep_ratio : 1.0 - *prune_ratio;
            c.keep_ratios = derive_ta_keep_ratios(r0, divisors);
        }
        c.validate();
        return c;
    }
};

// ---- output helpers ------------------------------------------------------

void print_report(std::ostream& out, const ArchSpec& arch, const Trainer& t) {
    const Totals base = count_stats(arch).totals;
    out << "slot  keep    params        FLOPs         params x  FLOPs x\n";
    for (std::size_t i = 0; i < t.hierarchy().size(); ++i) {
        const auto& slot = t.hierarchy().slot(i);
        const Totals p = count_stats(arch, &slot.mask).totals;
        const CompressionReport r = compression_report(base, p);
        char line[160];
        std::snprintf(line, sizeof line, "%-5zu %-7.4f %-13s %-13s %-9.2f %.2f\n", i, slot.keep_ratio,
                      human_count(p.params).c_str(), human_count(p.flops).c_str(), r.param_ratio, r.flops_ratio);
        out << line;
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    f << text;
    if (!f) throw DataError("cannot write '" + p.string() + "'");
}

void progress(std::ostream& out, const Trainer& t, const std::vector<EvalRow>& rows) {
    for (const auto& r : rows) {
        if (r.slot != 0) continue;
        char line[160];
        std::snprintf(line, sizeof line, "epoch %3d  %-21s student acc %.4f  mask changes %zu  teacher %zu\n",
                      r.epoch, stage_name(r.stage), r.accuracy, r.mask_hamming, r.teacher_index);
        out << line;
    }
    out.flush();
    (void)t;
}

// Every option with its effective value, loadable again through --config.
// Unset options and the divisors an explicit ratio list overrides are left out.
std::string resolved_toml(const CLI::App& app, bool explicit_ratios) {
    std::istringstream in(app.config_to_str(true, false));
    std::string out, line;
    while (std::getline(in, line)) {
        if (line.rfind("train.", 0) != 0) continue;
        if (line.size() >= 3 && line.compare(line.size() - 3, 3, "=\"\"") == 0) continue;
        if (explicit_ratios && line.rfind("train.ta-divisors=", 0) == 0) continue;
        out += line + '\n';
    }
    return out;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const CLI::App& app, const TrainOptions& o, const DataOptions& d, std::ostream& out) {
    const TrainConfig cfg = o.resolved();
    const DataConfig dc = d.resolved();
    dc.validate();
    if (o.pretrained.empty() && o.pretrain_epochs <= 0)
        throw ConfigError("--pretrained or a positive --pretrain-epochs is required");
    if (o.max_epochs && *o.max_epochs < 0) throw ConfigError("--max-epochs must be >= 0");
    const ArchSpec arch = resolve_arch(o.arch);
    Network net(arch);
    const fs::path dir = o.out;
    fs::create_directories(dir);
    write_text(dir / "resolved_config.toml", resolved_toml(app, !o.ratios.empty()));
    write_text(dir / "config.json", config_json(cfg, dc) + "\n");

    const DataSplits data = load_data(dc);
    StandaloneModel teacher;
    if (!o.pretrained.empty()) {
        teacher = load_standalone(load_checkpoint(o.pretrained), net);
    } else {
        teacher = StandaloneModel::init(net, cfg.seed);
        StandaloneConfig sc;
        sc.epochs = o.pretrain_epochs;
        sc.batch_size = cfg.batch_size;
        sc.optimizer = cfg.optimizer;
        sc.schedule = cfg.schedule;
        sc.seed = cfg.seed;
        for (const auto& e : train_standalone(net, teacher, data, dc, sc))
            out << "pretrain epoch " << e.epoch << "  loss " << fmt("%.4f", e.loss) << "  test acc "
                << fmt("%.4f", e.test_accuracy) << '\n';
        save_checkpoint(standalone_checkpoint(net, teacher), dir / "pretrained.ckpt");
    }

    Trainer t(cfg, net, teacher, &data, dc);
    RunOptions ro;
    ro.out_dir = dir;
    ro.max_epochs = o.max_epochs;
    ro.checkpoints = !o.no_checkpoints;
    ro.on_epoch = [&](const Trainer& tr, const std::vector<EvalRow>& rows) { progress(out, tr, rows); };
    run_training(t, ro);
    print_report(out, arch, t);
    return kOk;
}

// ---- finetune --------------------------------------------------------------

struct FinetuneOptions {
    std::string checkpoint;
    std::string out;
    std::string stage;
    std::optional<std::string> data_root;
    std::optional<int> max_epochs;
    bool no_checkpoints = false;
};

int cmd_finetune(const FinetuneOptions& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    if (!is_trainer_checkpoint(ckpt)) throw ConfigError("--checkpoint must be a training checkpoint");
    DataConfig dc = checkpoint_data_config(ckpt);
    if (o.data_root) dc.root = *o.data_root;
    const DataSplits data = load_data(dc);
    Trainer t(ckpt, &data);
    if (!o.stage.empty()) {
        const Stage target = parse_stage(o.stage);
        if (target != Stage::student_finetune) throw ConfigError("--stage only accepts student_finetune");
        if (t.state().stage < Stage::student_finetune) t.enter_finetune();
    }
    RunOptions ro;
    ro.out_dir = o.out;
    ro.max_epochs = o.max_epochs;
    ro.checkpoints = !o.no_checkpoints;
    ro.on_epoch = [&](const Trainer& tr, const std::vector<EvalRow>& rows) { progress(out, tr, rows); };
    run_training(t, ro);
    print_report(out, t.hierarchy().net().arch(), t);
    return kOk;
}

// ---- analyze ---------------------------------------------------------------

struct AnalyzeOptions {
    std::string arch;
    std::string checkpoint;
    std::size_t slot = 0;
    std::string csv;
    bool all = false;
};

std::string shape_text(const FeatureShape& s) {
    return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

std::size_t kept_of(const FilterMask* m, std::size_t layer_id, std::size_t total) {
    if (!m) return total;
    const LayerMask* lm = m->find(layer_id);
    if (!lm) return total;
    std::size_t k = 0;
    for (auto b : lm->keep) k += b;
    return k;
}

int cmd_analyze(const AnalyzeOptions& o, std::ostream& out) {
    ArchSpec arch;
    std::optional<FilterMask> mask;
    if (!o.checkpoint.empty()) {
        const Checkpoint ckpt = load_checkpoint(o.checkpoint);
        const ArchSpec embedded = checkpoint_arch(ckpt);
        arch = o.arch.empty() ? embedded : resolve_arch(o.arch);
        if (format_arch(arch) != format_arch(embedded))
            throw ConfigError("--arch does not match the checkpoint's arch");
        if (!is_trainer_checkpoint(ckpt)) throw ConfigError("masks need a training checkpoint");
        Trainer t(ckpt, nullptr);
        if (o.slot >= t.hierarchy().size())
            throw ConfigError("--slot " + std::to_string(o.slot) + " out of range (" +
                              std::to_string(t.hierarchy().size()) + " slots)");
        mask = t.hierarchy().slot(o.slot).mask;
    } else {
        if (o.arch.empty()) throw ConfigError("analyze needs an arch or --checkpoint");
        arch = resolve_arch(o.arch);
    }
    const FilterMask* m = mask ? &*mask : nullptr;
    const ArchStats base = count_stats(arch);
    const ArchStats st = count_stats(arch, m);

    std::ofstream csv;
    if (!o.csv.empty()) {
        csv.open(o.csv, std::ios::trunc);
        if (!csv) throw DataError("cannot write '" + o.csv + "'");
        csv << "layer_id,name,kind,depth,in_shape,out_shape,filters,kept,flops,params\n";
    }
    char line[256];
    std::snprintf(line, sizeof line, "%-5s %-14s %-10s %-14s %-14s %-16s %-10s %-10s\n", "id", "name", "kind", "in",
                  "out", "filters", "FLOPs", "params");
    out << arch.name << '\n' << line;

    std::map<std::size_t, const Layer*> by_id;
    std::function<void(const std::vector<Layer>&)> index = [&](const std::vector<Layer>& ls) {
        for (const auto& l : ls) {
            by_id[l.id] = &l;
            if (const auto* b = l.as<BlockDesc>()) {
                index(b->body);
                index(b->shortcut);
            }
        }
    };
    index(arch.layers);

    std::function<void(const std::vector<LayerStats>&, FeatureShape, int)> emit =
        [&](const std::vector<LayerStats>& rows, FeatureShape in, int depth) {
            for (const auto& r : rows) {
                const Layer* l = by_id.at(r.layer_id);
                std::string filters = "-";
                std::size_t total = 0, kept = 0;
                if (const auto* c = l->as<ConvDesc>()) {
                    total = c->out;
                    kept = kept_of(m, r.layer_id, total);
                    filters = m ? std::to_string(kept) + "/" + std::to_string(total) : std::to_string(total);
                } else if (const auto* b = l->as<BlockDesc>()) {
                    filters = "[";
                    for (const auto& c : b->body)
                        if (const auto* cd = c.as<ConvDesc>())
                            filters += (filters.size() > 1 ? "," : "") + std::to_string(kept_of(m, c.id, cd->out));
                    filters += "]";
                } else if (const auto* dn = l->as<DenseDesc>()) {
                    total = kept = dn->out;
                    filters = std::to_string(total);
                }
                const bool show = o.all || r.params > 0 || !r.children.empty();
                if (show) {
                    std::snprintf(line, sizeof line, "%-5zu %-14s %-10s %-14s %-14s %-16s %-10s %-10s\n",
                                  r.layer_id, (std::string(static_cast<std::size_t>(depth) * 2, ' ') + r.name).c_str(),
                                  r.kind.c_str(), shape_text(in).c_str(), shape_text(r.out).c_str(),
                                  filters.c_str(), human_count(r.flops).c_str(), human_count(r.params).c_str());
                    out << line;
                }
                if (csv.is_open())
                    csv << r.layer_id << ',' << r.name << ',' << r.kind << ',' << depth << ',' << shape_text(in) << ','
                        << shape_text(r.out) << ',' << total << ',' << kept << ',' << r.flops << ',' << r.params
                        << '\n';
                if (o.all && !r.children.empty()) emit(r.children, in, depth + 1);
                in = r.out;
            }
        };
    emit(st.layers, arch.input, 0);

    out << "total: " << human_count(st.totals.flops) << " FLOPs, " << human_count(st.totals.params) << " params ("
        << st.totals.flops << " / " << st.totals.params << ")\n";
    if (m) {
        const CompressionReport r = compression_report(base.totals, st.totals);
        out << "unmasked: " << human_count(base.totals.flops) << " FLOPs, " << human_count(base.totals.params)
            << " params\n";
        out << "reduction: " << fmt("%.2f", r.param_ratio) << "x params, " << fmt("%.2f", r.flops_ratio)
            << "x FLOPs (" << fmt("%.2f", r.param_percent) << "% / " << fmt("%.2f", r.flops_percent)
            << "% remain)\n";
    }
    if (csv.is_open()) {
        csv << ",total,,,,,,," << st.totals.flops << ',' << st.totals.params << '\n';
        if (!csv) throw DataError("failed writing '" + o.csv + "'");
    }
    return kOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalOptions {
    std::string checkpoint;
    std::string slot = "0";
    std::string split = "test";
    std::size_t topk = 1;
    std::size_t batch = 256;
    std::optional<std::string> data_root;
};

int cmd_eval(const EvalOptions& o, const DataOptions& d, bool data_given, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    const bool trainer = is_trainer_checkpoint(ckpt);
    DataConfig dc = trainer && !data_given ? checkpoint_data_config(ckpt) : d.resolved();
    if (o.data_root) dc.root = *o.data_root;
    const DataSplits data = load_data(dc);
    const Dataset& ds = o.split == "train" ? data.train : data.test;
    double acc = 0;
    if (trainer) {
        Trainer t(ckpt, &data);
        if (o.slot == "frozen") {
            acc = t.evaluate_frozen(ds, o.topk);
        } else {
            std::size_t s = 0;
            try {
                s = std::stoul(o.slot);
            } catch (const std::exception&) {
                throw ConfigError("--slot must be a slot index or 'frozen'");
            }
            if (s >= t.hierarchy().size()) throw ConfigError("--slot " + o.slot + " out of range");
            acc = t.evaluate(s, ds, o.topk);
        }
    } else {
        Network net(checkpoint_arch(ckpt));
        StandaloneModel model = load_standalone(ckpt, net);
        acc = evaluate_view(net, model.view(), ds, data.eval_augment(), o.batch, o.topk);
    }
    out << "top-" << o.topk << " accuracy (" << o.split << ", " << ds.size() << " samples): " << fmt("%.4f", acc)
        << '\n';
    return kOk;
}

// ---- export ------------------------------------------------------------------

std::vector<std::vector<std::string>> read_csv(const fs::path& p, const std::string& header) {
    std::ifstream f(p);
    if (!f) throw DataError("cannot open '" + p.string() + "'");
    std::string line;
    if (!std::getline(f, line) || line != header) throw ParseError(p.string() + ": unexpected header", 1);
    const std::size_t cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
    std::vector<std::vector<std::string>> rows;
    int n = 1;
    while (std::getline(f, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        if (cells.size() != cols)
            throw ParseError(p.string() + ": expected " + std::to_string(cols) + " fields, got " +
                                 std::to_string(cells.size()),
                             n);
        rows.push_back(std::move(cells));
    }
    return rows;
}

double num(const std::string& s, const fs::path& p) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw DataError(p.string() + ": bad number '" + s + "'");
}

struct ExportOptions {
    std::string dir;
    std::string out;
    std::string checkpoint;
};

int cmd_export(const ExportOptions& o, std::ostream& out) {
    const fs::path dir = o.dir;
    const fs::path dest = o.out.empty() ? dir : fs::path(o.out);
    fs::create_directories(dest);
    const auto metrics = read_csv(dir / "metrics.csv", metrics_header());
    const auto evals = read_csv(dir / "eval.csv", eval_header());

    // Per (epoch, slot): batch means of the metrics rows joined with the eval row.
    struct Acc {
        std::string stage;
        double n = 0, loss = 0, task = 0, kd = 0, hint = 0, acc = 0, lr = 0;
        std::string kept, flops, params;
    };
    std::map<std::pair<long, long>, Acc> agg;
    for (const auto& r : metrics) {
        Acc& a = agg[{std::lround(num(r[1], dir)), std::lround(num(r[3], dir))}];
        a.stage = r[2];
        a.n += 1;
        a.loss += num(r[4], dir);
        a.task += num(r[5], dir);
        a.kd += num(r[6], dir);
        a.hint += num(r[7], dir);
        a.acc += num(r[8], dir);
        a.lr = num(r[9], dir);
        a.kept = r[10];
        a.flops = r[11];
        a.params = r[12];
    }
    std::ofstream sum(dest / "summary.csv", std::ios::trunc);
    sum << "epoch,stage,slot,batches,mean_loss,mean_task_loss,mean_kd_loss,mean_hint_loss,train_accuracy,last_lr,"
           "kept_filters_total,flops,params,val_accuracy,mask_hamming,teacher_index\n";
    std::size_t written = 0;
    for (const auto& e : evals) {
        const long epoch = std::lround(num(e[0], dir)), slot = std::lround(num(e[2], dir));
        sum << e[0] << ',' << e[1] << ',' << e[2] << ',';
        auto it = agg.find({epoch, slot});
        if (it != agg.end()) {
            const Acc& a = it->second;
            char buf[256];
            std::snprintf(buf, sizeof buf, "%.0f,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,", a.n, a.loss / a.n, a.task / a.n,
                          a.kd / a.n, a.hint / a.n, a.acc / a.n, a.lr);
            sum << buf << a.kept << ',' << a.flops << ',' << a.params << ',';
        } else {
            sum << "0,,,,,,,,,,";
        }
        sum << e[3] << ',' << e[4] << ',' << e[5] << '\n';
        ++written;
    }
    if (!sum) throw DataError("failed writing summary.csv");

    const fs::path ckpt_path = o.checkpoint.empty() ? dir / "checkpoints" / "latest.ckpt" : fs::path(o.checkpoint);
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!is_trainer_checkpoint(ckpt)) throw ConfigError("export needs a training checkpoint");
    Trainer t(ckpt, nullptr);
    const Network& net = t.hierarchy().net();
    std::ofstream hist(dest / "layer_pruning.csv", std::ios::trunc);
    hist << "slot,keep_ratio,layer_id,layer_name,filters,kept,kept_percent,pruned_percent\n";
    std::map<std::size_t, std::string> names;
    std::function<void(const std::vector<Layer>&)> index = [&](const std::vector<Layer>& ls) {
        for (const auto& l : ls) {
            names[l.id] = l.name;
            if (const auto* b = l.as<BlockDesc>()) {
                index(b->body);
                index(b->shortcut);
            }
        }
    };
    index(net.arch().layers);
    std::size_t hist_rows = 0;
    for (std::size_t i = 0; i < t.hierarchy().size(); ++i) {
        const auto& slot = t.hierarchy().slot(i);
        std::size_t kept_all = 0, total_all = 0;
        for (std::size_t ci : net.maskable()) {
            const auto& info = net.convs()[ci];
            const std::size_t total = info.desc.out;
            const std::size_t kept = kept_of(&slot.mask, info.layer_id, total);
            kept_all += kept;
            total_all += total;
            const double kp = 100.0 * static_cast<double>(kept) / static_cast<double>(total);
            char buf[256];
            std::snprintf(buf, sizeof buf, "%zu,%.9g,%zu,%s,%zu,%zu,%.4f,%.4f\n", i, slot.keep_ratio, info.layer_id,
                          names[info.layer_id].c_str(), total, kept, kp, 100.0 - kp);
            hist << buf;
            ++hist_rows;
        }
        out << "slot " << i << ": " << fmt("%.2f", 100.0 * (1.0 - static_cast<double>(kept_all) / total_all))
            << "% of maskable filters pruned\n";
    }
    if (!hist) throw DataError("failed writing layer_pruning.csv");
    out << "wrote " << (dest / "summary.csv").string() << " (" << written << " rows) and "
        << (dest / "layer_pruning.csv").string() << " (" << hist_rows << " rows)\n";
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cascaded filter pruning with hierarchical knowledge distillation", "cascade"};
    app.set_config("--config", "", "TOML/INI file; a [train] section sets train options, flags override it");
    app.require_subcommand(1);
    app.get_formatter()->column_width(34);

    DataOptions train_data, eval_data;
    TrainOptions train;
    auto* t = app.add_subcommand("train", "Joint training, then student fine-tuning");
    train.add(t);
    train_data.add(t);

    FinetuneOptions ft;
    auto* f = app.add_subcommand("finetune", "Resume a training checkpoint, optionally jumping to fine-tuning");
    f->add_option("--checkpoint", ft.checkpoint, "Training checkpoint")->required()->check(CLI::ExistingFile);
    f->add_option("--out", ft.out, "Output directory (CSV rows are appended)")->required();
    f->add_option("--stage", ft.stage, "Skip ahead to this stage")->check(CLI::IsMember({"student_finetune"}));
    f->add_option("--data-root", ft.data_root, "Dataset directory")->envname("CASCADE_DATA_ROOT");
    f->add_option("--max-epochs", ft.max_epochs, "Stop after this many epochs");
    f->add_flag("--no-checkpoints", ft.no_checkpoints, "Skip per-epoch checkpoints");

    AnalyzeOptions an;
    auto* a = app.add_subcommand("analyze", "Per-layer FLOPs and parameter counts");
    a->add_option("arch", an.arch, "Arch spec file or shipped arch id");
    a->add_option("--checkpoint", an.checkpoint, "Training checkpoint whose masks to apply")
        ->check(CLI::ExistingFile);
    a->add_option("--slot", an.slot, "Slot whose mask to apply")->capture_default_str();
    a->add_option("--csv", an.csv, "Also write the rows to this CSV file");
    a->add_flag("--all", an.all, "Show parameter-free layers and block internals");

    EvalOptions ev;
    auto* e = app.add_subcommand("eval", "Accuracy of a checkpointed model");
    e->add_option("--checkpoint", ev.checkpoint, "Training or model checkpoint")->required()->check(CLI::ExistingFile);
    e->add_option("--slot", ev.slot, "Slot index, or 'frozen' for the pre-trained teacher")->capture_default_str();
    e->add_option("--split", ev.split, "Split")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    e->add_option("--topk", ev.topk, "Top-k")->check(CLI::PositiveNumber)->capture_default_str();
    e->add_option("--batch-size", ev.batch, "Batch size for model checkpoints")->capture_default_str();
    eval_data.add(e);

    ExportOptions ex;
    auto* x = app.add_subcommand("export", "Summarize a run directory into plotting CSVs");
    x->add_option("dir", ex.dir, "Run directory holding metrics.csv and eval.csv")->required()
        ->check(CLI::ExistingDirectory);
    x->add_option("--out", ex.out, "Destination directory (default: the run directory)");
    x->add_option("--checkpoint", ex.checkpoint, "Checkpoint for masks (default: checkpoints/latest.ckpt)");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& pe) {
        err << "error: " << pe.what() << '\n';
        return kValidation;
    }

    try {
        if (t->parsed()) return cmd_train(app, train, train_data, out);
        if (f->parsed()) return cmd_finetune(ft, out);
        if (a->parsed()) return cmd_analyze(an, out);
        if (e->parsed()) {
            const bool data_given = e->count("--dataset") > 0 || e->count("--synthetic-seed") > 0 ||
                                    e->count("--synthetic-train") > 0 || e->count("--synthetic-test") > 0;
            return cmd_eval(ev, eval_data, data_given, out);
        }
        if (x->parsed()) return cmd_export(ex, out);
    } catch (const ConfigError& ce) {
        err << "config error: " << ce.what() << '\n';
        return kValidation;
    } catch (const ShapeError& se) {
        err << "config error: " << se.what() << '\n';
        return kValidation;
    } catch (const DataError& de) {
        err << "data error: " << de.what() << '\n';
        return kData;
    } catch (const std::exception& ex2) {
        err << "internal error: " << ex2.what() << '\n';
        return kInternal;
    }
    return kInternal;
}

}  // namespace cascade::cli
