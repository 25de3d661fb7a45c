#include "cascade/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "cascade/error.hpp"
#include "json.hpp"

namespace cascade {

using nlohmann::json;

void DataConfig::validate() const {
    if (kind != "synthetic" && kind != "cifar10" && kind != "mnist")
        throw ConfigError("dataset must be one of cifar10, mnist, synthetic (got '" + kind + "')");
    if (kind != "synthetic" && root.empty()) throw ConfigError("dataset " + kind + " needs a data directory");
    if (kind == "synthetic") {
        if (synthetic_classes < 2) throw ConfigError("synthetic classes must be >= 2");
        if (synthetic_train < synthetic_classes || synthetic_test < synthetic_classes)
            throw ConfigError("synthetic splits need at least one sample per class");
        if (synthetic_size < 4 || synthetic_channels < 1) throw ConfigError("synthetic image size must be >= 4");
    }
    if (flip < 0 || flip > 1) throw ConfigError("flip probability must be in [0, 1]");
}

AugmentConfig DataSplits::train_augment(const DataConfig& cfg) const {
    AugmentConfig a;
    a.flip_probability = cfg.flip;
    a.pad = cfg.pad;
    a.crop = cfg.crop;
    a.normalize = norm;
    return a;
}

AugmentConfig DataSplits::eval_augment() const {
    AugmentConfig a;
    a.crop = CropMode::center;
    a.normalize = norm;
    return a;
}

DataSplits load_data(const DataConfig& cfg) {
    cfg.validate();
    DataSplits d;
    if (cfg.kind == "synthetic") {
        SyntheticSpec s;
        s.seed = cfg.synthetic_seed;
        s.classes = cfg.synthetic_classes;
        s.size = cfg.synthetic_size;
        s.channels = cfg.synthetic_channels;
        s.noise = cfg.synthetic_noise;
        s.n = cfg.synthetic_train;
        s.split = "train";
        d.train = synthetic_dataset(s);
        s.n = cfg.synthetic_test;
        s.split = "test";
        d.test = synthetic_dataset(s);
    } else if (cfg.kind == "cifar10") {
        std::tie(d.train, d.test) = load_cifar10(cfg.root);
    } else {
        std::tie(d.train, d.test) = load_mnist_idx(cfg.root);
    }
    if (cfg.normalize) d.norm = channel_statistics(d.train);
    return d;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::joint: return "joint";
        case Stage::intermediate_finetune: return "intermediate_finetune";
        case Stage::student_finetune: return "student_finetune";
        case Stage::done: return "done";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    for (Stage st : {Stage::joint, Stage::intermediate_finetune, Stage::student_finetune, Stage::done})
        if (s == stage_name(st)) return st;
    throw ConfigError("unknown stage '" + s + "'");
}

void TrainConfig::validate() const {
    if (keep_ratios.size() < 2) throw ConfigError("keep_ratios: a hierarchy needs at least two models");
    if (keep_ratios.back() != 1.0) throw ConfigError("keep_ratios: the last ratio must be 1.0");
    for (std::size_t i = 0; i < keep_ratios.size(); ++i) {
        if (!(keep_ratios[i] > 0 && keep_ratios[i] <= 1)) throw ConfigError("keep_ratios: values must be in (0, 1]");
        if (i > 0 && keep_ratios[i] < keep_ratios[i - 1]) throw ConfigError("keep_ratios: must be non-decreasing");
    }
    if (min_filters_per_layer < 1) throw ConfigError("min_filters_per_layer must be >= 1");
    distill.validate();
    LRSchedule s = schedule;
    s.steps_per_epoch = 1;
    s.validate();
    if (!(score_lr > 0)) throw ConfigError("score_lr must be > 0");
    if (joint_epochs < 0 || intermediate_epochs < 0 || finetune_epochs < 0)
        throw ConfigError("epoch counts must be >= 0");
    if (promotion_patience < 1) throw ConfigError("promotion_patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer.momentum < 0 || optimizer.momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
    if (optimizer.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
}

bool update_promotion(TrainState& st, double student_accuracy, std::size_t slot_count, int patience) {
    if (st.teacher_index >= slot_count) return false;
    if (st.recorded_accuracy.size() <= st.teacher_index)
        throw ConfigError("promotion: no recorded accuracy for teacher " + std::to_string(st.teacher_index));
    if (student_accuracy > st.recorded_accuracy[st.teacher_index])
        ++st.promotion_streak;
    else
        st.promotion_streak = 0;
    if (st.promotion_streak < patience) return false;
    ++st.teacher_index;
    st.promotion_streak = 0;
    return true;
}

std::string metrics_header() {
    return "step,epoch,stage,slot,loss,task_loss,kd_loss,hint_loss,accuracy,lr,kept_filters_total,flops,params";
}

std::string format_row(const MetricsRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%lld,%d,%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%lld,%lld",
                  static_cast<long long>(r.step), r.epoch, stage_name(r.stage), r.slot, r.loss, r.task_loss,
                  r.kd_loss, r.hint_loss, r.accuracy, r.lr, r.kept_filters, static_cast<long long>(r.flops),
                  static_cast<long long>(r.params));
    return buf;
}

std::string eval_header() { return "epoch,stage,slot,val_accuracy,mask_hamming,teacher_index"; }

std::string format_row(const EvalRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%s,%zu,%.9g,%zu,%zu", r.epoch, stage_name(r.stage), r.slot, r.accuracy,
                  r.mask_hamming, r.teacher_index);
    return buf;
}

double evaluate_view(const Network& net, const ModelView& view, const Dataset& ds, const AugmentConfig& eval_aug,
                     std::size_t batch_size, std::size_t topk) {
    if (topk < 1) throw ConfigError("topk must be >= 1");
    BatchStream bs(ds, batch_size, 0, 0, eval_aug, false);
    ForwardOptions fo;
    fo.mode = Mode::eval;
    std::size_t correct = 0;
    Batch b;
    while (bs.next(b)) {
        Graph<float> g;
        ForwardOutput out = forward(g, net, view, b.images, fo);
        const Tensor<float>& lg = out.logits.value();
        const std::size_t k = lg.dim(1);
        for (std::size_t i = 0; i < b.labels.size(); ++i) {
            const float target = lg[i * k + static_cast<std::size_t>(b.labels[i])];
            std::size_t rank = 0;  // classes ranked strictly above the label, ties to the lower class
            for (std::size_t j = 0; j < k; ++j) {
                const float v = lg[i * k + j];
                if (v > target || (v == target && j < static_cast<std::size_t>(b.labels[i]))) ++rank;
            }
            if (rank < topk) ++correct;
        }
    }
    return ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
}

namespace {

// ---- json ----------------------------------------------------------------

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::rmsprop ? "rmsprop" : "sgd_nesterov"; }
const char* score_name(ScoreOptimizerKind k) { return k == ScoreOptimizerKind::rmsprop ? "rmsprop" : "sgd"; }

json to_json(const TrainConfig& c) {
    return {
        {"keep_ratios", c.keep_ratios},
        {"min_filters_per_layer", c.min_filters_per_layer},
        {"tau", c.distill.tau},
        {"lambda_kd", c.distill.lambda_kd},
        {"lambda_hint", c.distill.lambda_hint},
        {"complement_task_weight", c.distill.complement_task_weight},
        {"hint_layers", c.hint_layers},
        {"optimizer", optimizer_name(c.optimizer.kind)},
        {"momentum", c.optimizer.momentum},
        {"weight_decay", c.optimizer.weight_decay},
        {"rho", c.optimizer.rho},
        {"epsilon", c.optimizer.epsilon},
        {"lr", c.schedule.base_lr},
        {"cycle_epochs", c.schedule.cycle_len_epochs},
        {"cycle_decay", c.schedule.cycle_decay},
        {"score_optimizer", score_name(c.score_optimizer)},
        {"score_lr", c.score_lr},
        {"own_gamma_grad", c.own_gamma_grad},
        {"joint_epochs", c.joint_epochs},
        {"intermediate_epochs", c.intermediate_epochs},
        {"finetune_epochs", c.finetune_epochs},
        {"promotion_patience", c.promotion_patience},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"eval_all_slots", c.eval_all_slots},
    };
}

TrainConfig train_config_from(const json& j) {
    TrainConfig c;
    c.keep_ratios = j.at("keep_ratios").get<std::vector<double>>();
    c.min_filters_per_layer = j.at("min_filters_per_layer");
    c.distill.tau = j.at("tau");
    c.distill.lambda_kd = j.at("lambda_kd");
    c.distill.lambda_hint = j.at("lambda_hint");
    c.distill.complement_task_weight = j.at("complement_task_weight");
    c.hint_layers = j.at("hint_layers").get<std::vector<std::size_t>>();
    c.optimizer.kind = j.at("optimizer") == "rmsprop" ? OptimizerKind::rmsprop : OptimizerKind::sgd_nesterov;
    c.optimizer.momentum = j.at("momentum");
    c.optimizer.weight_decay = j.at("weight_decay");
    c.optimizer.rho = j.at("rho");
    c.optimizer.epsilon = j.at("epsilon");
    c.schedule.base_lr = j.at("lr");
    c.schedule.cycle_len_epochs = j.at("cycle_epochs");
    c.schedule.cycle_decay = j.at("cycle_decay");
    c.score_optimizer = j.at("score_optimizer") == "rmsprop" ? ScoreOptimizerKind::rmsprop : ScoreOptimizerKind::sgd;
    c.score_lr = j.at("score_lr");
    c.own_gamma_grad = j.at("own_gamma_grad");
    c.joint_epochs = j.at("joint_epochs");
    c.intermediate_epochs = j.at("intermediate_epochs");
    c.finetune_epochs = j.at("finetune_epochs");
    c.promotion_patience = j.at("promotion_patience");
    c.batch_size = j.at("batch_size");
    c.seed = j.at("seed");
    c.eval_all_slots = j.at("eval_all_slots");
    return c;
}

json to_json(const DataConfig& d) {
    return {
        {"kind", d.kind},
        {"root", d.root},
        {"synthetic_seed", d.synthetic_seed},
        {"synthetic_train", d.synthetic_train},
        {"synthetic_test", d.synthetic_test},
        {"synthetic_classes", d.synthetic_classes},
        {"synthetic_size", d.synthetic_size},
        {"synthetic_channels", d.synthetic_channels},
        {"synthetic_noise", d.synthetic_noise},
        {"flip", d.flip},
        {"pad", d.pad},
        {"crop", d.crop == CropMode::center ? "center" : "random"},
        {"normalize", d.normalize},
    };
}

DataConfig data_config_from(const json& j) {
    DataConfig d;
    d.kind = j.at("kind");
    d.root = j.at("root");
    d.synthetic_seed = j.at("synthetic_seed");
    d.synthetic_train = j.at("synthetic_train");
    d.synthetic_test = j.at("synthetic_test");
    d.synthetic_classes = j.at("synthetic_classes");
    d.synthetic_size = j.at("synthetic_size");
    d.synthetic_channels = j.at("synthetic_channels");
    d.synthetic_noise = j.at("synthetic_noise");
    d.flip = j.at("flip");
    d.pad = j.at("pad");
    d.crop = j.at("crop") == "center" ? CropMode::center : CropMode::random;
    d.normalize = j.at("normalize");
    return d;
}

json to_json(const TrainState& s) {
    return {
        {"stage", stage_name(s.stage)},
        {"epoch", s.epoch},
        {"stage_epoch", s.stage_epoch},
        {"step", s.step},
        {"stage_step", s.stage_step},
        {"teacher_index", s.teacher_index},
        {"promotion_streak", s.promotion_streak},
        {"recorded_accuracy", s.recorded_accuracy},
        {"best_accuracy", s.best_accuracy},
    };
}

TrainState state_from(const json& j) {
    TrainState s;
    s.stage = parse_stage(j.at("stage"));
    s.epoch = j.at("epoch");
    s.stage_epoch = j.at("stage_epoch");
    s.step = j.at("step");
    s.stage_step = j.at("stage_step");
    s.teacher_index = j.at("teacher_index");
    s.promotion_streak = j.at("promotion_streak");
    s.recorded_accuracy = j.at("recorded_accuracy").get<std::vector<double>>();
    s.best_accuracy = j.at("best_accuracy").get<std::vector<double>>();
    return s;
}

json parse_metadata(const Checkpoint& ckpt) {
    try {
        return json::parse(ckpt.metadata);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
}

template <typename F>
auto from_metadata(const char* what, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata: bad ") + what + ": " + e.what());
    }
}

// ---- tensor tables -------------------------------------------------------

void put_bn(Checkpoint& c, const std::string& pre, const BatchNormState<float>& b) {
    c.put(pre + "/gamma", b.gamma.value);
    c.put(pre + "/beta", b.beta.value);
    c.put(pre + "/running_mean", b.running_mean);
    c.put(pre + "/running_var", b.running_var);
}

void get_param(const Checkpoint& c, const std::string& name, Parameter<float>& p) {
    const Tensor<float>& t = c.get<float>(name);
    if (!t.same_shape(p.value))
        throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(p.value.shape()));
    p.value = t;
    p.zero_grad();
}

void get_tensor(const Checkpoint& c, const std::string& name, Tensor<float>& dst) {
    const Tensor<float>& t = c.get<float>(name);
    if (!t.same_shape(dst))
        throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(dst.shape()));
    dst = t;
}

void get_bn(const Checkpoint& c, const std::string& pre, BatchNormState<float>& b) {
    get_param(c, pre + "/gamma", b.gamma);
    get_param(c, pre + "/beta", b.beta);
    get_tensor(c, pre + "/running_mean", b.running_mean);
    get_tensor(c, pre + "/running_var", b.running_var);
}

void put_model(Checkpoint& c, const std::string& pre, const StandaloneModel& m) {
    for (std::size_t i = 0; i < m.conv.size(); ++i) c.put(pre + "conv" + std::to_string(i), m.conv[i].value);
    for (std::size_t i = 0; i < m.bn.size(); ++i) put_bn(c, pre + "bn" + std::to_string(i), m.bn[i]);
    for (std::size_t i = 0; i < m.dense.size(); ++i) c.put(pre + "dense" + std::to_string(i), m.dense[i].value);
}

StandaloneModel get_model(const Checkpoint& c, const std::string& pre, const Network& net) {
    StandaloneModel m = StandaloneModel::init(net, 0);
    for (std::size_t i = 0; i < m.conv.size(); ++i) get_param(c, pre + "conv" + std::to_string(i), m.conv[i]);
    for (std::size_t i = 0; i < m.bn.size(); ++i) get_bn(c, pre + "bn" + std::to_string(i), m.bn[i]);
    for (std::size_t i = 0; i < m.dense.size(); ++i) get_param(c, pre + "dense" + std::to_string(i), m.dense[i]);
    return m;
}

Tensor<double> to_tensor(const std::vector<double>& v) { return Tensor<double>({v.size()}, v); }

std::string slot_prefix(std::size_t i) { return "slot" + std::to_string(i) + "/"; }

HierarchyConfig hierarchy_config(const TrainConfig& cfg) {
    cfg.validate();
    HierarchyConfig hc;
    hc.keep_ratios = cfg.keep_ratios;
    hc.min_filters_per_layer = cfg.min_filters_per_layer;
    hc.score_optimizer.kind = cfg.score_optimizer;
    hc.score_optimizer.lr = cfg.score_lr;
    return hc;
}

Network network_from(const Checkpoint& ckpt) { return Network(checkpoint_arch(ckpt)); }

TrainConfig config_from(const Checkpoint& ckpt) {
    const json j = parse_metadata(ckpt);
    if (j.value("format", "") != "cascade.trainer")
        throw CheckpointError("checkpoint is not a training checkpoint (format '" + j.value("format", "") + "')");
    return from_metadata("config", [&] { return train_config_from(j.at("config")); });
}

DataConfig data_from(const Checkpoint& ckpt) {
    const json j = parse_metadata(ckpt);
    return from_metadata("data", [&] { return data_config_from(j.at("data")); });
}

ModelHierarchy hierarchy_from(const Checkpoint& ckpt, const TrainConfig& cfg) {
    Network net = network_from(ckpt);
    StandaloneModel frozen = get_model(ckpt, "frozen/", net);
    return ModelHierarchy(std::move(net), frozen, hierarchy_config(cfg));
}

}  // namespace

std::string config_json(const TrainConfig& cfg, const DataConfig& data) {
    return json{{"train", to_json(cfg)}, {"data", to_json(data)}}.dump(2);
}

bool is_trainer_checkpoint(const Checkpoint& ckpt) {
    return parse_metadata(ckpt).value("format", "") == "cascade.trainer";
}

DataConfig checkpoint_data_config(const Checkpoint& ckpt) { return data_from(ckpt); }

ArchSpec checkpoint_arch(const Checkpoint& ckpt) {
    const json j = parse_metadata(ckpt);
    const std::string text = from_metadata("arch", [&] { return j.at("arch").get<std::string>(); });
    return parse_arch_string(text);
}

Checkpoint standalone_checkpoint(const Network& net, const StandaloneModel& model) {
    Checkpoint c;
    put_model(c, "model/", model);
    c.metadata = json{{"format", "cascade.model"}, {"arch", format_arch(net.arch())}}.dump();
    return c;
}

StandaloneModel load_standalone(const Checkpoint& ckpt, const Network& net) {
    const json j = parse_metadata(ckpt);
    const std::string format = j.value("format", "");
    const ArchSpec arch = checkpoint_arch(ckpt);
    if (format_arch(arch) != format_arch(net.arch()))
        throw CheckpointError("checkpoint architecture '" + arch.name + "' does not match '" + net.arch().name + "'");
    if (format == "cascade.model") return get_model(ckpt, "model/", net);
    if (format == "cascade.trainer") return get_model(ckpt, "frozen/", net);
    throw CheckpointError("unrecognized checkpoint format '" + format + "'");
}

// ---- Trainer ----------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, Network net, const StandaloneModel& pretrained, const DataSplits* data,
                 DataConfig data_cfg)
    : cfg_(std::move(cfg)),
      data_cfg_(std::move(data_cfg)),
      data_(data),
      h_(std::move(net), pretrained, hierarchy_config(cfg_)),
      opt_(cfg_.optimizer) {
    hint_layers_ = cfg_.hint_layers.empty() ? h_.net().default_hint_layers() : cfg_.hint_layers;
    h_.net().check_hint_layers(hint_layers_);
    st_.best_accuracy.assign(h_.size(), 0.0);
}

Trainer::Trainer(const Checkpoint& ckpt, const DataSplits* data)
    : cfg_(config_from(ckpt)),
      data_cfg_(data_from(ckpt)),
      data_(data),
      h_(hierarchy_from(ckpt, cfg_)),
      opt_(cfg_.optimizer) {
    hint_layers_ = cfg_.hint_layers.empty() ? h_.net().default_hint_layers() : cfg_.hint_layers;
    h_.net().check_hint_layers(hint_layers_);
    const json j = parse_metadata(ckpt);
    st_ = from_metadata("state", [&] { return state_from(j.at("state")); });
    if (st_.best_accuracy.size() != h_.size()) throw CheckpointError("checkpoint state does not match slot count");
    restore_tensors(ckpt);
}

const DataSplits& Trainer::data() const {
    if (!data_) throw ConfigError("trainer has no dataset attached");
    return *data_;
}

const std::vector<std::size_t>* Trainer::hints() const {
    return cfg_.distill.lambda_hint > 0 ? &hint_layers_ : nullptr;
}

std::vector<Parameter<float>*> Trainer::all_trainable() {
    std::vector<Parameter<float>*> out = h_.shared_parameters();
    for (std::size_t i = 0; i < h_.size(); ++i) {
        auto s = h_.slot_parameters(i);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

std::vector<Parameter<float>*> Trainer::student_trainable() {
    std::vector<Parameter<float>*> out = h_.shared_parameters();
    auto s = h_.slot_parameters(0);
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

double Trainer::evaluate(std::size_t slot, const Dataset& ds, std::size_t topk) {
    ModelView v = h_.view(slot);
    v.frozen = true;
    return evaluate_view(h_.net(), v, ds, data().eval_augment(), cfg_.batch_size, topk);
}

double Trainer::evaluate_frozen(const Dataset& ds, std::size_t topk) {
    return evaluate_view(h_.net(), h_.frozen_view(), ds, data().eval_augment(), cfg_.batch_size, topk);
}

void Trainer::enter_finetune() {
    if (st_.stage == Stage::student_finetune || st_.stage == Stage::done) return;
    st_.stage = Stage::student_finetune;
    st_.stage_epoch = 0;
    st_.stage_step = 0;
    st_.teacher_index = 1;
    st_.promotion_streak = 0;
    st_.recorded_accuracy.clear();
    for (std::size_t i = 0; i < h_.size(); ++i) st_.recorded_accuracy.push_back(evaluate(i, data().test));
    st_.recorded_accuracy.push_back(evaluate_frozen(data().test));
}

void Trainer::advance_stage() {
    for (;;) {
        if (st_.stage == Stage::joint && st_.stage_epoch >= cfg_.joint_epochs) {
            if (cfg_.intermediate_epochs > 0) {
                st_.stage = Stage::intermediate_finetune;
                st_.stage_epoch = 0;
                st_.stage_step = 0;
            } else {
                enter_finetune();
            }
            continue;
        }
        if (st_.stage == Stage::intermediate_finetune && st_.stage_epoch >= cfg_.intermediate_epochs) {
            enter_finetune();
            continue;
        }
        if (st_.stage == Stage::student_finetune && st_.stage_epoch >= cfg_.finetune_epochs) st_.stage = Stage::done;
        return;
    }
}

bool Trainer::done() {
    advance_stage();
    return st_.stage == Stage::done;
}

namespace {

double batch_accuracy(const Tensor<float>& logits, const std::vector<int>& labels) {
    const auto pred = argmax_rows(logits);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

std::vector<Tensor<float>> values_of(const std::vector<Var<float>>& vars) {
    std::vector<Tensor<float>> out;
    for (const auto& v : vars) out.push_back(v.value());
    return out;
}

}  // namespace

void Trainer::train_epoch(bool update_scores, const RowSink& sink) {
    BatchStream bs(data().train, cfg_.batch_size, cfg_.seed, static_cast<std::uint64_t>(st_.epoch),
                   data().train_augment(data_cfg_), true);
    LRSchedule sched = cfg_.schedule;
    sched.steps_per_epoch = static_cast<std::int64_t>(bs.batch_count());
    const std::size_t n = h_.size();
    auto params = all_trainable();
    ForwardAllOptions fo;
    fo.forward.mode = Mode::train;
    fo.forward.hint_layers = hints();
    Batch b;
    while (bs.next(b)) {
        for (auto* p : params) p->zero_grad();
        HierarchyPass pass = forward_all(h_, b.images, fo);
        std::vector<MetricsRow> rows(n);
        for (std::size_t i = 0; i < n; ++i) {
            const bool top = i + 1 == n;
            const Tensor<float>& tl = top ? pass.frozen_logits : pass.slots[i + 1].out.logits.value();
            const std::vector<Tensor<float>> th = top ? pass.frozen_hints : values_of(pass.slots[i + 1].out.hints);
            TeacherSignal<float> teacher{&tl, th};
            const auto& out = pass.slots[i].out;
            SlotLoss<float> loss = slot_loss<float>(out.logits, out.hints, b.one_hot, teacher, cfg_.distill);
            pass.slots[i].graph->backward(loss.total);

            const ArchStats stats = count_stats(h_.net().arch(), &h_.slot(i).mask);
            MetricsRow& r = rows[i];
            r.step = st_.step;
            r.epoch = st_.epoch;
            r.stage = st_.stage;
            r.slot = i;
            r.loss = loss.total.value()[0];
            r.task_loss = loss.task;
            r.kd_loss = loss.kd;
            r.hint_loss = loss.hint;
            r.accuracy = batch_accuracy(out.logits.value(), b.labels);
            r.kept_filters = h_.slot(i).mask.kept_maskable();
            r.flops = stats.totals.flops;
            r.params = stats.totals.params;
        }
        const double lr = lr_at(sched, st_.stage_step);
        std::vector<std::vector<std::vector<double>>> score_grads;
        if (update_scores) score_grads = route_gamma_gradients(h_, capture_contexts(h_, pass), cfg_.own_gamma_grad);
        opt_.step(params, lr);
        if (update_scores) {
            apply_score_updates(h_, score_grads, lr / cfg_.schedule.base_lr);
            refresh_masks(h_);
        }
        for (auto& r : rows) {
            r.lr = lr;
            if (sink) sink(r);
        }
        ++st_.step;
        ++st_.stage_step;
    }
}

void Trainer::joint_train_epoch(const RowSink& sink) {
    if (st_.stage != Stage::joint) throw ConfigError("joint_train_epoch called outside the joint stage");
    train_epoch(true, sink);
}

void Trainer::intermediate_finetune_epoch(const RowSink& sink) {
    if (st_.stage != Stage::intermediate_finetune)
        throw ConfigError("intermediate_finetune_epoch called outside the intermediate stage");
    train_epoch(false, sink);
}

void Trainer::finetune_epoch(const RowSink& sink) {
    if (st_.stage != Stage::student_finetune) throw ConfigError("finetune_epoch called outside the fine-tune stage");
    BatchStream bs(data().train, cfg_.batch_size, cfg_.seed, static_cast<std::uint64_t>(st_.epoch),
                   data().train_augment(data_cfg_), true);
    LRSchedule sched = cfg_.schedule;
    sched.steps_per_epoch = static_cast<std::int64_t>(bs.batch_count());
    auto params = student_trainable();
    const ArchStats stats = count_stats(h_.net().arch(), &h_.slot(0).mask);
    ForwardOptions train_opt;
    train_opt.mode = Mode::train;
    train_opt.hint_layers = hints();
    ForwardOptions teacher_opt = train_opt;
    teacher_opt.mode = Mode::eval;
    Batch b;
    while (bs.next(b)) {
        for (auto* p : params) p->zero_grad();
        ModelView tv = st_.teacher_index >= h_.size() ? h_.frozen_view() : h_.view(st_.teacher_index);
        tv.frozen = true;
        Graph<float> tg;
        ForwardOutput to = forward(tg, h_.net(), tv, b.images, teacher_opt);
        const std::vector<Tensor<float>> th = values_of(to.hints);
        TeacherSignal<float> teacher{&to.logits.value(), th};

        Graph<float> sg;
        ModelView sv = h_.view(0);
        ForwardOutput so = forward(sg, h_.net(), sv, b.images, train_opt);
        SlotLoss<float> loss = slot_loss<float>(so.logits, so.hints, b.one_hot, teacher, cfg_.distill);
        sg.backward(loss.total);
        const double lr = lr_at(sched, st_.stage_step);
        opt_.step(params, lr);

        MetricsRow r;
        r.step = st_.step;
        r.epoch = st_.epoch;
        r.stage = st_.stage;
        r.slot = 0;
        r.loss = loss.total.value()[0];
        r.task_loss = loss.task;
        r.kd_loss = loss.kd;
        r.hint_loss = loss.hint;
        r.accuracy = batch_accuracy(so.logits.value(), b.labels);
        r.lr = lr;
        r.kept_filters = h_.slot(0).mask.kept_maskable();
        r.flops = stats.totals.flops;
        r.params = stats.totals.params;
        if (sink) sink(r);
        ++st_.step;
        ++st_.stage_step;
    }
}

std::vector<EvalRow> Trainer::run_epoch(const RowSink& sink) {
    advance_stage();
    if (st_.stage == Stage::done) throw ConfigError("training is already complete");
    std::vector<FilterMask> before;
    for (std::size_t i = 0; i < h_.size(); ++i) before.push_back(h_.slot(i).mask);
    const Stage stage = st_.stage;
    const int epoch = st_.epoch;
    switch (stage) {
        case Stage::joint: joint_train_epoch(sink); break;
        case Stage::intermediate_finetune: intermediate_finetune_epoch(sink); break;
        case Stage::student_finetune: finetune_epoch(sink); break;
        case Stage::done: break;
    }
    ++st_.epoch;
    ++st_.stage_epoch;

    std::vector<EvalRow> rows;
    auto record = [&](std::size_t slot) {
        EvalRow r;
        r.epoch = epoch;
        r.stage = stage;
        r.slot = slot;
        r.accuracy = evaluate(slot, data().test);
        r.mask_hamming = before[slot].hamming(h_.slot(slot).mask);
        st_.best_accuracy[slot] = std::max(st_.best_accuracy[slot], r.accuracy);
        rows.push_back(r);
        return r.accuracy;
    };
    if (stage == Stage::student_finetune) {
        const double acc = record(0);
        update_promotion(st_, acc, h_.size(), cfg_.promotion_patience);
    } else if (cfg_.eval_all_slots) {
        for (std::size_t i = 0; i < h_.size(); ++i) record(i);
    } else {
        record(0);
    }
    for (auto& r : rows) r.teacher_index = st_.teacher_index;
    return rows;
}

Checkpoint Trainer::snapshot() const {
    Checkpoint c;
    for (const auto& p : h_.shared_conv()) c.put(p.name, p.value);
    for (std::size_t i = 0; i < h_.size(); ++i) {
        const ModelSlot& s = h_.slot(i);
        const std::string pre = slot_prefix(i);
        c.put(pre + "conv0", s.first_conv.value);
        for (std::size_t b = 0; b < s.bn.size(); ++b) put_bn(c, pre + "bn" + std::to_string(b), s.bn[b]);
        for (std::size_t d = 0; d < s.dense.size(); ++d) c.put(pre + "dense" + std::to_string(d), s.dense[d].value);
        for (std::size_t l = 0; l < s.mask_tensors.size(); ++l) c.put(pre + "mask" + std::to_string(l), s.mask_tensors[l]);
        if (s.scores) {
            for (std::size_t l = 0; l < s.scores->layers.size(); ++l)
                c.put(pre + "gamma" + std::to_string(l), to_tensor(s.scores->layers[l].gamma));
            for (std::size_t l = 0; l < s.score_opt.square_avg.size(); ++l)
                c.put(pre + "gamma_sq" + std::to_string(l), to_tensor(s.score_opt.square_avg[l]));
        }
    }
    put_model(c, "frozen/", h_.frozen());
    for (const auto& [name, buf] : opt_.buffers()) c.put("optim/" + name, buf);
    c.metadata = json{{"format", "cascade.trainer"},
                      {"arch", format_arch(h_.net().arch())},
                      {"config", to_json(cfg_)},
                      {"data", to_json(data_cfg_)},
                      {"state", to_json(st_)}}
                     .dump();
    return c;
}

void Trainer::restore_tensors(const Checkpoint& c) {
    for (auto& p : h_.shared_conv()) get_param(c, p.name, p);
    for (std::size_t i = 0; i < h_.size(); ++i) {
        ModelSlot& s = h_.slot(i);
        const std::string pre = slot_prefix(i);
        get_param(c, pre + "conv0", s.first_conv);
        for (std::size_t b = 0; b < s.bn.size(); ++b) get_bn(c, pre + "bn" + std::to_string(b), s.bn[b]);
        for (std::size_t d = 0; d < s.dense.size(); ++d) get_param(c, pre + "dense" + std::to_string(d), s.dense[d]);
        for (std::size_t l = 0; l < h_.net().maskable().size(); ++l) {
            const std::size_t id = h_.net().convs()[h_.net().maskable()[l]].layer_id;
            const Tensor<float>& m = c.get<float>(pre + "mask" + std::to_string(l));
            for (auto& lm : s.mask.layers) {
                if (lm.layer_id != id) continue;
                if (m.numel() != lm.keep.size()) throw CheckpointError("mask size mismatch in " + pre);
                for (std::size_t k = 0; k < m.numel(); ++k) lm.keep[k] = m[k] != 0.0f;
            }
        }
        h_.sync_mask_tensors(i);
        if (s.scores) {
            for (std::size_t l = 0; l < s.scores->layers.size(); ++l) {
                const auto& t = c.get<double>(pre + "gamma" + std::to_string(l));
                if (t.numel() != s.scores->layers[l].gamma.size())
                    throw CheckpointError("score size mismatch in " + pre);
                s.scores->layers[l].gamma.assign(t.values().begin(), t.values().end());
            }
            s.score_opt.square_avg.clear();
            for (std::size_t l = 0; c.has(pre + "gamma_sq" + std::to_string(l)); ++l) {
                const auto& t = c.get<double>(pre + "gamma_sq" + std::to_string(l));
                s.score_opt.square_avg.emplace_back(t.values().begin(), t.values().end());
            }
        }
    }
    for (const auto& [name, t] : c.tensors) {
        if (name.rfind("optim/", 0) != 0) continue;
        const auto* f = std::get_if<Tensor<float>>(&t);
        if (!f) throw CheckpointError("optimizer buffer '" + name + "' must be f32");
        opt_.buffers()[name.substr(6)] = *f;
    }
}

// ---- driver -------------------------------------------------------------------

namespace {

std::ofstream open_csv(const std::filesystem::path& path, const std::string& header) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream f(path, std::ios::app);
    if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
    if (fresh) f << header << '\n';
    return f;
}

}  // namespace

void run_training(Trainer& t, const RunOptions& opt) {
    std::filesystem::create_directories(opt.out_dir);
    if (opt.checkpoints) std::filesystem::create_directories(opt.out_dir / "checkpoints");
    std::ofstream metrics = open_csv(opt.out_dir / "metrics.csv", metrics_header());
    std::ofstream evals = open_csv(opt.out_dir / "eval.csv", eval_header());
    int ran = 0;
    while (!t.done() && (!opt.max_epochs || ran < *opt.max_epochs)) {
        auto rows = t.run_epoch([&](const MetricsRow& r) { metrics << format_row(r) << '\n'; });
        for (const auto& r : rows) evals << format_row(r) << '\n';
        metrics.flush();
        evals.flush();
        if (!metrics || !evals) throw DataError("failed writing metrics in '" + opt.out_dir.string() + "'");
        if (opt.checkpoints) {
            const Checkpoint c = t.snapshot();
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03d.ckpt", t.state().epoch);
            save_checkpoint(c, opt.out_dir / "checkpoints" / name);
            save_checkpoint(c, opt.out_dir / "checkpoints" / "latest.ckpt");
        }
        if (opt.on_epoch) opt.on_epoch(t, rows);
        ++ran;
    }
}

std::vector<StandaloneEpoch> train_standalone(const Network& net, StandaloneModel& model, const DataSplits& data,
                                              const DataConfig& data_cfg, const StandaloneConfig& cfg) {
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    Optimizer opt(cfg.optimizer);
    auto params = model.parameters();
    ModelView view = model.view();
    ForwardOptions fo;
    fo.mode = Mode::train;
    std::int64_t step = 0;
    std::vector<StandaloneEpoch> out;
    for (int e = 0; e < cfg.epochs; ++e) {
        BatchStream bs(data.train, cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(e),
                       data.train_augment(data_cfg), true);
        LRSchedule sched = cfg.schedule;
        sched.steps_per_epoch = static_cast<std::int64_t>(bs.batch_count());
        double loss_sum = 0, acc_sum = 0;
        std::size_t seen = 0;
        Batch b;
        while (bs.next(b)) {
            for (auto* p : params) p->zero_grad();
            Graph<float> g;
            ForwardOutput o = forward(g, net, view, b.images, fo);
            Var<float> loss = softmax_cross_entropy(o.logits, b.one_hot);
            g.backward(loss);
            opt.step(params, lr_at(sched, step++));
            loss_sum += loss.value()[0] * static_cast<double>(b.labels.size());
            acc_sum += batch_accuracy(o.logits.value(), b.labels) * static_cast<double>(b.labels.size());
            seen += b.labels.size();
        }
        StandaloneEpoch se;
        se.epoch = e;
        se.loss = loss_sum / static_cast<double>(seen);
        se.train_accuracy = acc_sum / static_cast<double>(seen);
        se.test_accuracy = evaluate_view(net, model.view(true), data.test, data.eval_augment(), cfg.batch_size);
        out.push_back(se);
    }
    return out;
}

}  // namespace cascade
