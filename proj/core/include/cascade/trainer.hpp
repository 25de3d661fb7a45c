#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cascade/checkpoint.hpp"
#include "cascade/data.hpp"
#include "cascade/distill.hpp"
#include "cascade/hierarchy.hpp"
#include "cascade/optim.hpp"

namespace cascade {

struct DataConfig {
    std::string kind = "synthetic";  // cifar10 | mnist | synthetic
    std::string root;
    std::uint64_t synthetic_seed = 0;
    std::size_t synthetic_train = 4000;
    std::size_t synthetic_test = 1000;
    std::size_t synthetic_classes = 10;
    std::size_t synthetic_size = 16;
    std::size_t synthetic_channels = 3;
    double synthetic_noise = 0.2;
    double flip = 0.5;
    std::size_t pad = 4;
    CropMode crop = CropMode::random;
    bool normalize = true;

    void validate() const;
};

struct DataSplits {
    Dataset train;
    Dataset test;
    std::optional<Normalization> norm;  // from the training split

    AugmentConfig train_augment(const DataConfig& cfg) const;
    AugmentConfig eval_augment() const;
};

DataSplits load_data(const DataConfig& cfg);

enum class Stage { joint, intermediate_finetune, student_finetune, done };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
    std::vector<double> keep_ratios{0.5, 2.0 / 3.0, 0.8, 1.0};
    std::size_t min_filters_per_layer = 1;
    DistillConfig distill;
    std::vector<std::size_t> hint_layers;  // empty: network default
    OptimizerConfig optimizer;
    LRSchedule schedule;  // steps_per_epoch is filled from the data
    ScoreOptimizerKind score_optimizer = ScoreOptimizerKind::sgd;
    double score_lr = 0.1;
    bool own_gamma_grad = false;
    int joint_epochs = 8;
    int intermediate_epochs = 0;
    int finetune_epochs = 8;
    int promotion_patience = 1;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    bool eval_all_slots = true;  // evaluate every slot after each training-stage epoch

    void validate() const;
};

struct TrainState {
    Stage stage = Stage::joint;
    int epoch = 0;        // completed epochs, all stages
    int stage_epoch = 0;  // completed epochs in the current stage
    std::int64_t step = 0;
    std::int64_t stage_step = 0;
    std::size_t teacher_index = 1;  // fine-tune teacher; == slot count means the frozen model
    int promotion_streak = 0;
    std::vector<double> recorded_accuracy;  // per slot, then frozen; set on entering fine-tune
    std::vector<double> best_accuracy;      // per slot
};

/// Fine-tune teacher promotion. The student must beat the current teacher's
/// recorded accuracy for `patience` consecutive epochs; the index then moves
/// one slot up and stops at the frozen model (index == slot_count).
/// Returns true when a promotion happened.
bool update_promotion(TrainState& st, double student_accuracy, std::size_t slot_count, int patience);

struct MetricsRow {
    std::int64_t step = 0;
    int epoch = 0;
    Stage stage = Stage::joint;
    std::size_t slot = 0;
    double loss = 0, task_loss = 0, kd_loss = 0, hint_loss = 0, accuracy = 0, lr = 0;
    std::size_t kept_filters = 0;
    std::int64_t flops = 0, params = 0;
};

struct EvalRow {
    int epoch = 0;
    Stage stage = Stage::joint;
    std::size_t slot = 0;
    double accuracy = 0;
    std::size_t mask_hamming = 0;  // student mask change over the epoch
    std::size_t teacher_index = 0;
};

std::string metrics_header();
std::string format_row(const MetricsRow& r);
std::string eval_header();
std::string format_row(const EvalRow& r);

/// Top-k accuracy of a model view in eval mode over a whole split.
double evaluate_view(const Network& net, const ModelView& view, const Dataset& ds, const AugmentConfig& eval_aug,
                     std::size_t batch_size, std::size_t topk = 1);

class Trainer {
public:
    using RowSink = std::function<void(const MetricsRow&)>;

    Trainer(TrainConfig cfg, Network net, const StandaloneModel& pretrained, const DataSplits* data,
            DataConfig data_cfg);
    /// Resumes from a snapshot(); configuration comes from its metadata.
    /// `data` may be null for inspection; training and evaluation then throw.
    Trainer(const Checkpoint& ckpt, const DataSplits* data);

    const TrainConfig& config() const noexcept { return cfg_; }
    TrainConfig& mutable_config() noexcept { return cfg_; }
    const DataConfig& data_config() const noexcept { return data_cfg_; }
    const TrainState& state() const noexcept { return st_; }
    ModelHierarchy& hierarchy() noexcept { return h_; }
    const ModelHierarchy& hierarchy() const noexcept { return h_; }
    const Optimizer& optimizer() const noexcept { return opt_; }

    /// Moves past finished stages; entering fine-tune records accuracies.
    void advance_stage();
    /// Skips the rest of the joint and intermediate stages.
    void enter_finetune();
    bool done();

    /// Runs one epoch of the current stage. Emits one row per batch per
    /// trained slot, then the epoch's evaluation rows.
    std::vector<EvalRow> run_epoch(const RowSink& sink);

    /// Stage-specific epochs, exposed for tests. Each requires its stage.
    void joint_train_epoch(const RowSink& sink);
    void intermediate_finetune_epoch(const RowSink& sink);
    void finetune_epoch(const RowSink& sink);

    double evaluate(std::size_t slot, const Dataset& ds, std::size_t topk = 1);
    double evaluate_frozen(const Dataset& ds, std::size_t topk = 1);

    Checkpoint snapshot() const;

private:
    void train_epoch(bool update_scores, const RowSink& sink);
    std::vector<Parameter<float>*> all_trainable();
    std::vector<Parameter<float>*> student_trainable();
    const std::vector<std::size_t>* hints() const;
    const DataSplits& data() const;
    void restore_tensors(const Checkpoint& ckpt);

    TrainConfig cfg_;
    DataConfig data_cfg_;
    const DataSplits* data_;
    ModelHierarchy h_;
    Optimizer opt_;
    TrainState st_;
    std::vector<std::size_t> hint_layers_;
};

/// Drives a trainer to completion, appending metrics.csv and eval.csv in
/// `out_dir` and writing checkpoints/epoch_NNN.ckpt plus latest.ckpt after
/// every epoch. `max_epochs` limits how many epochs this call runs.
struct RunOptions {
    std::filesystem::path out_dir;
    std::optional<int> max_epochs;
    bool checkpoints = true;
    std::function<void(const Trainer&, const std::vector<EvalRow>&)> on_epoch;
};
void run_training(Trainer& t, const RunOptions& opt);

/// Plain supervised training of a single model (pre-training and baselines).
struct StandaloneConfig {
    int epochs = 10;
    std::size_t batch_size = 128;
    OptimizerConfig optimizer;
    LRSchedule schedule;
    std::uint64_t seed = 0;
};
struct StandaloneEpoch {
    int epoch = 0;
    double loss = 0;
    double train_accuracy = 0;
    double test_accuracy = 0;
};
std::vector<StandaloneEpoch> train_standalone(const Network& net, StandaloneModel& model, const DataSplits& data,
                                              const DataConfig& data_cfg, const StandaloneConfig& cfg);

Checkpoint standalone_checkpoint(const Network& net, const StandaloneModel& model);
/// Reads a standalone checkpoint; the embedded arch must match `net`.
StandaloneModel load_standalone(const Checkpoint& ckpt, const Network& net);
bool is_trainer_checkpoint(const Checkpoint& ckpt);
/// Dataset settings recorded in a training checkpoint.
DataConfig checkpoint_data_config(const Checkpoint& ckpt);
/// Arch text embedded in a checkpoint's metadata.
ArchSpec checkpoint_arch(const Checkpoint& ckpt);

std::string config_json(const TrainConfig& cfg, const DataConfig& data);

}  // namespace cascade
