#pragma once

#include <string>
#include <vector>

#include "bivit/checkpoint.hpp"
#include "bivit/dataset.hpp"
#include "bivit/distill.hpp"
#include "bivit/layers.hpp"

namespace bivit {

// Which attention map feeds the ranking loss. The reference analysis
// visualizes the map before softmax, so pre_softmax is the default.
enum class RankingStage { pre_softmax, post_softmax };

RankingStage ranking_stage_from_string(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double base_lr = 1e-3;
    double lambda = 10.0;  // ranking-loss weight
    double temperature = 1.0;
    std::uint64_t seed = 42;
    std::string optimizer = "adam";  // adam | sgd
    double weight_decay = 0.0;
    double grad_clip = 5.0;  // global-norm guard against STE spikes
    PrecisionConfig precision;
    RankingStage ranking_stage = RankingStage::pre_softmax;
    AttnBinarizer attn_binarizer = AttnBinarizer::threshold_01;
    bool lsf = true;  // learnable head-wise scales
    VitConfig arch;

    void validate() const;
};

struct MetricsRow {
    std::size_t step = 0;
    double l_dist = 0.0;
    double l_ranking = 0.0;
    double total = 0.0;
    double lr = 0.0;
    std::vector<double> ste_zero_frac;  // one entry per block
};

struct MetricsLog {
    std::vector<MetricsRow> rows;
    void write_csv(const std::string& path) const;
    static MetricsLog read_csv(const std::string& path);
};

double evaluate(const TinyVit& model, const Dataset& data);

struct TeacherResult {
    TinyVit model;
    double val_accuracy = 0.0;
};

// Plain cross-entropy training of a model at its configured precision.
// Used for the real-valued teacher and for precision-grid cells.
TeacherResult train_classifier(const TrainConfig& cfg, const DataSplit& data);

TeacherResult train_teacher(const TrainConfig& cfg, const DataSplit& data);

// Copies the pretrained weights, calibrates the weight/head scales on the
// calibration batch, and applies the student precision flags.
TinyVit init_student_from_teacher(const TinyVit& teacher, const TrainConfig& cfg,
                                  const std::vector<Tensor>& calibration_batch);

struct StudentResult {
    TinyVit model;
    MetricsLog log;
    double val_accuracy = 0.0;
};

// Distillation training of the binarized student against a frozen teacher.
// checkpoint_dir, when set, receives one checkpoint per epoch; resume_path
// restores one and continues bit-identically.
StudentResult train_student(const TrainConfig& cfg, const TeacherBundle& teacher,
                            const DataSplit& data, const std::string& checkpoint_dir = "",
                            const std::string& resume_path = "");

// Mean fraction of zeroed STE gradients for the q binarizer on a fixed
// batch, as alpha_q is scaled by each multiplier (alphas restored after).
std::vector<double> ste_fraction_sweep_q(TinyVit& model, const std::vector<Tensor>& batch,
                                         const std::vector<int>& labels,
                                         const std::vector<double>& multipliers);

// One forward+backward on a batch; per-block STE fractions averaged over
// the batch.
std::vector<SteFractions> ste_grad_fraction(TinyVit& model, const std::vector<Tensor>& batch,
                                            const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Precision ablation grid: {mlp, mhsa} x {w1a1, w1a32, w32a32}, trained from
// scratch with a shared seed and budget.

struct GridCell {
    std::string mlp;
    std::string mhsa;
    double accuracy = 0.0;
};

struct GridResult {
    std::vector<GridCell> cells;
    std::string csv() const;  // header: mlp,mhsa,top1
};

GridResult precision_ablation_grid(const TrainConfig& base, const DataSplit& data);

} // namespace bivit
