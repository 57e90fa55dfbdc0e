#include "bivit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "bivit/errors.hpp"

namespace bivit {

RankingStage ranking_stage_from_string(const std::string& s) {
    if (s == "pre_softmax") return RankingStage::pre_softmax;
    if (s == "post_softmax") return RankingStage::post_softmax;
    throw DomainError("unknown ranking stage: " + s);
}

void TrainConfig::validate() const {
    if (epochs == 0 || batch_size == 0) throw DomainError("epochs and batch size must be positive");
    if (!(base_lr > 0.0)) throw DomainError("learning rate must be positive");
    if (lambda < 0.0) throw DomainError("lambda must be >= 0");
    if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
    if (optimizer != "adam" && optimizer != "sgd") throw DomainError("optimizer must be adam or sgd");
    precision.validate();
    arch.validate();
}

void MetricsLog::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path);
    const std::size_t depth = rows.empty() ? 0 : rows.front().ste_zero_frac.size();
    out << "step,l_dist,l_ranking,total,lr";
    for (std::size_t b = 0; b < depth; ++b) out << ",ste_zero_frac_b" << b;
    out << "\n";
    char buf[64];
    for (const MetricsRow& r : rows) {
        out << r.step;
        for (double v : {r.l_dist, r.l_ranking, r.total, r.lr}) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        for (double v : r.ste_zero_frac) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

MetricsLog MetricsLog::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    MetricsLog log;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty metrics file", 0);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        MetricsRow row;
        std::getline(ls, tok, ',');
        row.step = std::stoul(tok);
        std::getline(ls, tok, ',');
        row.l_dist = std::stod(tok);
        std::getline(ls, tok, ',');
        row.l_ranking = std::stod(tok);
        std::getline(ls, tok, ',');
        row.total = std::stod(tok);
        std::getline(ls, tok, ',');
        row.lr = std::stod(tok);
        while (std::getline(ls, tok, ',')) row.ste_zero_frac.push_back(std::stod(tok));
        log.rows.push_back(std::move(row));
    }
    return log;
}

double evaluate(const TinyVit& model, const Dataset& data) {
    if (data.images.empty()) throw DomainError("evaluate: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        if (model.predict(data.images[i]) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.images.size());
}

namespace {

struct GradEntry {
    Param* param;
    Tensor grad;
};

std::vector<GradEntry> collect_grads(Tape& tape, const Binder& bind) {
    std::vector<GradEntry> out;
    for (const Binder::Bound& b : bind.bound()) {
        out.push_back(GradEntry{b.param, tape.grad(b.id)});
    }
    return out;
}

void clip_global_norm(std::vector<GradEntry>& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const GradEntry& g : grads)
        for (double v : g.grad.values) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double s = max_norm / norm;
    for (GradEntry& g : grads)
        for (double& v : g.grad.values) v *= s;
}

// Positive parameters (scales, thresholds) are floored after the update so
// the binarizer contracts stay valid.
bool positivity_constrained(const Param& p) {
    const std::string& n = p.name;
    const auto ends_with = [&n](const char* suffix) {
        const std::size_t len = std::strlen(suffix);
        return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
    };
    return ends_with(".alpha") || ends_with(".alpha_q") || ends_with(".alpha_k") ||
           ends_with(".alpha_v") || ends_with(".alpha_attn");
}

void floor_positive(Param& p) {
    for (double& v : p.value.values) v = std::max(v, 1e-4);
}

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, TinyVit& model) : cfg_(&cfg) {
        auto params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) index_[params[i]] = i;
        adam_.cfg.lr = cfg.base_lr;
        adam_.cfg.weight_decay = cfg.weight_decay;
        adam_.init(params);
    }

    AdamState& state() { return adam_; }

    void step(std::vector<GradEntry>& grads) {
        clip_global_norm(grads, cfg_->grad_clip);
        if (cfg_->optimizer == "sgd") {
            for (GradEntry& g : grads) {
                for (std::size_t i = 0; i < g.grad.size(); ++i)
                    g.param->value.values[i] -= cfg_->base_lr * g.grad.values[i];
                if (positivity_constrained(*g.param)) floor_positive(*g.param);
            }
            return;
        }
        ++adam_.step;
        const double b1 = adam_.cfg.beta1, b2 = adam_.cfg.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam_.step));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam_.step));
        for (GradEntry& g : grads) {
            const std::size_t slot = index_.at(g.param);
            Tensor& m = adam_.m[slot];
            Tensor& v = adam_.v[slot];
            for (std::size_t i = 0; i < g.grad.size(); ++i) {
                double grad = g.grad.values[i];
                if (adam_.cfg.weight_decay != 0.0)
                    grad += adam_.cfg.weight_decay * g.param->value.values[i];
                m.values[i] = b1 * m.values[i] + (1.0 - b1) * grad;
                v.values[i] = b2 * v.values[i] + (1.0 - b2) * grad * grad;
                const double mhat = m.values[i] / bc1;
                const double vhat = v.values[i] / bc2;
                g.param->value.values[i] -=
                    adam_.cfg.lr * mhat / (std::sqrt(vhat) + adam_.cfg.eps);
            }
            if (positivity_constrained(*g.param)) floor_positive(*g.param);
        }
    }

private:
    const TrainConfig* cfg_;
    AdamState adam_;
    std::unordered_map<const Param*, std::size_t> index_;
};

bool any_binarized(const PrecisionConfig& pc) {
    return pc.mhsa_weights == 1 || pc.mhsa_acts == 1 || pc.mlp_weights == 1 || pc.mlp_acts == 1 ||
           pc.attention_acts == 1;
}

void calibrate_weight_scales(TinyVit& model) {
    for (EncoderBlock& b : model.blocks) {
        for (BinaryLinear* lin :
             {&b.attn.q_proj, &b.attn.k_proj, &b.attn.v_proj, &b.attn.out_proj, &b.mlp_fc1,
              &b.mlp_fc2})
            lin->calibrate_weight_scale();
    }
}

} // namespace

TeacherResult train_classifier(const TrainConfig& cfg, const DataSplit& data) {
    cfg.validate();
    VitConfig arch = cfg.arch;
    arch.precision = cfg.precision;
    arch.attn_binarizer = cfg.attn_binarizer;
    TinyVit model = TinyVit::init(arch, cfg.seed);
    set_lsf_enabled(model, cfg.lsf && arch.precision.attention_acts == 1);
    if (any_binarized(arch.precision)) calibrate_weight_scales(model);

    Optimizer opt(cfg, model);
    std::mt19937_64 data_rng(cfg.seed);
    const std::size_t n = data.train.images.size();
    if (n == 0) throw DomainError("train_classifier: empty training set");
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_indices(n, data_rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            Tape tape;
            Binder bind(tape);
            std::vector<ValueId> logits;
            std::vector<int> labels;
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t idx = order[i];
                logits.push_back(model.forward(tape, bind, data.train.images[idx], nullptr));
                labels.push_back(data.train.labels[idx]);
            }
            const ValueId loss = tape.softmax_xent(tape.stack_rows(logits), labels);
            const double loss_value = tape.value(loss).values[0];
            if (!std::isfinite(loss_value))
                throw DomainError("training diverged (non-finite loss) at step " +
                                  std::to_string(step));
            tape.backward(loss);
            std::vector<GradEntry> grads = collect_grads(tape, bind);
            opt.step(grads);
        }
    }
    TeacherResult result{std::move(model), 0.0};
    result.val_accuracy = evaluate(result.model, data.val);
    return result;
}

TeacherResult train_teacher(const TrainConfig& cfg, const DataSplit& data) {
    TrainConfig teacher_cfg = cfg;
    teacher_cfg.precision = PrecisionConfig::all_real();
    teacher_cfg.lsf = false;
    return train_classifier(teacher_cfg, data);
}

TinyVit init_student_from_teacher(const TinyVit& teacher, const TrainConfig& cfg,
                                  const std::vector<Tensor>& calibration_batch) {
    VitConfig arch = cfg.arch;
    arch.precision = cfg.precision;
    arch.attn_binarizer = cfg.attn_binarizer;
    const VitConfig& tc = teacher.cfg;
    if (tc.image_size != arch.image_size || tc.patch_size != arch.patch_size ||
        tc.channels != arch.channels || tc.embed_dim != arch.embed_dim ||
        tc.depth != arch.depth || tc.heads != arch.heads || tc.mlp_ratio != arch.mlp_ratio ||
        tc.classes != arch.classes)
        throw ContractError("student and teacher architectures differ");

    TinyVit student = teacher;
    student.cfg = arch;
    for (EncoderBlock& b : student.blocks) b.attn.binarizer = arch.attn_binarizer;
    for (Param* p : student.parameters()) p->trainable = true;
    calibrate_weight_scales(student);

    // Head-wise scale calibration: mean |activation| per head from a
    // real-valued pass of the copied weights.
    if (!calibration_batch.empty()) {
        const std::size_t depth = student.cfg.depth, heads = student.cfg.heads;
        std::vector<std::vector<double>> acc_q(depth, std::vector<double>(heads, 0.0));
        auto acc_k = acc_q;
        auto acc_v = acc_q;
        std::vector<std::vector<std::size_t>> cnt(depth, std::vector<std::size_t>(heads, 0));
        TinyVit probe = student;
        probe.cfg.precision = PrecisionConfig::all_real();
        for (const Tensor& image : calibration_batch) {
            Tape tape;
            Binder bind(tape, /*trainable=*/false);
            std::vector<BlockRecord> records;
            probe.forward(tape, bind, image, &records);
            for (std::size_t b = 0; b < depth; ++b) {
                const AttentionRecord& rec = records[b].attention;
                for (auto [acc, id] : {std::pair{&acc_q, rec.q_in}, {&acc_k, rec.k_in},
                                       {&acc_v, rec.v_in}}) {
                    const Tensor& val = tape.value(id);
                    const std::size_t stride = val.size() / heads;
                    for (std::size_t h = 0; h < heads; ++h) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < stride; ++j)
                            s += std::abs(val.values[h * stride + j]);
                        (*acc)[b][h] += s;
                    }
                }
                for (std::size_t h = 0; h < heads; ++h) {
                    const Tensor& val = tape.value(rec.q_in);
                    cnt[b][h] += val.size() / heads;
                }
            }
        }
        for (std::size_t b = 0; b < depth; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const double denom = std::max<double>(1.0, static_cast<double>(cnt[b][h]));
                student.blocks[b].attn.alpha_q.value.values[h] =
                    std::max(acc_q[b][h] / denom, 1e-4);
                student.blocks[b].attn.alpha_k.value.values[h] =
                    std::max(acc_k[b][h] / denom, 1e-4);
                student.blocks[b].attn.alpha_v.value.values[h] =
                    std::max(acc_v[b][h] / denom, 1e-4);
                student.blocks[b].attn.alpha_attn.value.values[h] = 1.0;
                student.blocks[b].attn.tau_attn.value.values[h] =
                    1.0 / static_cast<double>(student.cfg.tokens());
            }
        }
    }
    // With LSF off the head scales stay frozen at 1 (reference baseline).
    set_lsf_enabled(student, cfg.lsf);
    return student;
}

namespace {

struct TeacherCache {
    std::vector<Tensor> logits;                  // per train image
    std::vector<std::vector<Tensor>> attention;  // per train image, per block
};

TeacherCache build_teacher_cache(const TeacherBundle& teacher, const Dataset& train,
                                 RankingStage stage, bool need_attention) {
    TeacherCache cache;
    cache.logits.reserve(train.images.size());
    for (const Tensor& image : train.images) {
        TeacherAttention attn;
        cache.logits.push_back(teacher.infer(image, need_attention ? &attn : nullptr));
        if (need_attention) {
            cache.attention.push_back(stage == RankingStage::pre_softmax ? std::move(attn.scores)
                                                                         : std::move(attn.attn));
        }
    }
    return cache;
}

} // namespace

StudentResult train_student(const TrainConfig& cfg, const TeacherBundle& teacher,
                            const DataSplit& data, const std::string& checkpoint_dir,
                            const std::string& resume_path) {
    cfg.validate();
    const std::size_t n = data.train.images.size();
    if (n == 0) throw DomainError("train_student: empty training set");

    std::vector<Tensor> calibration;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, cfg.batch_size); ++i)
        calibration.push_back(data.train.images[i]);

    StudentResult result{init_student_from_teacher(teacher.model, cfg, calibration), {}, 0.0};
    Optimizer opt(cfg, result.model);
    std::mt19937_64 data_rng(cfg.seed);
    std::size_t start_epoch = 0;
    if (!resume_path.empty()) {
        const LoadedCheckpoint loaded =
            load_checkpoint(resume_path, result.model, &opt.state(), data_rng);
        start_epoch = loaded.epoch;
    }

    const bool need_attention = cfg.lambda > 0.0;
    const TeacherCache cache =
        build_teacher_cache(teacher, data.train, cfg.ranking_stage, need_attention);

    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t step = start_epoch * steps_per_epoch;

    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_indices(n, data_rng);
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const std::size_t batch = stop - start;
            Tape tape;
            Binder bind(tape);
            std::vector<ValueId> logits;
            std::vector<int> labels;
            Tensor teacher_logits({batch, data.train.classes});
            std::vector<std::vector<BlockRecord>> records(batch);
            for (std::size_t i = 0; i < batch; ++i) {
                const std::size_t idx = order[start + i];
                logits.push_back(
                    result.model.forward(tape, bind, data.train.images[idx], &records[i]));
                labels.push_back(data.train.labels[idx]);
                const Tensor& tl = cache.logits[idx];
                std::copy(tl.values.begin(), tl.values.end(),
                          teacher_logits.values.begin() + i * data.train.classes);
            }
            const ValueId l_dist = dist_loss_node(tape, tape.stack_rows(logits), teacher_logits,
                                                  labels, cfg.temperature);
            ValueId l_rank = tape.constant(Tensor::scalar(0.0));
            if (need_attention) {
                for (std::size_t i = 0; i < batch; ++i) {
                    const std::size_t idx = order[start + i];
                    std::vector<ValueId> student_maps;
                    for (const BlockRecord& rec : records[i])
                        student_maps.push_back(cfg.ranking_stage == RankingStage::pre_softmax
                                                   ? rec.attention.scores
                                                   : rec.attention.attn);
                    l_rank = tape.add(
                        l_rank, ranking_loss_node(tape, cache.attention[idx], student_maps));
                }
                l_rank = tape.scale(l_rank, 1.0 / static_cast<double>(batch));
            }
            const ValueId total = tape.add(l_dist, tape.scale(l_rank, cfg.lambda));
            const LossReport report = total_loss(tape.value(l_dist).values[0],
                                                 tape.value(l_rank).values[0], cfg.lambda);
            if (!std::isfinite(report.total))
                throw DomainError("student training diverged (non-finite loss) at step " +
                                  std::to_string(step));
            tape.backward(total);

            MetricsRow row;
            row.step = step;
            row.l_dist = report.l_dist;
            row.l_ranking = report.l_ranking;
            row.total = report.total;
            row.lr = cfg.base_lr;
            row.ste_zero_frac.assign(cfg.arch.depth, 0.0);
            if (cfg.precision.attention_acts == 1) {
                for (std::size_t i = 0; i < batch; ++i) {
                    const auto fractions = ste_grad_fractions(tape, records[i]);
                    for (std::size_t b = 0; b < fractions.size(); ++b) {
                        double acc = 0.0;
                        std::size_t cnt = 0;
                        for (const auto* vec :
                             {&fractions[b].q, &fractions[b].k, &fractions[b].v,
                              &fractions[b].attn}) {
                            for (double f : *vec) {
                                acc += f;
                                ++cnt;
                            }
                        }
                        if (cnt) row.ste_zero_frac[b] += acc / static_cast<double>(cnt);
                    }
                }
                for (double& f : row.ste_zero_frac) f /= static_cast<double>(batch);
            }
            result.log.rows.push_back(std::move(row));

            std::vector<GradEntry> grads = collect_grads(tape, bind);
            opt.step(grads);
        }
        if (!checkpoint_dir.empty()) {
            std::filesystem::create_directories(checkpoint_dir);
            save_checkpoint(checkpoint_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt",
                            result.model, &opt.state(), data_rng, epoch + 1);
        }
    }
    result.val_accuracy = evaluate(result.model, data.val);
    return result;
}

std::vector<SteFractions> ste_grad_fraction(TinyVit& model, const std::vector<Tensor>& batch,
                                            const std::vector<int>& labels) {
    if (batch.empty() || batch.size() != labels.size())
        throw ContractError("ste_grad_fraction: bad batch");
    Tape tape;
    Binder bind(tape);
    std::vector<ValueId> logits;
    std::vector<std::vector<BlockRecord>> records(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        logits.push_back(model.forward(tape, bind, batch[i], &records[i]));
    const ValueId loss = tape.softmax_xent(tape.stack_rows(logits), labels);
    tape.backward(loss);

    std::vector<SteFractions> mean(model.cfg.depth);
    for (std::size_t b = 0; b < model.cfg.depth; ++b) {
        mean[b].q.assign(model.cfg.heads, 0.0);
        mean[b].k.assign(model.cfg.heads, 0.0);
        mean[b].v.assign(model.cfg.heads, 0.0);
        mean[b].attn.assign(model.cfg.heads, 0.0);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto fractions = ste_grad_fractions(tape, records[i]);
        for (std::size_t b = 0; b < fractions.size(); ++b) {
            for (std::size_t h = 0; h < model.cfg.heads; ++h) {
                if (!fractions[b].q.empty()) mean[b].q[h] += fractions[b].q[h];
                if (!fractions[b].k.empty()) mean[b].k[h] += fractions[b].k[h];
                if (!fractions[b].v.empty()) mean[b].v[h] += fractions[b].v[h];
                if (!fractions[b].attn.empty()) mean[b].attn[h] += fractions[b].attn[h];
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& f : mean) {
        for (auto* vec : {&f.q, &f.k, &f.v, &f.attn})
            for (double& v : *vec) v *= inv;
    }
    return mean;
}

std::vector<double> ste_fraction_sweep_q(TinyVit& model, const std::vector<Tensor>& batch,
                                         const std::vector<int>& labels,
                                         const std::vector<double>& multipliers) {
    std::vector<Tensor> saved;
    for (EncoderBlock& b : model.blocks) saved.push_back(b.attn.alpha_q.value);
    std::vector<double> out;
    for (double mult : multipliers) {
        if (!(mult > 0.0)) throw DomainError("ste sweep multipliers must be positive");
        for (std::size_t b = 0; b < model.blocks.size(); ++b) {
            Tensor& alpha = model.blocks[b].attn.alpha_q.value;
            for (std::size_t h = 0; h < alpha.size(); ++h)
                alpha.values[h] = saved[b].values[h] * mult;
        }
        const auto fractions = ste_grad_fraction(model, batch, labels);
        double acc = 0.0;
        std::size_t cnt = 0;
        for (const SteFractions& f : fractions)
            for (double v : f.q) {
                acc += v;
                ++cnt;
            }
        out.push_back(cnt ? acc / static_cast<double>(cnt) : 0.0);
    }
    for (std::size_t b = 0; b < model.blocks.size(); ++b)
        model.blocks[b].attn.alpha_q.value = saved[b];
    return out;
}

std::string GridResult::csv() const {
    std::ostringstream os;
    os << "mlp,mhsa,top1\n";
    char buf[96];
    for (const GridCell& c : cells) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.4f\n", c.mlp.c_str(), c.mhsa.c_str(), c.accuracy);
        os << buf;
    }
    return os.str();
}

GridResult precision_ablation_grid(const TrainConfig& base, const DataSplit& data) {
    struct Mode {
        const char* label;
        int weights, acts;
    };
    const Mode modes[3] = {{"w1a1", 1, 1}, {"w1a32", 1, 32}, {"w32a32", 32, 32}};
    GridResult result;
    for (const Mode& mlp : modes) {
        for (const Mode& mhsa : modes) {
            TrainConfig cfg = base;
            cfg.precision.mlp_weights = mlp.weights;
            cfg.precision.mlp_acts = mlp.acts;
            cfg.precision.mhsa_weights = mhsa.weights;
            cfg.precision.mhsa_acts = mhsa.acts;
            cfg.precision.attention_acts = mhsa.acts;
            cfg.lsf = false;
            const TeacherResult run = train_classifier(cfg, data);
            result.cells.push_back(GridCell{mlp.label, mhsa.label, run.val_accuracy});
        }
    }
    return result;
}

} // namespace bivit
