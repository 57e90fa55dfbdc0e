#include "bivit/distill.hpp"

#include <cmath>

#include "bivit/errors.hpp"

namespace bivit {

Tensor ranking_map(const Tensor& attention) {
    if (attention.rank() != 3)
        throw ShapeError("ranking_map: expected [h,N,M], got " + shape_str(attention.shape));
    const std::size_t h = attention.dim(0), n = attention.dim(1), m = attention.dim(2);
    if (n < 2) throw DomainError("ranking_map: need at least 2 rows");
    Tensor out(attention.shape);
    for (std::size_t s = 0; s < h; ++s) {
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t prev = (r == 0) ? n - 1 : r - 1;
            for (std::size_t j = 0; j < m; ++j)
                out.at(s, r, j) = attention.at(s, r, j) - attention.at(s, prev, j);
        }
    }
    return out;
}

double ranking_loss(const std::vector<Tensor>& teacher_attn,
                    const std::vector<Tensor>& student_attn) {
    if (teacher_attn.size() != student_attn.size())
        throw ShapeError("ranking_loss: block counts differ");
    double total = 0.0;
    for (std::size_t l = 0; l < teacher_attn.size(); ++l) {
        if (!teacher_attn[l].same_shape(student_attn[l]))
            throw ShapeError("ranking_loss: block " + std::to_string(l) + " shapes differ");
        const Tensor dt = ranking_map(teacher_attn[l]);
        const Tensor ds = ranking_map(student_attn[l]);
        double acc = 0.0;
        for (std::size_t i = 0; i < dt.size(); ++i) {
            const double d = dt.values[i] - ds.values[i];
            acc += d * d;
        }
        total += std::sqrt(acc);
    }
    return total;
}

ValueId ranking_loss_node(Tape& tape, const std::vector<Tensor>& teacher_attn,
                          const std::vector<ValueId>& student_attn) {
    if (teacher_attn.size() != student_attn.size())
        throw ShapeError("ranking_loss: block counts differ");
    ValueId total = tape.constant(Tensor::scalar(0.0));
    for (std::size_t l = 0; l < teacher_attn.size(); ++l) {
        const ValueId teacher_map = tape.constant(ranking_map(teacher_attn[l]));
        const ValueId diff = tape.sub(tape.ranking_map(student_attn[l]), teacher_map);
        total = tape.add(total, tape.frobenius_norm(diff));
    }
    return total;
}

double dist_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, double temperature) {
    Tape tape;
    const ValueId node = dist_loss_node(tape, tape.constant(student_logits), teacher_logits,
                                        labels, temperature);
    return tape.value(node).values[0];
}

ValueId dist_loss_node(Tape& tape, ValueId student_logits, const Tensor& teacher_logits,
                       const std::vector<int>& labels, double temperature) {
    if (!(temperature > 0.0)) throw DomainError("dist_loss: temperature must be positive");
    const ValueId ce = tape.softmax_xent(student_logits, labels);
    const ValueId kl = tape.kl_teacher(student_logits, teacher_logits, temperature);
    return tape.add(ce, kl);
}

LossReport total_loss(double l_dist, double l_ranking, double lambda) {
    if (lambda < 0.0) throw DomainError("total_loss: lambda must be >= 0");
    LossReport report;
    report.l_dist = l_dist;
    report.l_ranking = l_ranking;
    report.lambda = lambda;
    report.total = l_dist + lambda * l_ranking;
    return report;
}

TeacherBundle::TeacherBundle(TinyVit teacher) : model(std::move(teacher)) {
    if (!model.cfg.precision.fully_real())
        throw ContractError("teacher must be real-valued (w32a32 everywhere)");
    for (Param* p : model.parameters()) p->trainable = false;
}

Tensor TeacherBundle::infer(const Tensor& image, TeacherAttention* attention) const {
    Tape tape;
    Binder bind(tape, /*trainable=*/false);
    std::vector<BlockRecord> records;
    const ValueId logits = model.forward(tape, bind, image, attention ? &records : nullptr);
    if (attention) {
        for (const BlockRecord& rec : records) {
            attention->scores.push_back(tape.value(rec.attention.scores));
            attention->attn.push_back(tape.value(rec.attention.attn));
        }
    }
    return tape.value(logits);
}

} // namespace bivit
