#pragma once

#include <vector>

#include "bivit/layers.hpp"
#include "bivit/tape.hpp"
#include "bivit/tensor.hpp"

namespace bivit {

// Decomposed objective values for one step; total is exactly
// l_dist + lambda * l_ranking.
struct LossReport {
    double l_dist = 0.0;
    double l_ranking = 0.0;
    double lambda = 0.0;
    double total = 0.0;
};

// Circular first difference over the row axis of a [h,N,M] attention map:
// row n minus row n-1, with row 0 wrapping to row N-1. Linear, and its rows
// telescope to zero.
Tensor ranking_map(const Tensor& attention);

// Sum over blocks of the Frobenius norm of the ranking-map difference
// between teacher and student attention.
double ranking_loss(const std::vector<Tensor>& teacher_attn,
                    const std::vector<Tensor>& student_attn);

// Tape flavor used during training; the teacher maps enter as constants.
ValueId ranking_loss_node(Tape& tape, const std::vector<Tensor>& teacher_attn,
                          const std::vector<ValueId>& student_attn);

// Cross-entropy against the labels plus temperature-softened KL from the
// frozen teacher, equally weighted.
double dist_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                 const std::vector<int>& labels, double temperature);
ValueId dist_loss_node(Tape& tape, ValueId student_logits, const Tensor& teacher_logits,
                       const std::vector<int>& labels, double temperature);

LossReport total_loss(double l_dist, double l_ranking, double lambda);

// Attention maps captured from one frozen-teacher forward.
struct TeacherAttention {
    std::vector<Tensor> scores;  // per block, [h,T,T] pre-softmax
    std::vector<Tensor> attn;    // per block, [h,T,T] post-softmax
};

// Frozen real-valued teacher. Runs forwards without recording gradients and
// caches per-block attention for the current batch.
struct TeacherBundle {
    TinyVit model;

    explicit TeacherBundle(TinyVit teacher);

    // Logits [K] plus attention maps for one image.
    Tensor infer(const Tensor& image, TeacherAttention* attention) const;
};

} // namespace bivit
