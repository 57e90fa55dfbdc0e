#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bivit/tensor.hpp"

namespace bivit {

using ValueId = std::int32_t;

// Forward-kernel invocation counts. Layer tests assert that w1a1 paths
// consume only bit-packed products (plus scales), never dense GEMMs.
struct KernelCounters {
    std::uint64_t dense_matmul = 0;
    std::uint64_t bit_matmul = 0;
    void reset() { *this = KernelCounters{}; }
};
KernelCounters& kernel_counters();

// STE clip half-width. alpha is broadcast against the binarized tensor:
// a single entry applies everywhere, a length-H vector applies per leading
// slice (one scale per head).
struct SteSpec {
    Tensor alpha;
};

// Reverse-mode tape over dense tensors. Nodes are recorded in forward
// (topological) order; backward replays them in exact reverse order with a
// fixed accumulation schedule, so gradients are bit-identical across runs.
// A tape is single-threaded; independent tapes may run concurrently.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ValueId leaf(Tensor v);      // parameter input, receives gradient
    ValueId constant(Tensor v);  // data input, no gradient

    ValueId add(ValueId a, ValueId b);
    ValueId sub(ValueId a, ValueId b);
    ValueId mul(ValueId a, ValueId b);
    ValueId scale(ValueId a, double c);
    ValueId add_bias(ValueId x, ValueId bias);       // x[...,C] + bias[C]
    ValueId lead_scale(ValueId x, ValueId s);        // x[H,...] * s[H] per slice
    ValueId channel_scale(ValueId x, ValueId s);     // x[...,C] * s[C] per channel

    // Dense product; rank 2 or batched rank 3. trans_b selects a[.,m,k]*b[.,n,k]^T.
    ValueId matmul(ValueId a, ValueId b, bool trans_b = false);
    // a[.,m,k]*b[.,n,k]^T for +-1 valued operands, executed via xnor/popcount
    // bit kernels. Backward is the ordinary dense matmul rule.
    ValueId binary_matmul(ValueId a, ValueId b);
    // s[H,m,k] in {0,1} times v[H,k,n] in {-1,+1}, executed as two bit-kernel
    // passes via s*v = ((2s-1)*v + colsum(v)) / 2.
    ValueId binary01_matmul(ValueId s, ValueId v);

    ValueId transpose(ValueId a);                    // last two dims
    ValueId reshape(ValueId a, std::vector<std::size_t> shape);
    ValueId concat_rows(ValueId a, ValueId b);       // [m,C]+[n,C] -> [m+n,C]
    ValueId rows(ValueId a, std::size_t first, std::size_t count);
    ValueId stack_rows(const std::vector<ValueId>& items);  // n x [C] -> [n,C]
    ValueId split_heads(ValueId x, std::size_t heads);      // [T,h*d] -> [h,T,d]
    ValueId merge_heads(ValueId x);                         // [h,T,d] -> [T,h*d]

    ValueId mean_all(ValueId a);
    ValueId sum_all(ValueId a);
    ValueId layernorm(ValueId x, ValueId gamma, ValueId beta, double eps = 1e-5);
    ValueId gelu(ValueId x);
    ValueId softmax(ValueId x);  // along last dim; full-Jacobian backward

    // Forward sign(x) in {-1,+1} with sign(0) := +1. Backward multiplies the
    // upstream gradient by 1_{|x| <= alpha}; the boundary passes gradient.
    // alpha itself receives no gradient through this op.
    ValueId sign_ste(ValueId x, ValueId alpha);
    // Forward 1_{x >= tau} in {0,1}; clip window [tau - alpha, tau + alpha].
    // tau receives the negated masked upstream sum per leading slice.
    ValueId threshold_ste(ValueId x, ValueId tau, ValueId alpha);

    // Mean cross-entropy over the batch, log-sum-exp stabilized.
    ValueId softmax_xent(ValueId logits, std::vector<int> labels);
    // T^2-scaled mean KL(teacher || student) between temperature-softened
    // distributions; the teacher side is a fixed tensor.
    ValueId kl_teacher(ValueId student_logits, Tensor teacher_logits, double temperature);

    // Circular first difference over the row axis of x[h,N,M]:
    // y[:,n,:] = x[:,n,:] - x[:,n-1,:], row 0 wrapping to row N-1.
    ValueId ranking_map(ValueId x);
    ValueId frobenius_norm(ValueId x);

    const Tensor& value(ValueId id) const { return nodes_[id].value; }
    bool requires_grad(ValueId id) const { return nodes_[id].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // loss must be scalar. Clears previous gradients.
    void backward(ValueId loss);
    bool backward_done() const { return backward_done_; }
    bool has_grad(ValueId id) const;
    const Tensor& grad(ValueId id);  // zeros of matching shape if untouched

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::function<void(Tape&, ValueId)> back;  // reads grad(self), accumulates into inputs
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool backward_done_ = false;

    ValueId push(Tensor value, bool requires_grad, std::function<void(Tape&, ValueId)> back);
    void accum(ValueId id, const Tensor& g);
    void accum_scaled(ValueId id, const Tensor& g, double c);
    Tensor& grad_slot(ValueId id);
};

} // namespace bivit
