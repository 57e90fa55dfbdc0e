#include "bivit/tape.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>

#include "bivit/bitmatrix.hpp"
#include "bivit/errors.hpp"

namespace bivit {

KernelCounters& kernel_counters() {
    static KernelCounters counters;
    return counters;
}

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// C[m,n] += A[m,k] * B[k,n]
void mm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
           std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[l];
            if (av == 0.0) continue;
            const double* b = B + l * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
           std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += a[l] * b[l];
            c[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
void mm_tn(const double* A, const double* B, double* C, std::size_t k, std::size_t m,
           std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = A[l * m + i];
            if (av == 0.0) continue;
            const double* b = B + l * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

#ifndef NDEBUG
bool all_pm1(const Tensor& t) {
    for (double v : t.values) {
        if (v != 1.0 && v != -1.0) return false;
    }
    return true;
}
bool all_01(const Tensor& t) {
    for (double v : t.values) {
        if (v != 0.0 && v != 1.0) return false;
    }
    return true;
}
#endif

} // namespace

ValueId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, ValueId)> back) {
#ifndef NDEBUG
    assert(value.all_finite() && "tape op produced a non-finite value");
#endif
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(back)});
    return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Tape::grad_slot(ValueId id) {
    if (grads_[id].values.empty() && nodes_[id].value.size() > 0) {
        grads_[id] = Tensor::zeros(nodes_[id].value.shape);
    } else if (grads_[id].shape.empty() && nodes_[id].value.rank() == 0 &&
               grads_[id].values.empty()) {
        grads_[id] = Tensor::scalar(0.0);
    }
    return grads_[id];
}

bool Tape::has_grad(ValueId id) const { return !grads_[id].values.empty(); }

const Tensor& Tape::grad(ValueId id) { return grad_slot(id); }

void Tape::accum(ValueId id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& slot = grad_slot(id);
    for (std::size_t i = 0; i < g.values.size(); ++i) slot.values[i] += g.values[i];
}

void Tape::accum_scaled(ValueId id, const Tensor& g, double c) {
    if (!nodes_[id].requires_grad) return;
    Tensor& slot = grad_slot(id);
    for (std::size_t i = 0; i < g.values.size(); ++i) slot.values[i] += c * g.values[i];
}

void Tape::backward(ValueId loss) {
    if (nodes_[loss].value.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(nodes_[loss].value.shape));
    grads_.assign(nodes_.size(), Tensor{});
    grad_slot(loss).values[0] = 1.0;
    for (ValueId id = loss; id >= 0; --id) {
        if (!has_grad(id)) continue;
        if (nodes_[id].back) nodes_[id].back(*this, id);
    }
    backward_done_ = true;
}

ValueId Tape::leaf(Tensor v) { return push(std::move(v), true, nullptr); }

ValueId Tape::constant(Tensor v) { return push(std::move(v), false, nullptr); }

ValueId Tape::add(ValueId a, ValueId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) throw ShapeError("add: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    Tensor out(va.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = va.values[i] + vb.values[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        t.accum(a, g);
        t.accum(b, g);
    });
}

ValueId Tape::sub(ValueId a, ValueId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) throw ShapeError("sub: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    Tensor out(va.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = va.values[i] - vb.values[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        t.accum(a, g);
        t.accum_scaled(b, g, -1.0);
    });
}

ValueId Tape::mul(ValueId a, ValueId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) throw ShapeError("mul: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    Tensor out(va.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = va.values[i] * vb.values[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& slot = t.grad_slot(a);
            for (std::size_t i = 0; i < g.size(); ++i) slot.values[i] += g.values[i] * vb.values[i];
        }
        if (t.requires_grad(b)) {
            Tensor& slot = t.grad_slot(b);
            for (std::size_t i = 0; i < g.size(); ++i) slot.values[i] += g.values[i] * va.values[i];
        }
    });
}

ValueId Tape::scale(ValueId a, double c) {
    const Tensor& va = value(a);
    Tensor out(va.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = c * va.values[i];
    return push(std::move(out), requires_grad(a), [a, c](Tape& t, ValueId self) {
        t.accum_scaled(a, t.grads_[self], c);
    });
}

ValueId Tape::add_bias(ValueId x, ValueId bias) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(bias);
    if (vx.rank() < 1 || vb.rank() != 1 || vx.shape.back() != vb.dim(0))
        throw ShapeError("add_bias: " + shape_str(vx.shape) + " vs " + shape_str(vb.shape));
    const std::size_t c = vb.dim(0);
    Tensor out(vx.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = vx.values[i] + vb.values[i % c];
    const bool rg = requires_grad(x) || requires_grad(bias);
    return push(std::move(out), rg, [x, bias, c](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        t.accum(x, g);
        if (t.requires_grad(bias)) {
            Tensor& slot = t.grad_slot(bias);
            for (std::size_t i = 0; i < g.size(); ++i) slot.values[i % c] += g.values[i];
        }
    });
}

ValueId Tape::lead_scale(ValueId x, ValueId s) {
    const Tensor& vx = value(x);
    const Tensor& vs = value(s);
    if (vx.rank() < 1 || vs.rank() != 1 || vs.dim(0) != vx.dim(0))
        throw ShapeError("lead_scale: " + shape_str(vx.shape) + " vs " + shape_str(vs.shape));
    const std::size_t h = vx.dim(0);
    const std::size_t stride = vx.size() / h;
    Tensor out(vx.shape);
    for (std::size_t i = 0; i < h; ++i) {
        const double sv = vs.values[i];
        for (std::size_t j = 0; j < stride; ++j)
            out.values[i * stride + j] = sv * vx.values[i * stride + j];
    }
    const bool rg = requires_grad(x) || requires_grad(s);
    return push(std::move(out), rg, [x, s, h, stride](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& vx = t.value(x);
        const Tensor& vs = t.value(s);
        if (t.requires_grad(x)) {
            Tensor& slot = t.grad_slot(x);
            for (std::size_t i = 0; i < h; ++i) {
                const double sv = vs.values[i];
                for (std::size_t j = 0; j < stride; ++j)
                    slot.values[i * stride + j] += sv * g.values[i * stride + j];
            }
        }
        if (t.requires_grad(s)) {
            Tensor& slot = t.grad_slot(s);
            for (std::size_t i = 0; i < h; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < stride; ++j)
                    acc += g.values[i * stride + j] * vx.values[i * stride + j];
                slot.values[i] += acc;
            }
        }
    });
}

ValueId Tape::channel_scale(ValueId x, ValueId s) {
    const Tensor& vx = value(x);
    const Tensor& vs = value(s);
    if (vx.rank() < 1 || vs.rank() != 1 || vs.dim(0) != vx.shape.back())
        throw ShapeError("channel_scale: " + shape_str(vx.shape) + " vs " + shape_str(vs.shape));
    const std::size_t c = vs.dim(0);
    Tensor out(vx.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = vx.values[i] * vs.values[i % c];
    const bool rg = requires_grad(x) || requires_grad(s);
    return push(std::move(out), rg, [x, s, c](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& vx = t.value(x);
        const Tensor& vs = t.value(s);
        if (t.requires_grad(x)) {
            Tensor& slot = t.grad_slot(x);
            for (std::size_t i = 0; i < g.size(); ++i)
                slot.values[i] += g.values[i] * vs.values[i % c];
        }
        if (t.requires_grad(s)) {
            Tensor& slot = t.grad_slot(s);
            for (std::size_t i = 0; i < g.size(); ++i)
                slot.values[i % c] += g.values[i] * vx.values[i];
        }
    });
}

namespace {

struct MatmulDims {
    std::size_t batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool trans_b, const char* who) {
    if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3))
        throw ShapeError(std::string(who) + ": ranks must both be 2 or 3, got " +
                         shape_str(a.shape) + " vs " + shape_str(b.shape));
    MatmulDims d{};
    d.batch = a.rank() == 3 ? a.dim(0) : 1;
    if (a.rank() == 3 && b.dim(0) != d.batch)
        throw ShapeError(std::string(who) + ": batch dims differ");
    const std::size_t off = a.rank() == 3 ? 1 : 0;
    d.m = a.dim(off);
    d.k = a.dim(off + 1);
    const std::size_t bk = trans_b ? b.dim(off + 1) : b.dim(off);
    d.n = trans_b ? b.dim(off) : b.dim(off + 1);
    if (bk != d.k)
        throw ShapeError(std::string(who) + ": inner dims differ, " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
    return d;
}

std::vector<std::size_t> matmul_shape(const Tensor& a, const MatmulDims& d) {
    if (a.rank() == 3) return {d.batch, d.m, d.n};
    return {d.m, d.n};
}

} // namespace

ValueId Tape::matmul(ValueId a, ValueId b, bool trans_b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    const MatmulDims d = matmul_dims(va, vb, trans_b, "matmul");
    Tensor out(matmul_shape(va, d));
    for (std::size_t s = 0; s < d.batch; ++s) {
        const double* A = va.values.data() + s * d.m * d.k;
        const double* B = vb.values.data() + s * (trans_b ? d.n * d.k : d.k * d.n);
        double* C = out.values.data() + s * d.m * d.n;
        if (trans_b)
            mm_nt(A, B, C, d.m, d.k, d.n);
        else
            mm_nn(A, B, C, d.m, d.k, d.n);
    }
    kernel_counters().dense_matmul += d.batch;
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, d, trans_b](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        const std::size_t bstride = trans_b ? d.n * d.k : d.k * d.n;
        if (t.requires_grad(a)) {
            Tensor& da = t.grad_slot(a);
            for (std::size_t s = 0; s < d.batch; ++s) {
                const double* G = g.values.data() + s * d.m * d.n;
                const double* B = vb.values.data() + s * bstride;
                double* DA = da.values.data() + s * d.m * d.k;
                if (trans_b)
                    mm_nn(G, B, DA, d.m, d.n, d.k);  // dA = G * B
                else
                    mm_nt(G, B, DA, d.m, d.n, d.k);  // dA = G * B^T
            }
        }
        if (t.requires_grad(b)) {
            Tensor& db = t.grad_slot(b);
            for (std::size_t s = 0; s < d.batch; ++s) {
                const double* G = g.values.data() + s * d.m * d.n;
                const double* A = va.values.data() + s * d.m * d.k;
                double* DB = db.values.data() + s * bstride;
                if (trans_b)
                    mm_tn(G, A, DB, d.m, d.n, d.k);  // dB = G^T * A
                else
                    mm_tn(A, G, DB, d.m, d.k, d.n);  // dB = A^T * G
            }
        }
    });
}

ValueId Tape::binary_matmul(ValueId a, ValueId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
#ifndef NDEBUG
    assert(all_pm1(va) && all_pm1(vb) && "binary_matmul operands must be +-1 valued");
#endif
    const MatmulDims d = matmul_dims(va, vb, /*trans_b=*/true, "binary_matmul");
    Tensor out(matmul_shape(va, d));
    for (std::size_t s = 0; s < d.batch; ++s) {
        const BitMatrix pa = pack_signs({va.values.data() + s * d.m * d.k, d.m * d.k}, d.m, d.k);
        const BitMatrix pb = pack_signs({vb.values.data() + s * d.n * d.k, d.n * d.k}, d.n, d.k);
        const IntMatrix prod = xnor_popcount_gemm(pa, pb);
        double* C = out.values.data() + s * d.m * d.n;
        for (std::size_t i = 0; i < d.m * d.n; ++i) C[i] = static_cast<double>(prod.data[i]);
    }
    kernel_counters().bit_matmul += d.batch;
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, d](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& da = t.grad_slot(a);
            for (std::size_t s = 0; s < d.batch; ++s)
                mm_nn(g.values.data() + s * d.m * d.n, vb.values.data() + s * d.n * d.k,
                      da.values.data() + s * d.m * d.k, d.m, d.n, d.k);
        }
        if (t.requires_grad(b)) {
            Tensor& db = t.grad_slot(b);
            for (std::size_t s = 0; s < d.batch; ++s)
                mm_tn(g.values.data() + s * d.m * d.n, va.values.data() + s * d.m * d.k,
                      db.values.data() + s * d.n * d.k, d.m, d.n, d.k);
        }
    });
}

ValueId Tape::binary01_matmul(ValueId s, ValueId v) {
    const Tensor& vs = value(s);
    const Tensor& vv = value(v);
#ifndef NDEBUG
    assert(all_01(vs) && "binary01_matmul left operand must be 0/1 valued");
    assert(all_pm1(vv) && "binary01_matmul right operand must be +-1 valued");
#endif
    if (vs.rank() != 3 || vv.rank() != 3 || vs.dim(0) != vv.dim(0) || vs.dim(2) != vv.dim(1))
        throw ShapeError("binary01_matmul: " + shape_str(vs.shape) + " vs " + shape_str(vv.shape));
    const std::size_t batch = vs.dim(0), m = vs.dim(1), k = vs.dim(2), n = vv.dim(2);
    Tensor out({batch, m, n});
    std::vector<double> vt(n * k);
    BitMatrix ones(1, k);
    for (std::size_t w = 0; w < ones.words_per_row; ++w)
        ones.data[w] = (w + 1 == ones.words_per_row) ? ones.tail_mask : ~std::uint64_t{0};
    for (std::size_t h = 0; h < batch; ++h) {
        const double* S = vs.values.data() + h * m * k;
        const double* V = vv.values.data() + h * k * n;
        // Map {0,1} to {-1,+1} for the xnor kernel: s*v = ((2s-1)*v + sum(v))/2.
        std::vector<double> spm(m * k);
        for (std::size_t i = 0; i < m * k; ++i) spm[i] = 2.0 * S[i] - 1.0;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t l = 0; l < k; ++l) vt[j * k + l] = V[l * n + j];
        const BitMatrix ps = pack_signs(spm, m, k);
        const BitMatrix pv = pack_signs(vt, n, k);
        const IntMatrix prod = xnor_popcount_gemm(ps, pv);
        const IntMatrix colsum = xnor_popcount_gemm(ones, pv);
        double* C = out.values.data() + h * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                C[i * n + j] = 0.5 * (prod.at(i, j) + colsum.at(0, j));
    }
    kernel_counters().bit_matmul += 2 * batch;
    const bool rg = requires_grad(s) || requires_grad(v);
    return push(std::move(out), rg, [s, v, batch, m, k, n](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& vs = t.value(s);
        const Tensor& vv = t.value(v);
        if (t.requires_grad(s)) {
            Tensor& ds = t.grad_slot(s);
            for (std::size_t h = 0; h < batch; ++h)
                mm_nt(g.values.data() + h * m * n, vv.values.data() + h * k * n,
                      ds.values.data() + h * m * k, m, n, k);
        }
        if (t.requires_grad(v)) {
            Tensor& dv = t.grad_slot(v);
            for (std::size_t h = 0; h < batch; ++h)
                mm_tn(vs.values.data() + h * m * k, g.values.data() + h * m * n,
                      dv.values.data() + h * k * n, m, k, n);
        }
    });
}

ValueId Tape::transpose(ValueId a) {
    const Tensor& va = value(a);
    if (va.rank() != 2 && va.rank() != 3) throw ShapeError("transpose: rank must be 2 or 3");
    const std::size_t batch = va.rank() == 3 ? va.dim(0) : 1;
    const std::size_t off = va.rank() == 3 ? 1 : 0;
    const std::size_t m = va.dim(off), n = va.dim(off + 1);
    std::vector<std::size_t> shape = va.shape;
    std::swap(shape[off], shape[off + 1]);
    Tensor out(std::move(shape));
    for (std::size_t s = 0; s < batch; ++s) {
        const double* A = va.values.data() + s * m * n;
        double* C = out.values.data() + s * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) C[j * m + i] = A[i * n + j];
    }
    return push(std::move(out), requires_grad(a), [a, batch, m, n](Tape& t, ValueId self) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grads_[self];
        Tensor& da = t.grad_slot(a);
        for (std::size_t s = 0; s < batch; ++s) {
            const double* G = g.values.data() + s * m * n;
            double* D = da.values.data() + s * m * n;
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) D[i * n + j] += G[j * m + i];
        }
    });
}

ValueId Tape::reshape(ValueId a, std::vector<std::size_t> shape) {
    const Tensor& va = value(a);
    if (shape_size(shape) != va.size())
        throw ShapeError("reshape: size mismatch " + shape_str(va.shape) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), va.values);
    return push(std::move(out), requires_grad(a), [a](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        if (!t.requires_grad(a)) return;
        Tensor& da = t.grad_slot(a);
        for (std::size_t i = 0; i < g.size(); ++i) da.values[i] += g.values[i];
    });
}

ValueId Tape::concat_rows(ValueId a, ValueId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1))
        throw ShapeError("concat_rows: " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    const std::size_t ma = va.dim(0), mb = vb.dim(0), c = va.dim(1);
    Tensor out({ma + mb, c});
    std::copy(va.values.begin(), va.values.end(), out.values.begin());
    std::copy(vb.values.begin(), vb.values.end(), out.values.begin() + ma * c);
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b, ma, mb, c](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        if (t.requires_grad(a)) {
            Tensor& da = t.grad_slot(a);
            for (std::size_t i = 0; i < ma * c; ++i) da.values[i] += g.values[i];
        }
        if (t.requires_grad(b)) {
            Tensor& db = t.grad_slot(b);
            for (std::size_t i = 0; i < mb * c; ++i) db.values[i] += g.values[ma * c + i];
        }
    });
}

ValueId Tape::rows(ValueId a, std::size_t first, std::size_t count) {
    const Tensor& va = value(a);
    if (va.rank() != 2 || first + count > va.dim(0)) throw ShapeError("rows: slice out of range");
    const std::size_t c = va.dim(1);
    Tensor out({count, c});
    std::copy(va.values.begin() + first * c, va.values.begin() + (first + count) * c,
              out.values.begin());
    return push(std::move(out), requires_grad(a), [a, first, count, c](Tape& t, ValueId self) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grads_[self];
        Tensor& da = t.grad_slot(a);
        for (std::size_t i = 0; i < count * c; ++i) da.values[first * c + i] += g.values[i];
    });
}

ValueId Tape::stack_rows(const std::vector<ValueId>& items) {
    if (items.empty()) throw ShapeError("stack_rows: no rows");
    const std::size_t c = value(items[0]).size();
    bool rg = false;
    for (ValueId id : items) {
        const Tensor& v = value(id);
        if (v.rank() != 1 || v.dim(0) != c) throw ShapeError("stack_rows: rows must be rank-1, equal length");
        rg = rg || requires_grad(id);
    }
    Tensor out({items.size(), c});
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(value(items[i]).values.begin(), value(items[i]).values.end(),
                  out.values.begin() + i * c);
    return push(std::move(out), rg, [items, c](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!t.requires_grad(items[i])) continue;
            Tensor& d = t.grad_slot(items[i]);
            for (std::size_t j = 0; j < c; ++j) d.values[j] += g.values[i * c + j];
        }
    });
}

ValueId Tape::split_heads(ValueId x, std::size_t heads) {
    const Tensor& vx = value(x);
    if (vx.rank() != 2 || vx.dim(1) % heads != 0)
        throw ShapeError("split_heads: " + shape_str(vx.shape) + " with h=" + std::to_string(heads));
    const std::size_t tkn = vx.dim(0), d = vx.dim(1) / heads;
    Tensor out({heads, tkn, d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < tkn; ++t)
            for (std::size_t c = 0; c < d; ++c)
                out.values[(h * tkn + t) * d + c] = vx.values[t * heads * d + h * d + c];
    return push(std::move(out), requires_grad(x), [x, heads, tkn, d](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        Tensor& dx = t.grad_slot(x);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t tk = 0; tk < tkn; ++tk)
                for (std::size_t c = 0; c < d; ++c)
                    dx.values[tk * heads * d + h * d + c] += g.values[(h * tkn + tk) * d + c];
    });
}

ValueId Tape::merge_heads(ValueId x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) throw ShapeError("merge_heads: expected rank 3, got " + shape_str(vx.shape));
    const std::size_t heads = vx.dim(0), tkn = vx.dim(1), d = vx.dim(2);
    Tensor out({tkn, heads * d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < tkn; ++t)
            for (std::size_t c = 0; c < d; ++c)
                out.values[t * heads * d + h * d + c] = vx.values[(h * tkn + t) * d + c];
    return push(std::move(out), requires_grad(x), [x, heads, tkn, d](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        Tensor& dx = t.grad_slot(x);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t tk = 0; tk < tkn; ++tk)
                for (std::size_t c = 0; c < d; ++c)
                    dx.values[(h * tkn + tk) * d + c] += g.values[tk * heads * d + h * d + c];
    });
}

ValueId Tape::mean_all(ValueId a) {
    const Tensor& va = value(a);
    if (va.size() == 0) throw ShapeError("mean_all: empty tensor");
    double acc = 0.0;
    for (double v : va.values) acc += v;
    const double inv = 1.0 / static_cast<double>(va.size());
    Tensor out = Tensor::scalar(acc * inv);
    return push(std::move(out), requires_grad(a), [a, inv](Tape& t, ValueId self) {
        if (!t.requires_grad(a)) return;
        const double g = t.grads_[self].values[0] * inv;
        Tensor& da = t.grad_slot(a);
        for (double& v : da.values) v += g;
    });
}

ValueId Tape::sum_all(ValueId a) {
    const Tensor& va = value(a);
    double acc = 0.0;
    for (double v : va.values) acc += v;
    Tensor out = Tensor::scalar(acc);
    return push(std::move(out), requires_grad(a), [a](Tape& t, ValueId self) {
        if (!t.requires_grad(a)) return;
        const double g = t.grads_[self].values[0];
        Tensor& da = t.grad_slot(a);
        for (double& v : da.values) v += g;
    });
}

ValueId Tape::layernorm(ValueId x, ValueId gamma, ValueId beta, double eps) {
    const Tensor& vx = value(x);
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    if (vx.rank() < 1 || vg.rank() != 1 || vb.rank() != 1 || vg.dim(0) != vx.shape.back() ||
        vb.dim(0) != vx.shape.back())
        throw ShapeError("layernorm: " + shape_str(vx.shape) + " with gamma " + shape_str(vg.shape));
    const std::size_t c = vx.shape.back();
    const std::size_t n = vx.size() / c;
    Tensor out(vx.shape);
    Tensor xhat(vx.shape);
    std::vector<double> inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = vx.values.data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (row[j] - mu) * is;
            xhat.values[r * c + j] = xh;
            out.values[r * c + j] = vg.values[j] * xh + vb.values[j];
        }
    }
    const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    return push(std::move(out), rg,
                [x, gamma, beta, c, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& vg = t.value(gamma);
        if (t.requires_grad(beta)) {
            Tensor& db = t.grad_slot(beta);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) db.values[j] += g.values[r * c + j];
        }
        if (t.requires_grad(gamma)) {
            Tensor& dg = t.grad_slot(gamma);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j)
                    dg.values[j] += g.values[r * c + j] * xhat.values[r * c + j];
        }
        if (t.requires_grad(x)) {
            Tensor& dx = t.grad_slot(x);
            for (std::size_t r = 0; r < n; ++r) {
                double mean_gh = 0.0, mean_ghx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double gh = g.values[r * c + j] * vg.values[j];
                    mean_gh += gh;
                    mean_ghx += gh * xhat.values[r * c + j];
                }
                mean_gh /= static_cast<double>(c);
                mean_ghx /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double gh = g.values[r * c + j] * vg.values[j];
                    dx.values[r * c + j] +=
                        inv_std[r] * (gh - mean_gh - xhat.values[r * c + j] * mean_ghx);
                }
            }
        }
    });
}

ValueId Tape::gelu(ValueId x) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = vx.values[i];
        out.values[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    return push(std::move(out), requires_grad(x), [x](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        const Tensor& vx = t.value(x);
        Tensor& dx = t.grad_slot(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = vx.values[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            dx.values[i] += g.values[i] * (cdf + v * pdf);
        }
    });
}

ValueId Tape::softmax(ValueId x) {
    const Tensor& vx = value(x);
    if (vx.rank() < 1) throw ShapeError("softmax: scalar input");
    const std::size_t c = vx.shape.back();
    const std::size_t n = vx.size() / c;
    Tensor out(vx.shape);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = vx.values.data() + r * c;
        double* orow = out.values.data() + r * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (std::size_t j = 0; j < c; ++j) orow[j] /= denom;
    }
    return push(std::move(out), requires_grad(x), [x, c, n](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        const Tensor& y = t.value(self);
        Tensor& dx = t.grad_slot(x);
        // Full Jacobian: dx_i = y_i * (g_i - sum_j g_j y_j).
        for (std::size_t r = 0; r < n; ++r) {
            const double* yr = y.values.data() + r * c;
            const double* gr = g.values.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < c; ++j) dx.values[r * c + j] += yr[j] * (gr[j] - dot);
        }
    });
}

namespace {

// alpha entries broadcast per leading slice when alpha has one entry per
// slice, or globally when it has a single entry.
double broadcast_entry(const Tensor& v, std::size_t slice) {
    return v.size() == 1 ? v.values[0] : v.values[slice];
}

void check_lead_broadcast(const Tensor& x, const Tensor& a, const char* who) {
    if (a.size() == 1) return;
    if (x.rank() >= 1 && a.rank() == 1 && a.dim(0) == x.dim(0)) return;
    throw ShapeError(std::string(who) + ": cannot broadcast " + shape_str(a.shape) + " over " +
                     shape_str(x.shape));
}

} // namespace

ValueId Tape::sign_ste(ValueId x, ValueId alpha) {
    const Tensor& vx = value(x);
    const Tensor& va = value(alpha);
    check_lead_broadcast(vx, va, "sign_ste");
    for (double v : va.values)
        if (!(v > 0.0)) throw DomainError("sign_ste: alpha must be positive");
    const std::size_t slices = va.size() == 1 ? 1 : vx.dim(0);
    const std::size_t stride = vx.size() / slices;
    Tensor out(vx.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = vx.values[i] >= 0.0 ? 1.0 : -1.0;
    return push(std::move(out), requires_grad(x), [x, alpha, slices, stride](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        const Tensor& vx = t.value(x);
        const Tensor& va = t.value(alpha);
        Tensor& dx = t.grad_slot(x);
        for (std::size_t s = 0; s < slices; ++s) {
            const double a = broadcast_entry(va, s);
            for (std::size_t j = 0; j < stride; ++j) {
                const std::size_t i = s * stride + j;
                if (std::abs(vx.values[i]) <= a) dx.values[i] += g.values[i];
            }
        }
    });
}

ValueId Tape::threshold_ste(ValueId x, ValueId tau, ValueId alpha) {
    const Tensor& vx = value(x);
    const Tensor& vt = value(tau);
    const Tensor& va = value(alpha);
    check_lead_broadcast(vx, vt, "threshold_ste");
    check_lead_broadcast(vx, va, "threshold_ste");
    for (double v : va.values)
        if (!(v > 0.0)) throw DomainError("threshold_ste: alpha must be positive");
    const std::size_t slices = vx.rank() >= 1 ? vx.dim(0) : 1;
    const std::size_t stride = vx.size() / slices;
    Tensor out(vx.shape);
    for (std::size_t s = 0; s < slices; ++s) {
        const double th = broadcast_entry(vt, s);
        for (std::size_t j = 0; j < stride; ++j) {
            const std::size_t i = s * stride + j;
            out.values[i] = vx.values[i] >= th ? 1.0 : 0.0;
        }
    }
    const bool rg = requires_grad(x) || requires_grad(tau);
    return push(std::move(out), rg, [x, tau, alpha, slices, stride](Tape& t, ValueId self) {
        const Tensor& g = t.grads_[self];
        const Tensor& vx = t.value(x);
        const Tensor& vt = t.value(tau);
        const Tensor& va = t.value(alpha);
        const bool need_x = t.requires_grad(x);
        const bool need_tau = t.requires_grad(tau);
        Tensor* dx = need_x ? &t.grad_slot(x) : nullptr;
        Tensor* dtau = need_tau ? &t.grad_slot(tau) : nullptr;
        for (std::size_t s = 0; s < slices; ++s) {
            const double th = broadcast_entry(vt, s);
            const double a = broadcast_entry(va, s);
            double tau_acc = 0.0;
            for (std::size_t j = 0; j < stride; ++j) {
                const std::size_t i = s * stride + j;
                if (std::abs(vx.values[i] - th) <= a) {
                    if (need_x) dx->values[i] += g.values[i];
                    tau_acc += g.values[i];
                }
            }
            if (need_tau) dtau->values[vt.size() == 1 ? 0 : s] -= tau_acc;
        }
    });
}

ValueId Tape::softmax_xent(ValueId logits, std::vector<int> labels) {
    const Tensor& vx = value(logits);
    if (vx.rank() != 2 || vx.dim(0) != labels.size())
        throw ShapeError("softmax_xent: logits " + shape_str(vx.shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
    const std::size_t b = vx.dim(0), k = vx.dim(1);
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k) throw DomainError("softmax_xent: label out of range");
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const double* row = vx.values.data() + r * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
        loss += mx + std::log(denom) - row[static_cast<std::size_t>(labels[r])];
    }
    loss /= static_cast<double>(b);
    return push(Tensor::scalar(loss), requires_grad(logits),
                [logits, labels = std::move(labels), b, k](Tape& t, ValueId self) {
        if (!t.requires_grad(logits)) return;
        const double g = t.grads_[self].values[0] / static_cast<double>(b);
        const Tensor& vx = t.value(logits);
        Tensor& dx = t.grad_slot(logits);
        for (std::size_t r = 0; r < b; ++r) {
            const double* row = vx.values.data() + r * k;
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < k; ++j) {
                const double p = std::exp(row[j] - mx) / denom;
                const double onehot = (static_cast<std::size_t>(labels[r]) == j) ? 1.0 : 0.0;
                dx.values[r * k + j] += g * (p - onehot);
            }
        }
    });
}

namespace {

void softened_probs(const double* row, std::size_t k, double temp, double* out) {
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        out[j] = std::exp((row[j] - mx) / temp);
        denom += out[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[j] /= denom;
}

} // namespace

ValueId Tape::kl_teacher(ValueId student_logits, Tensor teacher_logits, double temperature) {
    const Tensor& vs = value(student_logits);
    if (!(temperature > 0.0)) throw DomainError("kl_teacher: temperature must be positive");
    if (!vs.same_shape(teacher_logits))
        throw ShapeError("kl_teacher: " + shape_str(vs.shape) + " vs " +
                         shape_str(teacher_logits.shape));
    const std::size_t b = vs.dim(0), k = vs.dim(1);
    std::vector<double> p(k), q(k);
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        softened_probs(teacher_logits.values.data() + r * k, k, temperature, p.data());
        softened_probs(vs.values.data() + r * k, k, temperature, q.data());
        for (std::size_t j = 0; j < k; ++j) {
            if (p[j] > 0.0) loss += p[j] * (std::log(p[j]) - std::log(q[j]));
        }
    }
    loss *= temperature * temperature / static_cast<double>(b);
    return push(Tensor::scalar(loss), requires_grad(student_logits),
                [student_logits, teacher = std::move(teacher_logits), temperature, b,
                 k](Tape& t, ValueId self) {
        if (!t.requires_grad(student_logits)) return;
        const double g = t.grads_[self].values[0] * temperature / static_cast<double>(b);
        const Tensor& vs = t.value(student_logits);
        Tensor& dx = t.grad_slot(student_logits);
        std::vector<double> p(k), q(k);
        for (std::size_t r = 0; r < b; ++r) {
            softened_probs(teacher.values.data() + r * k, k, temperature, p.data());
            softened_probs(vs.values.data() + r * k, k, temperature, q.data());
            for (std::size_t j = 0; j < k; ++j) dx.values[r * k + j] += g * (q[j] - p[j]);
        }
    });
}

ValueId Tape::ranking_map(ValueId x) {
    const Tensor& vx = value(x);
    if (vx.rank() != 3) throw ShapeError("ranking_map: expected [h,N,M], got " + shape_str(vx.shape));
    const std::size_t h = vx.dim(0), nrows = vx.dim(1), m = vx.dim(2);
    if (nrows < 2) throw DomainError("ranking_map: need at least 2 rows");
    Tensor out(vx.shape);
    for (std::size_t s = 0; s < h; ++s) {
        for (std::size_t r = 0; r < nrows; ++r) {
            const std::size_t prev = (r == 0) ? nrows - 1 : r - 1;
            const double* cur = vx.values.data() + (s * nrows + r) * m;
            const double* pre = vx.values.data() + (s * nrows + prev) * m;
            double* o = out.values.data() + (s * nrows + r) * m;
            for (std::size_t j = 0; j < m; ++j) o[j] = cur[j] - pre[j];
        }
    }
    return push(std::move(out), requires_grad(x), [x, h, nrows, m](Tape& t, ValueId self) {
        if (!t.requires_grad(x)) return;
        const Tensor& g = t.grads_[self];
        Tensor& dx = t.grad_slot(x);
        for (std::size_t s = 0; s < h; ++s) {
            for (std::size_t r = 0; r < nrows; ++r) {
                const std::size_t next = (r + 1) % nrows;
                const double* gc = g.values.data() + (s * nrows + r) * m;
                const double* gn = g.values.data() + (s * nrows + next) * m;
                double* d = dx.values.data() + (s * nrows + r) * m;
                for (std::size_t j = 0; j < m; ++j) d[j] += gc[j] - gn[j];
            }
        }
    });
}

ValueId Tape::frobenius_norm(ValueId x) {
    const Tensor& vx = value(x);
    double acc = 0.0;
    for (double v : vx.values) acc += v * v;
    const double norm = std::sqrt(acc);
    return push(Tensor::scalar(norm), requires_grad(x), [x, norm](Tape& t, ValueId self) {
        if (!t.requires_grad(x) || norm == 0.0) return;
        const double g = t.grads_[self].values[0] / norm;
        const Tensor& vx = t.value(x);
        Tensor& dx = t.grad_slot(x);
        for (std::size_t i = 0; i < vx.size(); ++i) dx.values[i] += g * vx.values[i];
    });
}

} // namespace bivit
