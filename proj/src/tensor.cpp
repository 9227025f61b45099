#include "traff/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace traff {

using detail::TensorNode;

namespace {

// Graph buffers run to megabytes; keep them in the heap arena instead of
// mmap/munmap round trips per op.
const int malloc_tuning = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return 0;
}();

}  // namespace

int64_t shape_size(const Shape& shape) {
    int64_t n = 1;
    for (const int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    for (const int64_t d : shape) {
        if (d <= 0) throw ShapeError("shape extents must be positive, got " + shape_str(shape));
    }
}

void check_finite(const std::vector<double>& v, const char* op) {
    for (const double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("op '") + op + "' produced a non-finite value");
        }
    }
}

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

Tensor wrap(std::shared_ptr<TensorNode> n);

// All ops funnel through here: propagates requires_grad, validates finiteness,
// and only records the graph edges when differentiation can need them.
Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<TensorNode>> parents,
               std::function<void(TensorNode&)> backprop) {
    if (shape_size(shape) != static_cast<int64_t>(value.size())) {
        throw ShapeError(std::string("op '") + name + "' produced " +
                         std::to_string(value.size()) + " values for shape " + shape_str(shape));
    }
    check_finite(value, name);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto n = new_node(std::move(shape), std::move(value));
    n->op = name;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return wrap(n);
}

struct AccumGuard {
    // Adds into a parent grad only when that parent participates in the graph.
    static void add(TensorNode& p, int64_t i, double v) {
        if (p.requires_grad) p.grad[static_cast<size_t>(i)] += v;
    }
};

void prepare_parent_grads(TensorNode& out) {
    for (auto& p : out.parents) {
        if (p->requires_grad) p->ensure_grad();
    }
}

}  // namespace

Tensor wrap_node(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

namespace {
Tensor wrap(std::shared_ptr<TensorNode> n) { return wrap_node(std::move(n)); }
}  // namespace

// --- Tensor ---

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_values(Shape{}, {v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape(shape);
    const auto n = static_cast<size_t>(shape_size(shape));
    return from_values(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    validate_shape(shape);
    const auto n = static_cast<size_t>(shape_size(shape));
    return from_values(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_size(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    check_finite(values, "tensor");
    auto n = new_node(std::move(shape), std::move(values));
    n->requires_grad = requires_grad;
    return wrap_node(std::move(n));
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("undefined tensor");
    return node_->shape;
}

int64_t Tensor::size() const {
    if (!node_) throw ContractError("undefined tensor");
    return node_->size();
}

const char* Tensor::op_name() const {
    if (!node_) throw ContractError("undefined tensor");
    return node_->op;
}

std::span<const double> Tensor::values() const {
    if (!node_) throw ContractError("undefined tensor");
    return node_->value;
}

std::span<double> Tensor::values_mut() {
    if (!node_) throw ContractError("undefined tensor");
    return node_->value;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_ || node_->grad.empty()) {
        throw ContractError("tensor has no gradient (run backward first)");
    }
    return node_->grad;
}

void Tensor::reset_grad() {
    if (node_) node_->grad.clear();
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor");
    return node_->value[0];
}

void reset_grads(std::span<Tensor> tensors) {
    for (auto& t : tensors) t.reset_grad();
}

// --- binary elementwise with leading-axis broadcast ---

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinKind { add, sub, mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    // exact, or the smaller operand's shape is a suffix of the larger's
    // (broadcast across the leading axes)
    bool b_small;
    if (sa == sb) {
        b_small = true;  // degenerate broadcast, rep count 1
    } else if (is_suffix(sb, sa)) {
        b_small = true;
    } else if (is_suffix(sa, sb)) {
        b_small = false;
    } else {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(sa) +
                         " and " + shape_str(sb));
    }
    const Tensor& big = b_small ? a : b;
    const Tensor& small_ = b_small ? b : a;
    const auto nb = static_cast<size_t>(small_.size());
    const auto n = static_cast<size_t>(big.size());

    const auto va = a.values();
    const auto vb = b.values();
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        const double x = b_small ? va[i] : va[i % nb];
        const double y = b_small ? vb[i % nb] : vb[i];
        switch (kind) {
            case BinKind::add: out[i] = x + y; break;
            case BinKind::sub: out[i] = x - y; break;
            case BinKind::mul: out[i] = x * y; break;
        }
    }

    return make_op(name, big.shape(), std::move(out), {a.shared_node(), b.shared_node()},
                   [kind, b_small, nb, n](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& pa = *o.parents[0];
                       TensorNode& pb = *o.parents[1];
                       for (size_t i = 0; i < n; ++i) {
                           const double g = o.grad[i];
                           const size_t ia = b_small ? i : i % nb;
                           const size_t ib = b_small ? i % nb : i;
                           switch (kind) {
                               case BinKind::add:
                                   AccumGuard::add(pa, static_cast<int64_t>(ia), g);
                                   AccumGuard::add(pb, static_cast<int64_t>(ib), g);
                                   break;
                               case BinKind::sub:
                                   AccumGuard::add(pa, static_cast<int64_t>(ia), g);
                                   AccumGuard::add(pb, static_cast<int64_t>(ib), -g);
                                   break;
                               case BinKind::mul:
                                   AccumGuard::add(pa, static_cast<int64_t>(ia),
                                                   g * pb.value[ib]);
                                   AccumGuard::add(pb, static_cast<int64_t>(ib),
                                                   g * pa.value[ia]);
                                   break;
                           }
                       }
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::mul, "mul"); }

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
    const auto va = a.values();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a.shared_node()},
                   [c](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       for (size_t i = 0; i < o.grad.size(); ++i) {
                           AccumGuard::add(p, static_cast<int64_t>(i), o.grad[i] * c);
                       }
                   });
}

namespace {

Tensor unary_op(const Tensor& a, const char* name, double (*fwd)(double),
                double (*grad_from)(double x, double y)) {
    const auto va = a.values();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i]);
    return make_op(name, a.shape(), std::move(out), {a.shared_node()},
                   [grad_from](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       for (size_t i = 0; i < o.grad.size(); ++i) {
                           AccumGuard::add(p, static_cast<int64_t>(i),
                                           o.grad[i] * grad_from(p.value[i], o.value[i]));
                       }
                   });
}

}  // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    // subgradient 0 at x == 0
    return unary_op(
        a, "abs", [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor custom_unary(const Tensor& x, const char* name, std::function<double(double)> fwd,
                    std::function<double(double)> dfdx) {
    const auto vx = x.values();
    std::vector<double> out(vx.size());
    for (size_t i = 0; i < vx.size(); ++i) out[i] = fwd(vx[i]);
    return make_op(name, x.shape(), std::move(out), {x.shared_node()},
                   [dfdx = std::move(dfdx)](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       for (size_t i = 0; i < o.grad.size(); ++i) {
                           AccumGuard::add(p, static_cast<int64_t>(i),
                                           o.grad[i] * dfdx(p.value[i]));
                       }
                   });
}

// --- reductions ---

Tensor sum(const Tensor& a) {
    const auto va = a.values();
    double s = 0.0;
    for (const double v : va) s += v;
    return make_op("sum", Shape{}, {s}, {a.shared_node()}, [](TensorNode& o) {
        prepare_parent_grads(o);
        TensorNode& p = *o.parents[0];
        const double g = o.grad[0];
        for (int64_t i = 0; i < p.size(); ++i) AccumGuard::add(p, i, g);
    });
}

Tensor mean(const Tensor& a) {
    const auto n = static_cast<double>(a.size());
    const auto va = a.values();
    double s = 0.0;
    for (const double v : va) s += v;
    return make_op("mean", Shape{}, {s / n}, {a.shared_node()}, [n](TensorNode& o) {
        prepare_parent_grads(o);
        TensorNode& p = *o.parents[0];
        const double g = o.grad[0] / n;
        for (int64_t i = 0; i < p.size(); ++i) AccumGuard::add(p, i, g);
    });
}

namespace {

void axis_bounds(const Shape& shape, int64_t axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int64_t>(shape.size())) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(shape));
    }
}

struct AxisView {
    int64_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int64_t axis) {
    AxisView v;
    for (int64_t i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
    v.n = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

Tensor reduce_axis(const Tensor& a, int64_t axis, bool take_mean, const char* name) {
    axis_bounds(a.shape(), axis, name);
    const AxisView v = axis_view(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<size_t>(axis));
    const double inv = take_mean ? 1.0 / static_cast<double>(v.n) : 1.0;

    const auto va = a.values();
    std::vector<double> out(static_cast<size_t>(v.outer * v.inner), 0.0);
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t k = 0; k < v.n; ++k) {
            const int64_t base = (o * v.n + k) * v.inner;
            const int64_t obase = o * v.inner;
            for (int64_t i = 0; i < v.inner; ++i) {
                out[static_cast<size_t>(obase + i)] += va[static_cast<size_t>(base + i)];
            }
        }
    }
    if (take_mean) {
        for (auto& x : out) x *= inv;
    }
    return make_op(name, std::move(out_shape), std::move(out), {a.shared_node()},
                   [v, inv](TensorNode& o_) {
                       prepare_parent_grads(o_);
                       TensorNode& p = *o_.parents[0];
                       for (int64_t o = 0; o < v.outer; ++o) {
                           for (int64_t k = 0; k < v.n; ++k) {
                               const int64_t base = (o * v.n + k) * v.inner;
                               const int64_t obase = o * v.inner;
                               for (int64_t i = 0; i < v.inner; ++i) {
                                   AccumGuard::add(
                                       p, base + i,
                                       o_.grad[static_cast<size_t>(obase + i)] * inv);
                               }
                           }
                       }
                   });
}

}  // namespace

Tensor sum_axis(const Tensor& a, int64_t axis) { return reduce_axis(a, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& a, int64_t axis) { return reduce_axis(a, axis, true, "mean_axis"); }

// --- shape ops ---

Tensor concat(std::span<const Tensor> parts, int64_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    axis_bounds(first, axis, "concat");
    Shape out_shape = first;
    int64_t axis_total = 0;
    for (const Tensor& t : parts) {
        const Shape& s = t.shape();
        if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d) {
            if (static_cast<int64_t>(d) != axis && s[d] != first[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " +
                                 shape_str(first) + " outside axis " + std::to_string(axis));
            }
        }
        axis_total += s[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;

    const AxisView ov = axis_view(out_shape, axis);
    std::vector<double> out(static_cast<size_t>(shape_size(out_shape)));
    std::vector<int64_t> blocks;  // per part: axis extent * inner
    blocks.reserve(parts.size());
    for (const Tensor& t : parts) {
        blocks.push_back(t.shape()[static_cast<size_t>(axis)] * ov.inner);
    }
    const int64_t out_block = ov.n * ov.inner;
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const auto src = parts[pi].values();
        for (int64_t o = 0; o < ov.outer; ++o) {
            std::copy_n(src.begin() + o * blocks[pi], blocks[pi],
                        out.begin() + o * out_block + off);
        }
        off += blocks[pi];
    }

    std::vector<std::shared_ptr<TensorNode>> ps;
    ps.reserve(parts.size());
    for (const Tensor& t : parts) ps.push_back(t.shared_node());
    return make_op("concat", std::move(out_shape), std::move(out), std::move(ps),
                   [ov, blocks, out_block](TensorNode& o_) {
                       prepare_parent_grads(o_);
                       int64_t off = 0;
                       for (size_t pi = 0; pi < o_.parents.size(); ++pi) {
                           TensorNode& p = *o_.parents[pi];
                           if (p.requires_grad) {
                               for (int64_t o = 0; o < ov.outer; ++o) {
                                   const int64_t src = o * out_block + off;
                                   const int64_t dst = o * blocks[pi];
                                   for (int64_t i = 0; i < blocks[pi]; ++i) {
                                       p.grad[static_cast<size_t>(dst + i)] +=
                                           o_.grad[static_cast<size_t>(src + i)];
                                   }
                               }
                           }
                           off += blocks[pi];
                       }
                   });
}

Tensor reshape(const Tensor& a, Shape shape) {
    validate_shape(shape);
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    const auto va = a.values();
    return make_op("reshape", std::move(shape), {va.begin(), va.end()}, {a.shared_node()},
                   [](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       for (size_t i = 0; i < o.grad.size(); ++i) {
                           AccumGuard::add(p, static_cast<int64_t>(i), o.grad[i]);
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    return transpose(a, {1, 0});
}

namespace {

// For each output linear index, the corresponding input linear index under the
// axis permutation perm (out dim k iterates input dim perm[k]).
void permuted_source_indices(const Shape& in_shape, const std::vector<int64_t>& perm,
                             std::vector<int64_t>& src) {
    const size_t rank = in_shape.size();
    std::vector<int64_t> in_strides(rank, 1);
    for (size_t d = rank; d-- > 1;) {
        in_strides[d - 1] = in_strides[d] * in_shape[d];
    }
    Shape out_shape(rank);
    std::vector<int64_t> out_stride_in(rank);  // input stride of each output dim
    for (size_t k = 0; k < rank; ++k) {
        out_shape[k] = in_shape[static_cast<size_t>(perm[k])];
        out_stride_in[k] = in_strides[static_cast<size_t>(perm[k])];
    }
    const int64_t n = shape_size(in_shape);
    src.assign(static_cast<size_t>(n), 0);
    std::vector<int64_t> counter(rank, 0);
    int64_t src_idx = 0;
    for (int64_t j = 0; j < n; ++j) {
        src[static_cast<size_t>(j)] = src_idx;
        for (size_t k = rank; k-- > 0;) {
            ++counter[k];
            src_idx += out_stride_in[k];
            if (counter[k] < out_shape[k]) break;
            src_idx -= out_stride_in[k] * out_shape[k];
            counter[k] = 0;
        }
    }
}

}  // namespace

Tensor transpose(const Tensor& a, std::vector<int64_t> perm) {
    const Shape& in_shape = a.shape();
    const size_t rank = in_shape.size();
    if (perm.size() != rank) throw ShapeError("transpose: permutation rank mismatch");
    std::vector<bool> seen(rank, false);
    for (const int64_t p : perm) {
        if (p < 0 || p >= static_cast<int64_t>(rank) || seen[static_cast<size_t>(p)]) {
            throw ShapeError("transpose: invalid permutation");
        }
        seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(rank);
    for (size_t k = 0; k < rank; ++k) out_shape[k] = in_shape[static_cast<size_t>(perm[k])];

    std::vector<int64_t> src;
    permuted_source_indices(in_shape, perm, src);
    const auto va = a.values();
    std::vector<double> out(va.size());
    for (size_t j = 0; j < out.size(); ++j) out[j] = va[static_cast<size_t>(src[j])];

    return make_op("transpose", std::move(out_shape), std::move(out), {a.shared_node()},
                   [src = std::move(src)](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       for (size_t j = 0; j < o.grad.size(); ++j) {
                           AccumGuard::add(p, src[j], o.grad[j]);
                       }
                   });
}

// --- matmul / bmm ---

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const int64_t m = a.shape()[0], k = a.shape()[1];
    const int64_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " vs " +
                         std::to_string(k2));
    }
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double aip = va[static_cast<size_t>(i * k + p)];
            const double* brow = &vb[static_cast<size_t>(p * n)];
            double* orow = &out[static_cast<size_t>(i * n)];
            for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return make_op("matmul", {m, n}, std::move(out), {a.shared_node(), b.shared_node()},
                   [m, k, n](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& pa = *o.parents[0];
                       TensorNode& pb = *o.parents[1];
                       // dA[i,p] = dC[i,:] . B[p,:]
                       if (pa.requires_grad) {
                           for (int64_t i = 0; i < m; ++i) {
                               const double* grow = &o.grad[static_cast<size_t>(i * n)];
                               double* darow = &pa.grad[static_cast<size_t>(i * k)];
                               for (int64_t p = 0; p < k; ++p) {
                                   const double* brow = &pb.value[static_cast<size_t>(p * n)];
                                   double s = 0.0;
                                   for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                   darow[p] += s;
                               }
                           }
                       }
                       // dB = A^T * dC
                       if (pb.requires_grad) {
                           for (int64_t p = 0; p < k; ++p) {
                               for (int64_t i = 0; i < m; ++i) {
                                   const double aip = pa.value[static_cast<size_t>(i * k + p)];
                                   const double* grow = &o.grad[static_cast<size_t>(i * n)];
                                   double* brow = &pb.grad[static_cast<size_t>(p * n)];
                                   for (int64_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                               }
                           }
                       }
                   });
}

namespace {

// insertion sort by IEEE total order; groups are tiny (the sensor count)
inline void sort_group(double* g, int64_t n) {
    for (int64_t i = 1; i < n; ++i) {
        const double v = g[i];
        int64_t j = i - 1;
        while (j >= 0 && total_order_less(v, g[j])) {
            g[j + 1] = g[j];
            --j;
        }
        g[j + 1] = v;
    }
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b, int64_t canonical_group) {
    if (a.rank() != 3 || b.rank() != 3) {
        throw ShapeError("bmm: expected rank-3 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const int64_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    const int64_t bs2 = b.shape()[0], k2 = b.shape()[1], n = b.shape()[2];
    if (bs != bs2 || k != k2) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    if (canonical_group < 1 || k % canonical_group != 0) {
        throw ShapeError("bmm: contracted axis " + std::to_string(k) +
                         " not divisible by canonical group " +
                         std::to_string(canonical_group));
    }
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<double> out(static_cast<size_t>(bs * m * n), 0.0);
    if (canonical_group == 1) {
        for (int64_t t = 0; t < bs; ++t) {
            const double* A = &va[static_cast<size_t>(t * m * k)];
            const double* B = &vb[static_cast<size_t>(t * k * n)];
            double* O = &out[static_cast<size_t>(t * m * n)];
            for (int64_t i = 0; i < m; ++i) {
                for (int64_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    const double* brow = &B[p * n];
                    double* orow = &O[i * n];
                    for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
                }
            }
        }
    } else {
        // Within each group the accumulation order follows the left
        // coefficients (right rows break ties lexicographically), all in IEEE
        // total order. The order, and therefore every output bit, depends
        // only on the multiset of (coefficient, row) pairs per group.
        auto key = [](double v) {
            const uint64_t bits = std::bit_cast<uint64_t>(v);
            return (bits & 0x8000000000000000ULL) ? ~bits : bits | 0x8000000000000000ULL;
        };
        std::vector<int64_t> order(static_cast<size_t>(canonical_group));
        for (int64_t t = 0; t < bs; ++t) {
            const double* A = &va[static_cast<size_t>(t * m * k)];
            const double* B = &vb[static_cast<size_t>(t * k * n)];
            double* O = &out[static_cast<size_t>(t * m * n)];
            for (int64_t i = 0; i < m; ++i) {
                double* orow = &O[i * n];
                for (int64_t g = 0; g < k; g += canonical_group) {
                    auto less = [&](int64_t pa, int64_t pb) {
                        const uint64_t ka = key(A[i * k + pa]);
                        const uint64_t kb = key(A[i * k + pb]);
                        if (ka != kb) return ka < kb;
                        for (int64_t j = 0; j < n; ++j) {
                            const uint64_t ra = key(B[pa * n + j]);
                            const uint64_t rb = key(B[pb * n + j]);
                            if (ra != rb) return ra < rb;
                        }
                        return false;
                    };
                    for (int64_t p = 0; p < canonical_group; ++p) {
                        order[static_cast<size_t>(p)] = g + p;
                    }
                    for (int64_t p = 1; p < canonical_group; ++p) {  // insertion sort
                        const int64_t v = order[static_cast<size_t>(p)];
                        int64_t q = p - 1;
                        while (q >= 0 && less(v, order[static_cast<size_t>(q)])) {
                            order[static_cast<size_t>(q + 1)] = order[static_cast<size_t>(q)];
                            --q;
                        }
                        order[static_cast<size_t>(q + 1)] = v;
                    }
                    for (int64_t p = 0; p < canonical_group; ++p) {
                        const int64_t src = order[static_cast<size_t>(p)];
                        const double aip = A[i * k + src];
                        const double* brow = &B[src * n];
                        for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
                    }
                }
            }
        }
    }
    return make_op("bmm", {bs, m, n}, std::move(out), {a.shared_node(), b.shared_node()},
                   [bs, m, k, n](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& pa = *o.parents[0];
                       TensorNode& pb = *o.parents[1];
                       for (int64_t t = 0; t < bs; ++t) {
                           const double* A = &pa.value[static_cast<size_t>(t * m * k)];
                           const double* B = &pb.value[static_cast<size_t>(t * k * n)];
                           const double* G = &o.grad[static_cast<size_t>(t * m * n)];
                           if (pa.requires_grad) {
                               double* dA = &pa.grad[static_cast<size_t>(t * m * k)];
                               for (int64_t i = 0; i < m; ++i) {
                                   const double* grow = &G[i * n];
                                   double* darow = &dA[i * k];
                                   for (int64_t p = 0; p < k; ++p) {
                                       const double* brow = &B[p * n];
                                       double s = 0.0;
                                       for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                       darow[p] += s;
                                   }
                               }
                           }
                           if (pb.requires_grad) {
                               double* dB = &pb.grad[static_cast<size_t>(t * k * n)];
                               for (int64_t p = 0; p < k; ++p) {
                                   for (int64_t i = 0; i < m; ++i) {
                                       const double aip = A[i * k + p];
                                       const double* grow = &G[i * n];
                                       double* brow = &dB[p * n];
                                       for (int64_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                                   }
                               }
                           }
                       }
                   });
}

// --- softmax / layer_norm / embedding ---

Tensor softmax(const Tensor& a, int64_t axis, int64_t canonical_group) {
    axis_bounds(a.shape(), axis, "softmax");
    const AxisView v = axis_view(a.shape(), axis);
    if (canonical_group < 1 || v.n % canonical_group != 0) {
        throw ShapeError("softmax: axis length " + std::to_string(v.n) +
                         " not divisible by canonical group " +
                         std::to_string(canonical_group));
    }
    const auto va = a.values();
    std::vector<double> out(va.size());
    std::vector<double> terms(static_cast<size_t>(v.n));
    std::vector<double> sorted(static_cast<size_t>(v.n));
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t i = 0; i < v.inner; ++i) {
            const int64_t base = o * v.n * v.inner + i;
            double mx = -HUGE_VAL;
            for (int64_t p = 0; p < v.n; ++p) {
                mx = std::max(mx, va[static_cast<size_t>(base + p * v.inner)]);
            }
            for (int64_t p = 0; p < v.n; ++p) {
                terms[static_cast<size_t>(p)] =
                    std::exp(va[static_cast<size_t>(base + p * v.inner)] - mx);
            }
            double denom = 0.0;
            if (canonical_group == 1) {
                for (int64_t p = 0; p < v.n; ++p) denom += terms[static_cast<size_t>(p)];
            } else {
                sorted = terms;
                for (int64_t g = 0; g < v.n; g += canonical_group) {
                    sort_group(&sorted[static_cast<size_t>(g)], canonical_group);
                    for (int64_t p = 0; p < canonical_group; ++p) {
                        denom += sorted[static_cast<size_t>(g + p)];
                    }
                }
            }
            for (int64_t p = 0; p < v.n; ++p) {
                out[static_cast<size_t>(base + p * v.inner)] =
                    terms[static_cast<size_t>(p)] / denom;
            }
        }
    }
    return make_op("softmax", a.shape(), std::move(out), {a.shared_node()},
                   [v](TensorNode& o_) {
                       prepare_parent_grads(o_);
                       TensorNode& p_ = *o_.parents[0];
                       for (int64_t o = 0; o < v.outer; ++o) {
                           for (int64_t i = 0; i < v.inner; ++i) {
                               const int64_t base = o * v.n * v.inner + i;
                               double dot = 0.0;
                               for (int64_t p = 0; p < v.n; ++p) {
                                   const size_t idx = static_cast<size_t>(base + p * v.inner);
                                   dot += o_.grad[idx] * o_.value[idx];
                               }
                               for (int64_t p = 0; p < v.n; ++p) {
                                   const size_t idx = static_cast<size_t>(base + p * v.inner);
                                   AccumGuard::add(p_, static_cast<int64_t>(idx),
                                                   o_.value[idx] * (o_.grad[idx] - dot));
                               }
                           }
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: input must have a last axis");
    if (eps < 0.0) throw ContractError("layer_norm: eps must be non-negative");
    const int64_t n = x.shape().back();
    const int64_t slices = x.size() / n;
    auto check_affine = [n](const Tensor& t, const char* what) {
        if (!(t.size() == 1 || (t.rank() == 1 && t.shape()[0] == n))) {
            throw ShapeError(std::string("layer_norm: ") + what + " shape " +
                             shape_str(t.shape()) + " not broadcastable over axis of " +
                             std::to_string(n));
        }
    };
    check_affine(gain, "gain");
    check_affine(bias, "bias");
    const bool gs = gain.size() == 1;
    const bool bs_ = bias.size() == 1;

    const auto vx = x.values();
    const auto vg = gain.values();
    const auto vb = bias.values();
    std::vector<double> out(vx.size());
    std::vector<double> mean_cache(static_cast<size_t>(slices));
    std::vector<double> inv_std_cache(static_cast<size_t>(slices));
    for (int64_t s = 0; s < slices; ++s) {
        const double* row = &vx[static_cast<size_t>(s * n)];
        double mu = 0.0;
        for (int64_t i = 0; i < n; ++i) mu += row[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(n);  // population variance
        const double inv_std = 1.0 / std::sqrt(var + eps);
        mean_cache[static_cast<size_t>(s)] = mu;
        inv_std_cache[static_cast<size_t>(s)] = inv_std;
        for (int64_t i = 0; i < n; ++i) {
            const double xh = (row[i] - mu) * inv_std;
            out[static_cast<size_t>(s * n + i)] =
                vg[gs ? 0 : static_cast<size_t>(i)] * xh + vb[bs_ ? 0 : static_cast<size_t>(i)];
        }
    }
    return make_op(
        "layer_norm", x.shape(), std::move(out),
        {x.shared_node(), gain.shared_node(), bias.shared_node()},
        [n, slices, gs, bs_, mean_cache = std::move(mean_cache),
         inv_std_cache = std::move(inv_std_cache)](TensorNode& o) {
            prepare_parent_grads(o);
            TensorNode& px = *o.parents[0];
            TensorNode& pg = *o.parents[1];
            TensorNode& pb = *o.parents[2];
            const double dn = static_cast<double>(n);
            for (int64_t s = 0; s < slices; ++s) {
                const double mu = mean_cache[static_cast<size_t>(s)];
                const double inv_std = inv_std_cache[static_cast<size_t>(s)];
                const double* row = &px.value[static_cast<size_t>(s * n)];
                const double* g = &o.grad[static_cast<size_t>(s * n)];
                double m1 = 0.0, m2 = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    const double xh = (row[i] - mu) * inv_std;
                    const double dyh = pg.value[gs ? 0 : static_cast<size_t>(i)] * g[i];
                    m1 += dyh;
                    m2 += dyh * xh;
                }
                m1 /= dn;
                m2 /= dn;
                for (int64_t i = 0; i < n; ++i) {
                    const double xh = (row[i] - mu) * inv_std;
                    if (px.requires_grad) {
                        const double dyh = pg.value[gs ? 0 : static_cast<size_t>(i)] * g[i];
                        px.grad[static_cast<size_t>(s * n + i)] +=
                            (dyh - m1 - xh * m2) * inv_std;
                    }
                    if (pg.requires_grad) {
                        pg.grad[gs ? 0 : static_cast<size_t>(i)] += g[i] * xh;
                    }
                    if (pb.requires_grad) {
                        pb.grad[bs_ ? 0 : static_cast<size_t>(i)] += g[i];
                    }
                }
            }
        });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> indices) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: table must be rank 2, got " +
                         shape_str(table.shape()));
    }
    const int64_t rows = table.shape()[0];
    const int64_t dim = table.shape()[1];
    for (const int64_t idx : indices) {
        if (idx < 0 || idx >= rows) {
            throw IndexError("embedding_lookup: index " + std::to_string(idx) +
                             " out of range [0, " + std::to_string(rows) + ")");
        }
    }
    const auto vt = table.values();
    const auto n = static_cast<int64_t>(indices.size());
    if (n == 0) throw ShapeError("embedding_lookup: empty index list");
    std::vector<double> out(static_cast<size_t>(n * dim));
    for (int64_t r = 0; r < n; ++r) {
        std::copy_n(vt.begin() + indices[static_cast<size_t>(r)] * dim, dim,
                    out.begin() + r * dim);
    }
    std::vector<int64_t> idx_copy(indices.begin(), indices.end());
    return make_op("embedding_lookup", {n, dim}, std::move(out), {table.shared_node()},
                   [dim, idx_copy = std::move(idx_copy)](TensorNode& o) {
                       prepare_parent_grads(o);
                       TensorNode& p = *o.parents[0];
                       if (!p.requires_grad) return;
                       for (size_t r = 0; r < idx_copy.size(); ++r) {
                           const int64_t row = idx_copy[r];
                           for (int64_t c = 0; c < dim; ++c) {
                               p.grad[static_cast<size_t>(row * dim + c)] +=
                                   o.grad[r * static_cast<size_t>(dim) +
                                          static_cast<size_t>(c)];
                           }
                       }
                   });
}

// --- Graph / backward ---

Graph::Graph(const Tensor& root) : root_(root.shared_node()) {
    if (!root_) throw ContractError("Graph: undefined tensor");
    if (!root_->requires_grad) return;  // nothing differentiable below
    std::vector<std::pair<TensorNode*, size_t>> stack;
    std::unordered_set<TensorNode*> seen;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TensorNode* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order_.push_back(n);
            stack.pop_back();
        }
    }
}

bool Graph::topologically_ordered() const {
    std::unordered_set<const TensorNode*> placed;
    for (const TensorNode* n : order_) {
        for (const auto& p : n->parents) {
            if (p->requires_grad && !placed.count(p.get())) return false;
        }
        placed.insert(n);
    }
    return true;
}

void Graph::run_backward() {
    if (order_.empty()) {
        throw ContractError("backward: loss does not depend on any requires_grad tensor");
    }
    // Interior grads are scratch; leaf grads persist so repeated backward
    // calls accumulate until reset_grad.
    for (TensorNode* n : order_) {
        if (n->is_leaf()) {
            n->ensure_grad();
        } else {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_str(loss.shape()));
    }
    Graph g(loss);
    g.run_backward();
}

// --- gradient checking ---

GradCheckReport grad_check(const std::function<Tensor(std::span<const Tensor>)>& f,
                           std::span<const Tensor> inputs, const GradCheckOptions& opts) {
    if (!(opts.eps > 0.0 && opts.eps <= 1e-2)) {
        throw ContractError("grad_check: eps must lie in (0, 1e-2]");
    }
    auto eval_scalar = [&]() {
        const Tensor out = f(inputs);
        if (out.size() != 1) throw ContractError("grad_check: f must return a scalar");
        const double v = out.item();
        if (!std::isfinite(v)) throw NumericError("grad_check: f non-finite at probe point");
        return std::make_pair(v, out);
    };

    for (const Tensor& t : inputs) const_cast<Tensor&>(t).reset_grad();
    auto [base, out] = eval_scalar();
    (void)base;
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(static_cast<size_t>(t.size()), 0.0);
        }
    }

    GradCheckReport report;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        TensorNode* node = inputs[ti].node();
        const int64_t sz = inputs[ti].size();
        std::vector<int64_t> coords(static_cast<size_t>(sz));
        for (int64_t i = 0; i < sz; ++i) coords[static_cast<size_t>(i)] = i;
        if (opts.max_coords_per_tensor >= 0 && opts.max_coords_per_tensor < sz) {
            Rng rng(splitmix64(opts.seed ^ (0x9e37u + ti)));
            deterministic_shuffle(coords, rng);
            coords.resize(static_cast<size_t>(opts.max_coords_per_tensor));
        }
        for (const int64_t c : coords) {
            const double orig = node->value[static_cast<size_t>(c)];
            node->value[static_cast<size_t>(c)] = orig + opts.eps;
            const double fp = eval_scalar().first;
            node->value[static_cast<size_t>(c)] = orig - opts.eps;
            const double fm = eval_scalar().first;
            node->value[static_cast<size_t>(c)] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.eps);
            const double a = analytic[ti][static_cast<size_t>(c)];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1.0});
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_location =
                    "input " + std::to_string(ti) + ", coord " + std::to_string(c);
            }
        }
    }
    return report;
}

}  // namespace traff
