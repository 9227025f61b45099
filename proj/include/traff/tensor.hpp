#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Tensors are value-semantic handles onto graph nodes. Every op validates
// shapes, produces a fresh node, and registers an analytic backward pass;
// backward(loss) traces the graph in topological order and fills the grad
// buffer of every reachable requires_grad node. Leaf grads accumulate across
// backward calls until reset_grad() is invoked.
//
// Layout is row-major and dense; reshape/transpose copy. Non-finite values
// at an op boundary raise NumericError.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "traff/common.hpp"

namespace traff {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches the node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // null for leaves
    const char* op = "leaf";

    int64_t size() const { return static_cast<int64_t>(value.size()); }
    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }
    int64_t size() const;
    const char* op_name() const;

    std::span<const double> values() const;
    // In-place mutation is reserved for leaves between graph constructions
    // (parameter init and optimizer updates).
    std::span<double> values_mut();

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void reset_grad();

    double item() const;  // size-1 tensors only

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> shared_node() const { return node_; }

  private:
    friend Tensor wrap_node(std::shared_ptr<detail::TensorNode> n);
    std::shared_ptr<detail::TensorNode> node_;
};

// --- elementwise family ---
Tensor add(const Tensor& a, const Tensor& b);  // equal shapes, or one operand's
Tensor sub(const Tensor& a, const Tensor& b);  // shape a suffix of the other's
Tensor mul(const Tensor& a, const Tensor& b);  // (broadcast over leading axes)
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
Tensor sum_axis(const Tensor& a, int64_t axis);
Tensor mean_axis(const Tensor& a, int64_t axis);

Tensor concat(std::span<const Tensor> parts, int64_t axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);                          // rank-2
Tensor transpose(const Tensor& a, std::vector<int64_t> perm);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]

// Batched matmul [B,M,K]x[B,K,N]. With canonical_group > 1 the contracted
// axis is treated as consecutive groups of that size and each group's terms
// accumulate in IEEE total order, making the forward result exactly invariant
// under any permutation within the groups (the sensor axis of attention
// tokens). Group 1 is the plain fast path; K must be divisible by the group.
Tensor bmm(const Tensor& a, const Tensor& b, int64_t canonical_group = 1);

// --- neural-net primitives ---
// With canonical_group > 1 the normalizing sum accumulates each consecutive
// group of that size in IEEE total order (see bmm); the softmax then commutes
// exactly with within-group permutations along the axis.
Tensor softmax(const Tensor& a, int64_t axis, int64_t canonical_group = 1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> indices);

// Escape hatch for ops defined at the call site (test fixtures, probes).
// `fwd` maps input values to output values (same shape); `dfdx` gives the
// local derivative per element.
Tensor custom_unary(const Tensor& x, const char* name,
                    std::function<double(double)> fwd,
                    std::function<double(double)> dfdx);

// --- differentiation ---

// Topologically ordered record of the ops reachable from a root: every node
// appears after all nodes producing its inputs.
class Graph {
  public:
    explicit Graph(const Tensor& root);

    int64_t size() const { return static_cast<int64_t>(order_.size()); }
    bool topologically_ordered() const;

    // Seeds the root with d(root)/d(root)=1 and runs every backward step in
    // reverse topological order. Leaf grads accumulate; interior grads are
    // recomputed from scratch each call.
    void run_backward();

  private:
    std::shared_ptr<detail::TensorNode> root_;
    std::vector<detail::TensorNode*> order_;
};

// loss must be a single-element tensor; throws ContractError otherwise.
void backward(const Tensor& loss);

void reset_grads(std::span<Tensor> tensors);

// --- gradient checking ---

struct GradCheckOptions {
    double eps = 1e-5;                  // central-difference step, in (0, 1e-2]
    int64_t max_coords_per_tensor = -1; // -1 = every coordinate
    uint64_t seed = 0;                  // coordinate subsampling
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_location;  // "input 2, coord 17"
    int64_t coords_checked = 0;
};

// Compares analytic gradients of f's scalar output against central finite
// differences (f(x+eps)-f(x-eps))/(2 eps) per coordinate of each input.
// Relative error uses max(|analytic|, |numeric|, 1) as the denominator.
GradCheckReport grad_check(
    const std::function<Tensor(std::span<const Tensor>)>& f,
    std::span<const Tensor> inputs, const GradCheckOptions& opts = {});

}  // namespace traff
