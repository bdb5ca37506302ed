#pragma once

#include <functional>
#include <unordered_map>

#include "strata/tensor.hpp"

namespace strata {

class Graph;
struct Node;

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    exp_,
    log_,
    sigmoid,
    softplus,
    relu,
    sum,
    mean,
    concat,
    slice,
    reshape,
    gather,
    scatter_add,
    interp_weights,
    cumsum_excl,
    select,
    clamp,
    custom,
};

const char* op_name(Op op);

// Extension point for fused operations owned by higher layers (the hash-grid
// encoder registers one). `backward` must accumulate into the input nodes'
// gradient buffers via Graph::grad_buffer.
struct CustomOp {
    virtual ~CustomOp() = default;
    virtual const char* name() const = 0;
    virtual void backward(Graph& g, const Node& node, const Tensor& grad_out) const = 0;
};

struct Node {
    Op op = Op::leaf;
    std::vector<int> in;
    Tensor out;
    bool needs_grad = false;
    // op-dependent scalars: axis / start / len / row count / keepdim flag
    i64 a0 = 0, a1 = 0, a2 = 0;
    double s0 = 0, s1 = 0;
    IndexArray idx;                   // gather / scatter-add / segment offsets
    std::shared_ptr<std::vector<std::uint8_t>> mask;  // select
    std::shared_ptr<const CustomOp> custom;
};

// Append-only tape of recorded operations. One training chunk owns one graph
// exclusively; clear() bumps the generation so tensors recorded against an
// earlier state cannot be silently reused.
class Graph {
public:
    std::vector<Node> nodes;
    bool recording = true;

    unsigned generation() const { return gen_; }

    // Resolves the node id for an op input, wrapping plain tensors as leaves.
    int input_id(const Tensor& t);

    // Registers (or finds) a leaf for a tensor; keyed by storage so every op
    // touching the same parameter shares one leaf.
    int ensure_leaf(const Tensor& t);

    int add_node(Node n);
    const Tensor& out_of(int id) const { return nodes[static_cast<size_t>(id)].out; }

    // Runs reverse-mode accumulation from a scalar loss. Visits each node
    // exactly once; leaves that do not participate simply keep no buffer.
    void backward(const Tensor& loss);

    // Gradient of a leaf tensor (zeros if it did not participate).
    Tensor grad(const Tensor& t) const;
    bool has_grad(const Tensor& t) const;

    // Allocates-on-demand gradient buffer for a node (used by backward impls).
    double* grad_buffer(int id);
    const Tensor* grad_of_node(int id) const;

    void clear();

private:
    unsigned gen_ = 1;
    std::vector<Tensor> grads_;
    std::unordered_map<const void*, int> leaf_ids_;

    void backprop_node(int id, const Tensor& gout);
};

// Forwards x unchanged while detaching it from gradient flow.
Tensor stop_gradient(const Tensor& x);

namespace ops {

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor div(Graph& g, const Tensor& a, const Tensor& b);
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor exp(Graph& g, const Tensor& x);
Tensor log(Graph& g, const Tensor& x);
Tensor sigmoid(Graph& g, const Tensor& x);
Tensor softplus(Graph& g, const Tensor& x);
Tensor relu(Graph& g, const Tensor& x);
Tensor sum(Graph& g, const Tensor& x);
Tensor sum_axis(Graph& g, const Tensor& x, int axis, bool keepdim = false);
Tensor mean(Graph& g, const Tensor& x);
Tensor concat(Graph& g, const std::vector<Tensor>& xs, int axis);
Tensor slice(Graph& g, const Tensor& x, int axis, i64 start, i64 len);
Tensor reshape(Graph& g, const Tensor& x, Shape shape);
Tensor gather(Graph& g, const Tensor& x, const IndexArray& idx);
Tensor scatter_add(Graph& g, const Tensor& x, const IndexArray& idx, i64 rows);
Tensor interp_weights(Graph& g, const Tensor& frac);
Tensor cumsum_excl(Graph& g, const Tensor& x, const IndexArray& seg_offsets);
Tensor select(Graph& g, std::shared_ptr<std::vector<std::uint8_t>> mask, const Tensor& a,
              const Tensor& b);
Tensor clamp(Graph& g, const Tensor& x, double lo, double hi);
Tensor custom(Graph& g, std::shared_ptr<const CustomOp> op, const std::vector<Tensor>& inputs,
              Tensor out, IndexArray idx = {}, i64 a0 = 0);

// Conveniences built on the core set.
Tensor add_scalar(Graph& g, const Tensor& a, double s);
Tensor mul_scalar(Graph& g, const Tensor& a, double s);
Tensor square(Graph& g, const Tensor& x);

}  // namespace ops

// Max over parameter coordinates of the relative error between the analytic
// gradient of f and a central finite difference with step h. Returns Inf if
// any evaluation produces a non-finite value.
double finite_diff_check(
    const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, double h);

}  // namespace strata
