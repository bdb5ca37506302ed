#include "strata/graph.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

extern "C" void openblas_set_num_threads(int);

namespace strata {

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::matmul: return "matmul";
        case Op::exp_: return "exp";
        case Op::log_: return "log";
        case Op::sigmoid: return "sigmoid";
        case Op::softplus: return "softplus";
        case Op::relu: return "relu";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::reshape: return "reshape";
        case Op::gather: return "gather";
        case Op::scatter_add: return "scatter-add";
        case Op::interp_weights: return "linear-interp-weights";
        case Op::cumsum_excl: return "cumsum-exclusive";
        case Op::select: return "select";
        case Op::clamp: return "clamp";
        case Op::custom: return "custom";
    }
    return "?";
}

namespace {

// BLAS is pinned to one thread; parallelism lives at the ray-chunk level so
// results do not depend on the runtime thread count.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init_once;

double stable_sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// ---- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (size_t i = 0; i < nd; ++i) {
        i64 da = i < a.size() ? a[a.size() - 1 - i] : 1;
        i64 db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da == db || da == 1 || db == 1) {
            out[nd - 1 - i] = std::max(da, db);
        } else {
            fail(op, ": incompatible shapes ", shape_str(a), " and ", shape_str(b));
        }
    }
    return out;
}

// Row-major strides with 0 on broadcast dims, right-aligned to `out`.
std::vector<i64> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<i64> st(out.size(), 0);
    i64 stride = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        size_t si = s.size() - 1 - i;
        size_t oi = out.size() - 1 - i;
        st[oi] = (s[si] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= s[si];
    }
    return st;
}

// Applies fn(out_index, a_index, b_index) over the broadcast iteration space.
template <class Fn>
void for_broadcast(const Shape& sa, const Shape& sb, const Shape& so, Fn&& fn) {
    i64 n = numel(so);
    if (sa == sb) {
        for (i64 i = 0; i < n; ++i) fn(i, i, i);
        return;
    }
    if (numel(sb) == 1) {
        for (i64 i = 0; i < n; ++i) fn(i, i, 0);
        return;
    }
    if (numel(sa) == 1) {
        for (i64 i = 0; i < n; ++i) fn(i, 0, i);
        return;
    }
    auto sta = broadcast_strides(sa, so);
    auto stb = broadcast_strides(sb, so);
    size_t nd = so.size();
    std::vector<i64> ctr(nd, 0);
    i64 ia = 0, ib = 0;
    for (i64 i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (size_t d = nd; d-- > 0;) {
            ++ctr[d];
            ia += sta[d];
            ib += stb[d];
            if (ctr[d] < so[d]) break;
            ia -= sta[d] * so[d];
            ib -= stb[d] * so[d];
            ctr[d] = 0;
        }
    }
}

}  // namespace

// ---- Graph ------------------------------------------------------------------

int Graph::ensure_leaf(const Tensor& t) {
    const void* key = t.store.get();
    auto it = leaf_ids_.find(key);
    if (it != leaf_ids_.end() && nodes[static_cast<size_t>(it->second)].out.shape == t.shape)
        return it->second;
    Node n;
    n.op = Op::leaf;
    n.out = t;
    n.needs_grad = t.requires_grad;
    int id = static_cast<int>(nodes.size());
    nodes.push_back(std::move(n));
    if (it == leaf_ids_.end()) leaf_ids_.emplace(key, id);
    return id;
}

int Graph::input_id(const Tensor& t) {
    require(t.defined(), "op input is an undefined tensor");
    if (t.node >= 0) {
        require(t.gen == gen_, "tensor belongs to a cleared graph generation");
        return t.node;
    }
    return ensure_leaf(t);
}

int Graph::add_node(Node n) {
    int id = static_cast<int>(nodes.size());
    nodes.push_back(std::move(n));
    return id;
}

void Graph::clear() {
    nodes.clear();
    grads_.clear();
    leaf_ids_.clear();
    ++gen_;
}

double* Graph::grad_buffer(int id) {
    if (grads_.size() < nodes.size()) grads_.resize(nodes.size());
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (!g.defined()) g = Tensor::zeros(nodes[static_cast<size_t>(id)].out.shape);
    return g.data();
}

const Tensor* Graph::grad_of_node(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= grads_.size()) return nullptr;
    const Tensor& g = grads_[static_cast<size_t>(id)];
    return g.defined() ? &g : nullptr;
}

bool Graph::has_grad(const Tensor& t) const {
    auto it = leaf_ids_.find(t.store.get());
    if (it == leaf_ids_.end()) return false;
    return grad_of_node(it->second) != nullptr;
}

Tensor Graph::grad(const Tensor& t) const {
    int id = -1;
    if (t.node >= 0 && t.gen == gen_) {
        id = t.node;
    } else {
        auto it = leaf_ids_.find(t.store.get());
        if (it != leaf_ids_.end()) id = it->second;
    }
    if (const Tensor* g = grad_of_node(id)) return *g;
    return Tensor::zeros(t.shape);
}

void Graph::backward(const Tensor& loss) {
    require(loss.defined() && loss.size() == 1, "backward: loss must be scalar, got shape ",
            shape_str(loss.shape));
    grads_.assign(nodes.size(), Tensor{});
    if (loss.node < 0) return;  // constant loss: every gradient is zero
    require(loss.gen == gen_, "backward: loss from a cleared graph");
    grads_[static_cast<size_t>(loss.node)] = Tensor::full(loss.shape, 1.0);
    for (int id = loss.node; id >= 0; --id) {
        const Tensor& g = grads_[static_cast<size_t>(id)];
        if (!g.defined() || !nodes[static_cast<size_t>(id)].needs_grad) continue;
        backprop_node(id, g);
        if (nodes[static_cast<size_t>(id)].op != Op::leaf)
            grads_[static_cast<size_t>(id)] = Tensor{};  // interior grads are transient
    }
}

Tensor stop_gradient(const Tensor& x) {
    Tensor t = x;
    t.requires_grad = false;
    t.node = -1;
    t.gen = 0;
    return t;
}

// ---- forward helpers ----------------------------------------------------------

namespace {

bool any_requires(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* t : ins)
        if (t->requires_grad) return true;
    return false;
}

Tensor record_node(Graph& g, Op op, std::initializer_list<const Tensor*> ins, Tensor out,
                   const std::function<void(Node&)>& fill = nullptr) {
    if (!g.recording || !any_requires(ins)) return out;
    Node n;
    n.op = op;
    n.needs_grad = true;
    for (const Tensor* t : ins) n.in.push_back(g.input_id(*t));
    if (fill) fill(n);
    out.requires_grad = true;
    out.gen = g.generation();
    n.out = out;
    out.node = g.add_node(std::move(n));
    return out;
}

Tensor binary_forward(Graph& g, Op op, const Tensor& a, const Tensor& b) {
    Shape so = broadcast_shape(op_name(op), a.shape, b.shape);
    Tensor out = Tensor::zeros(so);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    switch (op) {
        case Op::add:
            for_broadcast(a.shape, b.shape, so, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] + pb[j]; });
            break;
        case Op::sub:
            for_broadcast(a.shape, b.shape, so, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] - pb[j]; });
            break;
        case Op::mul:
            for_broadcast(a.shape, b.shape, so, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] * pb[j]; });
            break;
        case Op::div:
            for_broadcast(a.shape, b.shape, so, [&](i64 o, i64 i, i64 j) { po[o] = pa[i] / pb[j]; });
            break;
        default: fail("not a binary op");
    }
    return record_node(g, op, {&a, &b}, std::move(out));
}

template <class Fwd>
Tensor unary_forward(Graph& g, Op op, const Tensor& x, Fwd&& f) {
    Tensor out = Tensor::zeros(x.shape);
    const double* px = x.data();
    double* po = out.data();
    i64 n = x.size();
    for (i64 i = 0; i < n; ++i) po[i] = f(px[i]);
    return record_node(g, op, {&x}, std::move(out));
}

void dgemm_rowmajor(bool ta, bool tb, i64 m, i64 n, i64 k, const double* a, i64 lda,
                    const double* b, i64 ldb, double beta, double* c, i64 ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

}  // namespace

// ---- ops --------------------------------------------------------------------

namespace ops {

Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return binary_forward(g, Op::add, a, b); }
Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return binary_forward(g, Op::sub, a, b); }
Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return binary_forward(g, Op::mul, a, b); }
Tensor div(Graph& g, const Tensor& a, const Tensor& b) { return binary_forward(g, Op::div, a, b); }

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.shape[1] == b.shape[0],
            "matmul: incompatible shapes ", shape_str(a.shape), " and ", shape_str(b.shape));
    i64 m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = Tensor::zeros({m, n});
    dgemm_rowmajor(false, false, m, n, k, a.data(), k, b.data(), n, 0.0, out.data(), n);
    return record_node(g, Op::matmul, {&a, &b}, std::move(out));
}

Tensor exp(Graph& g, const Tensor& x) {
    return unary_forward(g, Op::exp_, x, [](double v) { return std::exp(v); });
}
Tensor log(Graph& g, const Tensor& x) {
    return unary_forward(g, Op::log_, x, [](double v) { return std::log(v); });
}
Tensor sigmoid(Graph& g, const Tensor& x) {
    return unary_forward(g, Op::sigmoid, x, stable_sigmoid);
}
Tensor softplus(Graph& g, const Tensor& x) {
    return unary_forward(g, Op::softplus, x, stable_softplus);
}
Tensor relu(Graph& g, const Tensor& x) {
    return unary_forward(g, Op::relu, x, [](double v) { return v > 0 ? v : 0.0; });
}

Tensor sum(Graph& g, const Tensor& x) {
    double acc = 0;
    const double* px = x.data();
    i64 n = x.size();
    for (i64 i = 0; i < n; ++i) acc += px[i];
    return record_node(g, Op::sum, {&x}, Tensor::scalar(acc),
                       [](Node& nd) { nd.a0 = -1; });
}

Tensor sum_axis(Graph& g, const Tensor& x, int axis, bool keepdim) {
    require(axis >= 0 && static_cast<size_t>(axis) < x.ndim(), "sum_axis: bad axis ", axis,
            " for shape ", shape_str(x.shape));
    i64 outer = 1, mid = x.shape[static_cast<size_t>(axis)], inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < x.ndim(); ++i) inner *= x.shape[i];
    Shape so;
    for (size_t i = 0; i < x.ndim(); ++i) {
        if (static_cast<int>(i) == axis) {
            if (keepdim) so.push_back(1);
        } else {
            so.push_back(x.shape[i]);
        }
    }
    if (so.empty()) so = {1};
    Tensor out = Tensor::zeros(so);
    const double* px = x.data();
    double* po = out.data();
    for (i64 o = 0; o < outer; ++o)
        for (i64 m = 0; m < mid; ++m) {
            const double* row = px + (o * mid + m) * inner;
            double* dst = po + o * inner;
            for (i64 i = 0; i < inner; ++i) dst[i] += row[i];
        }
    return record_node(g, Op::sum, {&x}, std::move(out), [&](Node& nd) {
        nd.a0 = axis;
        nd.a1 = keepdim ? 1 : 0;
    });
}

Tensor mean(Graph& g, const Tensor& x) {
    double acc = 0;
    const double* px = x.data();
    i64 n = x.size();
    for (i64 i = 0; i < n; ++i) acc += px[i];
    return record_node(g, Op::mean, {&x}, Tensor::scalar(n > 0 ? acc / double(n) : 0.0));
}

Tensor concat(Graph& g, const std::vector<Tensor>& xs, int axis) {
    require(!xs.empty(), "concat: no inputs");
    size_t nd = xs[0].ndim();
    require(axis >= 0 && static_cast<size_t>(axis) < nd, "concat: bad axis");
    Shape so = xs[0].shape;
    i64 total = 0;
    for (const Tensor& t : xs) {
        require(t.ndim() == nd, "concat: rank mismatch");
        for (size_t i = 0; i < nd; ++i)
            require(static_cast<int>(i) == axis || t.shape[i] == so[i],
                    "concat: shape mismatch ", shape_str(t.shape), " vs ", shape_str(so));
        total += t.shape[static_cast<size_t>(axis)];
    }
    so[static_cast<size_t>(axis)] = total;
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= so[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < nd; ++i) inner *= so[i];
    Tensor out = Tensor::zeros(so);
    double* po = out.data();
    i64 off = 0;
    for (const Tensor& t : xs) {
        i64 w = t.shape[static_cast<size_t>(axis)] * inner;
        const double* pt = t.data();
        for (i64 o = 0; o < outer; ++o)
            std::copy(pt + o * w, pt + (o + 1) * w, po + o * total * inner + off);
        off += w;
    }
    if (!g.recording) return out;
    bool need = false;
    for (const Tensor& t : xs) need |= t.requires_grad;
    if (!need) return out;
    Node n;
    n.op = Op::concat;
    n.needs_grad = true;
    n.a0 = axis;
    for (const Tensor& t : xs) n.in.push_back(g.input_id(t));
    out.requires_grad = true;
    out.gen = g.generation();
    n.out = out;
    out.node = g.add_node(std::move(n));
    return out;
}

Tensor slice(Graph& g, const Tensor& x, int axis, i64 start, i64 len) {
    require(axis >= 0 && static_cast<size_t>(axis) < x.ndim(), "slice: bad axis");
    i64 dim = x.shape[static_cast<size_t>(axis)];
    require(start >= 0 && len >= 0 && start + len <= dim, "slice: range [", start, ",",
            start + len, ") out of bounds for dim ", dim);
    Shape so = x.shape;
    so[static_cast<size_t>(axis)] = len;
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < x.ndim(); ++i) inner *= x.shape[i];
    Tensor out = Tensor::zeros(so);
    const double* px = x.data();
    double* po = out.data();
    for (i64 o = 0; o < outer; ++o)
        std::copy(px + (o * dim + start) * inner, px + (o * dim + start + len) * inner,
                  po + o * len * inner);
    return record_node(g, Op::slice, {&x}, std::move(out), [&](Node& n) {
        n.a0 = axis;
        n.a1 = start;
        n.a2 = len;
    });
}

Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
    require(numel(shape) == x.size(), "reshape: ", shape_str(x.shape), " to ", shape_str(shape),
            " changes element count");
    Tensor out;
    out.store = x.store;  // same data, new extents
    out.shape = std::move(shape);
    return record_node(g, Op::reshape, {&x}, std::move(out));
}

Tensor gather(Graph& g, const Tensor& x, const IndexArray& idx) {
    require(x.ndim() >= 1, "gather: source must have rows");
    i64 rows = x.shape[0];
    i64 rowsz = x.size() / std::max<i64>(rows, 1);
    Shape so = idx.shape;
    for (size_t i = 1; i < x.ndim(); ++i) so.push_back(x.shape[i]);
    Tensor out = Tensor::zeros(so);
    const double* px = x.data();
    double* po = out.data();
    i64 n = idx.size();
    for (i64 i = 0; i < n; ++i) {
        i64 r = idx.at(i);
        require(r >= 0 && r < rows, "gather: index ", r, " out of range [0,", rows, ")");
        std::copy(px + r * rowsz, px + (r + 1) * rowsz, po + i * rowsz);
    }
    return record_node(g, Op::gather, {&x}, std::move(out), [&](Node& nd) { nd.idx = idx; });
}

Tensor scatter_add(Graph& g, const Tensor& x, const IndexArray& idx, i64 rows) {
    require(x.ndim() >= 1 && x.shape[0] == idx.size(), "scatter-add: leading dim ",
            shape_str(x.shape), " must match index count ", idx.size());
    i64 rowsz = x.size() / std::max<i64>(x.shape[0], 1);
    Shape so{rows};
    for (size_t i = 1; i < x.ndim(); ++i) so.push_back(x.shape[i]);
    Tensor out = Tensor::zeros(so);
    const double* px = x.data();
    double* po = out.data();
    i64 n = idx.size();
    for (i64 i = 0; i < n; ++i) {
        i64 r = idx.at(i);
        require(r >= 0 && r < rows, "scatter-add: index ", r, " out of range [0,", rows, ")");
        double* dst = po + r * rowsz;
        const double* src = px + i * rowsz;
        for (i64 c = 0; c < rowsz; ++c) dst[c] += src[c];
    }
    return record_node(g, Op::scatter_add, {&x}, std::move(out),
                       [&](Node& nd) { nd.idx = idx; });
}

Tensor interp_weights(Graph& g, const Tensor& frac) {
    require(frac.ndim() == 2 && frac.shape[1] >= 1 && frac.shape[1] <= 4,
            "linear-interp-weights: expects [N,dims] with dims in 1..4, got ",
            shape_str(frac.shape));
    i64 n = frac.shape[0], d = frac.shape[1];
    i64 corners = i64(1) << d;
    Tensor out = Tensor::zeros({n, corners});
    const double* pf = frac.data();
    double* po = out.data();
    for (i64 i = 0; i < n; ++i) {
        const double* f = pf + i * d;
        double* w = po + i * corners;
        for (i64 c = 0; c < corners; ++c) {
            double v = 1.0;
            for (i64 k = 0; k < d; ++k) v *= (c >> k) & 1 ? f[k] : 1.0 - f[k];
            w[c] = v;
        }
    }
    return record_node(g, Op::interp_weights, {&frac}, std::move(out));
}

Tensor cumsum_excl(Graph& g, const Tensor& x, const IndexArray& segs) {
    require(segs.size() >= 2 && segs.at(0) == 0 && segs.at(segs.size() - 1) == x.size(),
            "cumsum-exclusive: bad segment offsets");
    Tensor out = Tensor::zeros(x.shape);
    const double* px = x.data();
    double* po = out.data();
    for (i64 s = 0; s + 1 < segs.size(); ++s) {
        double acc = 0;
        for (i64 i = segs.at(s); i < segs.at(s + 1); ++i) {
            po[i] = acc;
            acc += px[i];
        }
    }
    return record_node(g, Op::cumsum_excl, {&x}, std::move(out),
                       [&](Node& nd) { nd.idx = segs; });
}

Tensor select(Graph& g, std::shared_ptr<std::vector<std::uint8_t>> mask, const Tensor& a,
              const Tensor& b) {
    require(a.shape == b.shape, "select: branch shapes differ: ", shape_str(a.shape), " vs ",
            shape_str(b.shape));
    require(mask && static_cast<i64>(mask->size()) == a.size(), "select: mask size mismatch");
    Tensor out = Tensor::zeros(a.shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::uint8_t* pm = mask->data();
    i64 n = a.size();
    for (i64 i = 0; i < n; ++i) po[i] = pm[i] ? pa[i] : pb[i];
    return record_node(g, Op::select, {&a, &b}, std::move(out),
                       [&](Node& nd) { nd.mask = mask; });
}

Tensor clamp(Graph& g, const Tensor& x, double lo, double hi) {
    Tensor out = Tensor::zeros(x.shape);
    const double* px = x.data();
    double* po = out.data();
    i64 n = x.size();
    for (i64 i = 0; i < n; ++i) po[i] = std::min(std::max(px[i], lo), hi);
    return record_node(g, Op::clamp, {&x}, std::move(out), [&](Node& nd) {
        nd.s0 = lo;
        nd.s1 = hi;
    });
}

Tensor custom(Graph& g, std::shared_ptr<const CustomOp> op, const std::vector<Tensor>& inputs,
              Tensor out, IndexArray idx, i64 a0) {
    if (!g.recording) return out;
    bool need = false;
    for (const Tensor& t : inputs) need |= t.requires_grad;
    if (!need) return out;
    Node n;
    n.op = Op::custom;
    n.needs_grad = true;
    n.custom = std::move(op);
    n.idx = std::move(idx);
    n.a0 = a0;
    for (const Tensor& t : inputs) n.in.push_back(g.input_id(t));
    out.requires_grad = true;
    out.gen = g.generation();
    n.out = out;
    out.node = g.add_node(std::move(n));
    return out;
}

Tensor add_scalar(Graph& g, const Tensor& a, double s) { return add(g, a, Tensor::scalar(s)); }
Tensor mul_scalar(Graph& g, const Tensor& a, double s) { return mul(g, a, Tensor::scalar(s)); }
Tensor square(Graph& g, const Tensor& x) { return mul(g, x, x); }

}  // namespace ops

// ---- backward ---------------------------------------------------------------

namespace {

// Accumulates `contrib(out_lin, a_lin, b_lin)` into the (possibly broadcast)
// operand gradients of a binary node.
template <class FA, class FB>
void binary_backward(Graph& g, const Node& n, const Tensor& gout, FA&& fa, FB&& fb) {
    const Tensor& a = g.out_of(n.in[0]);
    const Tensor& b = g.out_of(n.in[1]);
    bool need_a = g.nodes[static_cast<size_t>(n.in[0])].needs_grad;
    bool need_b = g.nodes[static_cast<size_t>(n.in[1])].needs_grad;
    double* da = need_a ? g.grad_buffer(n.in[0]) : nullptr;
    double* db = need_b ? g.grad_buffer(n.in[1]) : nullptr;
    const double* pg = gout.data();
    const double* pa = a.data();
    const double* pb = b.data();
    for_broadcast(a.shape, b.shape, n.out.shape, [&](i64 o, i64 i, i64 j) {
        if (da) da[i] += fa(pg[o], pa[i], pb[j]);
        if (db) db[j] += fb(pg[o], pa[i], pb[j]);
    });
}

}  // namespace

void Graph::backprop_node(int id, const Tensor& gout) {
    Node& n = nodes[static_cast<size_t>(id)];
    auto needs = [&](int slot) { return nodes[static_cast<size_t>(n.in[static_cast<size_t>(slot)])].needs_grad; };
    const double* pg = gout.data();
    switch (n.op) {
        case Op::leaf:
            return;
        case Op::add:
            binary_backward(*this, n, gout, [](double gv, double, double) { return gv; },
                            [](double gv, double, double) { return gv; });
            return;
        case Op::sub:
            binary_backward(*this, n, gout, [](double gv, double, double) { return gv; },
                            [](double gv, double, double) { return -gv; });
            return;
        case Op::mul:
            binary_backward(*this, n, gout, [](double gv, double, double bv) { return gv * bv; },
                            [](double gv, double av, double) { return gv * av; });
            return;
        case Op::div:
            binary_backward(*this, n, gout,
                            [](double gv, double, double bv) { return gv / bv; },
                            [](double gv, double av, double bv) { return -gv * av / (bv * bv); });
            return;
        case Op::matmul: {
            const Tensor& a = out_of(n.in[0]);
            const Tensor& b = out_of(n.in[1]);
            i64 m = a.shape[0], k = a.shape[1], nn = b.shape[1];
            if (needs(0)) {
                double* da = grad_buffer(n.in[0]);
                dgemm_rowmajor(false, true, m, k, nn, pg, nn, b.data(), nn, 1.0, da, k);
            }
            if (needs(1)) {
                double* db = grad_buffer(n.in[1]);
                dgemm_rowmajor(true, false, k, nn, m, a.data(), k, pg, nn, 1.0, db, nn);
            }
            return;
        }
        case Op::exp_: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            const double* py = n.out.data();
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += pg[i] * py[i];
            return;
        }
        case Op::log_: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            const double* px = out_of(n.in[0]).data();
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += pg[i] / px[i];
            return;
        }
        case Op::sigmoid: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            const double* py = n.out.data();
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += pg[i] * py[i] * (1.0 - py[i]);
            return;
        }
        case Op::softplus: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            const double* px = out_of(n.in[0]).data();
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += pg[i] * stable_sigmoid(px[i]);
            return;
        }
        case Op::relu: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            const double* py = n.out.data();
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += py[i] > 0 ? pg[i] : 0.0;
            return;
        }
        case Op::sum: {
            if (!needs(0)) return;
            const Tensor& x = out_of(n.in[0]);
            double* dx = grad_buffer(n.in[0]);
            if (n.a0 < 0) {
                double gv = pg[0];
                i64 cnt = x.size();
                for (i64 i = 0; i < cnt; ++i) dx[i] += gv;
            } else {
                int axis = static_cast<int>(n.a0);
                i64 outer = 1, mid = x.shape[static_cast<size_t>(axis)], inner = 1;
                for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
                for (size_t i = static_cast<size_t>(axis) + 1; i < x.ndim(); ++i)
                    inner *= x.shape[i];
                for (i64 o = 0; o < outer; ++o)
                    for (i64 m = 0; m < mid; ++m) {
                        double* dst = dx + (o * mid + m) * inner;
                        const double* src = pg + o * inner;
                        for (i64 i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            }
            return;
        }
        case Op::mean: {
            if (!needs(0)) return;
            const Tensor& x = out_of(n.in[0]);
            double* dx = grad_buffer(n.in[0]);
            double gv = pg[0] / double(std::max<i64>(x.size(), 1));
            i64 cnt = x.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += gv;
            return;
        }
        case Op::concat: {
            int axis = static_cast<int>(n.a0);
            const Shape& so = n.out.shape;
            i64 outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= so[static_cast<size_t>(i)];
            for (size_t i = static_cast<size_t>(axis) + 1; i < so.size(); ++i) inner *= so[i];
            i64 total = so[static_cast<size_t>(axis)] * inner;
            i64 off = 0;
            for (size_t s = 0; s < n.in.size(); ++s) {
                const Tensor& x = out_of(n.in[s]);
                i64 w = x.shape[static_cast<size_t>(axis)] * inner;
                if (nodes[static_cast<size_t>(n.in[s])].needs_grad) {
                    double* dx = grad_buffer(n.in[s]);
                    for (i64 o = 0; o < outer; ++o) {
                        const double* src = pg + o * total + off;
                        double* dst = dx + o * w;
                        for (i64 i = 0; i < w; ++i) dst[i] += src[i];
                    }
                }
                off += w;
            }
            return;
        }
        case Op::slice: {
            if (!needs(0)) return;
            const Tensor& x = out_of(n.in[0]);
            int axis = static_cast<int>(n.a0);
            i64 start = n.a1, len = n.a2;
            i64 dim = x.shape[static_cast<size_t>(axis)];
            i64 outer = 1, inner = 1;
            for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
            for (size_t i = static_cast<size_t>(axis) + 1; i < x.ndim(); ++i) inner *= x.shape[i];
            double* dx = grad_buffer(n.in[0]);
            for (i64 o = 0; o < outer; ++o) {
                const double* src = pg + o * len * inner;
                double* dst = dx + (o * dim + start) * inner;
                for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
            return;
        }
        case Op::reshape: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i) dx[i] += pg[i];
            return;
        }
        case Op::gather: {
            if (!needs(0)) return;
            const Tensor& x = out_of(n.in[0]);
            i64 rowsz = x.size() / std::max<i64>(x.shape[0], 1);
            double* dx = grad_buffer(n.in[0]);
            i64 cnt = n.idx.size();
            for (i64 i = 0; i < cnt; ++i) {
                double* dst = dx + n.idx.at(i) * rowsz;
                const double* src = pg + i * rowsz;
                for (i64 c = 0; c < rowsz; ++c) dst[c] += src[c];
            }
            return;
        }
        case Op::scatter_add: {
            if (!needs(0)) return;
            const Tensor& x = out_of(n.in[0]);
            i64 rowsz = x.size() / std::max<i64>(x.shape[0], 1);
            double* dx = grad_buffer(n.in[0]);
            i64 cnt = n.idx.size();
            for (i64 i = 0; i < cnt; ++i) {
                const double* src = pg + n.idx.at(i) * rowsz;
                double* dst = dx + i * rowsz;
                for (i64 c = 0; c < rowsz; ++c) dst[c] += src[c];
            }
            return;
        }
        case Op::interp_weights: {
            if (!needs(0)) return;
            const Tensor& f = out_of(n.in[0]);
            i64 cnt = f.shape[0], d = f.shape[1];
            i64 corners = i64(1) << d;
            double* df = grad_buffer(n.in[0]);
            const double* pf = f.data();
            for (i64 i = 0; i < cnt; ++i) {
                const double* fr = pf + i * d;
                const double* gr = pg + i * corners;
                double* dr = df + i * d;
                for (i64 c = 0; c < corners; ++c) {
                    if (gr[c] == 0) continue;
                    for (i64 k = 0; k < d; ++k) {
                        double prod = 1.0;
                        for (i64 k2 = 0; k2 < d; ++k2) {
                            if (k2 == k) continue;
                            prod *= (c >> k2) & 1 ? fr[k2] : 1.0 - fr[k2];
                        }
                        dr[k] += gr[c] * ((c >> k) & 1 ? prod : -prod);
                    }
                }
            }
            return;
        }
        case Op::cumsum_excl: {
            if (!needs(0)) return;
            double* dx = grad_buffer(n.in[0]);
            for (i64 s = 0; s + 1 < n.idx.size(); ++s) {
                double acc = 0;
                for (i64 i = n.idx.at(s + 1) - 1; i >= n.idx.at(s); --i) {
                    dx[i] += acc;
                    acc += pg[i];
                }
            }
            return;
        }
        case Op::select: {
            const std::uint8_t* pm = n.mask->data();
            i64 cnt = n.out.size();
            if (needs(0)) {
                double* da = grad_buffer(n.in[0]);
                for (i64 i = 0; i < cnt; ++i)
                    if (pm[i]) da[i] += pg[i];
            }
            if (needs(1)) {
                double* db = grad_buffer(n.in[1]);
                for (i64 i = 0; i < cnt; ++i)
                    if (!pm[i]) db[i] += pg[i];
            }
            return;
        }
        case Op::clamp: {
            if (!needs(0)) return;
            const double* px = out_of(n.in[0]).data();
            double* dx = grad_buffer(n.in[0]);
            i64 cnt = n.out.size();
            for (i64 i = 0; i < cnt; ++i)
                if (px[i] >= n.s0 && px[i] <= n.s1) dx[i] += pg[i];
            return;
        }
        case Op::custom:
            n.custom->backward(*this, n, gout);
            return;
    }
}

// ---- finite differences -------------------------------------------------------

double finite_diff_check(
    const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, double h) {
    std::vector<Tensor> p;
    p.reserve(params.size());
    for (const Tensor& t : params) {
        Tensor c = t.clone();
        c.requires_grad = true;
        p.push_back(std::move(c));
    }
    Graph g;
    Tensor loss = f(g, p);
    if (!loss.defined() || loss.size() != 1 || !std::isfinite(loss.item()))
        return std::numeric_limits<double>::infinity();
    g.backward(loss);
    std::vector<Tensor> grads;
    for (const Tensor& t : p) grads.push_back(g.grad(t));

    auto eval = [&](const std::vector<Tensor>& q) {
        Graph ng;
        ng.recording = false;
        return f(ng, q).item();
    };

    double worst = 0;
    for (size_t pi = 0; pi < p.size(); ++pi) {
        double* v = p[pi].data();
        i64 cnt = p[pi].size();
        for (i64 i = 0; i < cnt; ++i) {
            double keep = v[i];
            v[i] = keep + h;
            double fp = eval(p);
            v[i] = keep - h;
            double fm = eval(p);
            v[i] = keep;
            double num = (fp - fm) / (2 * h);
            double ana = grads[pi].at(i);
            if (!std::isfinite(num) || !std::isfinite(ana))
                return std::numeric_limits<double>::infinity();
            double rel = std::abs(num - ana) / (std::abs(ana) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace strata
