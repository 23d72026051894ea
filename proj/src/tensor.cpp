#include "essc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "essc/common.hpp"
#include "essc/tensor_detail.hpp"

namespace essc {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// ---- Tensor handle ---------------------------------------------------------

Tensor detail_wrap(NodePtr n) { return Tensor(std::move(n)); }
const NodePtr& detail_unwrap(const Tensor& t) {
    if (!t.node_) throw internal_error("tensor: use of an undefined tensor");
    return t.node_;
}

static NodePtr make_leaf(Shape shape, std::vector<double> v, bool requires_grad) {
    if (shape_size(shape) != v.size())
        fail("tensor", "value count " + std::to_string(v.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->leaf = true;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(shape_size(shape), 0.0);
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(shape_size(shape), value);
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> v, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_leaf(Shape{}, {v}, requires_grad));
}

const Shape& Tensor::shape() const { return detail_unwrap(*this)->shape; }
std::size_t Tensor::size() const { return detail_unwrap(*this)->value.size(); }
const std::vector<double>& Tensor::values() const { return detail_unwrap(*this)->value; }

std::vector<double>& Tensor::mutable_values() {
    auto& n = detail_unwrap(*this);
    if (!n->leaf) throw internal_error("tensor: mutable access to a non-leaf node");
    return n->value;
}

double Tensor::item() const {
    const auto& n = detail_unwrap(*this);
    if (n->value.size() != 1) fail("item", "tensor " + shape_str(n->shape) + " is not a scalar");
    return n->value[0];
}

bool Tensor::requires_grad() const { return detail_unwrap(*this)->requires_grad; }
bool Tensor::is_leaf() const { return detail_unwrap(*this)->leaf; }

const std::vector<double>& Tensor::grad() const {
    const auto& n = detail_unwrap(*this);
    if (!n->requires_grad) fail("grad", "tensor does not require gradients");
    if (n->grad.size() != n->value.size()) fail("grad", "no gradient populated; run backward first");
    return n->grad;
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<NodePtr> parents, std::function<void(TensorNode&)> backward) {
    auto n = std::make_shared<TensorNode>();
    if (shape_size(shape) != value.size())
        throw internal_error(std::string(op) + ": output size mismatch");
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->leaf = false;
    n->op = op;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    if (n->requires_grad) n->backward = std::move(backward);
    return detail_wrap(std::move(n));
}

// ---- Graph ------------------------------------------------------------------

Graph Graph::trace(const Tensor& root) {
    Graph g;
    struct Frame {
        NodePtr node;
        std::size_t next = 0;
    };
    std::unordered_set<TensorNode*> done;
    std::vector<Frame> stack;
    stack.push_back({detail_unwrap(root), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (done.count(f.node.get())) {
            stack.pop_back();
            continue;
        }
        if (f.next < f.node->parents.size()) {
            NodePtr p = f.node->parents[f.next++];
            if (!done.count(p.get())) stack.push_back({std::move(p), 0});
        } else {
            done.insert(f.node.get());
            g.order_.push_back(f.node);
            stack.pop_back();
        }
    }
    return g;
}

void Graph::run_backward() {
    if (order_.empty()) return;
    for (const auto& n : order_) {
        if (n->requires_grad) {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    TensorNode* root = order_.back().get();
    if (!root->requires_grad) return;  // nothing depends on a differentiable leaf
    root->grad.assign(root->value.size(), 1.0);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode* n = it->get();
        if (n->requires_grad && n->backward) n->backward(*n);
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) fail("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    Graph::trace(loss).run_backward();
}

// ---- helpers ----------------------------------------------------------------

namespace {

bool wants(const TensorNode& n, std::size_t parent) {
    return n.parents[parent]->requires_grad;
}

std::vector<double>& pgrad(TensorNode& n, std::size_t parent) {
    return n.parents[parent]->grad;
}

const std::vector<double>& pval(const TensorNode& n, std::size_t parent) {
    return n.parents[parent]->value;
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op("add", a.shape(), std::move(out), {detail_unwrap(a), detail_unwrap(b)},
                   [](TensorNode& n) {
                       for (std::size_t p = 0; p < 2; ++p) {
                           if (!wants(n, p)) continue;
                           auto& g = pgrad(n, p);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                       }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op("sub", a.shape(), std::move(out), {detail_unwrap(a), detail_unwrap(b)},
                   [](TensorNode& n) {
                       if (wants(n, 0)) {
                           auto& g = pgrad(n, 0);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                       }
                       if (wants(n, 1)) {
                           auto& g = pgrad(n, 1);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                       }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul",
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op("mul", a.shape(), std::move(out), {detail_unwrap(a), detail_unwrap(b)},
                   [](TensorNode& n) {
                       const auto& av = pval(n, 0);
                       const auto& bv = pval(n, 1);
                       if (wants(n, 0)) {
                           auto& g = pgrad(n, 0);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
                       }
                       if (wants(n, 1)) {
                           auto& g = pgrad(n, 1);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
                       }
                   });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make_op("scale", a.shape(), std::move(out), {detail_unwrap(a)},
                   [c](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& g = pgrad(n, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
                   });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return make_op("add_scalar", a.shape(), std::move(out), {detail_unwrap(a)},
                   [](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& g = pgrad(n, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                   });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_op("sum", Shape{}, {s}, {detail_unwrap(a)}, [](TensorNode& n) {
        if (!wants(n, 0)) return;
        auto& g = pgrad(n, 0);
        const double go = n.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
    });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    require(slope >= 0.0 && slope < 1.0, "leaky_relu", "slope must be in [0, 1)");
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= 0.0 ? av[i] : slope * av[i];
    return make_op("leaky_relu", a.shape(), std::move(out), {detail_unwrap(a)},
                   [slope](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       const auto& x = pval(n, 0);
                       auto& g = pgrad(n, 0);
                       for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += n.grad[i] * (x[i] >= 0.0 ? 1.0 : slope);
                   });
}

// ---- structural -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_size(shape) == a.size(), "reshape",
            "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out = a.values();
    return make_op("reshape", std::move(shape), std::move(out), {detail_unwrap(a)},
                   [](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& g = pgrad(n, 0);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                   });
}

static std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const Shape& in = a.shape();
    require(axes.size() == in.size(), "permute", "axes rank mismatch");
    std::vector<bool> seen(in.size(), false);
    Shape out_shape(in.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        require(axes[i] < in.size() && !seen[axes[i]], "permute", "axes must be a permutation");
        seen[axes[i]] = true;
        out_shape[i] = in[axes[i]];
    }
    auto in_strides = strides_of(in);
    // out linear index -> in linear index
    std::vector<std::size_t> out_strides_in(in.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_strides_in[i] = in_strides[axes[i]];
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const auto& av = a.values();
    std::vector<std::size_t> idx(out_shape.size(), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
        out[o] = av[src];
        // advance mixed-radix counter over out_shape, updating src
        for (std::size_t ax = out_shape.size(); ax-- > 0;) {
            src += out_strides_in[ax];
            if (++idx[ax] < out_shape[ax]) break;
            idx[ax] = 0;
            src -= out_strides_in[ax] * out_shape[ax];
        }
    }
    auto mapping = out_strides_in;
    auto oshape = out_shape;
    return make_op("permute", std::move(out_shape), std::move(out), {detail_unwrap(a)},
                   [mapping, oshape](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& g = pgrad(n, 0);
                       std::vector<std::size_t> idx(oshape.size(), 0);
                       std::size_t src = 0;
                       for (std::size_t o = 0; o < n.grad.size(); ++o) {
                           g[src] += n.grad[o];
                           for (std::size_t ax = oshape.size(); ax-- > 0;) {
                               src += mapping[ax];
                               if (++idx[ax] < oshape[ax]) break;
                               idx[ax] = 0;
                               src -= mapping[ax] * oshape[ax];
                           }
                       }
                   });
}

Tensor concat0(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.size() == sb.size() && !sa.empty(), "concat0", "rank mismatch");
    for (std::size_t i = 1; i < sa.size(); ++i)
        require(sa[i] == sb[i], "concat0",
                "trailing axis " + std::to_string(i) + " mismatch: " + shape_str(sa) + " vs " + shape_str(sb));
    Shape out_shape = sa;
    out_shape[0] += sb[0];
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    const std::size_t na = a.size();
    return make_op("concat0", std::move(out_shape), std::move(out),
                   {detail_unwrap(a), detail_unwrap(b)}, [na](TensorNode& n) {
                       if (wants(n, 0)) {
                           auto& g = pgrad(n, 0);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                       }
                       if (wants(n, 1)) {
                           auto& g = pgrad(n, 1);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[na + i];
                       }
                   });
}

// ---- linear -----------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    const Shape& is = input.shape();
    require(!is.empty(), "linear", "input must have rank >= 1");
    require(weight.rank() == 2, "linear", "weight must be [D_out, D_in]");
    const std::size_t d_in = is.back();
    const std::size_t d_out = weight.shape()[0];
    require(weight.shape()[1] == d_in, "linear",
            "last input axis " + std::to_string(d_in) + " does not match weight D_in " +
                std::to_string(weight.shape()[1]));
    require(bias.rank() == 1 && bias.shape()[0] == d_out, "linear", "bias must be [D_out]");
    const std::size_t rows = input.size() / d_in;
    Shape out_shape = is;
    out_shape.back() = d_out;
    std::vector<double> out(rows * d_out);
    const auto& x = input.values();
    const auto& w = weight.values();
    const auto& b = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d_in;
        double* yr = out.data() + r * d_out;
        for (std::size_t o = 0; o < d_out; ++o) {
            const double* wo = w.data() + o * d_in;
            double acc = b[o];
            for (std::size_t i = 0; i < d_in; ++i) acc += xr[i] * wo[i];
            yr[o] = acc;
        }
    }
    return make_op("linear", std::move(out_shape), std::move(out),
                   {detail_unwrap(input), detail_unwrap(weight), detail_unwrap(bias)},
                   [rows, d_in, d_out](TensorNode& n) {
                       const auto& x = pval(n, 0);
                       const auto& w = pval(n, 1);
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* gr = n.grad.data() + r * d_out;
                           if (wants(n, 0)) {
                               double* gx = pgrad(n, 0).data() + r * d_in;
                               for (std::size_t o = 0; o < d_out; ++o) {
                                   const double go = gr[o];
                                   const double* wo = w.data() + o * d_in;
                                   for (std::size_t i = 0; i < d_in; ++i) gx[i] += go * wo[i];
                               }
                           }
                           if (wants(n, 1)) {
                               const double* xr = x.data() + r * d_in;
                               double* gw = pgrad(n, 1).data();
                               for (std::size_t o = 0; o < d_out; ++o) {
                                   const double go = gr[o];
                                   double* gwo = gw + o * d_in;
                                   for (std::size_t i = 0; i < d_in; ++i) gwo[i] += go * xr[i];
                               }
                           }
                           if (wants(n, 2)) {
                               double* gb = pgrad(n, 2).data();
                               for (std::size_t o = 0; o < d_out; ++o) gb[o] += gr[o];
                           }
                       }
                   });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3, "bmm", "inputs must be rank 3");
    const std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    require(b.shape()[0] == B, "bmm", "batch axis mismatch");
    require(b.shape()[1] == k, "bmm",
            "inner axis mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t nn = b.shape()[2];
    std::vector<double> out(B * m * nn, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t bb = 0; bb < B; ++bb) {
        const double* A = av.data() + bb * m * k;
        const double* Bm = bv.data() + bb * k * nn;
        double* C = out.data() + bb * m * nn;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = A[i * k + kk];
                const double* brow = Bm + kk * nn;
                double* crow = C + i * nn;
                for (std::size_t j = 0; j < nn; ++j) crow[j] += aik * brow[j];
            }
        }
    }
    return make_op("bmm", Shape{B, m, nn}, std::move(out), {detail_unwrap(a), detail_unwrap(b)},
                   [B, m, k, nn](TensorNode& n) {
                       const auto& av = pval(n, 0);
                       const auto& bv = pval(n, 1);
                       for (std::size_t bb = 0; bb < B; ++bb) {
                           const double* A = av.data() + bb * m * k;
                           const double* Bm = bv.data() + bb * k * nn;
                           const double* G = n.grad.data() + bb * m * nn;
                           if (wants(n, 0)) {
                               double* gA = pgrad(n, 0).data() + bb * m * k;
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t kk = 0; kk < k; ++kk) {
                                       const double* brow = Bm + kk * nn;
                                       const double* grow = G + i * nn;
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
                                       gA[i * k + kk] += acc;
                                   }
                           }
                           if (wants(n, 1)) {
                               double* gB = pgrad(n, 1).data() + bb * k * nn;
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t kk = 0; kk < k; ++kk) {
                                       const double aik = A[i * k + kk];
                                       const double* grow = G + i * nn;
                                       double* gbrow = gB + kk * nn;
                                       for (std::size_t j = 0; j < nn; ++j) gbrow[j] += aik * grow[j];
                                   }
                           }
                       }
                   });
}

// ---- normalization ----------------------------------------------------------

Tensor instance_norm3d(const Tensor& input, double eps) {
    require(input.rank() == 4, "instance_norm3d", "input must be [C, D, H, W]");
    require(eps >= 0.0, "instance_norm3d", "eps must be nonnegative");
    const Shape& s = input.shape();
    const std::size_t C = s[0], sp = s[1] * s[2] * s[3];
    require(sp >= 2 || eps > 0.0, "instance_norm3d",
            "single-voxel spatial extent with eps=0 divides by zero variance");
    const auto& x = input.values();
    std::vector<double> out(x.size());
    std::vector<double> inv(C);
    for (std::size_t c = 0; c < C; ++c) {
        const double* xc = x.data() + c * sp;
        double mean = 0.0;
        for (std::size_t i = 0; i < sp; ++i) mean += xc[i];
        mean /= double(sp);
        double var = 0.0;
        for (std::size_t i = 0; i < sp; ++i) {
            const double d = xc[i] - mean;
            var += d * d;
        }
        var /= double(sp);
        const double denom = var + eps;
        if (denom <= 0.0)
            fail("instance_norm3d", "zero variance with eps=0 in channel " + std::to_string(c));
        inv[c] = 1.0 / std::sqrt(denom);
        double* yc = out.data() + c * sp;
        for (std::size_t i = 0; i < sp; ++i) yc[i] = (xc[i] - mean) * inv[c];
    }
    return make_op("instance_norm3d", s, std::move(out), {detail_unwrap(input)},
                   [C, sp, inv](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& gx = pgrad(n, 0);
                       const auto& y = n.value;  // y is the standardized input
                       for (std::size_t c = 0; c < C; ++c) {
                           const double* gc = n.grad.data() + c * sp;
                           const double* yc = y.data() + c * sp;
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t i = 0; i < sp; ++i) {
                               m1 += gc[i];
                               m2 += gc[i] * yc[i];
                           }
                           m1 /= double(sp);
                           m2 /= double(sp);
                           double* gxc = gx.data() + c * sp;
                           for (std::size_t i = 0; i < sp; ++i)
                               gxc[i] += inv[c] * (gc[i] - m1 - yc[i] * m2);
                       }
                   });
}

Tensor layer_norm(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps) {
    const Shape& s = input.shape();
    require(!s.empty(), "layer_norm", "input must have rank >= 1");
    const std::size_t D = s.back();
    require(eps >= 0.0, "layer_norm", "eps must be nonnegative");
    require(D >= 2 || eps > 0.0, "layer_norm", "normalized axis of extent 1 needs eps > 0");
    require(gain.rank() == 1 && gain.shape()[0] == D, "layer_norm", "gain must be [D]");
    require(shift.rank() == 1 && shift.shape()[0] == D, "layer_norm", "shift must be [D]");
    const std::size_t rows = input.size() / D;
    const auto& x = input.values();
    const auto& g = gain.values();
    const auto& b = shift.values();
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * D;
        double mean = 0.0;
        for (std::size_t i = 0; i < D; ++i) mean += xr[i];
        mean /= double(D);
        double var = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            const double d = xr[i] - mean;
            var += d * d;
        }
        var /= double(D);
        const double denom = var + eps;
        if (denom <= 0.0) fail("layer_norm", "zero variance with eps=0 in row " + std::to_string(r));
        inv[r] = 1.0 / std::sqrt(denom);
        for (std::size_t i = 0; i < D; ++i) {
            const double h = (xr[i] - mean) * inv[r];
            xhat[r * D + i] = h;
            out[r * D + i] = h * g[i] + b[i];
        }
    }
    return make_op(
        "layer_norm", s, std::move(out),
        {detail_unwrap(input), detail_unwrap(gain), detail_unwrap(shift)},
        [rows, D, xhat = std::move(xhat), inv = std::move(inv)](TensorNode& n) {
            const auto& g = pval(n, 1);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = n.grad.data() + r * D;
                const double* hr = xhat.data() + r * D;
                if (wants(n, 0)) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < D; ++i) {
                        const double dh = gr[i] * g[i];
                        m1 += dh;
                        m2 += dh * hr[i];
                    }
                    m1 /= double(D);
                    m2 /= double(D);
                    double* gx = pgrad(n, 0).data() + r * D;
                    for (std::size_t i = 0; i < D; ++i)
                        gx[i] += inv[r] * (gr[i] * g[i] - m1 - hr[i] * m2);
                }
                if (wants(n, 1)) {
                    double* gg = pgrad(n, 1).data();
                    for (std::size_t i = 0; i < D; ++i) gg[i] += gr[i] * hr[i];
                }
                if (wants(n, 2)) {
                    double* gb = pgrad(n, 2).data();
                    for (std::size_t i = 0; i < D; ++i) gb[i] += gr[i];
                }
            }
        });
}

// Shared softmax kernel. mask_rows == 0 means no mask; otherwise row r of
// the flattened input uses mask row (r % mask_rows), nonzero = allowed.
static Tensor softmax_impl(const Tensor& input, std::vector<uint8_t> mask, std::size_t mask_rows) {
    const Shape& s = input.shape();
    require(!s.empty() && s.back() >= 1, "softmax", "last axis must have extent >= 1");
    const std::size_t n = s.back();
    const std::size_t rows = input.size() / n;
    if (mask_rows) {
        require(mask.size() == mask_rows * n, "softmax", "mask size mismatch");
        require(rows % mask_rows == 0, "softmax", "mask rows do not divide input rows");
    }
    const auto& x = input.values();
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        const uint8_t* mr = mask_rows ? mask.data() + (r % mask_rows) * n : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i)
            if ((!mr || mr[i]) && xr[i] > mx) mx = xr[i];
        if (mx == -std::numeric_limits<double>::infinity())
            fail("softmax", "row " + std::to_string(r) + " has no allowed entries");
        double denom = 0.0;
        double* yr = out.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) {
            if (mr && !mr[i]) continue;
            yr[i] = std::exp(xr[i] - mx);
            denom += yr[i];
        }
        for (std::size_t i = 0; i < n; ++i) yr[i] /= denom;
    }
    return make_op("softmax", s, std::move(out), {detail_unwrap(input)},
                   [rows, n](TensorNode& nd) {
                       if (!wants(nd, 0)) return;
                       auto& gx = pgrad(nd, 0);
                       const auto& y = nd.value;
                       for (std::size_t r = 0; r < rows; ++r) {
                           const double* yr = y.data() + r * n;
                           const double* gr = nd.grad.data() + r * n;
                           double dot = 0.0;
                           for (std::size_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
                           double* gxr = gx.data() + r * n;
                           for (std::size_t i = 0; i < n; ++i) gxr[i] += yr[i] * (gr[i] - dot);
                       }
                   });
}

Tensor softmax_lastdim(const Tensor& input) { return softmax_impl(input, {}, 0); }

// ---- conv3d -----------------------------------------------------------------

namespace {

// Valid output range along one axis for a fixed kernel offset:
// indices o with 0 <= o*stride - pad + k < extent.
struct AxisRange {
    std::size_t lo, hi;  // [lo, hi)
};

AxisRange conv_axis_range(std::size_t out_extent, std::size_t in_extent, int stride, int pad, int k) {
    long lo = 0;
    const long num = pad - k;
    if (num > 0) lo = (num + stride - 1) / stride;
    const long top = long(in_extent) + pad - k - 1;
    long hi = top < 0 ? 0 : top / stride + 1;
    if (hi > long(out_extent)) hi = long(out_extent);
    if (hi < lo) hi = lo;
    return {std::size_t(lo), std::size_t(hi)};
}

struct ConvGeom {
    std::size_t c_in, c_out;
    bool depthwise;
    std::array<std::size_t, 3> in_sp, out_sp, k;
    std::array<int, 3> stride, padding;
    std::size_t in_hw, out_hw, in_chan, out_chan, kvol;
};

// Walks every (c_out, c_in, kernel offset) combination with its valid output
// ranges; shared by forward and backward so the iteration order is identical.
template <typename Body>
void conv_walk(const ConvGeom& g, Body&& body) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
        const std::size_t ci_lo = g.depthwise ? co : 0;
        const std::size_t ci_hi = g.depthwise ? co + 1 : g.c_in;
        for (std::size_t ci = ci_lo; ci < ci_hi; ++ci) {
            const std::size_t wbase = (co * (g.depthwise ? 1 : g.c_in) + (g.depthwise ? 0 : ci)) * g.kvol;
            for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
                auto rd = conv_axis_range(g.out_sp[0], g.in_sp[0], g.stride[0], g.padding[0], int(kd));
                if (rd.lo >= rd.hi) continue;
                for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
                    auto rh = conv_axis_range(g.out_sp[1], g.in_sp[1], g.stride[1], g.padding[1], int(kh));
                    if (rh.lo >= rh.hi) continue;
                    for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
                        auto rw = conv_axis_range(g.out_sp[2], g.in_sp[2], g.stride[2], g.padding[2], int(kw));
                        if (rw.lo >= rw.hi) continue;
                        body(co, ci, wbase + (kd * g.k[1] + kh) * g.k[2] + kw, kd, kh, kw, rd, rh, rw);
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv3d_aniso(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    std::array<int, 3> stride, std::array<int, 3> padding, bool depthwise) {
    require(input.rank() == 4, "conv3d", "input must be [C_in, D, H, W], got " + shape_str(input.shape()));
    require(weight.rank() == 5, "conv3d", "weight must be [C_out, C_in, kD, kH, kW]");
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    ConvGeom g;
    g.c_in = is[0];
    g.c_out = ws[0];
    g.depthwise = depthwise;
    g.stride = stride;
    g.padding = padding;
    for (int a = 0; a < 3; ++a) {
        require(stride[a] == 1 || stride[a] == 2, "conv3d", "stride must be 1 or 2");
        require(padding[a] >= 0, "conv3d", "padding must be nonnegative");
        require(ws[2 + a] >= 1, "conv3d", "kernel axis " + std::to_string(a) + " must be >= 1");
    }
    if (depthwise) {
        require(g.c_out == g.c_in, "conv3d", "depthwise needs C_out == C_in, got C_out " +
                                                 std::to_string(g.c_out) + " C_in " + std::to_string(g.c_in));
        require(ws[1] == 1, "conv3d",
                "depthwise weight channel axis must be 1, got " + std::to_string(ws[1]));
    } else {
        require(ws[1] == g.c_in, "conv3d", "weight input-channel axis " + std::to_string(ws[1]) +
                                               " does not match input channels " + std::to_string(g.c_in));
    }
    require(bias.rank() == 1 && bias.shape()[0] == g.c_out, "conv3d", "bias must be [C_out]");

    g.in_sp = {is[1], is[2], is[3]};
    g.k = {ws[2], ws[3], ws[4]};
    for (int a = 0; a < 3; ++a) {
        const long o = (long(g.in_sp[a]) + 2 * padding[a] - long(g.k[a])) / stride[a] + 1;
        require(o >= 1, "conv3d", "output axis " + std::to_string(a) + " collapses: extent " +
                                      std::to_string(g.in_sp[a]) + ", kernel " + std::to_string(g.k[a]));
        g.out_sp[a] = std::size_t(o);
    }
    g.in_hw = g.in_sp[1] * g.in_sp[2];
    g.out_hw = g.out_sp[1] * g.out_sp[2];
    g.in_chan = g.in_sp[0] * g.in_hw;
    g.out_chan = g.out_sp[0] * g.out_hw;
    g.kvol = g.k[0] * g.k[1] * g.k[2];

    const auto& x = input.values();
    const auto& w = weight.values();
    const auto& b = bias.values();
    std::vector<double> out(g.c_out * g.out_chan);
    for (std::size_t co = 0; co < g.c_out; ++co)
        std::fill(out.begin() + co * g.out_chan, out.begin() + (co + 1) * g.out_chan, b[co]);

    conv_walk(g, [&](std::size_t co, std::size_t ci, std::size_t wi, std::size_t kd, std::size_t kh,
                     std::size_t kw, AxisRange rd, AxisRange rh, AxisRange rw) {
        const double wv = w[wi];
        if (wv == 0.0) return;
        const long kwoff = long(kw) - g.padding[2];
        for (std::size_t od = rd.lo; od < rd.hi; ++od) {
            const std::size_t id = od * g.stride[0] - g.padding[0] + kd;
            for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                const std::size_t ih = oh * g.stride[1] - g.padding[1] + kh;
                const double* xrow = x.data() + ci * g.in_chan + id * g.in_hw + ih * g.in_sp[2];
                double* yrow = out.data() + co * g.out_chan + od * g.out_hw + oh * g.out_sp[2];
                if (g.stride[2] == 1) {
                    for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                        yrow[ow] += wv * xrow[long(ow) + kwoff];
                } else {
                    for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                        yrow[ow] += wv * xrow[long(ow) * 2 + kwoff];
                }
            }
        }
    });

    Shape out_shape = {g.c_out, g.out_sp[0], g.out_sp[1], g.out_sp[2]};
    return make_op(
        "conv3d", std::move(out_shape), std::move(out),
        {detail_unwrap(input), detail_unwrap(weight), detail_unwrap(bias)},
        [g](TensorNode& n) {
            const auto& x = pval(n, 0);
            const auto& w = pval(n, 1);
            const bool want_x = wants(n, 0);
            const bool want_w = wants(n, 1);
            if (wants(n, 2)) {
                auto& gb = pgrad(n, 2);
                for (std::size_t co = 0; co < g.c_out; ++co) {
                    const double* grow = n.grad.data() + co * g.out_chan;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.out_chan; ++i) acc += grow[i];
                    gb[co] += acc;
                }
            }
            if (!want_x && !want_w) return;
            conv_walk(g, [&](std::size_t co, std::size_t ci, std::size_t wi, std::size_t kd,
                             std::size_t kh, std::size_t kw, AxisRange rd, AxisRange rh, AxisRange rw) {
                const double wv = w[wi];
                const long kwoff = long(kw) - g.padding[2];
                double wacc = 0.0;
                for (std::size_t od = rd.lo; od < rd.hi; ++od) {
                    const std::size_t id = od * g.stride[0] - g.padding[0] + kd;
                    for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                        const std::size_t ih = oh * g.stride[1] - g.padding[1] + kh;
                        const std::size_t row0 = ci * g.in_chan + id * g.in_hw + ih * g.in_sp[2];
                        const double* grow = n.grad.data() + co * g.out_chan + od * g.out_hw + oh * g.out_sp[2];
                        if (want_w) {
                            const double* xrow = x.data() + row0;
                            if (g.stride[2] == 1) {
                                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                                    wacc += grow[ow] * xrow[long(ow) + kwoff];
                            } else {
                                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                                    wacc += grow[ow] * xrow[long(ow) * 2 + kwoff];
                            }
                        }
                        if (want_x && wv != 0.0) {
                            double* gxrow = pgrad(n, 0).data() + row0;
                            if (g.stride[2] == 1) {
                                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                                    gxrow[long(ow) + kwoff] += wv * grow[ow];
                            } else {
                                for (std::size_t ow = rw.lo; ow < rw.hi; ++ow)
                                    gxrow[long(ow) * 2 + kwoff] += wv * grow[ow];
                            }
                        }
                    }
                }
                if (want_w) pgrad(n, 1)[wi] += wacc;
            });
        });
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, bool depthwise) {
    return conv3d_aniso(input, weight, bias, {stride, stride, stride},
                        {padding, padding, padding}, depthwise);
}

// ---- resampling -------------------------------------------------------------

Tensor nearest_upsample3d_aniso(const Tensor& input, std::array<int, 3> factor) {
    require(input.rank() == 4, "nearest_upsample3d", "input must be [C, D, H, W]");
    for (int a = 0; a < 3; ++a)
        require(factor[a] >= 1, "nearest_upsample3d", "factor must be >= 1");
    const Shape& s = input.shape();
    const std::size_t C = s[0];
    const std::array<std::size_t, 3> in_sp = {s[1], s[2], s[3]};
    const std::array<std::size_t, 3> f = {std::size_t(factor[0]), std::size_t(factor[1]),
                                          std::size_t(factor[2])};
    const std::array<std::size_t, 3> out_sp = {in_sp[0] * f[0], in_sp[1] * f[1], in_sp[2] * f[2]};
    const std::size_t in_chan = in_sp[0] * in_sp[1] * in_sp[2];
    const std::size_t out_chan = out_sp[0] * out_sp[1] * out_sp[2];
    const auto& x = input.values();
    std::vector<double> out(C * out_chan);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < out_sp[0]; ++d)
            for (std::size_t h = 0; h < out_sp[1]; ++h) {
                const double* xrow =
                    x.data() + c * in_chan + (d / f[0]) * in_sp[1] * in_sp[2] + (h / f[1]) * in_sp[2];
                double* yrow = out.data() + c * out_chan + d * out_sp[1] * out_sp[2] + h * out_sp[2];
                for (std::size_t w = 0; w < out_sp[2]; ++w) yrow[w] = xrow[w / f[2]];
            }
    Shape out_shape = {C, out_sp[0], out_sp[1], out_sp[2]};
    return make_op("nearest_upsample3d", std::move(out_shape), std::move(out), {detail_unwrap(input)},
                   [C, in_sp, out_sp, f, in_chan, out_chan](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& gx = pgrad(n, 0);
                       for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t d = 0; d < out_sp[0]; ++d)
                               for (std::size_t h = 0; h < out_sp[1]; ++h) {
                                   double* gxrow = gx.data() + c * in_chan +
                                                   (d / f[0]) * in_sp[1] * in_sp[2] +
                                                   (h / f[1]) * in_sp[2];
                                   const double* grow = n.grad.data() + c * out_chan +
                                                        d * out_sp[1] * out_sp[2] + h * out_sp[2];
                                   for (std::size_t w = 0; w < out_sp[2]; ++w)
                                       gxrow[w / f[2]] += grow[w];
                               }
                   });
}

Tensor nearest_upsample3d(const Tensor& input, int factor) {
    require(factor >= 2, "nearest_upsample3d", "factor must be >= 2");
    return nearest_upsample3d_aniso(input, {factor, factor, factor});
}

Tensor maxpool3d(const Tensor& input, std::array<int, 3> window) {
    require(input.rank() == 4, "maxpool3d", "input must be [C, D, H, W]");
    const Shape& s = input.shape();
    const std::array<std::size_t, 3> in_sp = {s[1], s[2], s[3]};
    std::array<std::size_t, 3> w;
    for (int a = 0; a < 3; ++a) {
        require(window[a] >= 1, "maxpool3d", "window must be >= 1");
        w[a] = std::size_t(window[a]);
        require(in_sp[a] % w[a] == 0, "maxpool3d",
                "axis " + std::to_string(a) + " extent " + std::to_string(in_sp[a]) +
                    " not divisible by window " + std::to_string(w[a]));
    }
    const std::size_t C = s[0];
    const std::array<std::size_t, 3> out_sp = {in_sp[0] / w[0], in_sp[1] / w[1], in_sp[2] / w[2]};
    const std::size_t in_chan = in_sp[0] * in_sp[1] * in_sp[2];
    const std::size_t out_chan = out_sp[0] * out_sp[1] * out_sp[2];
    const auto& x = input.values();
    std::vector<double> out(C * out_chan);
    std::vector<std::size_t> argmax(C * out_chan);
    std::size_t oi = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t od = 0; od < out_sp[0]; ++od)
            for (std::size_t oh = 0; oh < out_sp[1]; ++oh)
                for (std::size_t ow = 0; ow < out_sp[2]; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_i = 0;
                    for (std::size_t kd = 0; kd < w[0]; ++kd)
                        for (std::size_t kh = 0; kh < w[1]; ++kh)
                            for (std::size_t kw = 0; kw < w[2]; ++kw) {
                                const std::size_t idx = c * in_chan +
                                                        (od * w[0] + kd) * in_sp[1] * in_sp[2] +
                                                        (oh * w[1] + kh) * in_sp[2] + ow * w[2] + kw;
                                if (x[idx] > best) {
                                    best = x[idx];
                                    best_i = idx;
                                }
                            }
                    out[oi] = best;
                    argmax[oi] = best_i;
                }
    Shape out_shape = {C, out_sp[0], out_sp[1], out_sp[2]};
    return make_op("maxpool3d", std::move(out_shape), std::move(out), {detail_unwrap(input)},
                   [argmax = std::move(argmax)](TensorNode& n) {
                       if (!wants(n, 0)) return;
                       auto& gx = pgrad(n, 0);
                       for (std::size_t i = 0; i < n.grad.size(); ++i) gx[argmax[i]] += n.grad[i];
                   });
}

// ---- attention --------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<uint8_t>* mask) {
    require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention",
            "q, k, v must be [h, N, d]");
    const std::size_t h = q.shape()[0], n_q = q.shape()[1], d = q.shape()[2];
    require(k.shape()[0] == h && v.shape()[0] == h, "attention", "head axis mismatch");
    const std::size_t n_k = k.shape()[1];
    require(k.shape()[2] == d, "attention", "key feature axis mismatch");
    require(v.shape()[1] == n_k, "attention", "value count mismatch");
    std::vector<uint8_t> m;
    if (mask) {
        require(mask->size() == n_q * n_k, "attention", "mask must be [N_q, N_k]");
        for (std::size_t r = 0; r < n_q; ++r) {
            bool any = false;
            for (std::size_t c = 0; c < n_k; ++c) any = any || (*mask)[r * n_k + c];
            require(any, "attention", "query row " + std::to_string(r) + " has no allowed keys");
        }
        m = *mask;
    }
    Tensor kt = permute(k, {0, 2, 1});
    Tensor scores = scale(bmm(q, kt), 1.0 / std::sqrt(double(d)));
    Tensor probs = softmax_impl(scores, std::move(m), mask ? n_q : 0);
    return bmm(probs, v);
}

Tensor windowed_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                          int window) {
    require(q.rank() == 4, "windowed_attention", "q must be [C, D, H, W]");
    require(q.shape() == k.shape() && q.shape() == v.shape(), "windowed_attention",
            "q, k, v shapes must match; got " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                ", " + shape_str(v.shape()));
    require(window >= 1 && window % 2 == 1, "windowed_attention", "window must be odd and >= 1");
    require(heads >= 1, "windowed_attention", "heads must be >= 1");
    const Shape& s = q.shape();
    const std::size_t C = s[0];
    require(C % std::size_t(heads) == 0, "windowed_attention",
            "channels " + std::to_string(C) + " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = C / std::size_t(heads);
    const std::array<std::size_t, 3> sp = {s[1], s[2], s[3]};
    const std::size_t n = sp[0] * sp[1] * sp[2];
    const double sigma = 1.0 / std::sqrt(double(dh));
    const std::size_t w = std::size_t(window);

    // Window bounds for one axis: shifted to stay inside, truncated only if
    // the axis is shorter than the window.
    auto axis_box = [w](std::size_t center, std::size_t extent) {
        std::size_t lo;
        const std::size_t half = w / 2;
        if (extent <= w) {
            lo = 0;
        } else if (center <= half) {
            lo = 0;
        } else if (center + half >= extent) {
            lo = extent - w;
        } else {
            lo = center - half;
        }
        const std::size_t hi = std::min(extent, lo + w);
        return std::pair<std::size_t, std::size_t>(lo, hi);
    };

    const auto& qv = q.values();
    const auto& kv = k.values();
    const auto& vv = v.values();
    std::vector<double> out(C * n, 0.0);
    // probs stored flat per (head, query) with per-query offsets
    std::vector<double> probs;
    probs.reserve(std::size_t(heads) * n * std::min<std::size_t>(w * w * w, n));
    std::vector<std::size_t> poffs(std::size_t(heads) * n + 1, 0);

    std::vector<double> sc;
    std::size_t pq = 0;
    for (std::size_t hh = 0; hh < std::size_t(heads); ++hh) {
        const std::size_t cbase = hh * dh;
        for (std::size_t d0 = 0; d0 < sp[0]; ++d0) {
            auto bd = axis_box(d0, sp[0]);
            for (std::size_t h0 = 0; h0 < sp[1]; ++h0) {
                auto bh = axis_box(h0, sp[1]);
                for (std::size_t w0 = 0; w0 < sp[2]; ++w0, ++pq) {
                    auto bw = axis_box(w0, sp[2]);
                    const std::size_t qi = (d0 * sp[1] + h0) * sp[2] + w0;
                    sc.clear();
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t dd = bd.first; dd < bd.second; ++dd)
                        for (std::size_t hh2 = bh.first; hh2 < bh.second; ++hh2)
                            for (std::size_t ww2 = bw.first; ww2 < bw.second; ++ww2) {
                                const std::size_t ki = (dd * sp[1] + hh2) * sp[2] + ww2;
                                double dot = 0.0;
                                for (std::size_t c = 0; c < dh; ++c)
                                    dot += qv[(cbase + c) * n + qi] * kv[(cbase + c) * n + ki];
                                sc.push_back(dot * sigma);
                                if (sc.back() > mx) mx = sc.back();
                            }
                    double denom = 0.0;
                    for (double& sv : sc) {
                        sv = std::exp(sv - mx);
                        denom += sv;
                    }
                    std::size_t j = 0;
                    for (std::size_t dd = bd.first; dd < bd.second; ++dd)
                        for (std::size_t hh2 = bh.first; hh2 < bh.second; ++hh2)
                            for (std::size_t ww2 = bw.first; ww2 < bw.second; ++ww2, ++j) {
                                const std::size_t ki = (dd * sp[1] + hh2) * sp[2] + ww2;
                                const double p = sc[j] / denom;
                                probs.push_back(p);
                                for (std::size_t c = 0; c < dh; ++c)
                                    out[(cbase + c) * n + qi] += p * vv[(cbase + c) * n + ki];
                            }
                    poffs[pq + 1] = probs.size();
                }
            }
        }
    }

    return make_op(
        "windowed_attention", s, std::move(out), {detail_unwrap(q), detail_unwrap(k), detail_unwrap(v)},
        [heads, dh, sp, n, sigma, axis_box, probs = std::move(probs),
         poffs = std::move(poffs)](TensorNode& nd) {
            const auto& qv = pval(nd, 0);
            const auto& kv = pval(nd, 1);
            const auto& vv = pval(nd, 2);
            const bool want_q = wants(nd, 0), want_k = wants(nd, 1), want_v = wants(nd, 2);
            std::vector<double> dp;
            std::size_t pq = 0;
            for (std::size_t hh = 0; hh < std::size_t(heads); ++hh) {
                const std::size_t cbase = hh * dh;
                for (std::size_t d0 = 0; d0 < sp[0]; ++d0) {
                    auto bd = axis_box(d0, sp[0]);
                    for (std::size_t h0 = 0; h0 < sp[1]; ++h0) {
                        auto bh = axis_box(h0, sp[1]);
                        for (std::size_t w0 = 0; w0 < sp[2]; ++w0, ++pq) {
                            auto bw = axis_box(w0, sp[2]);
                            const std::size_t qi = (d0 * sp[1] + h0) * sp[2] + w0;
                            const double* p = probs.data() + poffs[pq];
                            const std::size_t cnt = poffs[pq + 1] - poffs[pq];
                            dp.assign(cnt, 0.0);
                            // dL/dp_j = v_j . dout
                            std::size_t j = 0;
                            double dot = 0.0;
                            for (std::size_t dd = bd.first; dd < bd.second; ++dd)
                                for (std::size_t h2 = bh.first; h2 < bh.second; ++h2)
                                    for (std::size_t w2 = bw.first; w2 < bw.second; ++w2, ++j) {
                                        const std::size_t ki = (dd * sp[1] + h2) * sp[2] + w2;
                                        double acc = 0.0;
                                        for (std::size_t c = 0; c < dh; ++c)
                                            acc += vv[(cbase + c) * n + ki] *
                                                   nd.grad[(cbase + c) * n + qi];
                                        dp[j] = acc;
                                        dot += p[j] * acc;
                                        if (want_v) {
                                            auto& gv = pgrad(nd, 2);
                                            for (std::size_t c = 0; c < dh; ++c)
                                                gv[(cbase + c) * n + ki] +=
                                                    p[j] * nd.grad[(cbase + c) * n + qi];
                                        }
                                    }
                            if (!want_q && !want_k) continue;
                            // ds_j = p_j * (dp_j - sum_k p_k dp_k); chain into q, k
                            j = 0;
                            for (std::size_t dd = bd.first; dd < bd.second; ++dd)
                                for (std::size_t h2 = bh.first; h2 < bh.second; ++h2)
                                    for (std::size_t w2 = bw.first; w2 < bw.second; ++w2, ++j) {
                                        const std::size_t ki = (dd * sp[1] + h2) * sp[2] + w2;
                                        const double ds = p[j] * (dp[j] - dot) * sigma;
                                        if (ds == 0.0) continue;
                                        if (want_q) {
                                            auto& gq = pgrad(nd, 0);
                                            for (std::size_t c = 0; c < dh; ++c)
                                                gq[(cbase + c) * n + qi] +=
                                                    ds * kv[(cbase + c) * n + ki];
                                        }
                                        if (want_k) {
                                            auto& gk = pgrad(nd, 1);
                                            for (std::size_t c = 0; c < dh; ++c)
                                                gk[(cbase + c) * n + ki] +=
                                                    ds * qv[(cbase + c) * n + qi];
                                        }
                                    }
                        }
                    }
                }
            }
        });
}

// ---- lookups ----------------------------------------------------------------

Tensor embed_lookup(const Tensor& table, const std::vector<uint16_t>& labels,
                    std::array<std::size_t, 3> spatial) {
    require(table.rank() == 2, "embed_lookup", "table must be [rows, width]");
    const std::size_t rows = table.shape()[0], E = table.shape()[1];
    const std::size_t n = spatial[0] * spatial[1] * spatial[2];
    require(labels.size() == n, "embed_lookup",
            "label count " + std::to_string(labels.size()) + " does not match spatial extent " +
                std::to_string(n));
    for (std::size_t i = 0; i < n; ++i)
        require(labels[i] < rows, "embed_lookup",
                "label " + std::to_string(labels[i]) + " out of table range at voxel " +
                    std::to_string(i));
    const auto& t = table.values();
    std::vector<double> out(E * n);
    for (std::size_t e = 0; e < E; ++e)
        for (std::size_t i = 0; i < n; ++i) out[e * n + i] = t[labels[i] * E + e];
    Shape out_shape = {E, spatial[0], spatial[1], spatial[2]};
    return make_op("embed_lookup", std::move(out_shape), std::move(out), {detail_unwrap(table)},
                   [labels, E, n](TensorNode& nd) {
                       if (!wants(nd, 0)) return;
                       auto& gt = pgrad(nd, 0);
                       for (std::size_t e = 0; e < E; ++e)
                           for (std::size_t i = 0; i < n; ++i)
                               gt[labels[i] * E + e] += nd.grad[e * n + i];
                   });
}

Tensor channel_affine(const Tensor& f, const Tensor& gamma, const Tensor& beta) {
    require(f.rank() >= 1, "channel_affine", "input must have rank >= 1");
    const std::size_t C = f.shape()[0];
    require(gamma.rank() == 1 && gamma.shape()[0] == C, "channel_affine", "gamma must be [C]");
    require(beta.rank() == 1 && beta.shape()[0] == C, "channel_affine", "beta must be [C]");
    const std::size_t sp = f.size() / C;
    const auto& x = f.values();
    const auto& g = gamma.values();
    const auto& b = beta.values();
    std::vector<double> out(x.size());
    for (std::size_t c = 0; c < C; ++c) {
        const double m = 1.0 + g[c];
        const double* xc = x.data() + c * sp;
        double* yc = out.data() + c * sp;
        for (std::size_t i = 0; i < sp; ++i) yc[i] = m * xc[i] + b[c];
    }
    return make_op("channel_affine", f.shape(), std::move(out),
                   {detail_unwrap(f), detail_unwrap(gamma), detail_unwrap(beta)},
                   [C, sp](TensorNode& n) {
                       const auto& x = pval(n, 0);
                       const auto& g = pval(n, 1);
                       for (std::size_t c = 0; c < C; ++c) {
                           const double* gr = n.grad.data() + c * sp;
                           if (wants(n, 0)) {
                               const double m = 1.0 + g[c];
                               double* gx = pgrad(n, 0).data() + c * sp;
                               for (std::size_t i = 0; i < sp; ++i) gx[i] += m * gr[i];
                           }
                           if (wants(n, 1)) {
                               const double* xc = x.data() + c * sp;
                               double acc = 0.0;
                               for (std::size_t i = 0; i < sp; ++i) acc += gr[i] * xc[i];
                               pgrad(n, 1)[c] += acc;
                           }
                           if (wants(n, 2)) {
                               double acc = 0.0;
                               for (std::size_t i = 0; i < sp; ++i) acc += gr[i];
                               pgrad(n, 2)[c] += acc;
                           }
                       }
                   });
}

}  // namespace essc
