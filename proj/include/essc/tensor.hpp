#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace essc {

// Dense double-precision tensors recorded on a reverse-mode tape.
//
// Layout is row-major with the last axis fastest. Volumetric features use
// axis order (channel, D, H, W); voxel grids with extents (X, Y, Z) map to
// (D, H, W) so that a grid's linear index x*(Y*Z) + y*Z + z equals the
// spatial linear index of the feature tensor.

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode;
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;

    const std::vector<double>& values() const;
    // Mutable access is for leaf initialization and optimizer updates only.
    std::vector<double>& mutable_values();

    double item() const;  // value of a 1-element tensor

    bool requires_grad() const;
    bool is_leaf() const;
    // Gradient buffer populated by backward(); throws if absent.
    const std::vector<double>& grad() const;

    // Identity of the underlying node (copies share it).
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor detail_wrap(std::shared_ptr<detail::TensorNode> n);
    friend const std::shared_ptr<detail::TensorNode>& detail_unwrap(const Tensor& t);
};

// Topologically ordered record of the operations reachable from one root.
// Replaying it in reverse visits every node exactly once; gradients
// accumulate additively where a tensor feeds several consumers.
class Graph {
public:
    static Graph trace(const Tensor& root);
    std::size_t node_count() const { return order_.size(); }
    // Zeroes the gradients of every recorded requires_grad node, seeds the
    // root with 1 and replays backward. Deterministic for a fixed trace.
    void run_backward();

private:
    std::vector<std::shared_ptr<detail::TensorNode>> order_;  // parents before consumers
};

// Backward pass from a scalar loss; rejects non-scalar roots.
void backward(const Tensor& loss);

// ---- elementwise / structural ops -----------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sum(const Tensor& a);  // -> rank-0 scalar
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat0(const Tensor& a, const Tensor& b);  // along axis 0
Tensor leaky_relu(const Tensor& a, double slope);

// ---- dense linear algebra ---------------------------------------------------

// input [..., D_in], weight [D_out, D_in], bias [D_out] -> [..., D_out]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
// a [B, m, k], b [B, k, n] -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);

// ---- normalization ----------------------------------------------------------

// input [C, D, H, W]; per-channel standardization over the spatial extent.
Tensor instance_norm3d(const Tensor& input, double eps);
// input [..., D]; per-row standardization, then gain/shift of length D.
Tensor layer_norm(const Tensor& input, const Tensor& gain, const Tensor& shift, double eps);
// last-axis softmax with max subtraction
Tensor softmax_lastdim(const Tensor& input);

// ---- volumetric ops ---------------------------------------------------------

// input [C_in, D, H, W], weight [C_out, C_in, k, k, k] (depthwise:
// [C, 1, k, k, k]), bias [C_out]. Cubic kernel/stride/padding.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding, bool depthwise = false);
// Per-axis variant used by downsampling layers on anisotropic volumes.
Tensor conv3d_aniso(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    std::array<int, 3> stride, std::array<int, 3> padding,
                    bool depthwise = false);

Tensor nearest_upsample3d(const Tensor& input, int factor);
Tensor nearest_upsample3d_aniso(const Tensor& input, std::array<int, 3> factor);

// Non-overlapping max pooling; window == stride per axis; ties take the
// first element in scan order.
Tensor maxpool3d(const Tensor& input, std::array<int, 3> window);

// ---- attention --------------------------------------------------------------

// Q [h, N_q, d], K/V [h, N_k, d]; optional row-major mask [N_q, N_k] with
// nonzero = key allowed. Masked-out logits act as -inf before softmax; a
// query row with no allowed key is rejected.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<uint8_t>* mask = nullptr);

// Windowed cross-attention over a volume: q, k, v are [C, D, H, W] with
// C = heads * head_dim. Each query voxel attends to the k/v voxels inside
// the window^3 box centered on it, shifted to stay in bounds (truncated
// only when an axis extent is smaller than the window).
Tensor windowed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          int heads, int window);

// ---- lookups ----------------------------------------------------------------

// table [R, E], labels of length X*Y*Z -> [E, X, Y, Z]; gradients flow into
// the table rows actually used.
Tensor embed_lookup(const Tensor& table, const std::vector<uint16_t>& labels,
                    std::array<std::size_t, 3> spatial);

// f [C, ...], gamma/beta [C]: (1 + gamma_c) * f + beta_c broadcast over the
// trailing axes.
Tensor channel_affine(const Tensor& f, const Tensor& gamma, const Tensor& beta);

}  // namespace essc
