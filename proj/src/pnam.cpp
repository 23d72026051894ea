#include "essc/pnam.hpp"

#include "essc/common.hpp"

namespace essc {

namespace {

// Q/K/V streams: 1^3 pointwise conv followed by a depthwise 3^3 conv.
Tensor qkv_project(const Tensor& f, const QkvConvs& p) {
    Tensor point = conv3d(f, p.point_w, p.point_b, 1, 0);
    return conv3d(point, p.depth_w, p.depth_b, 1, 1, /*depthwise=*/true);
}

// [C, D, H, W] -> [h, N, C/h]
Tensor to_heads(const Tensor& f, int heads) {
    const std::size_t C = f.shape()[0];
    const std::size_t n = f.size() / C;
    require(heads >= 1 && C % std::size_t(heads) == 0, "pna",
            "channels " + std::to_string(C) + " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = C / std::size_t(heads);
    Tensor rows = permute(reshape(f, {C, n}), {1, 0});
    return permute(reshape(rows, {n, std::size_t(heads), dh}), {1, 0, 2});
}

Tensor from_heads(const Tensor& t, const Shape& vol_shape) {
    const std::size_t h = t.shape()[0], n = t.shape()[1], dh = t.shape()[2];
    Tensor rows = reshape(permute(t, {1, 0, 2}), {n, h * dh});
    return reshape(permute(rows, {1, 0}), vol_shape);
}

}  // namespace

Tensor self_attention_block(const Tensor& f, const AttnBranchParams& p, int heads) {
    require(f.rank() == 4, "self_attention_block", "input must be [C, D, H, W]");
    Tensor q = qkv_project(f, p.q);
    Tensor k = qkv_project(f, p.k);
    Tensor v = qkv_project(f, p.v);
    Tensor attn = attention(to_heads(q, heads), to_heads(k, heads), to_heads(v, heads));
    Tensor out = conv3d(from_heads(attn, f.shape()), p.out_w, p.out_b, 1, 0);
    return add(f, out);
}

Tensor neighborhood_cross_attention(const Tensor& f_skip, const Tensor& f_up,
                                    const AttnBranchParams& p, int heads, int window,
                                    bool query_from_skip) {
    require(f_skip.shape() == f_up.shape(), "neighborhood_cross_attention",
            "skip and upsampled streams must share a shape; got " + shape_str(f_skip.shape()) +
                " vs " + shape_str(f_up.shape()));
    const Tensor& q_src = query_from_skip ? f_skip : f_up;
    const Tensor& kv_src = query_from_skip ? f_up : f_skip;
    Tensor q = qkv_project(q_src, p.q);
    Tensor k = qkv_project(kv_src, p.k);
    Tensor v = qkv_project(kv_src, p.v);
    Tensor attn = windowed_attention(q, k, v, heads, window);
    Tensor out = conv3d(attn, p.out_w, p.out_b, 1, 0);
    return add(f_up, out);
}

Tensor pna_fab_forward(const Tensor& coarse, const Tensor& skip, const PnaFabParams& p,
                       double ln_eps, double slope, bool query_from_skip) {
    require(coarse.rank() == 4 && skip.rank() == 4, "pna_fab_forward",
            "inputs must be [C, D, H, W]");
    std::array<int, 3> factor;
    for (int a = 0; a < 3; ++a) {
        const std::size_t cs = coarse.shape()[a + 1], ss = skip.shape()[a + 1];
        require(ss % cs == 0 && (ss / cs == 1 || ss / cs == 2), "pna_fab_forward",
                "skip axis " + std::to_string(a) + " must be 1x or 2x the coarse extent");
        factor[a] = int(ss / cs);
    }
    Tensor up = coarse;
    if (factor[0] != 1 || factor[1] != 1 || factor[2] != 1)
        up = nearest_upsample3d_aniso(coarse, factor);
    Tensor f_up = conv3d(up, p.up_w, p.up_b, 1, 0);

    Tensor f_self = self_attention_block(f_up, p.sa, p.heads);
    Tensor f_cross =
        neighborhood_cross_attention(skip, f_up, p.nca, p.heads, p.window, query_from_skip);
    Tensor s = add(f_self, f_cross);

    // per-voxel Norm + FFN over the channel axis, residual around the FFN
    Tensor chan_last = permute(s, {1, 2, 3, 0});
    Tensor normed = layer_norm(chan_last, p.ln_gain, p.ln_shift, ln_eps);
    Tensor ffn = linear(leaky_relu(linear(normed, p.ffn_w1, p.ffn_b1), slope), p.ffn_w2, p.ffn_b2);
    return add(permute(ffn, {3, 0, 1, 2}), s);
}

}  // namespace essc
