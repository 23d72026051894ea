#pragma once

#include "essc/tensor.hpp"

namespace essc {

// Attention-based feature aggregation: global self-attention on the upsampled
// stream plus window-restricted cross-attention against the skip stream,
// fused by a per-voxel norm + FFN with residuals.

struct QkvConvs {
    Tensor point_w, point_b;  // 1^3 conv
    Tensor depth_w, depth_b;  // depthwise 3^3 conv
};

struct AttnBranchParams {
    QkvConvs q, k, v;
    Tensor out_w, out_b;      // 1^3 output projection
};

struct PnaFabParams {
    Tensor up_w, up_b;        // 1^3 conv: upsampled coarse width -> block width
    AttnBranchParams sa;
    AttnBranchParams nca;
    Tensor ln_gain, ln_shift;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    int heads = 4;
    int window = 3;
};

// Dense multi-head attention over every voxel of the volume; residual add.
Tensor self_attention_block(const Tensor& f, const AttnBranchParams& p, int heads);

// Queries from f_up, keys/values from f_skip (roles swap behind the flag);
// each query attends inside its window^3 neighborhood, clamped at borders.
// Residual add of f_up.
Tensor neighborhood_cross_attention(const Tensor& f_skip, const Tensor& f_up,
                                    const AttnBranchParams& p, int heads, int window,
                                    bool query_from_skip = false);

// F_out = FFN(Norm(F_self + F_cross)) + (F_self + F_cross)
Tensor pna_fab_forward(const Tensor& coarse, const Tensor& skip, const PnaFabParams& p,
                       double ln_eps = 1e-5, double slope = 0.01,
                       bool query_from_skip = false);

}  // namespace essc
