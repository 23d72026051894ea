#pragma once

#include "essc/tensor.hpp"

namespace essc {

// Text-guidance fusion blocks: a global-embedding affine modulation followed
// by dual cross-attention between token embeddings and voxel features.

enum class FusionPlacement { none, encoder, decoder, both };
enum class StageKind { feb, fab };

struct MlpParams {
    Tensor w1, b1, w2, b2;  // linear -> leaky_relu -> linear
};

struct SigmParams {
    MlpParams gamma, beta;  // each maps the global vector to [C] coefficients
};

// F_out = (1 + gamma) * F_in + beta, with gamma/beta broadcast per channel.
// Zero MLPs make this an exact identity.
Tensor sigm_modulate(const Tensor& f, const Tensor& global_vec, const SigmParams& p,
                     double slope = 0.01);

struct AttnLinears {
    Tensor q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
};

struct DcamParams {
    Tensor tok_w, tok_b;        // token projection D_t -> C
    AttnLinears text_sa;        // self-attention over tokens
    AttnLinears text_to_vox;    // queries = tokens, keys/values = voxels
    AttnLinears vox_to_text;    // queries = voxels, keys/values = enhanced tokens
    Tensor ln_gain, ln_shift;   // final per-voxel LayerNorm over channels
    int heads = 4;
};

// Token self-attention, then text-to-voxel and voxel-to-text cross-attention;
// the voxel stream is updated residually: LayerNorm(F_enhanced + F_in).
Tensor dcam_forward(const Tensor& f, const Tensor& tokens, const DcamParams& p,
                    double ln_eps = 1e-5);

struct FusionSiteParams {
    SigmParams sigm;
    DcamParams dcam;
};

// Applies sigm then dcam when the stage kind matches the placement;
// otherwise returns the input tensor unchanged.
Tensor apply_fusion(const Tensor& stage_out, FusionPlacement placement, StageKind kind,
                    const Tensor* global_vec, const Tensor* tokens, const FusionSiteParams* site,
                    double slope = 0.01, double ln_eps = 1e-5);

bool fusion_active(FusionPlacement placement, StageKind kind);

}  // namespace essc
