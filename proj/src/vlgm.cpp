#include "essc/vlgm.hpp"

#include "essc/common.hpp"

namespace essc {

namespace {

// Dense multi-head attention over row matrices [N, C].
Tensor mha_rows(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "mha_rows", "inputs must be [N, C]");
    const std::size_t nq = q.shape()[0], C = q.shape()[1];
    const std::size_t nk = k.shape()[0];
    require(k.shape()[1] == C && v.shape()[1] == C && v.shape()[0] == nk, "mha_rows",
            "shape mismatch");
    require(heads >= 1 && C % std::size_t(heads) == 0, "mha_rows",
            "feature width " + std::to_string(C) + " not divisible by heads " +
                std::to_string(heads));
    const std::size_t dh = C / std::size_t(heads);
    auto split = [&](const Tensor& t, std::size_t n) {
        return permute(reshape(t, {n, std::size_t(heads), dh}), {1, 0, 2});
    };
    Tensor out = attention(split(q, nq), split(k, nk), split(v, nk));
    return reshape(permute(out, {1, 0, 2}), {nq, C});
}

Tensor mlp(const Tensor& x, const MlpParams& p, double slope) {
    return linear(leaky_relu(linear(x, p.w1, p.b1), slope), p.w2, p.b2);
}

}  // namespace

Tensor sigm_modulate(const Tensor& f, const Tensor& global_vec, const SigmParams& p,
                     double slope) {
    require(f.rank() >= 1, "sigm_modulate", "feature tensor must have rank >= 1");
    require(global_vec.rank() == 1, "sigm_modulate", "global embedding must be a vector");
    Tensor gamma = mlp(global_vec, p.gamma, slope);
    Tensor beta = mlp(global_vec, p.beta, slope);
    require(gamma.shape()[0] == f.shape()[0] && beta.shape()[0] == f.shape()[0], "sigm_modulate",
            "modulation width does not match the channel count");
    return channel_affine(f, gamma, beta);
}

Tensor dcam_forward(const Tensor& f, const Tensor& tokens, const DcamParams& p, double ln_eps) {
    require(f.rank() == 4, "dcam_forward", "feature tensor must be [C, D, H, W]");
    require(tokens.rank() == 2 && tokens.shape()[0] >= 1, "dcam_forward",
            "tokens must be [L, D_t] with L >= 1");
    const std::size_t C = f.shape()[0];
    const std::size_t n = f.size() / C;

    Tensor vox = permute(reshape(f, {C, n}), {1, 0});  // [N, C]
    Tensor tok = linear(tokens, p.tok_w, p.tok_b);     // [L, C]

    // (1) self-attention over tokens
    Tensor t_attn = linear(mha_rows(linear(tok, p.text_sa.q_w, p.text_sa.q_b),
                                    linear(tok, p.text_sa.k_w, p.text_sa.k_b),
                                    linear(tok, p.text_sa.v_w, p.text_sa.v_b), p.heads),
                           p.text_sa.out_w, p.text_sa.out_b);
    // (2) text-to-voxel cross-attention
    Tensor t_enh = linear(mha_rows(linear(t_attn, p.text_to_vox.q_w, p.text_to_vox.q_b),
                                   linear(vox, p.text_to_vox.k_w, p.text_to_vox.k_b),
                                   linear(vox, p.text_to_vox.v_w, p.text_to_vox.v_b), p.heads),
                          p.text_to_vox.out_w, p.text_to_vox.out_b);
    // (3) voxel-to-text cross-attention
    Tensor v_enh = linear(mha_rows(linear(vox, p.vox_to_text.q_w, p.vox_to_text.q_b),
                                   linear(t_enh, p.vox_to_text.k_w, p.vox_to_text.k_b),
                                   linear(t_enh, p.vox_to_text.v_w, p.vox_to_text.v_b), p.heads),
                          p.vox_to_text.out_w, p.vox_to_text.out_b);
    // (4) residual update
    Tensor out = layer_norm(add(v_enh, vox), p.ln_gain, p.ln_shift, ln_eps);
    return reshape(permute(out, {1, 0}), f.shape());
}

bool fusion_active(FusionPlacement placement, StageKind kind) {
    switch (placement) {
        case FusionPlacement::none:
            return false;
        case FusionPlacement::encoder:
            return kind == StageKind::feb;
        case FusionPlacement::decoder:
            return kind == StageKind::fab;
        case FusionPlacement::both:
            return true;
    }
    return false;
}

Tensor apply_fusion(const Tensor& stage_out, FusionPlacement placement, StageKind kind,
                    const Tensor* global_vec, const Tensor* tokens, const FusionSiteParams* site,
                    double slope, double ln_eps) {
    if (!fusion_active(placement, kind)) return stage_out;
    require(global_vec != nullptr && tokens != nullptr, "apply_fusion",
            "fusion placement requires text embeddings");
    if (site == nullptr) throw internal_error("apply_fusion: missing site parameters");
    Tensor modulated = sigm_modulate(stage_out, *global_vec, site->sigm, slope);
    return dcam_forward(modulated, *tokens, site->dcam, ln_eps);
}

}  // namespace essc
