#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "essc/losses.hpp"
#include "essc/pnam.hpp"
#include "essc/tensor.hpp"
#include "essc/vlgm.hpp"
#include "essc/voxio.hpp"

namespace essc {

// Label-embedding 3D U-Net refiner: four encoding blocks, a bottleneck,
// four aggregation blocks (convolutional or attention-based) and one
// prediction head per supervised scale.

struct RefineConfig {
    uint32_t num_classes = 20;   // semantic classes + the empty class
    uint32_t base_channels = 16;  // G; widths double per encoder stage
    uint32_t embed_dim = 0;       // 0 resolves to base_channels

    std::vector<int> scales = {1, 2, 4, 8};  // supervised scales, must contain 1

    enum class Downsample { conv, maxpool };
    Downsample downsample = Downsample::conv;
    bool post_block = true;  // second ConvBlock after downsampling

    enum class Decoder { conv, pnam };
    Decoder decoder = Decoder::conv;

    FusionPlacement fusion = FusionPlacement::none;
    uint32_t text_global_dim = 512;
    uint32_t text_token_dim = 256;

    int heads = 4;
    int window = 3;
    int dcam_heads = 4;
    bool nca_query_from_skip = false;

    std::array<uint32_t, 3> grid_dims = {256, 256, 32};
    double norm_eps = 1e-5;
    double leaky_slope = 0.01;

    // optimization
    double lr_peak = 5e-5;
    double warmup_frac = 0.05;
    int epochs = 10;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;

    // loss
    double lambda_ce = 1.0;
    double lambda_scal_geo = 1.0;
    double lambda_scal_sem = 1.0;
    double lambda_lovasz = 0.0;
    CeNormalization ce_norm = CeNormalization::class_count;
    double class_weight_eps = 0.001;

    uint64_t seed = 1;

    uint32_t resolved_embed_dim() const { return embed_dim == 0 ? base_channels : embed_dim; }
    LossSettings loss_settings() const;
};

void validate(const RefineConfig& cfg);

std::string config_to_json(const RefineConfig& cfg);
RefineConfig config_from_json(const std::string& text);
uint64_t config_digest(const RefineConfig& cfg);

// Channel width entering/leaving each encoder stage k = 0..4.
std::array<uint32_t, 5> stage_widths(const RefineConfig& cfg);
// Spatial dims at each stage; axes halve when even, stay at 1 otherwise.
std::array<std::array<uint32_t, 3>, 5> stage_dims(const RefineConfig& cfg);

// One line per structural element, e.g. "dec_s2: pna".
std::vector<std::string> describe_refiner(const RefineConfig& cfg);

using ParamMap = std::map<std::string, Tensor>;

// Deterministic per-name initialization (fan-in scaled normals for weights).
ParamMap init_refiner_params(const RefineConfig& cfg);

// ---- building blocks (exposed for tests) --------------------------------------

struct ConvBlockParams {
    Tensor w1, b1, w2, b2;  // [conv3 -> instance_norm -> leaky_relu] x2
};

Tensor conv_block(const Tensor& x, const ConvBlockParams& p, double eps, double slope);

struct FebParams {
    ConvBlockParams block1;
    Tensor down_w, down_b;  // conv downsampling only
    bool has_block2 = false;
    ConvBlockParams block2;
};

struct FebOut {
    Tensor skip;  // same scale:   ConvBlock(F_in) + F_in
    Tensor out;   // half scale
};

FebOut feb_forward(const Tensor& f_in, const FebParams& p, RefineConfig::Downsample mode,
                   std::array<int, 3> factor, double eps, double slope);

struct FabParams {
    ConvBlockParams block;   // on concat(skip, upsampled)
    Tensor proj_w, proj_b;   // 1^3 conv on the upsampled stream (residual)
};

Tensor fab_forward(const Tensor& coarse, const Tensor& skip, const FabParams& p, double eps,
                   double slope);

// label lookup + 1^3 projection to the working width
Tensor embed_labels(const SemGrid& grid, const Tensor& table, const Tensor& proj_w,
                    const Tensor& proj_b);

Tensor pred_head(const Tensor& features, const Tensor& w, const Tensor& b);

// ---- whole network -------------------------------------------------------------

struct MultiScaleLogits {
    std::map<int, Tensor> by_scale;  // scale -> [C, X/s, Y/s, Z/s]
};

MultiScaleLogits refine_forward(const SemGrid& coarse, const RefineConfig& cfg,
                                const ParamMap& params, const TextEmbedding* text = nullptr);

//

// Per-voxel argmax at scale 1; ties take the smaller class; validity copied
// from the source grid.
SemGrid argmax_labels(const MultiScaleLogits& logits, const SemGrid& source);

// ---- checkpoint ------------------------------------------------------------------

// "ESSCWGT" | u32 version | u64 config digest | config JSON | named tensors
void save_checkpoint(const std::string& path, const RefineConfig& cfg, const ParamMap& params);

struct Checkpoint {
    RefineConfig cfg;
    ParamMap params;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace essc
