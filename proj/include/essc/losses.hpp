#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "essc/tensor.hpp"
#include "essc/voxio.hpp"

namespace essc {

// Per-class loss weights, one entry per label value 0..C.
struct ClassWeights {
    std::vector<double> w;
    void check() const;
};

// Inverse-log frequency weighting over raw voxel counts; classes with zero
// count take the largest weight among the populated ones.
ClassWeights class_weights_from_frequencies(const std::vector<uint64_t>& counts, double eps);

enum class CeNormalization {
    class_count,  // divide the weighted sum by the number of classes
    voxel_mean,   // divide by the number of valid voxels
};

// Class-weighted cross-entropy over the valid voxels of `target`.
// logits: [C+1, X, Y, Z] matching the target grid's dims.
Tensor weighted_ce(const Tensor& logits, const SemGrid& target, const ClassWeights& w,
                   CeNormalization norm = CeNormalization::class_count);

// Sum of weighted_ce across every configured scale.
Tensor multiscale_ce(const std::map<int, Tensor>& logits_by_scale,
                     const std::map<int, SemGrid>& targets_by_scale, const ClassWeights& w,
                     CeNormalization norm = CeNormalization::class_count);

// Softmax over the channel axis of a [C, X, Y, Z] volume.
Tensor channel_softmax(const Tensor& logits);

enum class ScalMode { semantic, geometric };

// Scene-class affinity loss on post-softmax probabilities: log precision,
// recall and specificity per class, each included only when its denominator
// over valid voxels is positive; ratios clamp at 1e-7 before the log.
// Geometric mode folds the volume to empty/occupied with p(occ) = 1 - p0.
Tensor scal(const Tensor& probs, const SemGrid& target, ScalMode mode);

// Lovasz extension of the Jaccard loss on sorted per-class error margins,
// averaged over the classes present in the target.
Tensor lovasz_softmax(const Tensor& probs, const SemGrid& target);

struct LossSettings {
    double lambda_ce = 1.0;
    double lambda_scal_geo = 1.0;
    double lambda_scal_sem = 1.0;
    double lambda_lovasz = 0.0;
    CeNormalization ce_norm = CeNormalization::class_count;
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double scal_geo = 0.0;
    double scal_sem = 0.0;
    double lovasz = 0.0;
};

struct TotalLoss {
    Tensor value;
    LossBreakdown parts;
};

TotalLoss total_loss(const std::map<int, Tensor>& logits_by_scale,
                     const std::map<int, SemGrid>& targets_by_scale, const ClassWeights& w,
                     const LossSettings& cfg);

}  // namespace essc
