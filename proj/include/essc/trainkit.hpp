#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "essc/losses.hpp"
#include "essc/metrics.hpp"
#include "essc/unet3d.hpp"
#include "essc/voxio.hpp"

namespace essc {

// ---- optimizer -----------------------------------------------------------------

struct AdamHyper {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    std::map<std::string, std::vector<double>> m, v;
    int64_t step = 0;
};

// Decoupled weight decay applied before the bias-corrected adaptive update.
// Consumes the gradients populated by the latest backward(); a NaN gradient
// aborts with the offending tensor's name.
void adamw_step(ParamMap& params, AdamState& state, const AdamHyper& h);

// Linear ramp to the peak over warmup_frac of the budget, then cosine decay
// to exactly zero at the final step.
double cosine_warmup_lr(int64_t step, int64_t total_steps, double peak, double warmup_frac);

// ---- synthetic corruption ---------------------------------------------------------

struct NoiseSpec {
    struct Swap {
        uint16_t from = 0, to = 0;
        double prob = 0.0;
    };
    struct Blob {
        int count = 0;
        double radius = 0.0;
    };
    std::vector<Swap> swaps;       // applied in order
    double dropout_prob = 0.0;     // occupied -> empty
    std::vector<Blob> blobs;       // spherical erasures
};

struct CorruptionStats {
    std::size_t changed = 0;
    std::size_t total = 0;
    double fraction() const { return total == 0 ? 0.0 : double(changed) / double(total); }
};

// Deterministic given the seed; the validity mask is never touched.
SemGrid corrupt_labels(const SemGrid& gt, const NoiseSpec& noise, uint64_t seed,
                       CorruptionStats* stats = nullptr);

// Synthetic ground truth: terrain slab with a road stripe, plus box-shaped
// structures for the remaining classes. Contiguous regions keep the
// refinement task learnable from local context.
SemGrid make_layered_scene(std::array<uint32_t, 3> dims, uint32_t num_semantic_classes,
                           uint64_t seed);

// ---- training loop ------------------------------------------------------------------

enum class TrainMode { separate, joint_stub };

struct TrainSample {
    std::string coarse_path;  // unused in joint mode
    std::string gt_path;
    std::string text_path;    // optional
};

struct RunConfig {
    RefineConfig model;
    TrainMode mode = TrainMode::separate;
    std::vector<TrainSample> train;
    std::vector<TrainSample> val;  // falls back to the training set when empty
    NoiseSpec joint_noise;
    std::string checkpoint_out = "checkpoint.essc";
    std::string log_out;
    int val_interval = 0;  // steps between validations; 0 = once per epoch
};

// Flat JSON: RefineConfig fields plus mode / dataset / output entries.
RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& run);

struct ValidationPoint {
    int64_t step = 0;
    double iou = 0.0;
    double miou = 0.0;
};

struct TrainResult {
    int64_t steps = 0;
    LossBreakdown last_loss;
    std::vector<ValidationPoint> validation;
    double final_iou = 0.0;
    double final_miou = 0.0;
};

// epochs x scenes optimization steps; deterministic in (dataset, config, seed).
// Writes the checkpoint to run.checkpoint_out; JSONL records go to `log`.
TrainResult train_refiner(const RunConfig& run, std::ostream* log = nullptr);

// Scores a prediction against ground truth over valid voxels.
void score_grid(ConfusionMatrix& cm, const SemGrid& pred, const SemGrid& gt);

}  // namespace essc
