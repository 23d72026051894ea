#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "essc/voxio.hpp"

namespace essc {

// (C+1)x(C+1) tally over valid voxels; rows = ground truth, cols = prediction.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(uint32_t num_semantic_classes);

    uint32_t num_semantic_classes() const { return classes_; }
    uint64_t at(uint32_t gt, uint32_t pred) const;
    uint64_t total() const;

    // Counts every voxel where gt.valid holds; dims must match.
    void accumulate(const SemGrid& pred, const SemGrid& gt);
    void merge(const ConfusionMatrix& other);

private:
    uint32_t classes_ = 0;
    std::vector<uint64_t> counts_;  // (C+1)^2
};

struct CompletionIou {
    double iou = 0.0;
    bool degenerate = false;  // no occupied voxels on either side
};

// Binary occupied-vs-empty IoU; the all-empty/all-empty case scores 1 and is
// flagged as degenerate.
CompletionIou completion_iou(const ConfusionMatrix& cm);

struct MiouResult {
    std::vector<double> per_class;       // classes 1..C
    double mean = 0.0;                   // over all C classes (absent ones score 0)
    double mean_present = 0.0;           // secondary: classes present in gt or pred
    uint32_t present_count = 0;
};

MiouResult miou(const ConfusionMatrix& cm, double eps = 1e-12);

struct SceneScore {
    std::string name;
    ConfusionMatrix cm;
};

struct ReportTable {
    std::string text;  // human-readable table (values in percent)
    std::string csv;   // header: sequence,iou,miou,miou_present,class_1..class_C
};

// Per-scene rows plus a micro-averaged aggregate (matrices summed, then scored).
ReportTable report_table(const std::vector<SceneScore>& scenes,
                         const std::vector<std::string>& class_names = {});

}  // namespace essc
