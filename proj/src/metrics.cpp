#include "essc/metrics.hpp"

#include <iomanip>
#include <sstream>

#include "essc/common.hpp"

namespace essc {

ConfusionMatrix::ConfusionMatrix(uint32_t num_semantic_classes)
    : classes_(num_semantic_classes),
      counts_(std::size_t(num_semantic_classes + 1) * (num_semantic_classes + 1), 0) {}

uint64_t ConfusionMatrix::at(uint32_t gt, uint32_t pred) const {
    require(gt <= classes_ && pred <= classes_, "ConfusionMatrix", "class index out of range");
    return counts_[std::size_t(gt) * (classes_ + 1) + pred];
}

uint64_t ConfusionMatrix::total() const {
    uint64_t t = 0;
    for (uint64_t c : counts_) t += c;
    return t;
}

void ConfusionMatrix::accumulate(const SemGrid& pred, const SemGrid& gt) {
    require(pred.dims == gt.dims, "accumulate", "prediction and ground-truth dims differ");
    require(pred.num_semantic_classes <= classes_ && gt.num_semantic_classes <= classes_,
            "accumulate", "grid classes exceed matrix size");
    const std::size_t n = gt.voxel_count();
    for (std::size_t i = 0; i < n; ++i) {
        if (!gt.valid[i]) continue;
        counts_[std::size_t(gt.labels[i]) * (classes_ + 1) + pred.labels[i]]++;
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    require(other.classes_ == classes_, "merge", "class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

CompletionIou completion_iou(const ConfusionMatrix& cm) {
    const uint32_t C = cm.num_semantic_classes();
    uint64_t tp = 0, fp = 0, fn = 0;
    for (uint32_t g = 0; g <= C; ++g)
        for (uint32_t p = 0; p <= C; ++p) {
            const uint64_t n = cm.at(g, p);
            const bool gt_occ = g != 0;
            const bool pr_occ = p != 0;
            if (gt_occ && pr_occ) tp += n;
            if (!gt_occ && pr_occ) fp += n;
            if (gt_occ && !pr_occ) fn += n;
        }
    CompletionIou out;
    const uint64_t denom = tp + fp + fn;
    if (denom == 0) {
        out.iou = 1.0;
        out.degenerate = true;
    } else {
        out.iou = double(tp) / double(denom);
    }
    return out;
}

MiouResult miou(const ConfusionMatrix& cm, double eps) {
    const uint32_t C = cm.num_semantic_classes();
    MiouResult out;
    out.per_class.resize(C, 0.0);
    double sum = 0.0, sum_present = 0.0;
    for (uint32_t c = 1; c <= C; ++c) {
        uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (uint32_t o = 0; o <= C; ++o) {
            if (o == c) continue;
            fp += cm.at(o, c);
            fn += cm.at(c, o);
        }
        const double iou = double(tp) / (double(tp + fp + fn) + eps);
        out.per_class[c - 1] = iou;
        sum += iou;
        if (tp + fp + fn > 0) {
            sum_present += iou;
            out.present_count++;
        }
    }
    out.mean = C > 0 ? sum / double(C) : 0.0;
    out.mean_present = out.present_count > 0 ? sum_present / double(out.present_count) : 0.0;
    return out;
}

ReportTable report_table(const std::vector<SceneScore>& scenes,
                         const std::vector<std::string>& class_names) {
    require(!scenes.empty(), "report_table", "need at least one confusion matrix");
    const uint32_t C = scenes[0].cm.num_semantic_classes();
    for (const auto& s : scenes)
        require(s.cm.num_semantic_classes() == C, "report_table", "class count mismatch across scenes");

    auto pct = [](double v) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << v * 100.0;
        return os.str();
    };

    std::ostringstream text, csv;
    csv << "sequence,iou,miou,miou_present";
    for (uint32_t c = 1; c <= C; ++c) {
        if (class_names.size() >= C)
            csv << "," << class_names[c - 1];
        else
            csv << ",class_" << c;
    }
    csv << "\n";

    text << std::left << std::setw(16) << "sequence" << std::right << std::setw(8) << "IoU"
         << std::setw(8) << "mIoU" << std::setw(10) << "mIoU*" << "\n";

    auto emit = [&](const std::string& name, const ConfusionMatrix& cm) {
        const auto comp = completion_iou(cm);
        const auto sem = miou(cm);
        text << std::left << std::setw(16) << name << std::right << std::setw(8) << pct(comp.iou)
             << std::setw(8) << pct(sem.mean) << std::setw(10) << pct(sem.mean_present);
        if (comp.degenerate) text << "  (degenerate occupancy)";
        text << "\n";
        csv << name << "," << pct(comp.iou) << "," << pct(sem.mean) << "," << pct(sem.mean_present);
        for (double v : sem.per_class) csv << "," << pct(v);
        csv << "\n";
    };

    ConfusionMatrix all(C);
    for (const auto& s : scenes) {
        emit(s.name, s.cm);
        all.merge(s.cm);
    }
    if (scenes.size() > 1) emit("all", all);

    text << "(mIoU* averages only classes present in gt or prediction)\n";
    ReportTable out;
    out.text = text.str();
    out.csv = csv.str();
    return out;
}

}  // namespace essc
