#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "essc/common.hpp"
#include "essc/metrics.hpp"

using namespace essc;

namespace {

SemGrid random_grid(std::array<uint32_t, 3> dims, uint32_t classes, Rng& rng,
                    double invalid_frac = 0.25) {
    SemGrid g = SemGrid::filled(dims, classes);
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        g.labels[i] = uint16_t(rng.below(classes + 1));
        g.valid[i] = rng.uniform() < invalid_frac ? 0 : 1;
    }
    return g;
}

struct BruteCounts {
    uint64_t comp_tp = 0, comp_fp = 0, comp_fn = 0;
    std::vector<uint64_t> tp, fp, fn;
};

BruteCounts brute_force(const SemGrid& pred, const SemGrid& gt) {
    BruteCounts b;
    const uint32_t C = gt.num_semantic_classes;
    b.tp.assign(C + 1, 0);
    b.fp.assign(C + 1, 0);
    b.fn.assign(C + 1, 0);
    for (std::size_t i = 0; i < gt.voxel_count(); ++i) {
        if (!gt.valid[i]) continue;
        const bool go = gt.labels[i] != 0, po = pred.labels[i] != 0;
        if (go && po) b.comp_tp++;
        if (!go && po) b.comp_fp++;
        if (go && !po) b.comp_fn++;
        for (uint32_t c = 1; c <= C; ++c) {
            const bool g = gt.labels[i] == c, p = pred.labels[i] == c;
            if (g && p) b.tp[c]++;
            if (!g && p) b.fp[c]++;
            if (g && !p) b.fn[c]++;
        }
    }
    return b;
}

}  // namespace

TEST_CASE("perfect prediction gives a diagonal matrix and unit scores") {
    Rng rng(51);
    SemGrid gt = random_grid({6, 6, 4}, 4, rng, 0.0);
    ConfusionMatrix cm(4);
    cm.accumulate(gt, gt);
    for (uint32_t g = 0; g <= 4; ++g)
        for (uint32_t p = 0; p <= 4; ++p)
            if (g != p) CHECK(cm.at(g, p) == 0);
    CHECK(completion_iou(cm).iou == 1.0);
    auto m = miou(cm);
    for (double v : m.per_class) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.mean == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("all-invalid ground truth leaves the matrix unchanged") {
    Rng rng(52);
    SemGrid gt = random_grid({4, 4, 2}, 3, rng, 0.0);
    for (auto& v : gt.valid) v = 0;
    SemGrid pred = random_grid({4, 4, 2}, 3, rng, 0.0);
    ConfusionMatrix cm(3);
    cm.accumulate(pred, gt);
    CHECK(cm.total() == 0);
}

TEST_CASE("disjoint occupancy scores zero completion IoU") {
    SemGrid gt = SemGrid::filled({4, 4, 2}, 2, 0);
    SemGrid pred = SemGrid::filled({4, 4, 2}, 2, 1);
    ConfusionMatrix cm(2);
    cm.accumulate(pred, gt);
    CHECK(completion_iou(cm).iou == 0.0);
}

TEST_CASE("degenerate all-empty case is flagged") {
    SemGrid gt = SemGrid::filled({2, 2, 2}, 2, 0);
    ConfusionMatrix cm(2);
    cm.accumulate(gt, gt);
    auto r = completion_iou(cm);
    CHECK(r.iou == 1.0);
    CHECK(r.degenerate);
}

TEST_CASE("a class absent from both sides pulls the eps-guarded mean down") {
    ConfusionMatrix cm(3);
    SemGrid gt = SemGrid::filled({2, 2, 2}, 3, 1);
    cm.accumulate(gt, gt);  // only class 1 present
    auto m = miou(cm);
    CHECK(m.per_class[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.per_class[1] == 0.0);
    CHECK(m.per_class[2] == 0.0);
    CHECK(m.mean == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    CHECK(m.mean_present == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.present_count == 1);
}

TEST_CASE("metrics match a brute-force oracle on random pairs") {
    Rng rng(53);
    for (int t = 0; t < 100; ++t) {
        SemGrid gt = random_grid({8, 8, 4}, 5, rng);
        SemGrid pred = random_grid({8, 8, 4}, 5, rng, 0.0);
        pred.valid = gt.valid;
        ConfusionMatrix cm(5);
        cm.accumulate(pred, gt);
        auto b = brute_force(pred, gt);
        const auto comp = completion_iou(cm);
        const uint64_t denom = b.comp_tp + b.comp_fp + b.comp_fn;
        if (denom > 0)
            CHECK(std::abs(comp.iou - double(b.comp_tp) / double(denom)) < 1e-12);
        auto m = miou(cm);
        for (uint32_t c = 1; c <= 5; ++c) {
            const double expect =
                double(b.tp[c]) / (double(b.tp[c] + b.fp[c] + b.fn[c]) + 1e-12);
            CHECK(std::abs(m.per_class[c - 1] - expect) < 1e-9);
        }
    }
}

TEST_CASE("metrics are invariant to voxel order and merge equals concatenation") {
    Rng rng(54);
    SemGrid gt1 = random_grid({6, 4, 2}, 4, rng);
    SemGrid p1 = random_grid({6, 4, 2}, 4, rng, 0.0);
    SemGrid gt2 = random_grid({6, 4, 2}, 4, rng);
    SemGrid p2 = random_grid({6, 4, 2}, 4, rng, 0.0);
    ConfusionMatrix a(4), b(4), merged(4), whole(4);
    a.accumulate(p1, gt1);
    b.accumulate(p2, gt2);
    merged.merge(a);
    merged.merge(b);
    whole.accumulate(p1, gt1);
    whole.accumulate(p2, gt2);
    for (uint32_t g = 0; g <= 4; ++g)
        for (uint32_t p = 0; p <= 4; ++p) CHECK(merged.at(g, p) == whole.at(g, p));
    CHECK(miou(merged).mean == miou(whole).mean);
}

TEST_CASE("scores always land in [0, 1]") {
    Rng rng(55);
    for (int t = 0; t < 30; ++t) {
        SemGrid gt = random_grid({4, 4, 4}, 3, rng);
        SemGrid pred = random_grid({4, 4, 4}, 3, rng, 0.0);
        ConfusionMatrix cm(3);
        cm.accumulate(pred, gt);
        const auto comp = completion_iou(cm);
        CHECK(comp.iou >= 0.0);
        CHECK(comp.iou <= 1.0);
        auto m = miou(cm);
        CHECK(m.mean >= 0.0);
        CHECK(m.mean <= 1.0);
        for (double v : m.per_class) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("report table: single matrix matches direct calls, duplicates are scale invariant") {
    Rng rng(56);
    SemGrid gt = random_grid({6, 6, 2}, 4, rng);
    SemGrid pred = random_grid({6, 6, 2}, 4, rng, 0.0);
    ConfusionMatrix cm(4);
    cm.accumulate(pred, gt);
    auto single = report_table({{"s1", cm}});
    std::ostringstream expect;
    expect << std::fixed << std::setprecision(2) << miou(cm).mean * 100.0;
    CHECK(single.csv.find(expect.str()) != std::string::npos);

    auto doubled = report_table({{"s1", cm}, {"s2", cm}});
    // the aggregate of two identical matrices scores the same as one
    CHECK(doubled.csv.find("all," ) != std::string::npos);
    auto row_of = [](const std::string& csv, const std::string& name) {
        auto pos = csv.find(name + ",");
        auto end = csv.find('\n', pos);
        return csv.substr(pos + name.size() + 1, end - pos - name.size() - 1);
    };
    CHECK(row_of(doubled.csv, "all") == row_of(single.csv, "s1"));
}

TEST_CASE("report table reproduces the published formatting fixture") {
    // Build a matrix whose 19 class IoUs are the reference per-class scores;
    // their mean prints as 16.87. Formatting check only.
    const double ious[19] = {34.32, 4.61,  2.71,  19.44, 7.67, 2.38, 4.08, 0.00, 65.51, 20.82,
                             32.31, 0.16,  23.52, 9.20,  26.93, 8.83, 39.54, 10.67, 7.84};
    ConfusionMatrix cm(19);
    SemGrid gt = SemGrid::filled({100, 100, 19}, 19, 0);
    SemGrid pred = gt;
    // per class: tp hits where both agree, the remainder as false negatives
    std::size_t cursor = 0;
    for (uint32_t c = 1; c <= 19; ++c) {
        const auto tp = uint64_t(std::llround(ious[c - 1] * 100.0));
        for (uint64_t i = 0; i < 10000; ++i) {
            gt.labels[cursor] = uint16_t(c);
            pred.labels[cursor] = i < tp ? uint16_t(c) : 0;
            ++cursor;
        }
    }
    REQUIRE(cursor <= gt.voxel_count());
    cm.accumulate(pred, gt);
    auto table = report_table({{"val", cm}});
    CHECK(table.text.find("16.87") != std::string::npos);
    CHECK(table.csv.find("16.87") != std::string::npos);
}
