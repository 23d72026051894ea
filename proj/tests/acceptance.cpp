// Acceptance suite: one criterion per entry, each printing a PASS/FAIL line.
// Run without arguments for everything, or name criteria (A1 .. A10; the
// learning check splits into A5-unet / A5-pnam / A5-vlgm).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "essc/common.hpp"
#include "essc/gradcheck.hpp"
#include "essc/losses.hpp"
#include "essc/metrics.hpp"
#include "essc/pnam.hpp"
#include "essc/trainkit.hpp"
#include "essc/unet3d.hpp"
#include "essc/vlgm.hpp"
#include "essc/voxio.hpp"

#ifndef ESSC_CLI_BIN
#define ESSC_CLI_BIN ""
#endif

namespace fs = std::filesystem;
using namespace essc;

namespace {

struct Check {
    bool ok = true;
    std::string detail;
    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

std::string work_dir() {
    const std::string dir = "/tmp/essc_acceptance_" + std::to_string(::getpid());
    fs::create_directories(dir);
    return dir;
}

SemGrid random_grid(std::array<uint32_t, 3> dims, uint32_t classes, Rng& rng,
                    double invalid_frac = 0.0) {
    SemGrid g = SemGrid::filled(dims, classes);
    bool any = false;
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        g.labels[i] = uint16_t(rng.below(classes + 1));
        g.valid[i] = rng.uniform() < invalid_frac ? 0 : 1;
        any = any || g.valid[i];
    }
    if (!any) g.valid[0] = 1;
    return g;
}

// ---- A1: gradient suite --------------------------------------------------------

Check run_a1() {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckOptions opts;  // 10 trials, eps 1e-5, tol 1e-4
    auto reports = run_grad_checks("", opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(reports.size() >= 25, "registry unexpectedly small");
    for (const auto& r : reports)
        c.expect(r.pass, r.op + " max_rel_err " + std::to_string(r.max_rel_err));
    c.expect(secs < 300.0, "runtime " + std::to_string(secs) + "s exceeds 5 minutes");
    std::printf("    gradient suite: %zu ops in %.1fs\n", reports.size(), secs);
    return c;
}

// ---- A2: loss identities -------------------------------------------------------

double scal_straight_loop(const std::vector<double>& p, std::size_t channels, const SemGrid& g,
                          bool geometric) {
    const std::size_t n = g.voxel_count();
    const std::size_t C = geometric ? 2 : channels;
    double acc = 0.0;
    for (std::size_t cls = 0; cls < C; ++cls) {
        double pred = 0.0, hit = 0.0, miss = 0.0, tcnt = 0.0, ocnt = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!g.valid[i]) continue;
            const double pc = geometric ? (cls == 0 ? p[i] : 1.0 - p[i]) : p[cls * n + i];
            const bool is = geometric ? ((g.labels[i] != 0) == (cls == 1)) : g.labels[i] == cls;
            pred += pc;
            if (is) {
                hit += pc;
                tcnt += 1.0;
            } else {
                miss += 1.0 - pc;
                ocnt += 1.0;
            }
        }
        if (pred > 0.0) acc += std::log(std::max(hit / pred, 1e-7));
        if (tcnt > 0.0) acc += std::log(std::max(hit / tcnt, 1e-7));
        if (ocnt > 0.0) acc += std::log(std::max(miss / ocnt, 1e-7));
    }
    return -acc / double(C);
}

Check run_a2() {
    Check c;
    Rng rng(220);
    // perfect hard predictions drive every loss under 1e-6
    for (int t = 0; t < 20; ++t) {
        SemGrid g = random_grid({2, 2, 2}, 2, rng, 0.2);
        const std::size_t n = 8, C = 3;
        std::vector<double> onehot(C * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) onehot[g.labels[i] * n + i] = 1.0;
        Tensor probs = Tensor::from_values({C, 2, 2, 2}, onehot);
        std::vector<double> tilted(C * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) tilted[g.labels[i] * n + i] = 1000.0;
        Tensor logits = Tensor::from_values({C, 2, 2, 2}, tilted);
        ClassWeights w{{1.0, 1.0, 1.0}};
        c.expect(weighted_ce(logits, g, w).item() < 1e-6, "weighted_ce not ~0 when perfect");
        c.expect(std::abs(scal(probs, g, ScalMode::semantic).item()) < 1e-6,
                 "semantic scal not ~0 when perfect");
        c.expect(std::abs(scal(probs, g, ScalMode::geometric).item()) < 1e-6,
                 "geometric scal not ~0 when perfect");
        c.expect(lovasz_softmax(probs, g).item() < 1e-6, "lovasz not ~0 when perfect");
    }
    // straight-loop oracle agreement on 100 random 3-class instances
    for (int t = 0; t < 100; ++t) {
        SemGrid g = random_grid({2, 2, 2}, 2, rng, 0.25);
        std::vector<double> lv(3 * 8);
        for (auto& x : lv) x = rng.uniform(-2.0, 2.0);
        Tensor probs = channel_softmax(Tensor::from_values({3, 2, 2, 2}, lv));
        const double sem = scal(probs, g, ScalMode::semantic).item();
        const double geo = scal(probs, g, ScalMode::geometric).item();
        c.expect(std::abs(sem - scal_straight_loop(probs.values(), 3, g, false)) < 1e-12,
                 "semantic scal oracle mismatch at trial " + std::to_string(t));
        c.expect(std::abs(geo - scal_straight_loop(probs.values(), 3, g, true)) < 1e-12,
                 "geometric scal oracle mismatch at trial " + std::to_string(t));
    }
    return c;
}

// ---- A3: metric oracle ---------------------------------------------------------

Check run_a3() {
    Check c;
    Rng rng(330);
    ConfusionMatrix merged(5);
    ConfusionMatrix whole(5);
    for (int t = 0; t < 1000; ++t) {
        SemGrid gt = random_grid({8, 8, 4}, 5, rng, 0.3);
        SemGrid pred = random_grid({8, 8, 4}, 5, rng, 0.0);
        pred.valid = gt.valid;
        ConfusionMatrix cm(5);
        cm.accumulate(pred, gt);
        // brute-force set counts
        uint64_t ctp = 0, cfp = 0, cfn = 0;
        std::vector<uint64_t> tp(6, 0), fp(6, 0), fn(6, 0);
        for (std::size_t i = 0; i < gt.voxel_count(); ++i) {
            if (!gt.valid[i]) continue;
            const bool go = gt.labels[i] != 0, po = pred.labels[i] != 0;
            ctp += go && po;
            cfp += !go && po;
            cfn += go && !po;
            for (uint32_t cls = 1; cls <= 5; ++cls) {
                const bool a = gt.labels[i] == cls, b = pred.labels[i] == cls;
                tp[cls] += a && b;
                fp[cls] += !a && b;
                fn[cls] += a && !b;
            }
        }
        const auto comp = completion_iou(cm);
        if (ctp + cfp + cfn > 0)
            c.expect(std::abs(comp.iou - double(ctp) / double(ctp + cfp + cfn)) < 1e-9,
                     "completion IoU mismatch at trial " + std::to_string(t));
        const auto m = miou(cm);
        for (uint32_t cls = 1; cls <= 5; ++cls) {
            const double expect =
                double(tp[cls]) / (double(tp[cls] + fp[cls] + fn[cls]) + 1e-12);
            c.expect(std::abs(m.per_class[cls - 1] - expect) < 1e-9,
                     "per-class IoU mismatch at trial " + std::to_string(t));
        }
        merged.merge(cm);
        whole.accumulate(pred, gt);
    }
    for (uint32_t g = 0; g <= 5; ++g)
        for (uint32_t p = 0; p <= 5; ++p)
            c.expect(merged.at(g, p) == whole.at(g, p), "merged counts differ from whole-set");
    c.expect(miou(merged).mean == miou(whole).mean, "merged mIoU differs from whole-set");
    c.expect(completion_iou(merged).iou == completion_iou(whole).iou,
             "merged IoU differs from whole-set");
    return c;
}

// ---- A4: format fidelity --------------------------------------------------------

Check run_a4() {
    Check c;
    // bit-order fixtures
    auto f = unpack_bits({0x80}, 8);
    c.expect(f[0] == 1 && f[1] == 0 && f[7] == 0, "0x80 must set voxel 0 only");
    c.expect(pack_bits(f) == std::vector<uint8_t>{0x80}, "0x80 does not round-trip");
    auto f2 = unpack_bits({0x01}, 8);
    c.expect(f2[7] == 1 && f2[0] == 0, "0x01 must set voxel 7 only");

    Rng rng(440);
    std::map<uint16_t, uint16_t> identity;
    for (uint16_t i = 0; i < 20; ++i) identity[i] = i;
    for (int t = 0; t < 100; ++t) {
        // full benchmark-size label/invalid buffers
        SemGrid g = SemGrid::filled(kSemKittiDims, 19);
        for (std::size_t i = 0; i < g.voxel_count(); ++i) {
            g.labels[i] = uint16_t(rng.below(20));
            g.valid[i] = rng.uniform() < 0.2 ? 0 : 1;
        }
        std::vector<uint8_t> lb, ib;
        write_semkitti_voxels(g, lb, ib);
        c.expect(lb.size() == 4194304 && ib.size() == 262144, "benchmark payload sizes wrong");
        SemGrid back = read_semkitti_voxels(lb, ib, identity);
        std::vector<uint8_t> lb2, ib2;
        write_semkitti_voxels(back, lb2, ib2);
        c.expect(lb2 == lb && ib2 == ib, "kitti round-trip not byte-identical at trial " +
                                             std::to_string(t));
        if (!c.ok) break;

        // desk-scale formats
        SemGrid small = random_grid({8, 8, 4}, 5, rng, 0.25);
        auto bytes = write_grid_simple(small);
        c.expect(write_grid_simple(read_grid_simple(bytes)) == bytes,
                 "grid file round-trip not byte-identical");
        TextEmbedding e;
        e.global.resize(1 + rng.below(16));
        for (auto& v : e.global) v = rng.uniform(-2.0, 2.0);
        e.token_count = 1 + rng.below(8);
        e.token_dim = 1 + rng.below(16);
        e.tokens.resize(e.token_count * e.token_dim);
        for (auto& v : e.tokens) v = rng.uniform(-2.0, 2.0);
        auto tb = write_text_embedding(e);
        c.expect(write_text_embedding(read_text_embedding(tb)) == tb,
                 "text embedding round-trip not byte-identical");
    }
    return c;
}

// ---- A5: overfit learning check ---------------------------------------------------

struct A5Fixture {
    std::string gt_path, coarse_path, text_path;
    double coarse_miou = 0.0;
};

A5Fixture a5_fixture() {
    static A5Fixture fx = [] {
        A5Fixture f;
        const std::string dir = work_dir();
        SemGrid gt = make_layered_scene({32, 32, 8}, 4, 2024);
        NoiseSpec noise;
        noise.swaps.push_back({1, 2, 0.8});
        noise.dropout_prob = 0.2;
        SemGrid coarse = corrupt_labels(gt, noise, 77);
        f.gt_path = dir + "/a5_gt.essc";
        f.coarse_path = dir + "/a5_coarse.essc";
        f.text_path = dir + "/a5_text.essc";
        save_grid(f.gt_path, gt);
        save_grid(f.coarse_path, coarse);
        TextEmbedding text;
        Rng rng(555);
        text.global.resize(16);
        for (auto& v : text.global) v = rng.normal();
        text.token_count = 6;
        text.token_dim = 12;
        text.tokens.resize(text.token_count * text.token_dim);
        for (auto& v : text.tokens) v = rng.normal();
        save_text_embedding(f.text_path, text);
        ConfusionMatrix cm(4);
        cm.accumulate(coarse, gt);
        f.coarse_miou = miou(cm).mean * 100.0;
        return f;
    }();
    return fx;
}

Check run_a5(const std::string& variant) {
    Check c;
    const A5Fixture fx = a5_fixture();
    RunConfig run;
    run.model.num_classes = 5;
    run.model.base_channels = 8;
    run.model.grid_dims = {32, 32, 8};
    run.model.epochs = 500;
    run.model.seed = 1;
    run.model.text_global_dim = 16;
    run.model.text_token_dim = 12;
    std::string text;
    if (variant == "pnam") {
        run.model.decoder = RefineConfig::Decoder::pnam;
    } else if (variant == "vlgm") {
        run.model.fusion = FusionPlacement::both;
        text = fx.text_path;
    }
    run.train.push_back({fx.coarse_path, fx.gt_path, text});
    run.checkpoint_out = work_dir() + "/a5_ckpt_" + variant + ".essc";
    run.val_interval = 25;

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_refiner(run);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double refined = r.final_miou * 100.0;
    std::printf("    %s: coarse mIoU %.2f -> refined %.2f (gain %+.2f) in %.0fs\n",
                variant.c_str(), fx.coarse_miou, refined, refined - fx.coarse_miou, secs);
    c.expect(refined >= fx.coarse_miou + 15.0,
             variant + " gain " + std::to_string(refined - fx.coarse_miou) + " below 15 points");

    // validation mIoU is monotone nondecreasing over the last quarter of the
    // run, within a 0.5-point slack band
    double running_max = 0.0;
    for (const auto& v : r.validation) {
        if (v.step < 375) continue;
        const double points = v.miou * 100.0;
        c.expect(points >= running_max - 0.5,
                 variant + " mIoU regressed at step " + std::to_string(v.step));
        running_max = std::max(running_max, points);
    }
    return c;
}

// ---- A6: neighborhood attention dense equivalence ---------------------------------

Check run_a6() {
    Check c;
    Rng rng(660);
    for (int trial = 0; trial < 50; ++trial) {
        auto mk = [&](Shape s) {
            std::vector<double> v(shape_size(s));
            for (auto& x : v) x = rng.uniform(-1.0, 1.0);
            return Tensor::from_values(std::move(s), std::move(v));
        };
        Tensor skip = mk({4, 3, 3, 3});
        Tensor up = mk({4, 3, 3, 3});
        AttnBranchParams p;
        auto qkv = [&](QkvConvs& q) {
            q.point_w = mk({4, 4, 1, 1, 1});
            q.point_b = mk({4});
            q.depth_w = mk({4, 1, 3, 3, 3});
            q.depth_b = mk({4});
        };
        qkv(p.q);
        qkv(p.k);
        qkv(p.v);
        p.out_w = mk({4, 4, 1, 1, 1});
        p.out_b = mk({4});

        Tensor windowed = neighborhood_cross_attention(skip, up, p, 2, 5);
        // dense cross-attention from the same projections
        auto project = [&](const Tensor& src, const QkvConvs& q) {
            return conv3d(conv3d(src, q.point_w, q.point_b, 1, 0), q.depth_w, q.depth_b, 1, 1,
                          true);
        };
        const std::size_t n = 27;
        auto heads = [&](const Tensor& t) {
            return permute(reshape(permute(reshape(t, {4, n}), {1, 0}), {n, 2, 2}), {1, 0, 2});
        };
        Tensor dense = attention(heads(project(up, p.q)), heads(project(skip, p.k)),
                                 heads(project(skip, p.v)));
        Tensor vol =
            reshape(permute(reshape(permute(dense, {1, 0, 2}), {n, 4}), {1, 0}), {4, 3, 3, 3});
        Tensor expect = add(up, conv3d(vol, p.out_w, p.out_b, 1, 0));
        double max_diff = 0.0;
        for (std::size_t i = 0; i < windowed.size(); ++i)
            max_diff = std::max(max_diff,
                                std::abs(windowed.values()[i] - expect.values()[i]));
        c.expect(max_diff < 1e-10,
                 "trial " + std::to_string(trial) + " max diff " + std::to_string(max_diff));
    }
    return c;
}

// ---- A7: identity degenerations ----------------------------------------------------

Check run_a7() {
    Check c;
    Rng rng(770);
    // SIGM with zero MLPs
    {
        std::vector<double> fv(3 * 8);
        for (auto& x : fv) x = rng.uniform(-2.0, 2.0);
        Tensor f = Tensor::from_values({3, 2, 2, 2}, fv);
        std::vector<double> gv(5);
        for (auto& x : gv) x = rng.uniform(-2.0, 2.0);
        Tensor g = Tensor::from_values({5}, gv);
        SigmParams p{{Tensor::zeros({3, 5}), Tensor::zeros({3}), Tensor::zeros({3, 3}),
                      Tensor::zeros({3})},
                     {Tensor::zeros({3, 5}), Tensor::zeros({3}), Tensor::zeros({3, 3}),
                      Tensor::zeros({3})}};
        Tensor out = sigm_modulate(f, g, p);
        c.expect(out.values() == f.values(), "zero-MLP modulation is not an exact identity");
    }
    // fusion = none with text present leaves the logits bitwise unchanged
    {
        RefineConfig cfg;
        cfg.num_classes = 3;
        cfg.base_channels = 4;
        cfg.grid_dims = {16, 16, 16};
        cfg.seed = 77;
        ParamMap params = init_refiner_params(cfg);
        SemGrid g = random_grid({16, 16, 16}, 2, rng);
        TextEmbedding text;
        text.global.assign(cfg.text_global_dim, 0.5);
        text.token_count = 3;
        text.token_dim = cfg.text_token_dim;
        text.tokens.assign(text.token_count * text.token_dim, -0.25);
        MultiScaleLogits without = refine_forward(g, cfg, params);
        MultiScaleLogits with = refine_forward(g, cfg, params, &text);
        for (int s : {1, 2, 4, 8})
            c.expect(without.by_scale.at(s).values() == with.by_scale.at(s).values(),
                     "text changed logits at scale " + std::to_string(s));
    }
    // zero-weight residual block leaves its input bitwise unchanged
    {
        std::vector<double> fv(4 * 4 * 4 * 2);
        for (auto& x : fv) x = rng.uniform(-2.0, 2.0);
        Tensor f = Tensor::from_values({4, 4, 4, 2}, fv);
        FebParams p;
        p.block1 = {Tensor::zeros({4, 4, 3, 3, 3}), Tensor::zeros({4}),
                    Tensor::zeros({4, 4, 3, 3, 3}), Tensor::zeros({4})};
        p.down_w = Tensor::zeros({8, 4, 2, 2, 2});
        p.down_b = Tensor::zeros({8});
        FebOut o = feb_forward(f, p, RefineConfig::Downsample::conv, {2, 2, 2}, 1e-5, 0.01);
        c.expect(o.skip.values() == f.values(), "zero residual block is not an exact identity");
    }
    return c;
}

// ---- A8: shape ladder ---------------------------------------------------------------

Check run_a8() {
    Check c;
    RefineConfig cfg;
    cfg.num_classes = 3;
    cfg.base_channels = 4;
    cfg.grid_dims = {16, 16, 16};
    cfg.seed = 88;
    ParamMap params = init_refiner_params(cfg);
    Rng rng(880);
    SemGrid g = random_grid({16, 16, 16}, 2, rng);
    MultiScaleLogits out = refine_forward(g, cfg, params);
    c.expect(out.by_scale.size() == 4, "expected logits at four scales");
    for (int s : {1, 2, 4, 8}) {
        const Shape expect = {3, std::size_t(16 / s), std::size_t(16 / s), std::size_t(16 / s)};
        c.expect(out.by_scale.count(s) == 1, "missing scale " + std::to_string(s));
        if (out.by_scale.count(s))
            c.expect(out.by_scale.at(s).shape() == expect,
                     "wrong dims at scale " + std::to_string(s));
    }
    return c;
}

// ---- A9: command determinism ---------------------------------------------------------

Check run_a9() {
    Check c;
    const std::string cli = ESSC_CLI_BIN;
    if (cli.empty()) {
        c.expect(false, "CLI binary path not configured");
        return c;
    }
    const std::string dir = work_dir();
    SemGrid gt = make_layered_scene({16, 16, 8}, 3, 99);
    NoiseSpec noise;
    noise.swaps.push_back({1, 2, 0.5});
    noise.dropout_prob = 0.2;
    save_grid(dir + "/a9_gt.essc", gt);
    save_grid(dir + "/a9_coarse.essc", corrupt_labels(gt, noise, 12));

    RunConfig run;
    run.model.num_classes = 4;
    run.model.base_channels = 2;
    run.model.grid_dims = {16, 16, 8};
    run.model.epochs = 3;
    run.model.seed = 5;
    run.train.push_back({dir + "/a9_coarse.essc", dir + "/a9_gt.essc", ""});
    {
        std::ofstream f(dir + "/a9_run.json");
        f << run_config_to_json(run);
    }
    auto shell = [&](const std::string& args) {
        const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };
    c.expect(shell("train --config " + dir + "/a9_run.json --out " + dir + "/a9_ck1.essc"),
             "first training run failed");
    c.expect(shell("train --config " + dir + "/a9_run.json --out " + dir + "/a9_ck2.essc"),
             "second training run failed");
    if (c.ok)
        c.expect(read_file(dir + "/a9_ck1.essc") == read_file(dir + "/a9_ck2.essc"),
                 "checkpoints differ across identical seeded runs");
    c.expect(shell("refine --checkpoint " + dir + "/a9_ck1.essc --in " + dir +
                   "/a9_coarse.essc --out " + dir + "/a9_out1.essc"),
             "first refine failed");
    c.expect(shell("refine --checkpoint " + dir + "/a9_ck1.essc --in " + dir +
                   "/a9_coarse.essc --out " + dir + "/a9_out2.essc"),
             "second refine failed");
    if (c.ok)
        c.expect(read_file(dir + "/a9_out1.essc") == read_file(dir + "/a9_out2.essc"),
                 "refined grids differ across identical runs");
    return c;
}

// ---- A10: schedule fixture ------------------------------------------------------------

Check run_a10() {
    Check c;
    c.expect(cosine_warmup_lr(50, 1000, 5e-5, 0.05) == 5e-5,
             "warmup boundary does not hit the peak exactly");
    c.expect(cosine_warmup_lr(1000, 1000, 5e-5, 0.05) == 0.0,
             "final step is not exactly zero");
    c.expect(std::abs(cosine_warmup_lr(525, 1000, 5e-5, 0.05) - 2.5e-5) < 1e-12,
             "decay midpoint is not half the peak");
    // ramp shape
    for (int s = 0; s <= 50; ++s) {
        const double lr = cosine_warmup_lr(s, 1000, 5e-5, 0.05);
        c.expect(std::abs(lr - 5e-5 * s / 50.0) < 1e-18, "warmup ramp is not linear");
    }
    return c;
}

struct Criterion {
    std::string id;
    std::string desc;
    std::function<Check()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {"A1", "gradient suite over every differentiable op", run_a1},
        {"A2", "loss identities and affinity-loss oracle", run_a2},
        {"A3", "metric oracle on 1000 random grid pairs", run_a3},
        {"A4", "bit-exact file formats", run_a4},
        {"A5-unet", "overfit learning check, convolutional decoder", [] { return run_a5("unet"); }},
        {"A5-pnam", "overfit learning check, attention decoder", [] { return run_a5("pnam"); }},
        {"A5-vlgm", "overfit learning check, text-guided fusion", [] { return run_a5("vlgm"); }},
        {"A6", "neighborhood attention dense equivalence", run_a6},
        {"A7", "identity degenerations", run_a7},
        {"A8", "multi-scale logit shape ladder", run_a8},
        {"A9", "training and refinement determinism", run_a9},
        {"A10", "warmup-cosine schedule fixture", run_a10},
    };

    std::vector<std::string> wanted(argv + 1, argv + argc);
    int failures = 0;
    int ran = 0;
    for (const auto& cr : criteria) {
        bool selected = wanted.empty();
        for (const auto& w : wanted)
            selected = selected || cr.id == w || cr.id.rfind(w + "-", 0) == 0;
        if (!selected) continue;
        ++ran;
        Check result;
        try {
            result = cr.run();
        } catch (const std::exception& e) {
            result.ok = false;
            result.detail = std::string("exception: ") + e.what();
        }
        if (result.ok) {
            std::printf("[PASS] %-8s %s\n", cr.id.c_str(), cr.desc.c_str());
        } else {
            std::printf("[FAIL] %-8s %s: %s\n", cr.id.c_str(), cr.desc.c_str(),
                        result.detail.c_str());
            ++failures;
        }
        std::fflush(stdout);
    }
    if (ran == 0) {
        std::fprintf(stderr, "no criteria matched; available: A1..A10, A5-unet/pnam/vlgm\n");
        return 1;
    }
    return failures == 0 ? 0 : 1;
}
