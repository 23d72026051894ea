#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "essc/common.hpp"
#include "essc/trainkit.hpp"

using namespace essc;

namespace {

std::string tmp_path(const char* name) {
    return std::string("/tmp/essc_train_") + std::to_string(::getpid()) + "_" + name;
}

}  // namespace

TEST_CASE("adamw: zero gradient and zero decay leave parameters unchanged") {
    ParamMap params;
    params.emplace("w", Tensor::from_values({3}, {1.0, -2.0, 0.5}, true));
    backward(scale(sum(params.at("w")), 0.0));  // zero gradients
    AdamState st;
    AdamHyper h;
    h.lr = 0.1;
    adamw_step(params, st, h);
    CHECK(params.at("w").values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adamw single step matches the closed form") {
    ParamMap params;
    params.emplace("w", Tensor::from_values({1}, {0.7}, true));
    backward(sum(params.at("w")));  // gradient exactly 1
    AdamState st;
    AdamHyper h;
    h.lr = 0.1;
    h.beta1 = 0.9;
    h.beta2 = 0.99;
    h.eps = 1e-8;
    adamw_step(params, st, h);
    // m_hat = v_hat = 1 after bias correction; update = -lr / (1 + eps)
    const double expect = 0.7 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(params.at("w").values()[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("adamw decoupled decay shrinks parameters on zero gradient") {
    ParamMap params;
    params.emplace("w", Tensor::from_values({2}, {2.0, -4.0}, true));
    backward(scale(sum(params.at("w")), 0.0));
    AdamState st;
    AdamHyper h;
    h.lr = 0.1;
    h.weight_decay = 0.5;
    adamw_step(params, st, h);
    CHECK(params.at("w").values()[0] == doctest::Approx(2.0 * (1.0 - 0.05)).epsilon(1e-14));
    CHECK(params.at("w").values()[1] == doctest::Approx(-4.0 * (1.0 - 0.05)).epsilon(1e-14));
}

TEST_CASE("adamw aborts on NaN gradients naming the tensor") {
    ParamMap params;
    params.emplace("bad_tensor", Tensor::from_values({1}, {1.0}, true));
    Tensor inf = Tensor::from_values({1}, {std::numeric_limits<double>::infinity()});
    backward(sum(mul(params.at("bad_tensor"), mul(inf, Tensor::from_values({1}, {0.0})))));
    AdamState st;
    CHECK_THROWS_WITH_AS(adamw_step(params, st, {}), doctest::Contains("bad_tensor"),
                         std::runtime_error);
}

TEST_CASE("cosine warmup schedule fixtures") {
    // peak exactly at the warmup boundary, zero at the end
    CHECK(cosine_warmup_lr(50, 1000, 5e-5, 0.05) == 5e-5);
    CHECK(cosine_warmup_lr(1000, 1000, 5e-5, 0.05) == 0.0);
    // linear ramp
    CHECK(cosine_warmup_lr(25, 1000, 5e-5, 0.05) == doctest::Approx(2.5e-5).epsilon(1e-15));
    CHECK(cosine_warmup_lr(0, 1000, 5e-5, 0.05) == 0.0);
    // midpoint of the decay phase sits at half the peak
    const double mid = cosine_warmup_lr(50 + 475, 1000, 5e-5, 0.05);
    CHECK(std::abs(mid - 2.5e-5) < 1e-12);
    CHECK_THROWS_AS(cosine_warmup_lr(1001, 1000, 5e-5, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(cosine_warmup_lr(1, 10, 5e-5, 0.0), std::invalid_argument);
}

TEST_CASE("corrupt_labels: zero probabilities are the identity") {
    SemGrid g = make_layered_scene({16, 16, 8}, 4, 3);
    NoiseSpec none;
    CorruptionStats stats;
    SemGrid out = corrupt_labels(g, none, 99, &stats);
    CHECK(out.labels == g.labels);
    CHECK(stats.changed == 0);
}

TEST_CASE("corrupt_labels: certain swap rewrites every matching voxel") {
    SemGrid g = make_layered_scene({16, 16, 8}, 4, 3);
    std::size_t ones = 0;
    for (auto l : g.labels) ones += l == 1;
    REQUIRE(ones > 0);
    NoiseSpec noise;
    noise.swaps.push_back({1, 2, 1.0});
    CorruptionStats stats;
    SemGrid out = corrupt_labels(g, noise, 7, &stats);
    for (auto l : out.labels) CHECK(l != 1);
    CHECK(stats.changed == ones);
    CHECK(out.valid == g.valid);
}

TEST_CASE("corrupt_labels dropout fraction lands within binomial bounds") {
    SemGrid g = SemGrid::filled({32, 32, 16}, 2, 1);  // 16384 occupied voxels
    NoiseSpec noise;
    noise.dropout_prob = 0.3;
    CorruptionStats stats;
    SemGrid out = corrupt_labels(g, noise, 1234, &stats);
    const double n = double(g.voxel_count());
    const double expect = 0.3 * n;
    const double sigma = std::sqrt(n * 0.3 * 0.7);
    CHECK(std::abs(double(stats.changed) - expect) < 3.0 * sigma);
}

TEST_CASE("corrupt_labels is deterministic in the seed") {
    SemGrid g = make_layered_scene({16, 16, 8}, 4, 5);
    NoiseSpec noise;
    noise.swaps.push_back({1, 2, 0.5});
    noise.dropout_prob = 0.2;
    noise.blobs.push_back({2, 1.5});
    SemGrid a = corrupt_labels(g, noise, 42);
    SemGrid b = corrupt_labels(g, noise, 42);
    SemGrid c = corrupt_labels(g, noise, 43);
    CHECK(a.labels == b.labels);
    CHECK(a.labels != c.labels);
    NoiseSpec bad;
    bad.dropout_prob = 1.5;
    CHECK_THROWS_AS(corrupt_labels(g, bad, 1), std::invalid_argument);
}

TEST_CASE("layered scene fills every configured class with contiguous regions") {
    SemGrid g = make_layered_scene({32, 32, 8}, 4, 11);
    std::vector<std::size_t> counts(5, 0);
    for (auto l : g.labels) counts[l]++;
    for (int c = 0; c <= 4; ++c) CHECK(counts[c] > 0);
    // terrain and road occupy the full bottom slab
    for (uint32_t x = 0; x < 32; ++x)
        for (uint32_t y = 0; y < 32; ++y) CHECK(g.labels[g.index(x, y, 0)] != 0);
}

TEST_CASE("zero-epoch training writes the initialization checkpoint") {
    const std::string gt_path = tmp_path("gt.essc");
    const std::string coarse_path = tmp_path("coarse.essc");
    SemGrid gt = make_layered_scene({16, 16, 8}, 3, 21);
    save_grid(gt_path, gt);
    NoiseSpec noise;
    noise.dropout_prob = 0.2;
    save_grid(coarse_path, corrupt_labels(gt, noise, 5));

    RunConfig run;
    run.model.num_classes = 4;
    run.model.base_channels = 2;
    run.model.grid_dims = {16, 16, 8};
    run.model.epochs = 0;
    run.model.seed = 3;
    run.train.push_back({coarse_path, gt_path, ""});
    run.checkpoint_out = tmp_path("ckpt0.essc");
    TrainResult r = train_refiner(run);
    CHECK(r.steps == 0);

    Checkpoint ck = load_checkpoint(run.checkpoint_out);
    ParamMap init = init_refiner_params(run.model);
    for (const auto& [name, t] : init) CHECK(ck.params.at(name).values() == t.values());
    std::remove(gt_path.c_str());
    std::remove(coarse_path.c_str());
    std::remove(run.checkpoint_out.c_str());
}

TEST_CASE("training twice with one seed gives byte-identical checkpoints") {
    const std::string gt_path = tmp_path("gt2.essc");
    const std::string coarse_path = tmp_path("coarse2.essc");
    SemGrid gt = make_layered_scene({16, 16, 8}, 3, 31);
    save_grid(gt_path, gt);
    NoiseSpec noise;
    noise.swaps.push_back({1, 2, 0.5});
    save_grid(coarse_path, corrupt_labels(gt, noise, 6));

    RunConfig run;
    run.model.num_classes = 4;
    run.model.base_channels = 2;
    run.model.grid_dims = {16, 16, 8};
    run.model.epochs = 3;
    run.model.seed = 9;
    run.train.push_back({coarse_path, gt_path, ""});
    run.checkpoint_out = tmp_path("ckpt_a.essc");
    train_refiner(run);
    auto bytes_a = read_file(run.checkpoint_out);
    run.checkpoint_out = tmp_path("ckpt_b.essc");
    train_refiner(run);
    auto bytes_b = read_file(run.checkpoint_out);
    CHECK(bytes_a == bytes_b);
    std::remove(gt_path.c_str());
    std::remove(coarse_path.c_str());
    std::remove(tmp_path("ckpt_a.essc").c_str());
    std::remove(tmp_path("ckpt_b.essc").c_str());
}

TEST_CASE("joint mode regenerates corruption per step and never leaks gradients") {
    const std::string gt_path = tmp_path("gt3.essc");
    SemGrid gt = make_layered_scene({16, 16, 8}, 3, 41);
    save_grid(gt_path, gt);

    RunConfig run;
    run.model.num_classes = 4;
    run.model.base_channels = 2;
    run.model.grid_dims = {16, 16, 8};
    run.model.epochs = 2;
    run.model.seed = 13;
    run.mode = TrainMode::joint_stub;
    run.joint_noise.dropout_prob = 0.3;
    run.train.push_back({"", gt_path, ""});
    run.checkpoint_out = tmp_path("ckpt_joint.essc");
    std::ostringstream log;
    TrainResult r = train_refiner(run, &log);
    CHECK(r.steps == 2);
    CHECK(std::isfinite(r.final_miou));
    CHECK(log.str().find("\"lr\"") != std::string::npos);
    std::remove(gt_path.c_str());
    std::remove(run.checkpoint_out.c_str());
}

TEST_CASE("run config json round-trip") {
    RunConfig run;
    run.model.num_classes = 5;
    run.model.base_channels = 8;
    run.model.grid_dims = {32, 32, 8};
    run.mode = TrainMode::joint_stub;
    run.joint_noise.swaps.push_back({1, 2, 0.8});
    run.joint_noise.dropout_prob = 0.2;
    run.train.push_back({"c.essc", "g.essc", "t.essc"});
    run.val_interval = 20;
    const std::string j = run_config_to_json(run);
    RunConfig back = run_config_from_json(j);
    CHECK(run_config_to_json(back) == j);
    CHECK(back.mode == TrainMode::joint_stub);
    REQUIRE(back.joint_noise.swaps.size() == 1);
    CHECK(back.joint_noise.swaps[0].prob == 0.8);
    CHECK(back.train.size() == 1);
    CHECK(back.train[0].text_path == "t.essc");
    CHECK_THROWS_AS(run_config_from_json("{\"mode\": \"bogus\"}"), std::invalid_argument);
}
