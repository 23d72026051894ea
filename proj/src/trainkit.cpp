#include "essc/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "essc/common.hpp"

namespace essc {

using nlohmann::json;

// ---- optimizer -----------------------------------------------------------------

void adamw_step(ParamMap& params, AdamState& state, const AdamHyper& h) {
    require(h.lr >= 0.0 && h.eps > 0.0, "adamw_step", "lr must be nonnegative and eps positive");
    require(h.beta1 >= 0.0 && h.beta1 < 1.0 && h.beta2 >= 0.0 && h.beta2 < 1.0, "adamw_step",
            "betas must lie in [0, 1)");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, double(state.step));
    for (auto& [name, tensor] : params) {
        const auto& g = tensor.grad();
        for (double gv : g)
            if (std::isnan(gv))
                throw std::runtime_error("adamw_step: NaN gradient in tensor '" + name + "'");
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        if (m.size() != g.size())
            throw internal_error("adamw_step: state size mismatch for '" + name + "'");
        auto& p = tensor.mutable_values();
        const double decay = 1.0 - h.lr * h.weight_decay;
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= decay;
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            p[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
        }
    }
}

double cosine_warmup_lr(int64_t step, int64_t total_steps, double peak, double warmup_frac) {
    require(total_steps >= 1, "cosine_warmup_lr", "total_steps must be positive");
    require(step >= 0 && step <= total_steps, "cosine_warmup_lr",
            "step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
    require(warmup_frac > 0.0 && warmup_frac < 1.0, "cosine_warmup_lr",
            "warmup_frac must lie in (0, 1)");
    const int64_t warmup = std::max<int64_t>(1, llround(warmup_frac * double(total_steps)));
    if (step <= warmup) return peak * double(step) / double(warmup);
    const double t = double(step - warmup) / double(total_steps - warmup);
    return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---- corruption -----------------------------------------------------------------

SemGrid corrupt_labels(const SemGrid& gt, const NoiseSpec& noise, uint64_t seed,
                       CorruptionStats* stats) {
    gt.check();
    for (const auto& s : noise.swaps) {
        require(s.prob >= 0.0 && s.prob <= 1.0, "corrupt_labels", "swap probability outside [0, 1]");
        require(s.from <= gt.num_semantic_classes && s.to <= gt.num_semantic_classes,
                "corrupt_labels", "swap classes outside the grid's class range");
    }
    require(noise.dropout_prob >= 0.0 && noise.dropout_prob <= 1.0, "corrupt_labels",
            "dropout probability outside [0, 1]");
    for (const auto& b : noise.blobs)
        require(b.count >= 0 && b.radius >= 0.0, "corrupt_labels", "invalid blob specification");

    SemGrid out = gt;
    Rng rng(seed);
    const std::size_t n = gt.voxel_count();
    for (const auto& s : noise.swaps) {
        for (std::size_t i = 0; i < n; ++i)
            if (out.labels[i] == s.from && rng.uniform() < s.prob) out.labels[i] = s.to;
    }
    if (noise.dropout_prob > 0.0) {
        for (std::size_t i = 0; i < n; ++i)
            if (out.labels[i] != 0 && rng.uniform() < noise.dropout_prob) out.labels[i] = 0;
    }
    for (const auto& b : noise.blobs) {
        for (int c = 0; c < b.count; ++c) {
            const std::size_t center = rng.below(n);
            const long cz = long(center % gt.dims[2]);
            const long cy = long((center / gt.dims[2]) % gt.dims[1]);
            const long cx = long(center / (std::size_t(gt.dims[1]) * gt.dims[2]));
            const long r = long(std::ceil(b.radius));
            for (long x = std::max(0l, cx - r); x <= std::min(long(gt.dims[0]) - 1, cx + r); ++x)
                for (long y = std::max(0l, cy - r); y <= std::min(long(gt.dims[1]) - 1, cy + r); ++y)
                    for (long z = std::max(0l, cz - r); z <= std::min(long(gt.dims[2]) - 1, cz + r);
                         ++z) {
                        const double d2 = double((x - cx) * (x - cx) + (y - cy) * (y - cy) +
                                                 (z - cz) * (z - cz));
                        if (d2 <= b.radius * b.radius)
                            out.labels[out.index(std::size_t(x), std::size_t(y), std::size_t(z))] =
                                0;
                    }
        }
    }
    if (stats) {
        stats->total = n;
        stats->changed = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (out.labels[i] != gt.labels[i]) stats->changed++;
    }
    return out;
}

// ---- synthetic scene ---------------------------------------------------------------

SemGrid make_layered_scene(std::array<uint32_t, 3> dims, uint32_t num_semantic_classes,
                           uint64_t seed) {
    require(num_semantic_classes >= 1, "make_layered_scene", "need at least one semantic class");
    SemGrid g = SemGrid::filled(dims, num_semantic_classes, 0, true);
    Rng rng(seed * 0x2545f4914f6cdd1dull + 0x9e3779b9ull);
    const uint32_t X = dims[0], Y = dims[1], Z = dims[2];
    const uint32_t ground_h = std::max(1u, Z / 4);

    // terrain slab with a road stripe along x
    const uint32_t road_lo = (Y * 3) / 8, road_hi = (Y * 5) / 8;
    for (uint32_t x = 0; x < X; ++x)
        for (uint32_t y = 0; y < Y; ++y)
            for (uint32_t z = 0; z < ground_h; ++z) {
                uint16_t cls = 1;
                if (num_semantic_classes >= 2 && y >= road_lo && y < road_hi) cls = 2;
                g.labels[g.index(x, y, z)] = cls;
            }

    auto place_box = [&](uint16_t cls, uint32_t max_h) {
        const uint32_t sx = std::max(2u, X / 5), sy = std::max(2u, Y / 5);
        const uint32_t x0 = uint32_t(rng.below(std::max(1u, X - sx)));
        const uint32_t y0 = uint32_t(rng.below(std::max(1u, Y - sy)));
        const uint32_t h = std::min(Z - ground_h, std::max(1u, max_h));
        for (uint32_t x = x0; x < std::min(X, x0 + sx); ++x)
            for (uint32_t y = y0; y < std::min(Y, y0 + sy); ++y)
                for (uint32_t z = ground_h; z < ground_h + h; ++z)
                    g.labels[g.index(x, y, z)] = cls;
    };

    // low patches first so taller structures overwrite where they overlap
    if (num_semantic_classes >= 4) {
        place_box(4, std::max(1u, Z / 4));
        place_box(4, std::max(1u, Z / 4));
    }
    for (uint16_t cls = 5; cls <= num_semantic_classes; ++cls)
        place_box(cls, std::max(1u, Z / 3));
    if (num_semantic_classes >= 3) {
        place_box(3, std::max(1u, Z / 2));
        place_box(3, std::max(1u, (2 * Z) / 3));
    }
    return g;
}

// ---- run config -------------------------------------------------------------------

namespace {

json noise_to_json(const NoiseSpec& n) {
    json j;
    j["swaps"] = json::array();
    for (const auto& s : n.swaps)
        j["swaps"].push_back({{"from", s.from}, {"to", s.to}, {"prob", s.prob}});
    j["dropout"] = n.dropout_prob;
    j["blobs"] = json::array();
    for (const auto& b : n.blobs) j["blobs"].push_back({{"count", b.count}, {"radius", b.radius}});
    return j;
}

NoiseSpec noise_from_json(const json& j) {
    NoiseSpec n;
    if (j.contains("swaps"))
        for (const auto& s : j.at("swaps"))
            n.swaps.push_back({s.at("from").get<uint16_t>(), s.at("to").get<uint16_t>(),
                               s.at("prob").get<double>()});
    n.dropout_prob = j.value("dropout", 0.0);
    if (j.contains("blobs"))
        for (const auto& b : j.at("blobs"))
            n.blobs.push_back({b.at("count").get<int>(), b.at("radius").get<double>()});
    return n;
}

std::vector<TrainSample> samples_from_json(const json& j) {
    std::vector<TrainSample> out;
    for (const auto& s : j) {
        TrainSample t;
        t.coarse_path = s.value("coarse", "");
        t.gt_path = s.at("gt").get<std::string>();
        t.text_path = s.value("text", "");
        out.push_back(std::move(t));
    }
    return out;
}

json samples_to_json(const std::vector<TrainSample>& samples) {
    json j = json::array();
    for (const auto& s : samples) {
        json e;
        if (!s.coarse_path.empty()) e["coarse"] = s.coarse_path;
        e["gt"] = s.gt_path;
        if (!s.text_path.empty()) e["text"] = s.text_path;
        j.push_back(std::move(e));
    }
    return j;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
    RunConfig run;
    run.model = config_from_json(text);  // model fields sit at the top level
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail("run_config", std::string("JSON parse error: ") + e.what());
    }
    try {
        if (j.contains("mode")) {
            const std::string m = j.at("mode").get<std::string>();
            if (m == "separate")
                run.mode = TrainMode::separate;
            else if (m == "joint")
                run.mode = TrainMode::joint_stub;
            else
                fail("run_config", "field 'mode': unknown value '" + m +
                                       "' (allowed: separate, joint)");
        }
        if (j.contains("train")) run.train = samples_from_json(j.at("train"));
        if (j.contains("val")) run.val = samples_from_json(j.at("val"));
        if (j.contains("joint_noise")) run.joint_noise = noise_from_json(j.at("joint_noise"));
        run.checkpoint_out = j.value("checkpoint_out", run.checkpoint_out);
        run.log_out = j.value("log_out", run.log_out);
        run.val_interval = j.value("val_interval", run.val_interval);
    } catch (const json::exception& e) {
        fail("run_config", std::string("invalid field: ") + e.what());
    }
    return run;
}

std::string run_config_to_json(const RunConfig& run) {
    json j = json::parse(config_to_json(run.model));
    j["mode"] = run.mode == TrainMode::separate ? "separate" : "joint";
    j["train"] = samples_to_json(run.train);
    j["val"] = samples_to_json(run.val);
    j["joint_noise"] = noise_to_json(run.joint_noise);
    j["checkpoint_out"] = run.checkpoint_out;
    j["log_out"] = run.log_out;
    j["val_interval"] = run.val_interval;
    return j.dump(2);
}

// ---- training loop -----------------------------------------------------------------

void score_grid(ConfusionMatrix& cm, const SemGrid& pred, const SemGrid& gt) {
    cm.accumulate(pred, gt);
}

namespace {

struct Scene {
    SemGrid gt;
    SemGrid coarse;  // separate mode only
    TextEmbedding text;
    bool has_text = false;
    std::map<int, SemGrid> targets;
};

Scene load_scene(const TrainSample& sample, const RefineConfig& cfg, bool need_coarse) {
    Scene s;
    s.gt = load_grid(sample.gt_path);
    require(s.gt.dims == cfg.grid_dims, "train",
            "ground-truth grid '" + sample.gt_path + "' does not match the configured dims");
    require(s.gt.num_semantic_classes < cfg.num_classes, "train",
            "grid '" + sample.gt_path + "' exceeds the configured class count");
    if (need_coarse) {
        require(!sample.coarse_path.empty(), "train",
                "separate mode requires a coarse grid for '" + sample.gt_path + "'");
        s.coarse = load_grid(sample.coarse_path);
        require(s.coarse.dims == cfg.grid_dims, "train",
                "coarse grid '" + sample.coarse_path + "' does not match the configured dims");
    }
    if (!sample.text_path.empty()) {
        s.text = load_text_embedding(sample.text_path);
        s.has_text = true;
    }
    require(cfg.fusion == FusionPlacement::none || s.has_text, "train",
            "fusion is enabled but sample '" + sample.gt_path + "' has no text embedding");
    for (int scale : cfg.scales)
        s.targets.emplace(scale, scale == 1 ? s.gt
                                            : downsample_labels_majority(s.gt, uint32_t(scale)));
    return s;
}

ValidationPoint run_validation(const std::vector<Scene>& scenes, const RefineConfig& cfg,
                               const ParamMap& params, TrainMode mode, const NoiseSpec& noise,
                               uint64_t seed, int64_t step) {
    ConfusionMatrix cm(cfg.num_classes - 1);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Scene& s = scenes[i];
        const SemGrid coarse = mode == TrainMode::separate
                                   ? s.coarse
                                   : corrupt_labels(s.gt, noise, seed + i);
        MultiScaleLogits logits =
            refine_forward(coarse, cfg, params, s.has_text ? &s.text : nullptr);
        SemGrid pred = argmax_labels(logits, coarse);
        cm.accumulate(pred, s.gt);
    }
    ValidationPoint v;
    v.step = step;
    v.iou = completion_iou(cm).iou;
    v.miou = miou(cm).mean;
    return v;
}

}  // namespace

TrainResult train_refiner(const RunConfig& run, std::ostream* log) {
    const RefineConfig& cfg = run.model;
    validate(cfg);
    require(!run.train.empty(), "train", "no training samples");

    const bool separate = run.mode == TrainMode::separate;
    std::vector<Scene> train_scenes;
    for (const auto& sample : run.train) train_scenes.push_back(load_scene(sample, cfg, separate));
    std::vector<Scene> val_scenes;
    for (const auto& sample : run.val) val_scenes.push_back(load_scene(sample, cfg, separate));
    const std::vector<Scene>& eval_scenes = val_scenes.empty() ? train_scenes : val_scenes;

    // class weights from the training-set label frequencies over valid voxels
    std::vector<uint64_t> counts(cfg.num_classes, 0);
    for (const auto& s : train_scenes)
        for (std::size_t i = 0; i < s.gt.voxel_count(); ++i)
            if (s.gt.valid[i]) counts[s.gt.labels[i]]++;
    const ClassWeights weights = class_weights_from_frequencies(counts, cfg.class_weight_eps);

    ParamMap params = init_refiner_params(cfg);
    AdamState adam;
    AdamHyper hyper;
    hyper.beta1 = cfg.beta1;
    hyper.beta2 = cfg.beta2;
    hyper.eps = cfg.adam_eps;
    hyper.weight_decay = cfg.weight_decay;

    const int64_t scenes = int64_t(train_scenes.size());
    const int64_t total_steps = int64_t(cfg.epochs) * scenes;
    const int64_t val_every =
        run.val_interval > 0 ? run.val_interval : std::max<int64_t>(1, scenes);

    TrainResult result;
    const LossSettings loss_cfg = cfg.loss_settings();
    for (int64_t step = 1; step <= total_steps; ++step) {
        Scene& scene = train_scenes[std::size_t((step - 1) % scenes)];
        const SemGrid coarse =
            separate ? scene.coarse
                     : corrupt_labels(scene.gt, run.joint_noise,
                                      fnv1a64("corrupt", cfg.seed * 7919 + uint64_t(step)));
        MultiScaleLogits logits =
            refine_forward(coarse, cfg, params, scene.has_text ? &scene.text : nullptr);
        TotalLoss loss = total_loss(logits.by_scale, scene.targets, weights, loss_cfg);
        if (!std::isfinite(loss.parts.total))
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
        backward(loss.value);
        hyper.lr = cosine_warmup_lr(step, total_steps, cfg.lr_peak, cfg.warmup_frac);
        adamw_step(params, adam, hyper);
        result.last_loss = loss.parts;

        if (log) {
            json line = {{"step", step},        {"lr", hyper.lr},
                         {"total", loss.parts.total}, {"ce", loss.parts.ce},
                         {"scal_geo", loss.parts.scal_geo}, {"scal_sem", loss.parts.scal_sem},
                         {"lovasz", loss.parts.lovasz}};
            (*log) << line.dump() << "\n";
        }
        if (step % val_every == 0 || step == total_steps) {
            ValidationPoint v = run_validation(eval_scenes, cfg, params, run.mode,
                                               run.joint_noise, cfg.seed + 17, step);
            result.validation.push_back(v);
            if (log) {
                json line = {{"step", step},
                             {"epoch", (step - 1) / scenes},
                             {"iou", v.iou},
                             {"miou", v.miou}};
                (*log) << line.dump() << "\n";
            }
        }
    }
    if (total_steps == 0) {
        ValidationPoint v = run_validation(eval_scenes, cfg, params, run.mode, run.joint_noise,
                                           cfg.seed + 17, 0);
        result.validation.push_back(v);
    }
    result.steps = total_steps;
    result.final_iou = result.validation.back().iou;
    result.final_miou = result.validation.back().miou;
    save_checkpoint(run.checkpoint_out, cfg, params);
    return result;
}

}  // namespace essc
