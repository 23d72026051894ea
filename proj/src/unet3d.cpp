#include "essc/unet3d.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "essc/common.hpp"

namespace essc {

using nlohmann::json;

LossSettings RefineConfig::loss_settings() const {
    LossSettings s;
    s.lambda_ce = lambda_ce;
    s.lambda_scal_geo = lambda_scal_geo;
    s.lambda_scal_sem = lambda_scal_sem;
    s.lambda_lovasz = lambda_lovasz;
    s.ce_norm = ce_norm;
    return s;
}

std::array<uint32_t, 5> stage_widths(const RefineConfig& cfg) {
    std::array<uint32_t, 5> w;
    w[0] = cfg.base_channels;
    const bool doubles = cfg.downsample == RefineConfig::Downsample::conv || cfg.post_block;
    for (int k = 1; k <= 4; ++k) w[k] = doubles ? w[k - 1] * 2 : w[k - 1];
    return w;
}

std::array<std::array<uint32_t, 3>, 5> stage_dims(const RefineConfig& cfg) {
    std::array<std::array<uint32_t, 3>, 5> d;
    d[0] = cfg.grid_dims;
    for (int k = 1; k <= 4; ++k)
        for (int a = 0; a < 3; ++a) {
            const uint32_t e = d[k - 1][a];
            if (e == 1) {
                d[k][a] = 1;
            } else if (e % 2 == 0) {
                d[k][a] = e / 2;
            } else {
                fail("stage_dims", "axis " + std::to_string(a) + " reaches odd extent " +
                                       std::to_string(e) + " at stage " + std::to_string(k - 1));
            }
        }
    return d;
}

namespace {

int scale_stage(int scale) {
    switch (scale) {
        case 1: return 0;
        case 2: return 1;
        case 4: return 2;
        case 8: return 3;
    }
    fail("scales", "supervised scales must lie in {1, 2, 4, 8}, got " + std::to_string(scale));
}

}  // namespace

void validate(const RefineConfig& cfg) {
    require(cfg.num_classes >= 2, "RefineConfig", "need at least one semantic class plus empty");
    require(cfg.base_channels >= 1, "RefineConfig", "base_channels must be positive");
    require(!cfg.scales.empty(), "RefineConfig", "scales must be nonempty");
    require(std::find(cfg.scales.begin(), cfg.scales.end(), 1) != cfg.scales.end(), "RefineConfig",
            "scales must contain 1");
    std::set<int> seen;
    int max_scale = 1;
    for (int s : cfg.scales) {
        scale_stage(s);
        require(seen.insert(s).second, "RefineConfig", "duplicate scale " + std::to_string(s));
        max_scale = std::max(max_scale, s);
    }
    for (int a = 0; a < 3; ++a)
        require(cfg.grid_dims[a] % uint32_t(max_scale) == 0, "RefineConfig",
                "grid axis " + std::to_string(a) + " extent " + std::to_string(cfg.grid_dims[a]) +
                    " not divisible by the largest supervised scale " + std::to_string(max_scale));
    stage_dims(cfg);  // rejects odd intermediate extents
    require(cfg.window >= 1 && cfg.window % 2 == 1, "RefineConfig", "window must be odd and >= 1");
    require(cfg.heads >= 1 && cfg.dcam_heads >= 1, "RefineConfig", "head counts must be positive");
    const auto widths = stage_widths(cfg);
    if (cfg.decoder == RefineConfig::Decoder::pnam) {
        for (int k = 1; k <= 3; ++k)
            require(widths[k] % uint32_t(cfg.heads) == 0, "RefineConfig",
                    "attention width " + std::to_string(widths[k]) + " at scale " +
                        std::to_string(1 << k) + " not divisible by heads " +
                        std::to_string(cfg.heads));
    }
    if (cfg.fusion != FusionPlacement::none) {
        require(cfg.text_global_dim >= 1 && cfg.text_token_dim >= 1, "RefineConfig",
                "text embedding dims must be positive when fusion is enabled");
        for (int k = 0; k <= 4; ++k)
            require(widths[k] % uint32_t(cfg.dcam_heads) == 0, "RefineConfig",
                    "fusion width " + std::to_string(widths[k]) + " not divisible by dcam_heads");
    }
    require(cfg.lambda_ce >= 0 && cfg.lambda_scal_geo >= 0 && cfg.lambda_scal_sem >= 0 &&
                cfg.lambda_lovasz >= 0,
            "RefineConfig", "loss coefficients must be nonnegative");
    require(cfg.warmup_frac > 0.0 && cfg.warmup_frac < 1.0, "RefineConfig",
            "warmup_frac must lie in (0, 1)");
    require(cfg.epochs >= 0, "RefineConfig", "epochs must be nonnegative");
    require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1, "RefineConfig",
            "adam betas must lie in [0, 1)");
    require(cfg.norm_eps > 0, "RefineConfig", "norm_eps must be positive");
    require(cfg.leaky_slope >= 0 && cfg.leaky_slope < 1, "RefineConfig",
            "leaky_slope must lie in [0, 1)");
    require(cfg.class_weight_eps > 0, "RefineConfig", "class_weight_eps must be positive");
}

// ---- config (de)serialization ---------------------------------------------------

namespace {

std::string downsample_str(RefineConfig::Downsample d) {
    return d == RefineConfig::Downsample::conv ? "conv" : "maxpool";
}
std::string decoder_str(RefineConfig::Decoder d) {
    return d == RefineConfig::Decoder::conv ? "conv" : "pnam";
}
std::string fusion_str(FusionPlacement f) {
    switch (f) {
        case FusionPlacement::none: return "none";
        case FusionPlacement::encoder: return "encoder";
        case FusionPlacement::decoder: return "decoder";
        case FusionPlacement::both: return "both";
    }
    return "none";
}

template <typename T>
T parse_enum(const std::string& v, const std::vector<std::pair<std::string, T>>& table,
             const char* field) {
    for (const auto& [name, value] : table)
        if (name == v) return value;
    std::string allowed;
    for (const auto& [name, value] : table) allowed += (allowed.empty() ? "" : ", ") + name;
    fail("config", std::string("field '") + field + "': unknown value '" + v + "' (allowed: " +
                       allowed + ")");
}

}  // namespace

std::string config_to_json(const RefineConfig& cfg) {
    json j;
    j["num_classes"] = cfg.num_classes;
    j["base_channels"] = cfg.base_channels;
    j["embed_dim"] = cfg.embed_dim;
    j["scales"] = cfg.scales;
    j["downsample"] = downsample_str(cfg.downsample);
    j["post_block"] = cfg.post_block;
    j["decoder"] = decoder_str(cfg.decoder);
    j["fusion"] = fusion_str(cfg.fusion);
    j["text_global_dim"] = cfg.text_global_dim;
    j["text_token_dim"] = cfg.text_token_dim;
    j["heads"] = cfg.heads;
    j["window"] = cfg.window;
    j["dcam_heads"] = cfg.dcam_heads;
    j["nca_query_from_skip"] = cfg.nca_query_from_skip;
    j["grid_dims"] = cfg.grid_dims;
    j["norm_eps"] = cfg.norm_eps;
    j["leaky_slope"] = cfg.leaky_slope;
    j["lr_peak"] = cfg.lr_peak;
    j["warmup_frac"] = cfg.warmup_frac;
    j["epochs"] = cfg.epochs;
    j["weight_decay"] = cfg.weight_decay;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["adam_eps"] = cfg.adam_eps;
    j["lambda_ce"] = cfg.lambda_ce;
    j["lambda_scal_geo"] = cfg.lambda_scal_geo;
    j["lambda_scal_sem"] = cfg.lambda_scal_sem;
    j["lambda_lovasz"] = cfg.lambda_lovasz;
    j["ce_norm"] = cfg.ce_norm == CeNormalization::class_count ? "class_count" : "voxel_mean";
    j["class_weight_eps"] = cfg.class_weight_eps;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

RefineConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        fail("config", std::string("JSON parse error: ") + e.what());
    }
    RefineConfig cfg;
    try {
        cfg.num_classes = j.value("num_classes", cfg.num_classes);
        cfg.base_channels = j.value("base_channels", cfg.base_channels);
        cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
        if (j.contains("scales")) cfg.scales = j.at("scales").get<std::vector<int>>();
        if (j.contains("downsample"))
            cfg.downsample = parse_enum<RefineConfig::Downsample>(
                j.at("downsample").get<std::string>(),
                {{"conv", RefineConfig::Downsample::conv},
                 {"maxpool", RefineConfig::Downsample::maxpool}},
                "downsample");
        cfg.post_block = j.value("post_block", cfg.post_block);
        if (j.contains("decoder"))
            cfg.decoder = parse_enum<RefineConfig::Decoder>(
                j.at("decoder").get<std::string>(),
                {{"conv", RefineConfig::Decoder::conv}, {"pnam", RefineConfig::Decoder::pnam}},
                "decoder");
        if (j.contains("fusion"))
            cfg.fusion = parse_enum<FusionPlacement>(j.at("fusion").get<std::string>(),
                                                     {{"none", FusionPlacement::none},
                                                      {"encoder", FusionPlacement::encoder},
                                                      {"decoder", FusionPlacement::decoder},
                                                      {"both", FusionPlacement::both}},
                                                     "fusion");
        cfg.text_global_dim = j.value("text_global_dim", cfg.text_global_dim);
        cfg.text_token_dim = j.value("text_token_dim", cfg.text_token_dim);
        cfg.heads = j.value("heads", cfg.heads);
        cfg.window = j.value("window", cfg.window);
        cfg.dcam_heads = j.value("dcam_heads", cfg.dcam_heads);
        cfg.nca_query_from_skip = j.value("nca_query_from_skip", cfg.nca_query_from_skip);
        if (j.contains("grid_dims")) {
            auto v = j.at("grid_dims").get<std::vector<uint32_t>>();
            require(v.size() == 3, "config", "grid_dims must have three extents");
            cfg.grid_dims = {v[0], v[1], v[2]};
        }
        cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
        cfg.leaky_slope = j.value("leaky_slope", cfg.leaky_slope);
        cfg.lr_peak = j.value("lr_peak", cfg.lr_peak);
        cfg.warmup_frac = j.value("warmup_frac", cfg.warmup_frac);
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
        cfg.beta1 = j.value("beta1", cfg.beta1);
        cfg.beta2 = j.value("beta2", cfg.beta2);
        cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
        cfg.lambda_ce = j.value("lambda_ce", cfg.lambda_ce);
        cfg.lambda_scal_geo = j.value("lambda_scal_geo", cfg.lambda_scal_geo);
        cfg.lambda_scal_sem = j.value("lambda_scal_sem", cfg.lambda_scal_sem);
        cfg.lambda_lovasz = j.value("lambda_lovasz", cfg.lambda_lovasz);
        if (j.contains("ce_norm"))
            cfg.ce_norm = parse_enum<CeNormalization>(
                j.at("ce_norm").get<std::string>(),
                {{"class_count", CeNormalization::class_count},
                 {"voxel_mean", CeNormalization::voxel_mean}},
                "ce_norm");
        cfg.class_weight_eps = j.value("class_weight_eps", cfg.class_weight_eps);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        fail("config", std::string("invalid field: ") + e.what());
    }
    validate(cfg);
    return cfg;
}

uint64_t config_digest(const RefineConfig& cfg) { return fnv1a64(config_to_json(cfg)); }

// ---- parameter construction ----------------------------------------------------

namespace {

struct ParamBuilder {
    ParamMap& m;
    uint64_t seed_mix;

    Rng rng_for(const std::string& name) const { return Rng(fnv1a64(name, seed_mix)); }

    void weight(const std::string& name, Shape shape, std::size_t fan_in) {
        Rng rng = rng_for(name);
        const double sigma = std::sqrt(2.0 / double(fan_in));
        std::vector<double> v(shape_size(shape));
        for (auto& x : v) x = rng.normal() * sigma;
        m.emplace(name, Tensor::from_values(std::move(shape), std::move(v), true));
    }
    void gaussian(const std::string& name, Shape shape, double sigma) {
        Rng rng = rng_for(name);
        std::vector<double> v(shape_size(shape));
        for (auto& x : v) x = rng.normal() * sigma;
        m.emplace(name, Tensor::from_values(std::move(shape), std::move(v), true));
    }
    void zeros(const std::string& name, Shape shape) {
        m.emplace(name, Tensor::zeros(std::move(shape), true));
    }
    void ones(const std::string& name, Shape shape) {
        m.emplace(name, Tensor::full(std::move(shape), 1.0, true));
    }
    void conv(const std::string& prefix, uint32_t c_out, uint32_t c_in, uint32_t k) {
        weight(prefix + ".w", {c_out, c_in, k, k, k}, std::size_t(c_in) * k * k * k);
        zeros(prefix + ".b", {c_out});
    }
    void conv_block(const std::string& prefix, uint32_t c_in, uint32_t c_out) {
        conv(prefix + ".conv1", c_out, c_in, 3);
        conv(prefix + ".conv2", c_out, c_out, 3);
    }
    void lin(const std::string& prefix, uint32_t d_out, uint32_t d_in) {
        weight(prefix + ".w", {d_out, d_in}, d_in);
        zeros(prefix + ".b", {d_out});
    }
    // Attention branches enter through residual sums; their output
    // projections start at zero so every block is a clean pass-through at
    // initialization and the attention path phases in through its gradient.
    void attn_branch(const std::string& prefix, uint32_t c) {
        for (const char* s : {"q", "k", "v"}) {
            conv(prefix + "." + s + ".point", c, c, 1);
            weight(prefix + "." + s + ".depth.w", {c, 1, 3, 3, 3}, 27);
            zeros(prefix + "." + s + ".depth.b", {c});
        }
        zeros(prefix + ".out.w", {c, c, 1, 1, 1});
        zeros(prefix + ".out.b", {c});
    }
    // Same treatment for fusion sites: zero modulation and a zero
    // voxel-enhancement projection make each site start near the identity.
    void fusion_site(const std::string& prefix, uint32_t c, const RefineConfig& cfg) {
        lin(prefix + ".sigm.gamma.fc1", c, cfg.text_global_dim);
        zeros(prefix + ".sigm.gamma.fc2.w", {c, c});
        zeros(prefix + ".sigm.gamma.fc2.b", {c});
        lin(prefix + ".sigm.beta.fc1", c, cfg.text_global_dim);
        zeros(prefix + ".sigm.beta.fc2.w", {c, c});
        zeros(prefix + ".sigm.beta.fc2.b", {c});
        lin(prefix + ".dcam.tok_in", c, cfg.text_token_dim);
        for (const char* blk : {"tsa", "t2v", "v2t"}) {
            for (const char* s : {"q", "k", "v", "out"}) {
                const bool gate = std::string(blk) == "v2t" && std::string(s) == "out";
                if (gate) {
                    zeros(prefix + ".dcam." + blk + "." + s + ".w", {c, c});
                    zeros(prefix + ".dcam." + blk + "." + s + ".b", {c});
                } else {
                    lin(prefix + ".dcam." + blk + "." + s, c, c);
                }
            }
        }
        ones(prefix + ".dcam.ln.gain", {c});
        zeros(prefix + ".dcam.ln.shift", {c});
    }
};

std::array<int, 3> feb_factor(const std::array<uint32_t, 3>& from,
                              const std::array<uint32_t, 3>& to) {
    std::array<int, 3> f;
    for (int a = 0; a < 3; ++a) f[a] = int(from[a] / to[a]);
    return f;
}

}  // namespace

ParamMap init_refiner_params(const RefineConfig& cfg) {
    validate(cfg);
    ParamMap params;
    ParamBuilder b{params, cfg.seed * 0x9e3779b97f4a7c15ull + 0x243f6a8885a308d3ull};
    const auto widths = stage_widths(cfg);
    const auto dims = stage_dims(cfg);
    const uint32_t E = cfg.resolved_embed_dim();
    const uint32_t C = cfg.num_classes;

    b.gaussian("embed.table", {C, E}, 1.0 / std::sqrt(double(E)));
    b.conv("embed.proj", widths[0], E, 1);

    for (int k = 1; k <= 4; ++k) {
        const std::string prefix = "enc" + std::to_string(k);
        const uint32_t w_in = widths[k - 1], w_out = widths[k];
        b.conv_block(prefix + ".block1", w_in, w_in);
        if (cfg.downsample == RefineConfig::Downsample::conv) {
            const auto f = feb_factor(dims[k - 1], dims[k]);
            b.weight(prefix + ".down.w",
                     {w_out, w_in, std::size_t(f[0]), std::size_t(f[1]), std::size_t(f[2])},
                     std::size_t(w_in) * f[0] * f[1] * f[2]);
            b.zeros(prefix + ".down.b", {w_out});
            if (cfg.post_block) b.conv_block(prefix + ".block2", w_out, w_out);
        } else if (cfg.post_block) {
            b.conv_block(prefix + ".block2", w_in, w_out);
        }
    }

    b.conv_block("bottleneck", widths[4], widths[4]);

    for (int k = 3; k >= 0; --k) {
        const int s = 1 << k;
        const uint32_t w_skip = widths[k], w_up = widths[k + 1];
        if (cfg.decoder == RefineConfig::Decoder::pnam && s >= 2) {
            const std::string prefix = "pnam.s" + std::to_string(s);
            b.conv(prefix + ".up_proj", w_skip, w_up, 1);
            b.attn_branch(prefix + ".sa", w_skip);
            b.attn_branch(prefix + ".nca", w_skip);
            b.ones(prefix + ".ln.gain", {w_skip});
            b.zeros(prefix + ".ln.shift", {w_skip});
            b.lin(prefix + ".ffn.fc1", w_skip, w_skip);
            b.lin(prefix + ".ffn.fc2", w_skip, w_skip);
        } else {
            const std::string prefix = "dec_s" + std::to_string(s);
            b.conv(prefix + ".block.conv1", w_skip, w_skip + w_up, 3);
            b.conv(prefix + ".block.conv2", w_skip, w_skip, 3);
            b.conv(prefix + ".proj", w_skip, w_up, 1);
        }
    }

    for (int s : cfg.scales)
        b.conv("head.s" + std::to_string(s), C, widths[scale_stage(s)], 1);

    if (cfg.fusion != FusionPlacement::none) {
        if (fusion_active(cfg.fusion, StageKind::feb))
            for (int k = 1; k <= 4; ++k)
                b.fusion_site("vlgm.enc" + std::to_string(k), widths[k], cfg);
        if (fusion_active(cfg.fusion, StageKind::fab))
            for (int k = 3; k >= 0; --k)
                b.fusion_site("vlgm.dec_s" + std::to_string(1 << k), widths[k], cfg);
    }
    return params;
}

// ---- building blocks ------------------------------------------------------------

namespace {

const Tensor& P(const ParamMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw internal_error("missing parameter tensor '" + name + "'");
    return it->second;
}

ConvBlockParams block_params(const ParamMap& m, const std::string& prefix) {
    return {P(m, prefix + ".conv1.w"), P(m, prefix + ".conv1.b"), P(m, prefix + ".conv2.w"),
            P(m, prefix + ".conv2.b")};
}

QkvConvs qkv_params(const ParamMap& m, const std::string& prefix) {
    return {P(m, prefix + ".point.w"), P(m, prefix + ".point.b"), P(m, prefix + ".depth.w"),
            P(m, prefix + ".depth.b")};
}

AttnBranchParams branch_params(const ParamMap& m, const std::string& prefix) {
    return {qkv_params(m, prefix + ".q"), qkv_params(m, prefix + ".k"),
            qkv_params(m, prefix + ".v"), P(m, prefix + ".out.w"), P(m, prefix + ".out.b")};
}

MlpParams mlp_params(const ParamMap& m, const std::string& prefix) {
    return {P(m, prefix + ".fc1.w"), P(m, prefix + ".fc1.b"), P(m, prefix + ".fc2.w"),
            P(m, prefix + ".fc2.b")};
}

FusionSiteParams fusion_site_params(const ParamMap& m, const std::string& prefix, int heads) {
    FusionSiteParams f;
    f.sigm = {mlp_params(m, prefix + ".sigm.gamma"), mlp_params(m, prefix + ".sigm.beta")};
    f.dcam.tok_w = P(m, prefix + ".dcam.tok_in.w");
    f.dcam.tok_b = P(m, prefix + ".dcam.tok_in.b");
    auto linears = [&](const std::string& blk) {
        return AttnLinears{P(m, prefix + ".dcam." + blk + ".q.w"),
                           P(m, prefix + ".dcam." + blk + ".q.b"),
                           P(m, prefix + ".dcam." + blk + ".k.w"),
                           P(m, prefix + ".dcam." + blk + ".k.b"),
                           P(m, prefix + ".dcam." + blk + ".v.w"),
                           P(m, prefix + ".dcam." + blk + ".v.b"),
                           P(m, prefix + ".dcam." + blk + ".out.w"),
                           P(m, prefix + ".dcam." + blk + ".out.b")};
    };
    f.dcam.text_sa = linears("tsa");
    f.dcam.text_to_vox = linears("t2v");
    f.dcam.vox_to_text = linears("v2t");
    f.dcam.ln_gain = P(m, prefix + ".dcam.ln.gain");
    f.dcam.ln_shift = P(m, prefix + ".dcam.ln.shift");
    f.dcam.heads = heads;
    return f;
}

}  // namespace

Tensor conv_block(const Tensor& x, const ConvBlockParams& p, double eps, double slope) {
    Tensor h = leaky_relu(instance_norm3d(conv3d(x, p.w1, p.b1, 1, 1), eps), slope);
    return leaky_relu(instance_norm3d(conv3d(h, p.w2, p.b2, 1, 1), eps), slope);
}

FebOut feb_forward(const Tensor& f_in, const FebParams& p, RefineConfig::Downsample mode,
                   std::array<int, 3> factor, double eps, double slope) {
    require(f_in.rank() == 4, "feb_forward", "input must be [C, D, H, W]");
    for (int a = 0; a < 3; ++a)
        require(f_in.shape()[a + 1] % std::size_t(factor[a]) == 0, "feb_forward",
                "axis " + std::to_string(a) + " extent " + std::to_string(f_in.shape()[a + 1]) +
                    " not divisible by downsampling factor");
    FebOut out;
    out.skip = add(conv_block(f_in, p.block1, eps, slope), f_in);
    if (mode == RefineConfig::Downsample::conv) {
        out.out = conv3d_aniso(out.skip, p.down_w, p.down_b, factor, {0, 0, 0});
    } else {
        out.out = maxpool3d(out.skip, factor);
    }
    if (p.has_block2) out.out = conv_block(out.out, p.block2, eps, slope);
    return out;
}

Tensor fab_forward(const Tensor& coarse, const Tensor& skip, const FabParams& p, double eps,
                   double slope) {
    require(coarse.rank() == 4 && skip.rank() == 4, "fab_forward", "inputs must be [C, D, H, W]");
    std::array<int, 3> factor;
    for (int a = 0; a < 3; ++a) {
        const std::size_t cs = coarse.shape()[a + 1], ss = skip.shape()[a + 1];
        require(cs > 0 && ss % cs == 0 && (ss / cs == 1 || ss / cs == 2), "fab_forward",
                "skip axis " + std::to_string(a) + " must be 1x or 2x the coarse extent, got " +
                    std::to_string(ss) + " vs " + std::to_string(cs));
        factor[a] = int(ss / cs);
    }
    Tensor up = coarse;
    if (factor[0] != 1 || factor[1] != 1 || factor[2] != 1)
        up = nearest_upsample3d_aniso(coarse, factor);
    Tensor fused = conv_block(concat0(skip, up), p.block, eps, slope);
    Tensor proj = conv3d(up, p.proj_w, p.proj_b, 1, 0);
    return add(fused, proj);
}

Tensor embed_labels(const SemGrid& grid, const Tensor& table, const Tensor& proj_w,
                    const Tensor& proj_b) {
    grid.check();
    Tensor emb = embed_lookup(table, grid.labels, {grid.dims[0], grid.dims[1], grid.dims[2]});
    return conv3d(emb, proj_w, proj_b, 1, 0);
}

Tensor pred_head(const Tensor& features, const Tensor& w, const Tensor& b) {
    return conv3d(features, w, b, 1, 0);
}

// ---- whole network ---------------------------------------------------------------

MultiScaleLogits refine_forward(const SemGrid& coarse, const RefineConfig& cfg,
                                const ParamMap& params, const TextEmbedding* text) {
    validate(cfg);
    coarse.check();
    require(coarse.dims == cfg.grid_dims, "refine_forward",
            "grid dims do not match the configured geometry");
    require(coarse.num_semantic_classes < cfg.num_classes, "refine_forward",
            "grid class bound " + std::to_string(coarse.num_semantic_classes) +
                " exceeds the configured class count");
    const bool wants_text = cfg.fusion != FusionPlacement::none;
    require(!wants_text || text != nullptr, "refine_forward",
            "fusion placement requires a text embedding");

    Tensor global_vec, tokens;
    if (wants_text && text != nullptr) {
        text->check();
        require(text->global.size() == cfg.text_global_dim, "refine_forward",
                "text global width " + std::to_string(text->global.size()) +
                    " does not match the configured " + std::to_string(cfg.text_global_dim));
        require(text->token_dim == cfg.text_token_dim, "refine_forward",
                "text token width mismatch");
        global_vec = Tensor::from_values({text->global.size()}, text->global);
        tokens = Tensor::from_values({text->token_count, text->token_dim}, text->tokens);
    }
    const Tensor* gv = wants_text ? &global_vec : nullptr;
    const Tensor* tk = wants_text ? &tokens : nullptr;

    const auto dims = stage_dims(cfg);
    const double eps = cfg.norm_eps, slope = cfg.leaky_slope;

    Tensor cur = embed_labels(coarse, P(params, "embed.table"), P(params, "embed.proj.w"),
                              P(params, "embed.proj.b"));

    std::array<Tensor, 4> skips;
    for (int k = 1; k <= 4; ++k) {
        const std::string prefix = "enc" + std::to_string(k);
        FebParams fp;
        fp.block1 = block_params(params, prefix + ".block1");
        if (cfg.downsample == RefineConfig::Downsample::conv) {
            fp.down_w = P(params, prefix + ".down.w");
            fp.down_b = P(params, prefix + ".down.b");
        }
        fp.has_block2 = params.count(prefix + ".block2.conv1.w") > 0;
        if (fp.has_block2) fp.block2 = block_params(params, prefix + ".block2");
        FebOut fo = feb_forward(cur, fp, cfg.downsample, feb_factor(dims[k - 1], dims[k]), eps,
                                slope);
        skips[k - 1] = fo.skip;
        cur = fo.out;
        if (fusion_active(cfg.fusion, StageKind::feb)) {
            auto site = fusion_site_params(params, "vlgm.enc" + std::to_string(k), cfg.dcam_heads);
            cur = apply_fusion(cur, cfg.fusion, StageKind::feb, gv, tk, &site, slope, eps);
        }
    }

    cur = conv_block(cur, block_params(params, "bottleneck"), eps, slope);

    std::array<Tensor, 4> dec_out;
    for (int k = 3; k >= 0; --k) {
        const int s = 1 << k;
        Tensor out;
        if (cfg.decoder == RefineConfig::Decoder::pnam && s >= 2) {
            const std::string prefix = "pnam.s" + std::to_string(s);
            PnaFabParams pp;
            pp.up_w = P(params, prefix + ".up_proj.w");
            pp.up_b = P(params, prefix + ".up_proj.b");
            pp.sa = branch_params(params, prefix + ".sa");
            pp.nca = branch_params(params, prefix + ".nca");
            pp.ln_gain = P(params, prefix + ".ln.gain");
            pp.ln_shift = P(params, prefix + ".ln.shift");
            pp.ffn_w1 = P(params, prefix + ".ffn.fc1.w");
            pp.ffn_b1 = P(params, prefix + ".ffn.fc1.b");
            pp.ffn_w2 = P(params, prefix + ".ffn.fc2.w");
            pp.ffn_b2 = P(params, prefix + ".ffn.fc2.b");
            pp.heads = cfg.heads;
            pp.window = cfg.window;
            out = pna_fab_forward(cur, skips[k], pp, eps, slope, cfg.nca_query_from_skip);
        } else {
            const std::string prefix = "dec_s" + std::to_string(s);
            FabParams fp;
            fp.block = block_params(params, prefix + ".block");
            fp.proj_w = P(params, prefix + ".proj.w");
            fp.proj_b = P(params, prefix + ".proj.b");
            out = fab_forward(cur, skips[k], fp, eps, slope);
        }
        if (fusion_active(cfg.fusion, StageKind::fab)) {
            auto site =
                fusion_site_params(params, "vlgm.dec_s" + std::to_string(s), cfg.dcam_heads);
            out = apply_fusion(out, cfg.fusion, StageKind::fab, gv, tk, &site, slope, eps);
        }
        dec_out[k] = out;
        cur = out;
    }

    MultiScaleLogits logits;
    for (int s : cfg.scales) {
        const std::string prefix = "head.s" + std::to_string(s);
        logits.by_scale.emplace(
            s, pred_head(dec_out[scale_stage(s)], P(params, prefix + ".w"), P(params, prefix + ".b")));
    }
    return logits;
}

SemGrid argmax_labels(const MultiScaleLogits& logits, const SemGrid& source) {
    auto it = logits.by_scale.find(1);
    require(it != logits.by_scale.end(), "argmax_labels", "scale-1 logits missing");
    const Tensor& t = it->second;
    require(t.rank() == 4, "argmax_labels", "logits must be [C, X, Y, Z]");
    const std::size_t C = t.shape()[0];
    const std::size_t n = t.size() / C;
    require(n == source.voxel_count() && t.shape()[1] == source.dims[0] &&
                t.shape()[2] == source.dims[1] && t.shape()[3] == source.dims[2],
            "argmax_labels", "logit dims do not match the source grid");
    SemGrid out;
    out.dims = source.dims;
    out.num_semantic_classes = uint32_t(C - 1);
    out.labels.resize(n);
    out.valid = source.valid;
    const auto& v = t.values();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_v = v[i];
        for (std::size_t c = 1; c < C; ++c) {
            const double x = v[c * n + i];
            if (x > best_v) {  // strict: ties keep the smaller class
                best_v = x;
                best = c;
            }
        }
        out.labels[i] = uint16_t(best);
    }
    return out;
}

std::vector<std::string> describe_refiner(const RefineConfig& cfg) {
    validate(cfg);
    std::vector<std::string> lines;
    const auto widths = stage_widths(cfg);
    lines.push_back("embed: table[" + std::to_string(cfg.num_classes) + "x" +
                    std::to_string(cfg.resolved_embed_dim()) + "] + 1x1x1 conv");
    for (int k = 1; k <= 4; ++k)
        lines.push_back("enc" + std::to_string(k) + ": feb " + downsample_str(cfg.downsample) +
                        (cfg.post_block ? " post_block" : "") + " w=" + std::to_string(widths[k]));
    lines.push_back("bottleneck: conv_block w=" + std::to_string(widths[4]));
    for (int k = 3; k >= 0; --k) {
        const int s = 1 << k;
        const bool pna = cfg.decoder == RefineConfig::Decoder::pnam && s >= 2;
        lines.push_back("dec_s" + std::to_string(s) + ": " + (pna ? "pna" : "conv") +
                        " w=" + std::to_string(widths[k]));
    }
    for (int s : cfg.scales) lines.push_back("head.s" + std::to_string(s));
    if (cfg.fusion != FusionPlacement::none) {
        if (fusion_active(cfg.fusion, StageKind::feb))
            for (int k = 1; k <= 4; ++k) lines.push_back("fusion: vlgm.enc" + std::to_string(k));
        if (fusion_active(cfg.fusion, StageKind::fab))
            for (int k = 3; k >= 0; --k)
                lines.push_back("fusion: vlgm.dec_s" + std::to_string(1 << k));
    }
    return lines;
}

// ---- checkpoint -------------------------------------------------------------------

namespace {
constexpr char kWeightMagic[7] = {'E', 'S', 'S', 'C', 'W', 'G', 'T'};
constexpr uint32_t kWeightVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const RefineConfig& cfg, const ParamMap& params) {
    const std::string cfg_json = config_to_json(cfg);
    std::vector<uint8_t> out(kWeightMagic, kWeightMagic + 7);
    put_u32(out, kWeightVersion);
    put_u64(out, fnv1a64(cfg_json));
    put_u32(out, uint32_t(cfg_json.size()));
    out.insert(out.end(), cfg_json.begin(), cfg_json.end());
    put_u32(out, uint32_t(params.size()));
    for (const auto& [name, tensor] : params) {
        put_u32(out, uint32_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, uint32_t(tensor.rank()));
        for (std::size_t e : tensor.shape()) put_u32(out, uint32_t(e));
        for (double v : tensor.values()) put_f64(out, v);
    }
    write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    const char* who = "load_checkpoint";
    require(bytes.size() >= 23, who, "file truncated");
    require(std::equal(kWeightMagic, kWeightMagic + 7, bytes.begin()), who, "bad magic");
    std::size_t pos = 7;
    const uint32_t version = get_u32(bytes.data() + pos);
    pos += 4;
    require(version == kWeightVersion, who, "unsupported version " + std::to_string(version));
    const uint64_t digest = get_u64(bytes.data() + pos);
    pos += 8;
    const uint32_t json_len = get_u32(bytes.data() + pos);
    pos += 4;
    require(pos + json_len <= bytes.size(), who, "truncated config block");
    const std::string cfg_json(bytes.begin() + pos, bytes.begin() + pos + json_len);
    pos += json_len;
    require(fnv1a64(cfg_json) == digest, who, "config digest mismatch");

    Checkpoint ck;
    ck.cfg = config_from_json(cfg_json);

    require(pos + 4 <= bytes.size(), who, "truncated tensor count");
    const uint32_t count = get_u32(bytes.data() + pos);
    pos += 4;
    for (uint32_t t = 0; t < count; ++t) {
        require(pos + 4 <= bytes.size(), who, "truncated tensor name");
        const uint32_t name_len = get_u32(bytes.data() + pos);
        pos += 4;
        require(pos + name_len + 4 <= bytes.size(), who, "truncated tensor header");
        std::string name(bytes.begin() + pos, bytes.begin() + pos + name_len);
        pos += name_len;
        const uint32_t rank = get_u32(bytes.data() + pos);
        pos += 4;
        require(pos + 4ull * rank <= bytes.size(), who, "truncated tensor extents");
        Shape shape(rank);
        for (uint32_t r = 0; r < rank; ++r) {
            shape[r] = get_u32(bytes.data() + pos);
            pos += 4;
        }
        const std::size_t nvals = shape_size(shape);
        require(pos + 8 * nvals <= bytes.size(), who, "truncated tensor payload");
        std::vector<double> vals(nvals);
        for (std::size_t i = 0; i < nvals; ++i) {
            vals[i] = get_f64(bytes.data() + pos);
            pos += 8;
        }
        ck.params.emplace(std::move(name), Tensor::from_values(std::move(shape), std::move(vals), true));
    }
    require(pos == bytes.size(), who, "trailing bytes after tensors");

    // structural integrity: the tensor set must match the configuration
    ParamMap expected = init_refiner_params(ck.cfg);
    require(expected.size() == ck.params.size(), who, "tensor count does not match config");
    auto ei = expected.begin();
    for (const auto& [name, tensor] : ck.params) {
        require(ei->first == name, who, "unexpected tensor '" + name + "'");
        require(ei->second.shape() == tensor.shape(), who, "shape mismatch for '" + name + "'");
        ++ei;
    }
    return ck;
}

}  // namespace essc
