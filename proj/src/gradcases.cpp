#include <algorithm>
#include <memory>

#include "essc/gradcheck.hpp"
#include "essc/losses.hpp"
#include "essc/pnam.hpp"
#include "essc/unet3d.hpp"
#include "essc/vlgm.hpp"

// Finite-difference cases for composite network blocks and losses. The
// tensor-primitive cases live in gradcheck.cpp.

namespace essc {

namespace {

Tensor leaf(Shape shape, Rng& rng, double lo = -0.7, double hi = 0.7) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), std::move(v), true);
}

Tensor cnst(Shape shape, Rng& rng) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_values(std::move(shape), std::move(v), false);
}

Tensor proj_sum(const Tensor& out, const Tensor& proj) { return sum(mul(out, proj)); }

SemGrid random_target(std::array<uint32_t, 3> dims, uint32_t classes, Rng& rng) {
    SemGrid g = SemGrid::filled(dims, classes);
    bool any = false;
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        g.labels[i] = uint16_t(rng.below(classes + 1));
        g.valid[i] = rng.uniform() < 0.8 ? 1 : 0;
        any = any || g.valid[i];
    }
    if (!any) g.valid[0] = 1;
    return g;
}

// probability volumes from a numeric softmax so leaves sit near the simplex
Tensor softmax_leaf(std::array<uint32_t, 3> dims, uint32_t channels, Rng& rng) {
    const std::size_t n = std::size_t(dims[0]) * dims[1] * dims[2];
    std::vector<double> v(channels * n);
    std::vector<double> row(channels);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (auto& x : row) {
            x = rng.uniform(-1.5, 1.5);
            mx = std::max(mx, x);
        }
        double denom = 0.0;
        for (auto& x : row) denom += std::exp(x - mx);
        for (uint32_t c = 0; c < channels; ++c) v[c * n + i] = std::exp(row[c] - mx) / denom;
    }
    return Tensor::from_values({channels, dims[0], dims[1], dims[2]}, std::move(v), true);
}

GradCase case_feb() {
    return {"feb", [](Rng& rng) {
                GradCaseInstance c;
                Tensor f = leaf({2, 4, 4, 2}, rng);
                FebParams p;
                p.block1 = {leaf({2, 2, 3, 3, 3}, rng), leaf({2}, rng), leaf({2, 2, 3, 3, 3}, rng),
                            leaf({2}, rng)};
                p.down_w = leaf({4, 2, 2, 2, 2}, rng);
                p.down_b = leaf({4}, rng);
                p.has_block2 = true;
                p.block2 = {leaf({4, 4, 3, 3, 3}, rng), leaf({4}, rng), leaf({4, 4, 3, 3, 3}, rng),
                            leaf({4}, rng)};
                Tensor pr_skip = cnst({2, 4, 4, 2}, rng);
                Tensor pr_out = cnst({4, 2, 2, 1}, rng);
                c.leaves = {f,        p.block1.w1, p.block1.b1, p.block1.w2, p.block1.b2,
                            p.down_w, p.down_b,    p.block2.w1, p.block2.b1, p.block2.w2,
                            p.block2.b2};
                c.forward = [=]() {
                    FebOut o =
                        feb_forward(f, p, RefineConfig::Downsample::conv, {2, 2, 2}, 1e-5, 0.01);
                    return add(proj_sum(o.skip, pr_skip), proj_sum(o.out, pr_out));
                };
                return c;
            }};
}

GradCase case_fab() {
    return {"fab", [](Rng& rng) {
                GradCaseInstance c;
                Tensor coarse = leaf({4, 2, 2, 1}, rng);
                Tensor skip = leaf({2, 4, 4, 2}, rng);
                FabParams p;
                p.block = {leaf({2, 6, 3, 3, 3}, rng), leaf({2}, rng), leaf({2, 2, 3, 3, 3}, rng),
                           leaf({2}, rng)};
                p.proj_w = leaf({2, 4, 1, 1, 1}, rng);
                p.proj_b = leaf({2}, rng);
                Tensor pr = cnst({2, 4, 4, 2}, rng);
                c.leaves = {coarse,     skip,       p.block.w1, p.block.b1,
                            p.block.w2, p.block.b2, p.proj_w,   p.proj_b};
                c.forward = [=]() {
                    return proj_sum(fab_forward(coarse, skip, p, 1e-5, 0.01), pr);
                };
                return c;
            }};
}

AttnBranchParams make_branch(Rng& rng, uint32_t cf, std::vector<Tensor>& leaves) {
    AttnBranchParams b;
    auto qkv = [&](QkvConvs& q) {
        q.point_w = leaf({cf, cf, 1, 1, 1}, rng);
        q.point_b = leaf({cf}, rng);
        q.depth_w = leaf({cf, 1, 3, 3, 3}, rng);
        q.depth_b = leaf({cf}, rng);
        leaves.insert(leaves.end(), {q.point_w, q.point_b, q.depth_w, q.depth_b});
    };
    qkv(b.q);
    qkv(b.k);
    qkv(b.v);
    b.out_w = leaf({cf, cf, 1, 1, 1}, rng);
    b.out_b = leaf({cf}, rng);
    leaves.insert(leaves.end(), {b.out_w, b.out_b});
    return b;
}

GradCase case_self_attention() {
    return {"self_attention_block", [](Rng& rng) {
                GradCaseInstance c;
                Tensor f = leaf({4, 2, 2, 2}, rng);
                c.leaves = {f};
                AttnBranchParams p = make_branch(rng, 4, c.leaves);
                Tensor pr = cnst({4, 2, 2, 2}, rng);
                c.forward = [=]() { return proj_sum(self_attention_block(f, p, 2), pr); };
                return c;
            }};
}

GradCase case_nca() {
    return {"neighborhood_cross_attention", [](Rng& rng) {
                GradCaseInstance c;
                Tensor skip = leaf({4, 3, 3, 2}, rng);
                Tensor up = leaf({4, 3, 3, 2}, rng);
                c.leaves = {skip, up};
                AttnBranchParams p = make_branch(rng, 4, c.leaves);
                Tensor pr = cnst({4, 3, 3, 2}, rng);
                c.forward = [=]() {
                    return proj_sum(neighborhood_cross_attention(skip, up, p, 2, 3), pr);
                };
                return c;
            }};
}

GradCase case_pna_fab() {
    return {"pna_fab", [](Rng& rng) {
                GradCaseInstance c;
                Tensor coarse = leaf({8, 2, 2, 1}, rng);
                Tensor skip = leaf({4, 4, 4, 2}, rng);
                c.leaves = {coarse, skip};
                PnaFabParams p;
                p.up_w = leaf({4, 8, 1, 1, 1}, rng);
                p.up_b = leaf({4}, rng);
                c.leaves.insert(c.leaves.end(), {p.up_w, p.up_b});
                p.sa = make_branch(rng, 4, c.leaves);
                p.nca = make_branch(rng, 4, c.leaves);
                p.ln_gain = leaf({4}, rng, 0.5, 1.5);
                p.ln_shift = leaf({4}, rng);
                p.ffn_w1 = leaf({4, 4}, rng);
                p.ffn_b1 = leaf({4}, rng);
                p.ffn_w2 = leaf({4, 4}, rng);
                p.ffn_b2 = leaf({4}, rng);
                c.leaves.insert(c.leaves.end(),
                                {p.ln_gain, p.ln_shift, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2});
                p.heads = 2;
                p.window = 3;
                Tensor pr = cnst({4, 4, 4, 2}, rng);
                c.forward = [=]() { return proj_sum(pna_fab_forward(coarse, skip, p), pr); };
                return c;
            }};
}

GradCase case_sigm() {
    return {"sigm", [](Rng& rng) {
                GradCaseInstance c;
                Tensor f = leaf({3, 2, 2, 1}, rng);
                Tensor g = leaf({4}, rng);
                SigmParams p;
                p.gamma = {leaf({3, 4}, rng), leaf({3}, rng), leaf({3, 3}, rng), leaf({3}, rng)};
                p.beta = {leaf({3, 4}, rng), leaf({3}, rng), leaf({3, 3}, rng), leaf({3}, rng)};
                c.leaves = {f,          g,         p.gamma.w1, p.gamma.b1, p.gamma.w2,
                            p.gamma.b2, p.beta.w1, p.beta.b1,  p.beta.w2,  p.beta.b2};
                Tensor pr = cnst({3, 2, 2, 1}, rng);
                c.forward = [=]() { return proj_sum(sigm_modulate(f, g, p), pr); };
                return c;
            }};
}

GradCase case_dcam() {
    return {"dcam", [](Rng& rng) {
                GradCaseInstance c;
                Tensor f = leaf({4, 2, 1, 1}, rng);
                Tensor tokens = leaf({2, 3}, rng);
                DcamParams p;
                p.tok_w = leaf({4, 3}, rng);
                p.tok_b = leaf({4}, rng);
                c.leaves = {f, tokens, p.tok_w, p.tok_b};
                auto linears = [&](AttnLinears& l) {
                    l.q_w = leaf({4, 4}, rng);
                    l.q_b = leaf({4}, rng);
                    l.k_w = leaf({4, 4}, rng);
                    l.k_b = leaf({4}, rng);
                    l.v_w = leaf({4, 4}, rng);
                    l.v_b = leaf({4}, rng);
                    l.out_w = leaf({4, 4}, rng);
                    l.out_b = leaf({4}, rng);
                    c.leaves.insert(c.leaves.end(),
                                    {l.q_w, l.q_b, l.k_w, l.k_b, l.v_w, l.v_b, l.out_w, l.out_b});
                };
                linears(p.text_sa);
                linears(p.text_to_vox);
                linears(p.vox_to_text);
                p.ln_gain = leaf({4}, rng, 0.5, 1.5);
                p.ln_shift = leaf({4}, rng);
                c.leaves.insert(c.leaves.end(), {p.ln_gain, p.ln_shift});
                p.heads = 2;
                Tensor pr = cnst({4, 2, 1, 1}, rng);
                c.forward = [=]() { return proj_sum(dcam_forward(f, tokens, p), pr); };
                return c;
            }};
}

GradCase case_weighted_ce() {
    return {"weighted_ce", [](Rng& rng) {
                GradCaseInstance c;
                auto g = std::make_shared<SemGrid>(random_target({2, 2, 2}, 2, rng));
                auto w = std::make_shared<ClassWeights>(ClassWeights{{1.2, 0.8, 1.5}});
                Tensor logits = leaf({3, 2, 2, 2}, rng, -1.5, 1.5);
                c.leaves = {logits};
                c.forward = [=]() { return weighted_ce(logits, *g, *w); };
                return c;
            }};
}

GradCase case_scal(ScalMode mode, const char* name) {
    return {name, [mode](Rng& rng) {
                GradCaseInstance c;
                auto g = std::make_shared<SemGrid>(random_target({2, 2, 2}, 2, rng));
                Tensor probs = softmax_leaf({2, 2, 2}, 3, rng);
                c.leaves = {probs};
                c.forward = [=]() { return scal(probs, *g, mode); };
                return c;
            }};
}

GradCase case_lovasz() {
    return {"lovasz_softmax", [](Rng& rng) {
                GradCaseInstance c;
                auto g = std::make_shared<SemGrid>(random_target({2, 2, 2}, 1, rng));
                // Regenerate until per-class error margins are well separated,
                // so the finite-difference step cannot flip the sort order.
                Tensor probs;
                for (;;) {
                    probs = softmax_leaf({2, 2, 2}, 2, rng);
                    bool ok = true;
                    const auto& p = probs.values();
                    for (std::size_t cls = 0; cls < 2 && ok; ++cls) {
                        std::vector<double> errs;
                        for (std::size_t i = 0; i < 8; ++i) {
                            if (!g->valid[i]) continue;
                            errs.push_back(g->labels[i] == cls ? 1.0 - p[cls * 8 + i]
                                                               : p[cls * 8 + i]);
                        }
                        std::sort(errs.begin(), errs.end());
                        for (std::size_t i = 0; i + 1 < errs.size(); ++i)
                            if (errs[i + 1] - errs[i] < 1e-3) ok = false;
                    }
                    if (ok) break;
                }
                c.leaves = {probs};
                c.forward = [=]() { return lovasz_softmax(probs, *g); };
                return c;
            }};
}

GradCase case_total_loss() {
    return {"total_loss", [](Rng& rng) {
                GradCaseInstance c;
                auto g1 = std::make_shared<SemGrid>(random_target({2, 2, 2}, 2, rng));
                auto g2 = std::make_shared<SemGrid>(downsample_labels_majority(*g1, 2));
                if (!g2->valid[0]) {
                    g2->valid[0] = 1;
                    g2->labels[0] = 0;
                }
                auto w = std::make_shared<ClassWeights>(ClassWeights{{1.0, 1.3, 0.9}});
                Tensor l1 = leaf({3, 2, 2, 2}, rng, -1.5, 1.5);
                Tensor l2 = leaf({3, 1, 1, 1}, rng, -1.5, 1.5);
                c.leaves = {l1, l2};
                c.forward = [=]() {
                    std::map<int, Tensor> logits = {{1, l1}, {2, l2}};
                    std::map<int, SemGrid> targets = {{1, *g1}, {2, *g2}};
                    LossSettings s;  // coefficients 1, no lovasz
                    return total_loss(logits, targets, *w, s).value;
                };
                return c;
            }};
}

}  // namespace

std::vector<GradCase> extra_grad_cases() {
    return {
        case_feb(),
        case_fab(),
        case_self_attention(),
        case_nca(),
        case_pna_fab(),
        case_sigm(),
        case_dcam(),
        case_weighted_ce(),
        case_scal(ScalMode::semantic, "scal_semantic"),
        case_scal(ScalMode::geometric, "scal_geometric"),
        case_lovasz(),
        case_total_loss(),
    };
}

}  // namespace essc
