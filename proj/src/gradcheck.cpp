#include "essc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "essc/common.hpp"

namespace essc {

namespace {

Tensor rand_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), std::move(v), true);
}

Tensor rand_const(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), std::move(v), false);
}

// Projects an op output to a scalar with a fixed random direction so the
// whole Jacobian is exercised, not just a row sum.
Tensor project(const Tensor& out, const Tensor& proj) { return sum(mul(out, proj)); }

// Keeps every coordinate away from a kink by at least `margin`.
void push_from_zero(Tensor& t, double margin) {
    for (auto& v : t.mutable_values()) {
        if (v >= 0.0 && v < margin) v += margin;
        if (v < 0.0 && v > -margin) v -= margin;
    }
}

GradCase case_conv3d() {
    return {"conv3d", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({2, 3, 3, 3}, rng);
                Tensor w = rand_leaf({2, 2, 3, 3, 3}, rng);
                Tensor b = rand_leaf({2}, rng);
                Tensor proj = rand_const({2, 3, 3, 3}, rng);
                c.leaves = {x, w, b};
                c.forward = [=]() { return project(conv3d(x, w, b, 1, 1), proj); };
                return c;
            }};
}

GradCase case_conv3d_stride2() {
    return {"conv3d_stride2", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({2, 4, 4, 4}, rng);
                Tensor w = rand_leaf({3, 2, 2, 2, 2}, rng);
                Tensor b = rand_leaf({3}, rng);
                Tensor proj = rand_const({3, 2, 2, 2}, rng);
                c.leaves = {x, w, b};
                c.forward = [=]() { return project(conv3d(x, w, b, 2, 0), proj); };
                return c;
            }};
}

GradCase case_conv3d_depthwise() {
    return {"conv3d_depthwise", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({3, 3, 3, 3}, rng);
                Tensor w = rand_leaf({3, 1, 3, 3, 3}, rng);
                Tensor b = rand_leaf({3}, rng);
                Tensor proj = rand_const({3, 3, 3, 3}, rng);
                c.leaves = {x, w, b};
                c.forward = [=]() { return project(conv3d(x, w, b, 1, 1, true), proj); };
                return c;
            }};
}

GradCase case_instance_norm3d() {
    return {"instance_norm3d", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({3, 2, 2, 2}, rng, -2.0, 2.0);
                Tensor proj = rand_const({3, 2, 2, 2}, rng);
                c.leaves = {x};
                c.forward = [=]() { return project(instance_norm3d(x, 1e-5), proj); };
                return c;
            }};
}

GradCase case_leaky_relu() {
    return {"leaky_relu", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({12}, rng);
                push_from_zero(x, 0.05);
                Tensor proj = rand_const({12}, rng);
                c.leaves = {x};
                c.forward = [=]() { return project(leaky_relu(x, 0.01), proj); };
                return c;
            }};
}

GradCase case_linear() {
    return {"linear", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({3, 4}, rng);
                Tensor w = rand_leaf({2, 4}, rng);
                Tensor b = rand_leaf({2}, rng);
                Tensor proj = rand_const({3, 2}, rng);
                c.leaves = {x, w, b};
                c.forward = [=]() { return project(linear(x, w, b), proj); };
                return c;
            }};
}

GradCase case_softmax() {
    return {"softmax", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({3, 5}, rng, -2.0, 2.0);
                Tensor proj = rand_const({3, 5}, rng);
                c.leaves = {x};
                c.forward = [=]() { return project(softmax_lastdim(x), proj); };
                return c;
            }};
}

GradCase case_layer_norm() {
    return {"layer_norm", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({3, 4}, rng, -2.0, 2.0);
                Tensor g = rand_leaf({4}, rng);
                Tensor s = rand_leaf({4}, rng);
                Tensor proj = rand_const({3, 4}, rng);
                c.leaves = {x, g, s};
                c.forward = [=]() { return project(layer_norm(x, g, s, 1e-5), proj); };
                return c;
            }};
}

GradCase case_upsample() {
    return {"nearest_upsample3d", [](Rng& rng) {
                GradCaseInstance c;
                Tensor x = rand_leaf({2, 2, 2, 2}, rng);
                Tensor proj = rand_const({2, 4, 4, 4}, rng);
                c.leaves = {x};
                c.forward = [=]() { return project(nearest_upsample3d(x, 2), proj); };
                return c;
            }};
}

GradCase case_maxpool() {
    return {"maxpool3d", [](Rng& rng) {
                GradCaseInstance c;
                // Regenerate until every pooling block has a clear maximum so
                // the perturbation cannot flip the argmax.
                Tensor x;
                for (;;) {
                    x = rand_leaf({2, 4, 4, 2}, rng);
                    bool ok = true;
                    const auto& v = x.values();
                    for (std::size_t c2 = 0; c2 < 2 && ok; ++c2)
                        for (std::size_t d = 0; d < 2 && ok; ++d)
                            for (std::size_t h = 0; h < 2 && ok; ++h) {
                                double best = -1e300, second = -1e300;
                                for (int kd = 0; kd < 2; ++kd)
                                    for (int kh = 0; kh < 2; ++kh)
                                        for (int kw = 0; kw < 2; ++kw) {
                                            const double val =
                                                v[((c2 * 4 + 2 * d + kd) * 4 + 2 * h + kh) * 2 + kw];
                                            if (val > best) {
                                                second = best;
                                                best = val;
                                            } else if (val > second) {
                                                second = val;
                                            }
                                        }
                                if (best - second < 1e-3) ok = false;
                            }
                    if (ok) break;
                }
                Tensor proj = rand_const({2, 2, 2, 2}, rng);
                c.leaves = {x};
                c.forward = [=]() { return project(maxpool3d(x, {2, 2, 1}), proj); };
                return c;
            }};
}

GradCase case_attention() {
    return {"attention", [](Rng& rng) {
                GradCaseInstance c;
                Tensor q = rand_leaf({2, 3, 2}, rng);
                Tensor k = rand_leaf({2, 4, 2}, rng);
                Tensor v = rand_leaf({2, 4, 2}, rng);
                Tensor proj = rand_const({2, 3, 2}, rng);
                c.leaves = {q, k, v};
                c.forward = [=]() { return project(attention(q, k, v), proj); };
                return c;
            }};
}

GradCase case_attention_masked() {
    return {"attention_masked", [](Rng& rng) {
                GradCaseInstance c;
                Tensor q = rand_leaf({2, 3, 2}, rng);
                Tensor k = rand_leaf({2, 4, 2}, rng);
                Tensor v = rand_leaf({2, 4, 2}, rng);
                auto mask = std::make_shared<std::vector<uint8_t>>(12);
                for (std::size_t r = 0; r < 3; ++r) {
                    bool any = false;
                    for (std::size_t j = 0; j < 4; ++j) {
                        (*mask)[r * 4 + j] = rng.uniform() < 0.6 ? 1 : 0;
                        any = any || (*mask)[r * 4 + j];
                    }
                    if (!any) (*mask)[r * 4 + rng.below(4)] = 1;
                }
                Tensor proj = rand_const({2, 3, 2}, rng);
                c.leaves = {q, k, v};
                c.forward = [=]() { return project(attention(q, k, v, mask.get()), proj); };
                return c;
            }};
}

GradCase case_windowed_attention() {
    return {"windowed_attention", [](Rng& rng) {
                GradCaseInstance c;
                Tensor q = rand_leaf({4, 3, 3, 2}, rng);
                Tensor k = rand_leaf({4, 3, 3, 2}, rng);
                Tensor v = rand_leaf({4, 3, 3, 2}, rng);
                Tensor proj = rand_const({4, 3, 3, 2}, rng);
                c.leaves = {q, k, v};
                c.forward = [=]() { return project(windowed_attention(q, k, v, 2, 3), proj); };
                return c;
            }};
}

GradCase case_bmm() {
    return {"bmm", [](Rng& rng) {
                GradCaseInstance c;
                Tensor a = rand_leaf({2, 3, 2}, rng);
                Tensor b = rand_leaf({2, 2, 4}, rng);
                Tensor proj = rand_const({2, 3, 4}, rng);
                c.leaves = {a, b};
                c.forward = [=]() { return project(bmm(a, b), proj); };
                return c;
            }};
}

GradCase case_embed_lookup() {
    return {"embed_lookup", [](Rng& rng) {
                GradCaseInstance c;
                Tensor table = rand_leaf({4, 3}, rng);
                auto labels = std::make_shared<std::vector<uint16_t>>(8);
                for (auto& l : *labels) l = uint16_t(rng.below(4));
                Tensor proj = rand_const({3, 2, 2, 2}, rng);
                c.leaves = {table};
                c.forward = [=]() { return project(embed_lookup(table, *labels, {2, 2, 2}), proj); };
                return c;
            }};
}

GradCase case_channel_affine() {
    return {"channel_affine", [](Rng& rng) {
                GradCaseInstance c;
                Tensor f = rand_leaf({3, 2, 2, 2}, rng);
                Tensor g = rand_leaf({3}, rng);
                Tensor b = rand_leaf({3}, rng);
                Tensor proj = rand_const({3, 2, 2, 2}, rng);
                c.leaves = {f, g, b};
                c.forward = [=]() { return project(channel_affine(f, g, b), proj); };
                return c;
            }};
}

}  // namespace

// Composite-block and loss cases live with their modules (gradcases.cpp) so
// this file stays focused on the tensor primitives.
std::vector<GradCase> extra_grad_cases();

const std::vector<GradCase>& grad_check_registry() {
    static const std::vector<GradCase> reg = [] {
        std::vector<GradCase> r = {
            case_conv3d(),
            case_conv3d_stride2(),
            case_conv3d_depthwise(),
            case_instance_norm3d(),
            case_leaky_relu(),
            case_linear(),
            case_softmax(),
            case_layer_norm(),
            case_upsample(),
            case_maxpool(),
            case_attention(),
            case_attention_masked(),
            case_windowed_attention(),
            case_bmm(),
            case_embed_lookup(),
            case_channel_affine(),
        };
        for (auto& c : extra_grad_cases()) r.push_back(std::move(c));
        return r;
    }();
    return reg;
}

std::vector<std::string> grad_check_op_names() {
    std::vector<std::string> names;
    for (const auto& c : grad_check_registry()) names.push_back(c.name);
    return names;
}

std::vector<GradCheckReport> run_grad_checks(const std::string& filter,
                                             const GradCheckOptions& opts) {
    require(opts.eps > 0.0 && opts.tol > 0.0, "grad_check", "eps and tol must be positive");
    const auto& reg = grad_check_registry();
    std::vector<const GradCase*> selected;
    for (const auto& c : reg)
        if (filter.empty() || c.name == filter) selected.push_back(&c);
    if (selected.empty()) fail("grad_check", "unknown op name '" + filter + "'");

    std::vector<GradCheckReport> reports;
    for (const GradCase* gc : selected) {
        GradCheckReport rep;
        rep.op = gc->name;
        rep.trials = opts.trials;
        for (int trial = 0; trial < opts.trials; ++trial) {
            Rng rng(fnv1a64(gc->name, opts.seed * 1000003ull + uint64_t(trial)));
            GradCaseInstance inst = gc->make(rng);
            Tensor loss = inst.forward();
            backward(loss);
            std::vector<std::vector<double>> analytic;
            for (const auto& leaf : inst.leaves) analytic.push_back(leaf.grad());
            if (opts.corrupt_backward && !analytic.empty() && !analytic[0].empty())
                analytic[0][0] += 1e-2 * (1.0 + std::abs(analytic[0][0]));
            for (std::size_t li = 0; li < inst.leaves.size(); ++li) {
                Tensor leaf = inst.leaves[li];
                auto& vals = leaf.mutable_values();
                for (std::size_t i = 0; i < vals.size(); ++i) {
                    const double saved = vals[i];
                    vals[i] = saved + opts.eps;
                    const double fp = inst.forward().item();
                    vals[i] = saved - opts.eps;
                    const double fm = inst.forward().item();
                    vals[i] = saved;
                    const double numeric = (fp - fm) / (2.0 * opts.eps);
                    const double a = analytic[li][i];
                    // Central differences cannot resolve gradients below the
                    // rounding noise of the loss evaluation itself; treat a
                    // discrepancy inside that band as zero.
                    const double fd_noise = 16.0 * std::max({std::abs(fp), std::abs(fm), 1.0}) *
                                            0x1.0p-52 / (2.0 * opts.eps);
                    const double discrepancy =
                        std::max(0.0, std::abs(a - numeric) - fd_noise);
                    const double denom = std::max({1e-8, std::abs(a), std::abs(numeric)});
                    const double rel = discrepancy / denom;
                    rep.max_rel_err = std::max(rep.max_rel_err, rel);
                }
            }
        }
        rep.pass = rep.max_rel_err < opts.tol;
        reports.push_back(std::move(rep));
    }
    return reports;
}

}  // namespace essc
