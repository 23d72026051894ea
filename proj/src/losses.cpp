#include "essc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "essc/common.hpp"
#include "essc/tensor_detail.hpp"

namespace essc {

namespace {

constexpr double kMinRatio = 1e-7;

struct TargetView {
    std::vector<uint16_t> labels;
    std::vector<uint8_t> valid;
    std::size_t valid_count = 0;
};

std::shared_ptr<const TargetView> view_of(const SemGrid& g, const char* who) {
    auto v = std::make_shared<TargetView>();
    v->labels = g.labels;
    v->valid = g.valid;
    for (uint8_t f : g.valid) v->valid_count += f;
    require(v->valid_count > 0, who, "target has no valid voxels");
    return v;
}

void check_volume_vs_grid(const Tensor& t, const SemGrid& g, const char* who) {
    require(t.rank() == 4, who, "expected a [C, X, Y, Z] tensor");
    const Shape& s = t.shape();
    require(s[1] == g.dims[0] && s[2] == g.dims[1] && s[3] == g.dims[2], who,
            "tensor spatial dims " + shape_str(s) + " do not match the target grid");
    require(s[0] >= std::size_t(g.num_semantic_classes) + 1, who,
            "tensor has fewer channels than the grid's class range");
}

}  // namespace

void ClassWeights::check() const {
    require(!w.empty(), "ClassWeights", "empty weight vector");
    for (double v : w)
        require(std::isfinite(v) && v > 0.0, "ClassWeights", "weights must be finite and positive");
}

ClassWeights class_weights_from_frequencies(const std::vector<uint64_t>& counts, double eps) {
    require(eps > 0.0, "class_weights_from_frequencies", "eps must be positive");
    uint64_t total = 0;
    for (uint64_t c : counts) total += c;
    require(total > 0, "class_weights_from_frequencies", "all class counts are zero");
    ClassWeights out;
    out.w.resize(counts.size(), 0.0);
    double max_w = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) continue;
        out.w[c] = 1.0 / std::log(double(counts[c]) + eps);
        max_w = std::max(max_w, out.w[c]);
    }
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) out.w[c] = max_w;
    out.check();
    return out;
}

// ---- weighted cross-entropy ---------------------------------------------------

Tensor weighted_ce(const Tensor& logits, const SemGrid& target, const ClassWeights& w,
                   CeNormalization norm) {
    check_volume_vs_grid(logits, target, "weighted_ce");
    w.check();
    const std::size_t C = logits.shape()[0];
    require(w.w.size() == C, "weighted_ce",
            "weight vector length " + std::to_string(w.w.size()) + " must equal channel count " +
                std::to_string(C));
    auto tv = view_of(target, "weighted_ce");
    const std::size_t n = tv->labels.size();
    const auto& x = logits.values();

    // log-softmax per voxel over the channel axis, loss over valid voxels
    auto probs = std::make_shared<std::vector<double>>(x.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[c * n + i]);
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) denom += std::exp(x[c * n + i] - mx);
        const double log_denom = std::log(denom);
        for (std::size_t c = 0; c < C; ++c)
            (*probs)[c * n + i] = std::exp(x[c * n + i] - mx) / denom;
        if (!tv->valid[i]) continue;
        const uint16_t y = tv->labels[i];
        loss += w.w[y] * (log_denom - (x[y * n + i] - mx));
    }
    const double scale = norm == CeNormalization::class_count ? 1.0 / double(C)
                                                              : 1.0 / double(tv->valid_count);
    loss *= scale;

    std::vector<double> weights = w.w;
    return make_op("weighted_ce", Shape{}, {loss}, {detail_unwrap(logits)},
                   [tv, probs, weights, C, n, scale](detail::TensorNode& nd) {
                       if (!nd.parents[0]->requires_grad) return;
                       auto& gx = nd.parents[0]->grad;
                       const double go = nd.grad[0] * scale;
                       for (std::size_t i = 0; i < n; ++i) {
                           if (!tv->valid[i]) continue;
                           const uint16_t y = tv->labels[i];
                           const double wy = weights[y] * go;
                           for (std::size_t c = 0; c < C; ++c) {
                               const double p = (*probs)[c * n + i];
                               gx[c * n + i] += wy * (p - (c == y ? 1.0 : 0.0));
                           }
                       }
                   });
}

Tensor multiscale_ce(const std::map<int, Tensor>& logits_by_scale,
                     const std::map<int, SemGrid>& targets_by_scale, const ClassWeights& w,
                     CeNormalization norm) {
    require(!logits_by_scale.empty(), "multiscale_ce", "no scales supplied");
    Tensor total;
    for (const auto& [s, logits] : logits_by_scale) {
        auto it = targets_by_scale.find(s);
        if (it == targets_by_scale.end())
            fail("multiscale_ce", "missing target for scale " + std::to_string(s));
        Tensor term = weighted_ce(logits, it->second, w, norm);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor channel_softmax(const Tensor& logits) {
    require(logits.rank() == 4, "channel_softmax", "expected a [C, X, Y, Z] tensor");
    Tensor last = permute(logits, {1, 2, 3, 0});
    Tensor sm = softmax_lastdim(last);
    return permute(sm, {3, 0, 1, 2});
}

// ---- scene-class affinity -------------------------------------------------------

namespace {

struct ScalStats {
    // per class: prediction mass, hit mass, target count, complement count,
    // complement miss mass
    std::vector<double> pred_mass, hit_mass, miss_mass;
    std::vector<uint64_t> target_count, other_count;
};

}  // namespace

Tensor scal(const Tensor& probs, const SemGrid& target, ScalMode mode) {
    check_volume_vs_grid(probs, target, "scal");
    auto tv = view_of(target, "scal");
    const std::size_t n = tv->labels.size();
    const std::size_t channels = probs.shape()[0];
    const std::size_t C = mode == ScalMode::semantic ? channels : 2;
    const auto& x = probs.values();

    // geometric mode works on {empty, occupied} with p(occ) = 1 - p(empty)
    auto prob_at = [&](std::size_t c, std::size_t i) {
        if (mode == ScalMode::semantic) return x[c * n + i];
        return c == 0 ? x[i] : 1.0 - x[i];
    };
    auto label_at = [&](std::size_t i) -> std::size_t {
        if (mode == ScalMode::semantic) return tv->labels[i];
        return tv->labels[i] == 0 ? 0 : 1;
    };

    auto st = std::make_shared<ScalStats>();
    st->pred_mass.assign(C, 0.0);
    st->hit_mass.assign(C, 0.0);
    st->miss_mass.assign(C, 0.0);
    st->target_count.assign(C, 0);
    st->other_count.assign(C, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!tv->valid[i]) continue;
        const std::size_t y = label_at(i);
        for (std::size_t c = 0; c < C; ++c) {
            const double p = prob_at(c, i);
            st->pred_mass[c] += p;
            if (y == c) {
                st->hit_mass[c] += p;
                st->target_count[c]++;
            } else {
                st->miss_mass[c] += 1.0 - p;
                st->other_count[c]++;
            }
        }
    }

    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        if (st->pred_mass[c] > 0.0)
            acc += std::log(std::max(st->hit_mass[c] / st->pred_mass[c], kMinRatio));
        if (st->target_count[c] > 0)
            acc += std::log(std::max(st->hit_mass[c] / double(st->target_count[c]), kMinRatio));
        if (st->other_count[c] > 0)
            acc += std::log(std::max(st->miss_mass[c] / double(st->other_count[c]), kMinRatio));
    }
    const double loss = -acc / double(C);

    return make_op(
        "scal", Shape{}, {loss}, {detail_unwrap(probs)},
        [tv, st, mode, C, n](detail::TensorNode& nd) {
            if (!nd.parents[0]->requires_grad) return;
            auto& gx = nd.parents[0]->grad;
            const double go = -nd.grad[0] / double(C);
            // per-class coefficients for d/d hit, d/d pred_mass, d/d miss
            std::vector<double> d_hit(C, 0.0), d_pred(C, 0.0), d_miss(C, 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                if (st->pred_mass[c] > 0.0 && st->hit_mass[c] / st->pred_mass[c] > kMinRatio) {
                    d_hit[c] += 1.0 / st->hit_mass[c];
                    d_pred[c] -= 1.0 / st->pred_mass[c];
                }
                if (st->target_count[c] > 0 &&
                    st->hit_mass[c] / double(st->target_count[c]) > kMinRatio)
                    d_hit[c] += 1.0 / st->hit_mass[c];
                if (st->other_count[c] > 0 &&
                    st->miss_mass[c] / double(st->other_count[c]) > kMinRatio)
                    d_miss[c] += 1.0 / st->miss_mass[c];
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (!tv->valid[i]) continue;
                const std::size_t y =
                    mode == ScalMode::semantic ? tv->labels[i] : (tv->labels[i] == 0 ? 0 : 1);
                for (std::size_t c = 0; c < C; ++c) {
                    // d loss / d p_{c,i}
                    double d = d_pred[c];
                    if (y == c)
                        d += d_hit[c];
                    else
                        d -= d_miss[c];
                    d *= go;
                    if (d == 0.0) continue;
                    if (mode == ScalMode::semantic) {
                        gx[c * n + i] += d;
                    } else {
                        // p(empty) = p0, p(occ) = 1 - p0
                        gx[i] += c == 0 ? d : -d;
                    }
                }
            }
        });
}

// ---- lovasz ----------------------------------------------------------------------

Tensor lovasz_softmax(const Tensor& probs, const SemGrid& target) {
    check_volume_vs_grid(probs, target, "lovasz_softmax");
    auto tv = view_of(target, "lovasz_softmax");
    const std::size_t n = tv->labels.size();
    const std::size_t C = probs.shape()[0];
    const auto& x = probs.values();

    std::vector<std::size_t> valid_idx;
    valid_idx.reserve(tv->valid_count);
    for (std::size_t i = 0; i < n; ++i)
        if (tv->valid[i]) valid_idx.push_back(i);

    std::vector<uint8_t> present(C, 0);
    for (std::size_t i : valid_idx) present[tv->labels[i]] = 1;
    std::size_t present_count = 0;
    for (uint8_t p : present) present_count += p;

    // Per present class: errors e_i = |[y=c] - p_ci| sorted descending; the
    // Jaccard-extension coefficients weight the sorted errors.
    struct ClassPlan {
        std::size_t cls;
        std::vector<std::size_t> order;  // positions into valid_idx, sorted
        std::vector<double> coeff;       // lovasz gradient at each sorted rank
    };
    auto plans = std::make_shared<std::vector<ClassPlan>>();
    double loss = 0.0;
    const std::size_t m = valid_idx.size();
    std::vector<double> errors(m);
    std::vector<std::size_t> order(m);
    for (std::size_t c = 0; c < C; ++c) {
        if (!present[c]) continue;
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t i = valid_idx[j];
            const double p = x[c * n + i];
            errors[j] = tv->labels[i] == c ? 1.0 - p : p;
        }
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return errors[a] > errors[b];
        });
        double gts = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (tv->labels[valid_idx[j]] == c) gts += 1.0;
        ClassPlan plan;
        plan.cls = c;
        plan.order = order;
        plan.coeff.resize(m);
        double cum_gt = 0.0, cum_not = 0.0, prev_jacc = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
            const bool is_gt = tv->labels[valid_idx[order[r]]] == c;
            cum_gt += is_gt ? 1.0 : 0.0;
            cum_not += is_gt ? 0.0 : 1.0;
            const double inter = gts - cum_gt;
            const double uni = gts + cum_not;
            const double jacc = 1.0 - inter / uni;
            plan.coeff[r] = jacc - prev_jacc;
            prev_jacc = jacc;
            loss += errors[order[r]] * plan.coeff[r];
        }
        plans->push_back(std::move(plan));
    }
    loss /= double(present_count);

    auto valid_idx_p = std::make_shared<std::vector<std::size_t>>(std::move(valid_idx));
    return make_op(
        "lovasz_softmax", Shape{}, {loss}, {detail_unwrap(probs)},
        [tv, plans, valid_idx_p, n, present_count](detail::TensorNode& nd) {
            if (!nd.parents[0]->requires_grad) return;
            auto& gx = nd.parents[0]->grad;
            const double go = nd.grad[0] / double(present_count);
            for (const auto& plan : *plans) {
                for (std::size_t r = 0; r < plan.order.size(); ++r) {
                    const std::size_t j = plan.order[r];
                    const std::size_t i = (*valid_idx_p)[j];
                    const double de = go * plan.coeff[r];
                    // e = 1 - p on target voxels, p elsewhere
                    gx[plan.cls * n + i] += tv->labels[i] == plan.cls ? -de : de;
                }
            }
        });
}

// ---- total -----------------------------------------------------------------------

TotalLoss total_loss(const std::map<int, Tensor>& logits_by_scale,
                     const std::map<int, SemGrid>& targets_by_scale, const ClassWeights& w,
                     const LossSettings& cfg) {
    require(cfg.lambda_ce >= 0.0 && cfg.lambda_scal_geo >= 0.0 && cfg.lambda_scal_sem >= 0.0 &&
                cfg.lambda_lovasz >= 0.0,
            "total_loss", "loss coefficients must be nonnegative");
    require(!logits_by_scale.empty(), "total_loss", "no scales supplied");

    TotalLoss out;
    Tensor ce = multiscale_ce(logits_by_scale, targets_by_scale, w, cfg.ce_norm);
    Tensor geo, sem, lov;
    for (const auto& [s, logits] : logits_by_scale) {
        const SemGrid& target = targets_by_scale.at(s);
        Tensor probs = channel_softmax(logits);
        Tensor g = scal(probs, target, ScalMode::geometric);
        Tensor m = scal(probs, target, ScalMode::semantic);
        geo = geo.defined() ? add(geo, g) : g;
        sem = sem.defined() ? add(sem, m) : m;
        if (cfg.lambda_lovasz > 0.0) {
            Tensor l = lovasz_softmax(probs, target);
            lov = lov.defined() ? add(lov, l) : l;
        }
    }
    out.parts.ce = ce.item();
    out.parts.scal_geo = geo.item();
    out.parts.scal_sem = sem.item();
    Tensor total = add(add(scale(ce, cfg.lambda_ce), scale(geo, cfg.lambda_scal_geo)),
                       scale(sem, cfg.lambda_scal_sem));
    if (cfg.lambda_lovasz > 0.0) {
        out.parts.lovasz = lov.item();
        total = add(total, scale(lov, cfg.lambda_lovasz));
    }
    out.parts.total = total.item();
    out.value = total;
    return out;
}

}  // namespace essc
