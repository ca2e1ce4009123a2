#pragma once

#include <array>
#include <limits>

#include "cmt/decoder.hpp"
#include "cmt/scene.hpp"

namespace cmt {

/// Minimum-cost assignment (Kuhn-Munkres with potentials, O(rows^2 * cols)).
/// `cost` is row-major rows x cols with rows <= cols; returns the assigned
/// column per row.
inline std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols) {
    if (rows > cols) throw std::invalid_argument("hungarian: more rows than columns");
    if (static_cast<int>(cost.size()) != rows * cols)
        throw std::invalid_argument("hungarian: cost size mismatch");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
    std::vector<int> p(cols + 1, 0), way(cols + 1, 0);  // 1-based
    for (int i = 1; i <= rows; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(cols + 1, inf);
        std::vector<char> used(cols + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= cols; ++j)
                if (!used[j]) {
                    double cur = cost[static_cast<size_t>(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= cols; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(rows, -1);
    for (int j = 1; j <= cols; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

/// Per-query-per-class focal terms evaluated on host scalars; shared by the
/// matching cost and (structurally) by the loss so the two agree pairwise.
inline double focal_pos(double logit, double alpha, double gamma) {
    double p = std::clamp(1.0 / (1.0 + std::exp(-logit)), 1e-7, 1.0 - 1e-7);
    return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}
inline double focal_neg(double logit, double alpha, double gamma) {
    double p = std::clamp(1.0 / (1.0 + std::exp(-logit)), 1e-7, 1.0 - 1e-7);
    return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

/// The 8-dim regression target for one GT box: RoI-normalized center, log
/// sizes, sin/cos yaw.
inline std::array<double, 8> box_target(const GtBox& b, const geo::RoI& roi) {
    geo::Vec3 n = geo::normalize_point(b.center, roi);
    return {n.x(), n.y(), n.z(), std::log(b.w), std::log(b.l), std::log(b.h), std::sin(b.yaw),
            std::cos(b.yaw)};
}

/// Pairwise match cost: exactly the loss terms a (query, GT) pair would
/// contribute, w_cls * focal(all classes vs one-hot GT class) +
/// w_reg * mean-abs regression error. Row-major n_gt x n_query.
template <class T>
std::vector<double> match_cost(const Tensor<T>& cls_logits, const Tensor<T>& pred_vec,
                               const std::vector<GtBox>& gts, const geo::RoI& roi,
                               const Config& cfg) {
    const int nq = cls_logits.rows();
    const int ng = static_cast<int>(gts.size());
    std::vector<double> cost(static_cast<size_t>(ng) * nq);
    std::vector<std::array<double, 8>> targets;
    targets.reserve(ng);
    for (const auto& g : gts) targets.push_back(box_target(g, roi));
    for (int i = 0; i < ng; ++i)
        for (int q = 0; q < nq; ++q) {
            double cls = 0.0;
            for (int c = 0; c < cfg.classes; ++c) {
                double logit = cls_logits.at(q, c);
                cls += c == gts[i].cls ? focal_pos(logit, cfg.focal_alpha, cfg.focal_gamma)
                                       : focal_neg(logit, cfg.focal_alpha, cfg.focal_gamma);
            }
            double reg = 0.0;
            for (int k = 0; k < 8; ++k)
                reg += std::abs(static_cast<double>(pred_vec.at(q, k)) - targets[i][k]);
            cost[static_cast<size_t>(i) * nq + q] = cfg.w_cls * cls + cfg.w_reg * reg / 8.0;
        }
    return cost;
}

/// Differentiable per-class binary focal loss. `target_cls[q]` is the GT
/// class for query q or -1 for no-object. Sum over queries and classes,
/// divided by `norm`.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<int>& target_cls, double alpha,
                     double gamma, double norm) {
    const int n = logits.rows(), c = logits.cols();
    if (static_cast<int>(target_cls.size()) != n)
        throw std::invalid_argument("focal_loss: target size mismatch");
    std::vector<T> onehot(static_cast<size_t>(n) * c, T(0));
    for (int i = 0; i < n; ++i)
        if (target_cls[i] >= 0) onehot[static_cast<size_t>(i) * c + target_cls[i]] = T(1);
    Tensor<T> t = Tensor<T>::from({n, c}, std::move(onehot));
    Tensor<T> one_minus_t = add_scalar(neg(t), T(1));
    Tensor<T> p = clamp(sigmoid(logits), T(1e-7), T(1) - T(1e-7));
    Tensor<T> one_minus_p = add_scalar(neg(p), T(1));
    auto pow_g = [&](const Tensor<T>& x) {
        return gamma == 2.0 ? square(x) : exp(scale(log(x), static_cast<T>(gamma)));
    };
    Tensor<T> pos = scale(mul(t, mul(pow_g(one_minus_p), neg(log(p)))), static_cast<T>(alpha));
    Tensor<T> negt = scale(mul(one_minus_t, mul(pow_g(p), neg(log(one_minus_p)))),
                           static_cast<T>(1.0 - alpha));
    return scale(sum(add(pos, negt)), static_cast<T>(1.0 / norm));
}

/// Mean absolute error over the 8 regression dims of the selected rows,
/// summed over boxes and divided by `norm`.
template <class T>
Tensor<T> l1_reg_loss(const Tensor<T>& pred_vec, const std::vector<int>& rows,
                      const std::vector<std::array<double, 8>>& targets, double norm) {
    if (rows.empty()) return Tensor<T>::zeros({1});
    std::vector<T> tgt;
    tgt.reserve(rows.size() * 8);
    for (const auto& t : targets)
        for (double v : t) tgt.push_back(static_cast<T>(v));
    Tensor<T> sel = gather_rows(pred_vec, rows);
    Tensor<T> t = Tensor<T>::from({static_cast<int>(rows.size()), 8}, std::move(tgt));
    return scale(sum(abs(sub(sel, t))), static_cast<T>(1.0 / (8.0 * norm)));
}

template <class T>
struct LossBreakdown {
    Tensor<T> total;  // scalar, differentiable
    double cls = 0, reg = 0, dn_cls = 0, dn_reg = 0;  // unweighted layer means
    std::vector<std::vector<int>> assignment;  // per layer: GT -> query index
    double value() const { return static_cast<double>(total.at(0)); }
};

/// Set-prediction loss: per-layer Hungarian matching of the matchable
/// queries, focal + L1 on matches, focal no-object on the rest; denoise
/// queries bypass matching (positives regress their source GT, negatives are
/// no-object). Matchable terms normalize by max(1, n_gt), denoise terms by
/// max(1, #positives); each is averaged over decoder layers.
template <class T>
LossBreakdown<T> compute_loss(const std::vector<Tensor<T>>& layer_cls,
                              const std::vector<Tensor<T>>& layer_pred, const QueryMeta& meta,
                              const std::vector<GtBox>& gts, const geo::RoI& roi,
                              const Config& cfg) {
    const int n_layers = static_cast<int>(layer_cls.size());
    const int ng = static_cast<int>(gts.size());
    const double gt_norm = std::max(1, ng);
    std::vector<std::array<double, 8>> targets;
    targets.reserve(ng);
    for (const auto& g : gts) targets.push_back(box_target(g, roi));

    int n_pos = 0;
    for (std::uint8_t p : meta.dn_positive) n_pos += p;
    const double dn_norm = std::max(1, n_pos);

    LossBreakdown<T> out;
    Tensor<T> cls_acc = Tensor<T>::zeros({1});
    Tensor<T> reg_acc = Tensor<T>::zeros({1});
    Tensor<T> dn_cls_acc = Tensor<T>::zeros({1});
    Tensor<T> dn_reg_acc = Tensor<T>::zeros({1});

    for (int l = 0; l < n_layers; ++l) {
        Tensor<T> cls_m = slice_rows(layer_cls[l], 0, meta.n_match);
        Tensor<T> pred_m = slice_rows(layer_pred[l], 0, meta.n_match);

        std::vector<int> assign;
        std::vector<int> target_cls(meta.n_match, -1);
        if (ng > 0) {
            assign = hungarian(match_cost(cls_m, pred_m, gts, roi, cfg), ng, meta.n_match);
            for (int i = 0; i < ng; ++i) target_cls[assign[i]] = gts[i].cls;
        }
        out.assignment.push_back(assign);
        cls_acc = add(cls_acc, focal_loss(cls_m, target_cls, cfg.focal_alpha, cfg.focal_gamma,
                                          gt_norm));
        if (ng > 0) reg_acc = add(reg_acc, l1_reg_loss(pred_m, assign, targets, gt_norm));

        if (meta.n_dn > 0) {
            Tensor<T> cls_d = slice_rows(layer_cls[l], meta.n_match, meta.n_dn);
            Tensor<T> pred_d = slice_rows(layer_pred[l], meta.n_match, meta.n_dn);
            std::vector<int> dn_cls_tgt(meta.n_dn, -1);
            std::vector<int> dn_rows;
            std::vector<std::array<double, 8>> dn_targets;
            for (int i = 0; i < meta.n_dn; ++i)
                if (meta.dn_positive[i]) {
                    dn_cls_tgt[i] = gts[meta.dn_gt[i]].cls;
                    dn_rows.push_back(i);
                    dn_targets.push_back(targets[meta.dn_gt[i]]);
                }
            dn_cls_acc = add(dn_cls_acc, focal_loss(cls_d, dn_cls_tgt, cfg.focal_alpha,
                                                    cfg.focal_gamma, dn_norm));
            dn_reg_acc = add(dn_reg_acc, l1_reg_loss(pred_d, dn_rows, dn_targets, dn_norm));
        }
    }

    const T inv_l = static_cast<T>(1.0 / n_layers);
    cls_acc = scale(cls_acc, inv_l);
    reg_acc = scale(reg_acc, inv_l);
    dn_cls_acc = scale(dn_cls_acc, inv_l);
    dn_reg_acc = scale(dn_reg_acc, inv_l);
    out.cls = cls_acc.at(0);
    out.reg = reg_acc.at(0);
    out.dn_cls = dn_cls_acc.at(0);
    out.dn_reg = dn_reg_acc.at(0);
    out.total = add(scale(add(cls_acc, dn_cls_acc), static_cast<T>(cfg.w_cls)),
                    scale(add(reg_acc, dn_reg_acc), static_cast<T>(cfg.w_reg)));
    return out;
}

}  // namespace cmt
