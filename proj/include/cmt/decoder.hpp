#pragma once

#include <algorithm>
#include <cmath>

#include "cmt/encoders.hpp"

namespace cmt {

/// Denoise-group bookkeeping for one forward pass. Queries are ordered
/// [matchable | dn group 0 | dn group 1 | ...], each group holding its
/// positives then negatives.
struct QueryMeta {
    int n_match = 0;
    int n_dn = 0;
    int groups = 0;
    std::vector<int> dn_group;           // per dn query
    std::vector<std::uint8_t> dn_positive;
    std::vector<int> dn_gt;              // source GT index (positives), -1 otherwise
    int total() const { return n_match + n_dn; }
};

template <class T>
struct QueryBatch {
    Tensor<T> anchors;    // n x 3 in [0,1]^3
    Tensor<T> content;    // n x d
    Tensor<T> pos_embed;  // n x d (Gamma_q)
    QueryMeta meta;
    std::vector<std::uint8_t> self_mask;  // n x n, true = attention forbidden
};

/// Anchors, learned content embeddings, query position embeddings (Eq.-7
/// style: psi_pc + psi_im of the anchor's projections), and point-based
/// denoise query construction.
template <class T>
class QueryGenerator {
public:
    QueryGenerator(ParamStore<T>& store, const Config& cfg, Rng& rng) : cfg_(cfg) {
        // uniform anchor init, stored as logits so learned anchors stay in
        // (0,1)^3
        Tensor<T> logits = Tensor<T>::zeros({cfg.n_queries, 3}, true);
        for (auto& v : logits.data()) {
            double a = std::clamp(rng.uniform(), 1e-4, 1.0 - 1e-4);
            v = static_cast<T>(std::log(a / (1.0 - a)));
        }
        anchor_logits_ = store.insert("query.anchor_logits", logits);
        content_ = store.create_zeros("query.content", {cfg.n_queries, cfg.d_model});
        dn_class_embed_ = store.create("query.dn_class_embed", {cfg.classes, cfg.d_model}, rng,
                                       cfg.d_model);
    }

    /// Matchable anchors; constant (detached) when anchors are not learnable.
    Tensor<T> matchable_anchors() const {
        Tensor<T> a = sigmoid(anchor_logits_);
        if (cfg_.learnable_anchors) return a;
        return Tensor<T>::from(a.shape(), a.data());
    }

    const Tensor<T>& content() const { return content_; }

    /// Gamma_q = psi_pc(A_pc) + psi_im(A_im). A_pc is the anchor itself
    /// (already RoI-normalized); A_im replicates the normalized anchor
    /// depth_bins times for every anchor visible in at least one camera,
    /// and is zero otherwise.
    Tensor<T> position_embedding(const Tensor<T>& anchors, const geo::CameraRig& rig,
                                 const ModalityEncoders<T>& enc) const {
        const int n = anchors.rows();
        const int d = cfg_.depth_bins;
        Tensor<T> a_pc = enc.embed_pc(anchors);
        // visibility is decided from anchor values (not differentiable); the
        // replicated coordinates themselves carry the gradient
        std::vector<T> vis(static_cast<size_t>(n) * 3 * d, T(0));
        geo::RoI roi = enc.roi();
        for (int i = 0; i < n; ++i) {
            geo::Vec3 norm(anchors.at(i, 0), anchors.at(i, 1), anchors.at(i, 2));
            geo::Vec3 world = geo::denormalize_anchor(norm, roi);
            bool in_view = false;
            for (const auto& cam : rig)
                if (cam.project(world)) {
                    in_view = true;
                    break;
                }
            if (in_view)
                for (int k = 0; k < 3 * d; ++k) vis[static_cast<size_t>(i) * 3 * d + k] = T(1);
        }
        std::vector<Tensor<T>> reps(d, anchors);
        Tensor<T> a_im = mul(concat_cols(reps), Tensor<T>::from({n, 3 * d}, std::move(vis)));
        return add(a_pc, enc.embed_im(a_im));
    }

    /// Point-based denoise queries: per group and GT box one positive
    /// (uniform center shift within +-tau) and one negative (shift magnitude
    /// in [tau, 2*tau] per axis). Anchors are constants.
    QueryBatch<T> generate(const std::vector<GtBox>& gts, const geo::RoI& roi, bool with_denoise,
                           Rng* dn_rng, const geo::CameraRig& rig,
                           const ModalityEncoders<T>& enc) const {
        QueryBatch<T> qb;
        qb.meta.n_match = cfg_.n_queries;
        Tensor<T> anchors = matchable_anchors();
        Tensor<T> content = content_;

        const int b = static_cast<int>(gts.size());
        if (with_denoise && cfg_.dn_enable && b > 0) {
            if (!dn_rng) throw std::invalid_argument("denoise queries need an RNG");
            const int g = cfg_.dn_groups;
            const double tau = cfg_.dn_noise_scale;
            const int per_group = cfg_.dn_negatives ? 2 * b : b;
            qb.meta.groups = g;
            qb.meta.n_dn = g * per_group;
            std::vector<T> dn_anchor;
            std::vector<int> dn_cls;
            auto push = [&](const GtBox& box, bool positive, int gt_idx, int group) {
                geo::Vec3 shift;
                for (int k = 0; k < 3; ++k) {
                    if (positive) {
                        shift[k] = dn_rng->uniform(-tau, tau);
                    } else {
                        double mag = dn_rng->uniform(tau, 2.0 * tau);
                        shift[k] = dn_rng->uniform() < 0.5 ? -mag : mag;
                    }
                }
                geo::Vec3 p = box.center + shift;
                geo::Vec3 n = geo::normalize_point(p, roi);
                dn_anchor.insert(dn_anchor.end(), {static_cast<T>(n.x()), static_cast<T>(n.y()),
                                                   static_cast<T>(n.z())});
                dn_cls.push_back(box.cls);
                qb.meta.dn_group.push_back(group);
                qb.meta.dn_positive.push_back(positive ? 1 : 0);
                qb.meta.dn_gt.push_back(positive ? gt_idx : -1);
            };
            for (int group = 0; group < g; ++group) {
                for (int i = 0; i < b; ++i) push(gts[i], true, i, group);
                if (cfg_.dn_negatives)
                    for (int i = 0; i < b; ++i) push(gts[i], false, -1, group);
            }
            Tensor<T> dn_anchors = Tensor<T>::from({qb.meta.n_dn, 3}, std::move(dn_anchor));
            anchors = concat_rows<T>({anchors, dn_anchors});
            content = concat_rows<T>({content, gather_rows(dn_class_embed_, dn_cls)});
        }

        qb.anchors = anchors;
        qb.content = content;
        qb.pos_embed = position_embedding(anchors, rig, enc);
        qb.self_mask = build_self_mask(qb.meta);
        return qb;
    }

    /// DN-DETR mask semantics: matchable queries never attend to denoise
    /// queries; denoise queries never attend across groups.
    static std::vector<std::uint8_t> build_self_mask(const QueryMeta& meta) {
        const int n = meta.total();
        std::vector<std::uint8_t> mask(static_cast<size_t>(n) * n, 0);
        for (int i = 0; i < n; ++i)
            for (int j = meta.n_match; j < n; ++j) {
                bool forbidden;
                if (i < meta.n_match) {
                    forbidden = true;  // matchable -> dn
                } else {
                    forbidden = meta.dn_group[i - meta.n_match] != meta.dn_group[j - meta.n_match];
                }
                if (forbidden) mask[static_cast<size_t>(i) * n + j] = 1;
            }
        return mask;
    }

private:
    Config cfg_;
    Tensor<T> anchor_logits_, content_, dn_class_embed_;
};

/// DETR-style decoder layer stack (post-norm). Query PE is added to the
/// self-attention q/k and to the cross-attention queries; token PE is added
/// to cross-attention keys at every layer.
template <class T>
class TransformerDecoder {
public:
    TransformerDecoder(ParamStore<T>& store, const Config& cfg, Rng& rng) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            std::string p = "dec.l" + std::to_string(l);
            layers_.push_back(Layer{
                MultiHeadAttention<T>(store, p + ".self", cfg.d_model, cfg.n_heads, rng),
                MultiHeadAttention<T>(store, p + ".cross", cfg.d_model, cfg.n_heads, rng),
                Mlp<T>(store, p + ".ffn", {cfg.d_model, cfg.mlp_hidden, cfg.d_model}, rng),
                LayerNorm<T>(store, p + ".ln1", cfg.d_model),
                LayerNorm<T>(store, p + ".ln2", cfg.d_model),
                LayerNorm<T>(store, p + ".ln3", cfg.d_model)});
        }
    }

    int n_layers() const { return static_cast<int>(layers_.size()); }

    /// Returns every layer's updated query state (for auxiliary losses).
    /// When `capture_cross` is non-null it receives per-layer head-averaged
    /// cross-attention weights (n_q x n_tok each).
    std::vector<Tensor<T>> forward(const QueryBatch<T>& queries, const TokenSet<T>& tokens,
                                   std::vector<std::vector<T>>* capture_cross = nullptr) const {
        if (!tokens.features.defined() || tokens.features.rows() == 0)
            throw std::invalid_argument("decoder: empty token set");
        Tensor<T> x = queries.content;
        Tensor<T> keys = add(tokens.features, tokens.pos);
        const std::vector<std::uint8_t>* mask =
            queries.self_mask.empty() ? nullptr : &queries.self_mask;
        std::vector<Tensor<T>> states;
        states.reserve(layers_.size());
        for (const auto& layer : layers_) {
            Tensor<T> qk = add(x, queries.pos_embed);
            x = layer.ln1.forward(add(x, layer.self_attn.forward(qk, qk, x, mask)));
            Tensor<T> q = add(x, queries.pos_embed);
            if (capture_cross)
                capture_cross->push_back(layer.cross_attn.attention_weights(q, keys));
            x = layer.ln2.forward(add(x, layer.cross_attn.forward(q, keys, tokens.features)));
            x = layer.ln3.forward(add(x, layer.ffn.forward(x)));
            states.push_back(x);
        }
        return states;
    }

private:
    struct Layer {
        MultiHeadAttention<T> self_attn, cross_attn;
        Mlp<T> ffn;
        LayerNorm<T> ln1, ln2, ln3;
    };
    std::vector<Layer> layers_;
};

template <class T>
Tensor<T> inverse_sigmoid(const Tensor<T>& a, T eps = T(1e-6)) {
    Tensor<T> c = clamp(a, eps, T(1) - eps);
    return sub(log(c), log(add_scalar(neg(c), T(1))));
}

/// Regression/classification FFN heads (shared across decoder layers).
/// The 8-dim prediction vector is (normalized center xyz, log sizes,
/// sin yaw, cos yaw); centers are anchored via inverse-sigmoid offsets.
template <class T>
class BoxHeads {
public:
    BoxHeads(ParamStore<T>& store, const Config& cfg, Rng& rng)
        : reg_(store, "head.reg", {cfg.d_model, cfg.mlp_hidden, 8}, rng),
          cls_(store, "head.cls", {cfg.d_model, cfg.mlp_hidden, cfg.classes}, rng) {
        // rare-positive prior: start every class score near 1%, so early
        // training is not spent pushing hundreds of queries to background
        auto& bias = store.params.at("head.cls.l1.bias");
        std::fill(bias.data().begin(), bias.data().end(),
                  static_cast<T>(std::log(0.01 / 0.99)));
    }

    Tensor<T> class_logits(const Tensor<T>& query_feats) const { return cls_.forward(query_feats); }

    Tensor<T> pred_vector(const Tensor<T>& query_feats, const Tensor<T>& anchors) const {
        Tensor<T> reg = reg_.forward(query_feats);
        Tensor<T> center = sigmoid(add(inverse_sigmoid(anchors), slice_cols(reg, 0, 3)));
        return concat_cols<T>({center, slice_cols(reg, 3, 5)});
    }

private:
    Mlp<T> reg_, cls_;
};

/// World-space box prediction decoded from one query row.
struct BoxPrediction {
    geo::Vec3 center;
    double w, l, h;
    double yaw;
    std::vector<double> class_scores;  // sigmoid per class
    int cls() const {
        return static_cast<int>(std::max_element(class_scores.begin(), class_scores.end()) -
                                class_scores.begin());
    }
    double score() const { return *std::max_element(class_scores.begin(), class_scores.end()); }
};

template <class T>
std::vector<BoxPrediction> decode_boxes(const Tensor<T>& pred_vec, const Tensor<T>& cls_logits,
                                        const geo::RoI& roi) {
    const int n = pred_vec.rows();
    const int c = cls_logits.cols();
    std::vector<BoxPrediction> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        BoxPrediction b;
        geo::Vec3 cn(pred_vec.at(i, 0), pred_vec.at(i, 1), pred_vec.at(i, 2));
        b.center = geo::denormalize_anchor(cn, roi);
        b.w = std::exp(static_cast<double>(pred_vec.at(i, 3)));
        b.l = std::exp(static_cast<double>(pred_vec.at(i, 4)));
        b.h = std::exp(static_cast<double>(pred_vec.at(i, 5)));
        double s = pred_vec.at(i, 6), co = pred_vec.at(i, 7);
        double norm = std::hypot(s, co);
        b.yaw = norm < 1e-9 ? 0.0 : std::atan2(s / norm, co / norm);
        b.class_scores.resize(c);
        for (int j = 0; j < c; ++j)
            b.class_scores[j] = 1.0 / (1.0 + std::exp(-static_cast<double>(cls_logits.at(i, j))));
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace cmt
