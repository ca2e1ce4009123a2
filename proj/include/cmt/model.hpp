#pragma once

#include <memory>

#include "cmt/loss.hpp"

namespace cmt {

/// Full detector: modality encoders, query generator, transformer decoder,
/// and shared box heads, all registered in one parameter store.
template <class T>
class CmtModel {
public:
    explicit CmtModel(const Config& cfg) : cfg_(cfg), rig_(make_rig(cfg)) {
        Rng rng(static_cast<std::uint64_t>(cfg.seed));
        Rng init = rng.fork(0x1717);
        enc_ = std::make_unique<ModalityEncoders<T>>(store_, cfg, init);
        qgen_ = std::make_unique<QueryGenerator<T>>(store_, cfg, init);
        dec_ = std::make_unique<TransformerDecoder<T>>(store_, cfg, init);
        heads_ = std::make_unique<BoxHeads<T>>(store_, cfg, init);
    }

    const Config& config() const { return cfg_; }
    const geo::CameraRig& rig() const { return rig_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const ModalityEncoders<T>& encoders() const { return *enc_; }
    const QueryGenerator<T>& query_generator() const { return *qgen_; }

    struct Forward {
        std::vector<Tensor<T>> layer_cls;   // per layer: n x classes
        std::vector<Tensor<T>> layer_pred;  // per layer: n x 8 prediction vectors
        QueryBatch<T> queries;
        TokenSet<T> tokens;
        std::vector<std::vector<T>> cross_attention;  // per layer, when captured
    };

    /// A masked-out modality is never encoded, so its parameters stay outside
    /// the autodiff graph entirely.
    Forward forward(const Scene& scene, const ModalityMask& mask,
                    const std::vector<int>& camera_drop = {}, bool with_denoise = false,
                    Rng* dn_rng = nullptr, bool capture_attention = false) const {
        Tensor<T> bev, bev_pe;
        std::vector<Tensor<T>> img_feats, img_pe;
        if (mask.use_lidar) {
            bev = enc_->encode_point_cloud(scene.cloud);
            bev_pe = enc_->bev_position_encoding();
        }
        if (mask.use_camera) {
            if (scene.images.size() != rig_.size())
                throw std::invalid_argument("forward: scene camera count does not match rig");
            img_feats.resize(rig_.size());
            img_pe.resize(rig_.size());
            for (size_t c = 0; c < rig_.size(); ++c) {
                if (std::find(camera_drop.begin(), camera_drop.end(), static_cast<int>(c)) !=
                    camera_drop.end())
                    continue;
                img_feats[c] = enc_->encode_image(scene.images[c]);
                img_pe[c] = enc_->image_position_encoding(rig_[c]);
            }
        }
        Forward out;
        out.tokens = build_token_set(bev, bev_pe, img_feats, img_pe, mask, camera_drop);
        out.queries = qgen_->generate(scene.boxes, enc_->roi(), with_denoise, dn_rng, rig_, *enc_);
        std::vector<Tensor<T>> states =
            dec_->forward(out.queries, out.tokens, capture_attention ? &out.cross_attention
                                                                     : nullptr);
        for (const auto& s : states) {
            out.layer_cls.push_back(heads_->class_logits(s));
            out.layer_pred.push_back(heads_->pred_vector(s, out.queries.anchors));
        }
        return out;
    }

    LossBreakdown<T> loss(const Forward& fwd, const std::vector<GtBox>& gts) const {
        return compute_loss(fwd.layer_cls, fwd.layer_pred, fwd.queries.meta, gts, enc_->roi(),
                            cfg_);
    }

    /// Final-layer predictions of the matchable queries, decoded to world
    /// space.
    std::vector<BoxPrediction> predictions(const Forward& fwd) const {
        int nm = fwd.queries.meta.n_match;
        return decode_boxes(slice_rows(fwd.layer_pred.back(), 0, nm),
                            slice_rows(fwd.layer_cls.back(), 0, nm), enc_->roi());
    }

private:
    Config cfg_;
    geo::CameraRig rig_;
    ParamStore<T> store_;
    std::unique_ptr<ModalityEncoders<T>> enc_;
    std::unique_ptr<QueryGenerator<T>> qgen_;
    std::unique_ptr<TransformerDecoder<T>> dec_;
    std::unique_ptr<BoxHeads<T>> heads_;
};

}  // namespace cmt
