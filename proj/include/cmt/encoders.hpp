#pragma once

#include "cmt/config.hpp"
#include "cmt/geometry.hpp"
#include "cmt/nn.hpp"
#include "cmt/scene.hpp"

namespace cmt {

struct ModalityMask {
    bool use_camera = true;
    bool use_lidar = true;
};

struct TokenProvenance {
    int modality;  // 0 = lidar/BEV, 1 = camera
    int camera;    // camera index, -1 for BEV
    int cell;      // flat cell index within its grid
};

/// Concatenated multi-modal tokens. Positional encodings are kept separate
/// from features and added to keys at attention time, so PE ablations and
/// attention dumps do not need re-tokenization.
template <class T>
struct TokenSet {
    Tensor<T> features;  // n_tok x d
    Tensor<T> pos;       // n_tok x d
    std::vector<TokenProvenance> provenance;
};

/// sin/cos expansion of [0,1] coordinates at `freqs` octaves (column blocks
/// sin(2^j pi x), cos(2^j pi x)); identity when freqs <= 0. Differentiable,
/// so learnable anchors can flow through it.
template <class T>
Tensor<T> fourier_features(const Tensor<T>& coords, int freqs) {
    if (freqs <= 0) return coords;
    std::vector<Tensor<T>> parts;
    parts.reserve(static_cast<size_t>(freqs) * 2);
    for (int j = 0; j < freqs; ++j) {
        Tensor<T> scaled = scale(coords, static_cast<T>(std::ldexp(3.14159265358979323846, j)));
        parts.push_back(sin(scaled));
        parts.push_back(cos(scaled));
    }
    return concat_cols(parts);
}

/// Point-cloud and image tokenizers plus both coordinate-encoding heads
/// (psi_pc, psi_im). BEV grid is row-major in u (x axis) then v (y axis).
template <class T>
class ModalityEncoders {
public:
    ModalityEncoders(ParamStore<T>& store, const Config& cfg, Rng& rng)
        : cfg_(cfg),
          roi_(cfg.roi()),
          spec_(geo::BevGridSpec::for_roi(roi_, cfg.bev_cells, cfg.bev_cells)),
          depths_(geo::depth_samples(cfg.depth_bins, cfg.depth_min, cfg.depth_max)),
          pillar_mlp_(store, "enc.pillar", {6, cfg.pillar_hidden, cfg.mixer_channels}, rng),
          mixer1_w_(store.create("enc.mixer1.weight",
                                 {9 * (cfg.mixer_channels + 1), cfg.mixer_channels}, rng,
                                 9 * (cfg.mixer_channels + 1))),
          mixer1_b_(store.create("enc.mixer1.bias", {cfg.mixer_channels}, rng,
                                 9 * (cfg.mixer_channels + 1))),
          mixer2_w_(store.create("enc.mixer2.weight", {9 * cfg.mixer_channels, cfg.d_model}, rng,
                                 9 * cfg.mixer_channels)),
          mixer2_b_(store.create("enc.mixer2.bias", {cfg.d_model}, rng, 9 * cfg.mixer_channels)),
          patch_proj_(store, "enc.patch", cfg.img_stride * cfg.img_stride * 3, cfg.d_model, rng),
          img_ln1_(store, "enc.img_ln1", cfg.d_model),
          img_block1_(store, "enc.img_block1", {cfg.d_model, cfg.mlp_hidden, cfg.d_model}, rng),
          img_ln2_(store, "enc.img_ln2", cfg.d_model),
          img_block2_(store, "enc.img_block2", {cfg.d_model, cfg.mlp_hidden, cfg.d_model}, rng),
          psi_im_(store, "enc.psi_im", {3 * cfg.depth_bins * pe_dim(cfg), cfg.mlp_hidden,
                                        cfg.d_model}, rng),
          psi_pc_(store, "enc.psi_pc", {3 * pe_dim(cfg), cfg.mlp_hidden, cfg.d_model}, rng) {}

    /// Width multiplier of the coordinate expansion feeding psi_im / psi_pc.
    static int pe_dim(const Config& cfg) { return cfg.pe_freqs > 0 ? 2 * cfg.pe_freqs : 1; }

    const geo::BevGridSpec& bev_spec() const { return spec_; }
    const geo::RoI& roi() const { return roi_; }
    const std::vector<double>& depths() const { return depths_; }
    const Mlp<T>& psi_im() const { return psi_im_; }
    const Mlp<T>& psi_pc() const { return psi_pc_; }
    int bev_tokens() const { return spec_.n_u * spec_.n_v; }
    int camera_tokens() const { return (cfg_.img_width / cfg_.img_stride) *
                                       (cfg_.img_height / cfg_.img_stride); }

    /// Pillar features -> shared point MLP -> per-pillar max pool -> two
    /// 3x3 mixing convolutions. Returns the (n_u*n_v) x d BEV map.
    Tensor<T> encode_point_cloud(const PointCloud& pc) const {
        if (pc.size() == 0) return Tensor<T>::zeros({bev_tokens(), cfg_.d_model});
        Tensor<T> pillars = pillar_map(pc);
        // all points outside the RoI: same contract as an empty cloud
        if (!pillars.requires_grad()) return Tensor<T>::zeros({bev_tokens(), cfg_.d_model});
        // log point count per pillar: max-pooled point features are nearly
        // blind to density, and density is what separates objects from
        // stray clutter returns
        Tensor<T> density = Tensor<T>::from({bev_tokens(), 1}, pillar_counts(pc));
        Tensor<T> x = concat_cols<T>({pillars, density});
        Tensor<T> mixed = relu(conv3x3(x, spec_.n_u, spec_.n_v, mixer1_w_, mixer1_b_));
        return conv3x3(mixed, spec_.n_u, spec_.n_v, mixer2_w_, mixer2_b_);
    }

    /// log1p(points in pillar) for every BEV cell.
    std::vector<T> pillar_counts(const PointCloud& pc) const {
        std::vector<T> out(static_cast<size_t>(bev_tokens()), T(0));
        for (std::int64_t i = 0; i < pc.size(); ++i) {
            geo::Vec3 p(pc.data[i * 4], pc.data[i * 4 + 1], pc.data[i * 4 + 2]);
            if (!roi_.contains(p)) continue;
            int u = std::min(spec_.n_u - 1, static_cast<int>((p.x() - roi_.x_min) / spec_.u_d));
            int v = std::min(spec_.n_v - 1, static_cast<int>((p.y() - roi_.y_min) / spec_.v_d));
            out[static_cast<size_t>(u) * spec_.n_v + v] += T(1);
        }
        for (T& c : out) c = std::log1p(c);
        return out;
    }

    /// Max-pooled per-pillar features before the mixing stage
    /// ((n_u*n_v) x mixer_channels); all-zero rows are empty pillars.
    Tensor<T> pillar_map(const PointCloud& pc) const {
        const int n_cells = bev_tokens();
        if (pc.size() == 0) return Tensor<T>::zeros({n_cells, cfg_.mixer_channels});

        // deterministic pillar assignment: sort by (pillar, original index)
        struct Entry {
            int pillar;
            std::int64_t idx;
        };
        std::vector<Entry> entries;
        for (std::int64_t i = 0; i < pc.size(); ++i) {
            geo::Vec3 p(pc.data[i * 4], pc.data[i * 4 + 1], pc.data[i * 4 + 2]);
            if (!roi_.contains(p)) continue;
            int u = std::min(spec_.n_u - 1,
                             static_cast<int>((p.x() - roi_.x_min) / spec_.u_d));
            int v = std::min(spec_.n_v - 1,
                             static_cast<int>((p.y() - roi_.y_min) / spec_.v_d));
            entries.push_back({u * spec_.n_v + v, i});
        }
        if (entries.empty()) return Tensor<T>::zeros({n_cells, cfg_.mixer_channels});
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
            return a.pillar < b.pillar || (a.pillar == b.pillar && a.idx < b.idx);
        });

        const int m = static_cast<int>(entries.size());
        std::vector<T> feat(static_cast<size_t>(m) * 6);
        std::vector<int> group(m);
        for (int r = 0; r < m; ++r) {
            const auto& e = entries[r];
            const float* p = pc.data.data() + e.idx * 4;
            int u = e.pillar / spec_.n_v, v = e.pillar % spec_.n_v;
            geo::Vec3 center = geo::bev_cell_to_world(spec_, roi_, u, v, 0);
            feat[r * 6 + 0] = static_cast<T>(p[0]);
            feat[r * 6 + 1] = static_cast<T>(p[1]);
            feat[r * 6 + 2] = static_cast<T>(p[2]);
            feat[r * 6 + 3] = static_cast<T>(p[3]);
            feat[r * 6 + 4] = static_cast<T>(p[0] - center.x());
            feat[r * 6 + 5] = static_cast<T>(p[1] - center.y());
            group[r] = e.pillar;
        }
        Tensor<T> points = Tensor<T>::from({m, 6}, std::move(feat));
        return maxpool_groups(pillar_mlp_.forward(points), group, n_cells);
    }

    /// Non-overlapping patch embedding followed by two residual MLP blocks.
    Tensor<T> encode_image(const Image& img) const {
        const int s = cfg_.img_stride;
        if (img.width != cfg_.img_width || img.height != cfg_.img_height)
            throw std::invalid_argument("encode_image: image size does not match config");
        const int gh = img.height / s, gw = img.width / s;
        std::vector<T> patches(static_cast<size_t>(gh) * gw * s * s * 3);
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                T* dst = patches.data() + (static_cast<size_t>(gy) * gw + gx) * s * s * 3;
                for (int py = 0; py < s; ++py)
                    for (int px = 0; px < s; ++px)
                        for (int c = 0; c < 3; ++c)
                            dst[(py * s + px) * 3 + c] =
                                static_cast<T>(img.at(gy * s + py, gx * s + px, c));
            }
        Tensor<T> x = patch_proj_.forward(Tensor<T>::from({gh * gw, s * s * 3}, std::move(patches)));
        x = add(x, img_block1_.forward(img_ln1_.forward(x)));
        x = add(x, img_block2_.forward(img_ln2_.forward(x)));
        return x;
    }

    /// psi_pc over expanded normalized coordinates (n x 3).
    Tensor<T> embed_pc(const Tensor<T>& coords) const {
        return psi_pc_.forward(fourier_features(coords, cfg_.pe_freqs));
    }

    /// psi_im over expanded normalized frustum coordinates (n x 3*depth_bins).
    Tensor<T> embed_im(const Tensor<T>& coords) const {
        return psi_im_.forward(fourier_features(coords, cfg_.pe_freqs));
    }

    /// Gamma_pc: psi_pc over normalized cell-center coordinates.
    Tensor<T> bev_position_encoding() const {
        return embed_pc(Tensor<T>::from({bev_tokens(), 3}, bev_pe_input()));
    }

    /// Gamma_im for one camera: psi_im over the normalized frustum point set
    /// of each feature cell.
    Tensor<T> image_position_encoding(const geo::CameraModel& cam) const {
        return embed_im(
            Tensor<T>::from({camera_tokens(), 3 * cfg_.depth_bins}, image_pe_input(cam)));
    }

    /// Normalized CEM input for the BEV lattice (n_cells x 3), heights = {0}.
    std::vector<T> bev_pe_input() const {
        std::vector<T> out;
        out.reserve(static_cast<size_t>(bev_tokens()) * 3);
        for (int u = 0; u < spec_.n_u; ++u)
            for (int v = 0; v < spec_.n_v; ++v) {
                geo::Vec3 n = geo::normalize_point(geo::bev_cell_to_world(spec_, roi_, u, v, 0),
                                                   roi_);
                out.push_back(static_cast<T>(n.x()));
                out.push_back(static_cast<T>(n.y()));
                out.push_back(static_cast<T>(n.z()));
            }
        return out;
    }

    /// Normalized CEM input for one camera grid (cells x 3*depth_bins).
    /// Frustum points outside the RoI are clamped, keeping the input width
    /// fixed.
    std::vector<T> image_pe_input(const geo::CameraModel& cam) const {
        const int gh = cam.grid_h(), gw = cam.grid_w();
        std::vector<T> out;
        out.reserve(static_cast<size_t>(gh) * gw * 3 * cfg_.depth_bins);
        for (int v = 0; v < gh; ++v)
            for (int u = 0; u < gw; ++u)
                for (double d : depths_) {
                    geo::Vec4 fp = geo::CameraModel::frustum_point((u + 0.5) * cam.stride(),
                                                                   (v + 0.5) * cam.stride(), d);
                    geo::Vec3 n = geo::normalize_point(cam.frustum_to_lidar(fp), roi_);
                    out.push_back(static_cast<T>(n.x()));
                    out.push_back(static_cast<T>(n.y()));
                    out.push_back(static_cast<T>(n.z()));
                }
        return out;
    }

private:
    Config cfg_;
    geo::RoI roi_;
    geo::BevGridSpec spec_;
    std::vector<double> depths_;
    Mlp<T> pillar_mlp_;
    Tensor<T> mixer1_w_, mixer1_b_, mixer2_w_, mixer2_b_;
    Linear<T> patch_proj_;
    LayerNorm<T> img_ln1_;
    Mlp<T> img_block1_;
    LayerNorm<T> img_ln2_;
    Mlp<T> img_block2_;
    Mlp<T> psi_im_, psi_pc_;
};

/// Flattens and concatenates the included modalities. Masked-out tokens are
/// dropped, not zeroed; camera indices listed in `camera_drop` are removed
/// individually.
template <class T>
TokenSet<T> build_token_set(const Tensor<T>& bev_feats, const Tensor<T>& bev_pe,
                            const std::vector<Tensor<T>>& img_feats,
                            const std::vector<Tensor<T>>& img_pe, const ModalityMask& mask,
                            const std::vector<int>& camera_drop = {}) {
    if (!mask.use_camera && !mask.use_lidar)
        throw std::invalid_argument("build_token_set: both modalities masked, nothing to attend");
    std::vector<Tensor<T>> feats, pes;
    std::vector<TokenProvenance> prov;
    if (mask.use_lidar) {
        feats.push_back(bev_feats);
        pes.push_back(bev_pe);
        for (int i = 0; i < bev_feats.rows(); ++i) prov.push_back({0, -1, i});
    }
    if (mask.use_camera) {
        if (img_feats.size() != img_pe.size())
            throw std::invalid_argument("build_token_set: feature/PE camera count mismatch");
        for (size_t c = 0; c < img_feats.size(); ++c) {
            if (std::find(camera_drop.begin(), camera_drop.end(), static_cast<int>(c)) !=
                camera_drop.end())
                continue;
            feats.push_back(img_feats[c]);
            pes.push_back(img_pe[c]);
            for (int i = 0; i < img_feats[c].rows(); ++i)
                prov.push_back({1, static_cast<int>(c), i});
        }
    }
    if (feats.empty())
        throw std::invalid_argument("build_token_set: every token source was dropped");
    TokenSet<T> out;
    out.features = feats.size() == 1 ? feats[0] : concat_rows(feats);
    out.pos = pes.size() == 1 ? pes[0] : concat_rows(pes);
    out.provenance = std::move(prov);
    return out;
}

}  // namespace cmt
