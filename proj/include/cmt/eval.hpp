#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "cmt/model.hpp"

namespace cmt {

inline constexpr std::array<double, 4> kApThresholds{0.5, 1.0, 2.0, 4.0};
inline constexpr double kMateThreshold = 2.0;

/// One scored detection for PR computation: ground-plane center distance is
/// the matching metric, so only (x, y) matter.
struct EvalDet {
    double score;
    double x, y;
    std::uint64_t scene;
    int query;
};

struct EvalGt {
    double x, y;
    std::uint64_t scene;
};

struct PrResult {
    double ap = 0.0;
    int tp = 0, fp = 0, n_gt = 0;
    double matched_dist_sum = 0.0;  // over true positives
};

/// Greedy score-ordered matching followed by 101-point interpolated AP.
/// Ties in score break by (scene id, query index) so the result does not
/// depend on scene ordering.
inline PrResult pr_match(std::vector<EvalDet> dets, const std::vector<EvalGt>& gts,
                         double threshold) {
    PrResult out;
    out.n_gt = static_cast<int>(gts.size());
    std::sort(dets.begin(), dets.end(), [](const EvalDet& a, const EvalDet& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.scene != b.scene) return a.scene < b.scene;
        return a.query < b.query;
    });
    std::vector<char> used(gts.size(), 0);
    std::vector<char> is_tp;
    is_tp.reserve(dets.size());
    for (const auto& d : dets) {
        int best = -1;
        double best_dist = threshold;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].scene != d.scene) continue;
            double dist = std::hypot(d.x - gts[g].x, d.y - gts[g].y);
            if (dist <= best_dist) {
                best_dist = dist;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[best] = 1;
            is_tp.push_back(1);
            ++out.tp;
            out.matched_dist_sum += best_dist;
        } else {
            is_tp.push_back(0);
            ++out.fp;
        }
    }
    if (out.n_gt == 0) return out;  // AP defined as 0 with no ground truth

    // precision at each detection prefix, then 101-point interpolation
    std::vector<double> precision, recall;
    int tp = 0;
    for (size_t i = 0; i < is_tp.size(); ++i) {
        tp += is_tp[i];
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / out.n_gt);
    }
    double ap = 0.0;
    for (int r = 0; r <= 100; ++r) {
        double level = r / 100.0;
        double best_p = 0.0;
        for (size_t i = 0; i < precision.size(); ++i)
            if (recall[i] >= level) best_p = std::max(best_p, precision[i]);
        ap += best_p;
    }
    out.ap = ap / 101.0;
    return out;
}

struct EvalReport {
    int classes = 0;
    std::vector<std::array<double, 4>> ap;  // [class][threshold]
    double map = 0.0;
    double mate = kMateThreshold;  // worst case when nothing matches at 2 m
    int n_gt = 0, n_pred = 0;

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(9);
        out << "class";
        for (double t : kApThresholds) out << ",ap@" << t;
        out << "\n";
        for (int c = 0; c < classes; ++c) {
            out << c;
            for (double v : ap[c]) out << "," << v;
            out << "\n";
        }
        out << "mAP," << map << "\nmATE," << mate << "\n";
        return out.str();
    }

    std::string to_text() const {
        std::ostringstream out;
        out << std::fixed << std::setprecision(4);
        out << "class     AP@0.5    AP@1      AP@2      AP@4\n";
        for (int c = 0; c < classes; ++c) {
            out << c << "        ";
            for (double v : ap[c]) out << " " << v << "   ";
            out << "\n";
        }
        out << "mAP  " << map << "   mATE " << mate << " m   (" << n_pred << " preds, " << n_gt
            << " GT)\n";
        return out.str();
    }
};

/// Inference + distance-threshold AP over held-out scenes. Predictions keep
/// their argmax class; scores below the config threshold are discarded.
template <class T>
EvalReport evaluate(const CmtModel<T>& model, const std::vector<Scene>& scenes,
                    const ModalityMask& mask, const std::vector<int>& camera_drop = {}) {
    const Config& cfg = model.config();
    std::vector<std::vector<EvalDet>> dets(cfg.classes);
    std::vector<std::vector<EvalGt>> gts(cfg.classes);
    EvalReport report;
    report.classes = cfg.classes;
    for (const Scene& scene : scenes) {
        auto fwd = model.forward(scene, mask, camera_drop);
        int query = 0;
        for (const auto& p : model.predictions(fwd)) {
            if (p.score() >= cfg.score_thresh)
                dets[p.cls()].push_back(
                    {p.score(), p.center.x(), p.center.y(), scene.id, query});
            ++query;
        }
        for (const auto& b : scene.boxes) gts[b.cls].push_back({b.center.x(), b.center.y(),
                                                                scene.id});
    }
    report.ap.assign(cfg.classes, {});
    double ap_sum = 0.0;
    double dist_sum = 0.0;
    int tp_sum = 0;
    for (int c = 0; c < cfg.classes; ++c) {
        report.n_pred += static_cast<int>(dets[c].size());
        report.n_gt += static_cast<int>(gts[c].size());
        for (size_t t = 0; t < kApThresholds.size(); ++t) {
            PrResult pr = pr_match(dets[c], gts[c], kApThresholds[t]);
            report.ap[c][t] = pr.ap;
            ap_sum += pr.ap;
            if (kApThresholds[t] == kMateThreshold) {
                dist_sum += pr.matched_dist_sum;
                tp_sum += pr.tp;
            }
        }
    }
    report.map = ap_sum / (cfg.classes * kApThresholds.size());
    if (tp_sum > 0) report.mate = dist_sum / tp_sum;
    return report;
}

// ---------------------------------------------------------------------------
// Sensor-failure harness
// ---------------------------------------------------------------------------

enum class FailureMode { kNone, kSingleCamera, kAllCameras, kLidar };

struct FailureSpec {
    ModalityMask mask{true, true};
    std::vector<int> camera_drop;
    std::string label = "both";
};

inline FailureSpec simulate_sensor_failure(FailureMode mode, int camera = -1) {
    FailureSpec spec;
    switch (mode) {
        case FailureMode::kNone:
            break;
        case FailureMode::kSingleCamera:
            if (camera < 0) throw std::invalid_argument("single-camera miss needs a camera index");
            spec.camera_drop = {camera};
            spec.label = "cam" + std::to_string(camera) + "-miss";
            break;
        case FailureMode::kAllCameras:
            spec.mask = ModalityMask{false, true};
            spec.label = "lidar-only";
            break;
        case FailureMode::kLidar:
            spec.mask = ModalityMask{true, false};
            spec.label = "camera-only";
            break;
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// Grayscale portable pixmap scaled so the largest weight maps to white.
inline void write_attention_ppm(const std::filesystem::path& file,
                                const std::vector<double>& weights, int h, int w) {
    if (static_cast<int>(weights.size()) != h * w)
        throw std::invalid_argument("write_attention_ppm: size mismatch");
    double mx = 0;
    for (double v : weights) mx = std::max(mx, v);
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "P6\n" << w << " " << h << "\n255\n";
    for (double v : weights) {
        auto byte = static_cast<unsigned char>(mx > 0 ? 255.0 * v / mx : 0.0);
        out.put(static_cast<char>(byte)).put(static_cast<char>(byte)).put(static_cast<char>(byte));
    }
}

/// Per query: one BEV pixmap, one pixmap per camera, and a CSV row with the
/// anchor, the predicted center, and the full attention row of the chosen
/// decoder layer. Returns the number of files written.
template <class T>
int dump_attention(const CmtModel<T>& model, const Scene& scene, int layer,
                   const std::vector<int>& query_ids, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const Config& cfg = model.config();
    fs::create_directories(dir);
    auto fwd = model.forward(scene, ModalityMask{true, true}, {}, false, nullptr, true);
    if (layer < 0 || layer >= static_cast<int>(fwd.cross_attention.size()))
        throw std::invalid_argument("dump_attention: layer out of range");
    const auto& weights = fwd.cross_attention[layer];
    const int n_tok = fwd.tokens.features.rows();
    auto preds = decode_boxes(fwd.layer_pred.back(), fwd.layer_cls.back(),
                              model.encoders().roi());
    const auto& spec = model.encoders().bev_spec();
    const int cam_gw = cfg.img_width / cfg.img_stride;
    const int cam_gh = cfg.img_height / cfg.img_stride;

    std::ofstream csv(dir / "attention.csv", std::ios::binary);
    csv.precision(9);
    csv << "query,anchor_x,anchor_y,anchor_z,pred_x,pred_y,pred_z,weights...\n";
    int files = 0;
    for (int q : query_ids) {
        if (q < 0 || q >= fwd.queries.meta.n_match)
            throw std::invalid_argument("dump_attention: query index out of range");
        geo::Vec3 anchor = geo::denormalize_anchor(
            geo::Vec3(fwd.queries.anchors.at(q, 0), fwd.queries.anchors.at(q, 1),
                      fwd.queries.anchors.at(q, 2)),
            model.encoders().roi());
        csv << q << ',' << anchor.x() << ',' << anchor.y() << ',' << anchor.z() << ','
            << preds[q].center.x() << ',' << preds[q].center.y() << ',' << preds[q].center.z();

        std::vector<double> bev(static_cast<size_t>(spec.n_u) * spec.n_v, 0.0);
        std::vector<std::vector<double>> cams(cfg.n_cameras,
                                              std::vector<double>(cam_gw * cam_gh, 0.0));
        for (int t = 0; t < n_tok; ++t) {
            double w = weights[static_cast<size_t>(q) * n_tok + t];
            csv << ',' << w;
            const auto& prov = fwd.tokens.provenance[t];
            if (prov.modality == 0) {
                bev[prov.cell] = w;
            } else {
                cams[prov.camera][prov.cell] = w;
            }
        }
        csv << "\n";
        char name[32];
        std::snprintf(name, sizeof(name), "q%04d_bev.ppm", q);
        write_attention_ppm(dir / name, bev, spec.n_u, spec.n_v);
        ++files;
        for (int c = 0; c < cfg.n_cameras; ++c) {
            std::snprintf(name, sizeof(name), "q%04d_cam%d.ppm", q, c);
            write_attention_ppm(dir / name, cams[c], cam_gh, cam_gw);
            ++files;
        }
    }
    return files;
}

}  // namespace cmt
