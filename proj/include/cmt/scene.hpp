#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cmt/config.hpp"
#include "cmt/geometry.hpp"
#include "cmt/rng.hpp"

namespace cmt {

struct GtBox {
    geo::Vec3 center;
    double w, l, h;  // meters
    double yaw;      // radians
    int cls;

    double footprint_radius() const { return 0.5 * std::hypot(w, l); }
};

/// m x 4 rows of (x, y, z, intensity), LiDAR frame.
struct PointCloud {
    std::vector<float> data;
    std::int64_t size() const { return static_cast<std::int64_t>(data.size()) / 4; }
};

/// H x W x 3 image, values in [0,1].
struct Image {
    int height = 0, width = 0;
    std::vector<float> rgb;
    float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

struct Scene {
    std::uint64_t id = 0;
    int n_classes = 3;
    std::vector<GtBox> boxes;
    PointCloud cloud;
    std::vector<Image> images;
    geo::CameraRig rig;
};

// Size priors per class: car-like, pedestrian-like, barrier-like.
inline const double kClassSizes[3][3] = {
    {1.9, 4.5, 1.6}, {0.6, 0.6, 1.7}, {0.5, 2.0, 1.0}};  // (w, l, h)
inline const float kClassColors[3][3] = {
    {0.9f, 0.25f, 0.2f}, {0.2f, 0.9f, 0.25f}, {0.25f, 0.3f, 0.9f}};

/// Ring of outward-facing cameras around the LiDAR origin.
inline geo::CameraRig make_rig(const Config& cfg) {
    geo::CameraRig rig;
    double half_fov = 0.5 * cfg.cam_fov_deg * M_PI / 180.0;
    double f = (cfg.img_width / 2.0) / std::tan(half_fov);
    for (int i = 0; i < cfg.n_cameras; ++i) {
        double theta = 2.0 * M_PI * i / cfg.n_cameras;
        double c = std::cos(theta), s = std::sin(theta);
        // camera axes in the lidar frame: z forward, y down, x right
        geo::Mat4 t = geo::Mat4::Identity();
        t.col(0).head<3>() = geo::Vec3(s, -c, 0);   // x
        t.col(1).head<3>() = geo::Vec3(0, 0, -1);   // y
        t.col(2).head<3>() = geo::Vec3(c, s, 0);    // z
        t.col(3).head<3>() = geo::Vec3(0, 0, cfg.cam_height);
        rig.emplace_back(f, f, cfg.img_width / 2.0, cfg.img_height / 2.0, cfg.img_width,
                         cfg.img_height, cfg.img_stride, t);
    }
    return rig;
}

namespace detail_scene {

// hash-based deterministic texture noise
inline float texture_noise(std::uint64_t seed, int cam, int y, int x, int c) {
    std::uint64_t h = seed ^ (0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(cam) + 1));
    h ^= (static_cast<std::uint64_t>(y) << 32) ^ (static_cast<std::uint64_t>(x) << 8) ^
         static_cast<std::uint64_t>(c);
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    h ^= h >> 31;
    return static_cast<float>(h >> 40) / static_cast<float>(1 << 24);
}

inline geo::Vec3 box_surface_point(const GtBox& b, Rng& rng) {
    // face areas: two w*h sides, two l*h sides, one top (bottom rarely visible)
    double a_wl = b.w * b.l, a_wh = b.w * b.h, a_lh = b.l * b.h;
    double total = a_wl + 2 * a_wh + 2 * a_lh;
    double pick = rng.uniform(0, total);
    double lx = rng.uniform(-0.5, 0.5) * b.w;
    double ly = rng.uniform(-0.5, 0.5) * b.l;
    double lz = rng.uniform(-0.5, 0.5) * b.h;
    if (pick < a_wl) {
        lz = 0.5 * b.h;  // top
    } else if (pick < a_wl + 2 * a_wh) {
        ly = (pick < a_wl + a_wh ? 0.5 : -0.5) * b.l;
    } else {
        lx = (pick < a_wl + 2 * a_wh + a_lh ? 0.5 : -0.5) * b.w;
    }
    double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
    return b.center + geo::Vec3(lx * cy - ly * sy, lx * sy + ly * cy, lz);
}

struct Pixel {
    double u, v;
};

inline double cross(const Pixel& o, const Pixel& a, const Pixel& b) {
    return (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u);
}

inline std::vector<Pixel> convex_hull(std::vector<Pixel> pts) {
    std::sort(pts.begin(), pts.end(), [](const Pixel& a, const Pixel& b) {
        return a.u < b.u || (a.u == b.u && a.v < b.v);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](const Pixel& a, const Pixel& b) { return a.u == b.u && a.v == b.v; }),
              pts.end());
    if (pts.size() < 3) return pts;
    std::vector<Pixel> hull(2 * pts.size());
    size_t k = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    size_t lower = k + 1;
    for (size_t i = pts.size() - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline bool inside_hull(const std::vector<Pixel>& hull, double u, double v) {
    if (hull.size() < 3) return false;
    for (size_t i = 0; i < hull.size(); ++i) {
        const Pixel& a = hull[i];
        const Pixel& b = hull[(i + 1) % hull.size()];
        if (cross(a, b, Pixel{u, v}) < 0) return false;
    }
    return true;
}

}  // namespace detail_scene

/// Fully deterministic per (seed, config): boxes, surface-sampled cloud,
/// rasterized multi-camera images.
inline Scene generate_scene(std::uint64_t seed, const Config& cfg, const geo::CameraRig& rig) {
    geo::RoI roi = cfg.roi();
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    Scene scene;
    scene.id = seed;
    scene.n_classes = cfg.classes;
    scene.rig = rig;

    int want = cfg.min_boxes +
               static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
                   cfg.max_boxes - cfg.min_boxes + 1)));
    for (int bi = 0; bi < want; ++bi) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            GtBox b;
            b.cls = static_cast<int>(rng.uniform_int(cfg.classes));
            double jw = rng.uniform(0.9, 1.1), jl = rng.uniform(0.9, 1.1),
                   jh = rng.uniform(0.9, 1.1);
            b.w = kClassSizes[b.cls][0] * jw;
            b.l = kClassSizes[b.cls][1] * jl;
            b.h = kClassSizes[b.cls][2] * jh;
            b.yaw = rng.uniform(-M_PI, M_PI);
            double margin = b.footprint_radius() + 0.5;
            b.center = geo::Vec3(rng.uniform(roi.x_min + margin, roi.x_max - margin),
                                 rng.uniform(roi.y_min + margin, roi.y_max - margin), b.h / 2.0);
            bool overlap = false;
            for (const auto& other : scene.boxes) {
                double min_d = b.footprint_radius() + other.footprint_radius() + 0.5;
                if ((b.center - other.center).head<2>().norm() < min_d) {
                    overlap = true;
                    break;
                }
            }
            if (!overlap) {
                scene.boxes.push_back(b);
                placed = true;
            }
        }
        if (!placed) {
            std::cerr << "[cmt] warning: scene " << seed << ": placed only " << scene.boxes.size()
                      << " of " << want << " boxes\n";
            break;
        }
    }

    // surface-sampled points, density falling off with squared distance
    for (const auto& b : scene.boxes) {
        double dist = std::max(1.0, b.center.norm());
        int n = static_cast<int>(cfg.points_per_box / (dist * dist));
        n = std::clamp(n, 1, 600);
        for (int i = 0; i < n; ++i) {
            geo::Vec3 p = detail_scene::box_surface_point(b, rng);
            float intensity = static_cast<float>(rng.uniform(0.3, 1.0));
            bool drop = i > 0 && rng.uniform() < cfg.point_dropout;  // first point always kept
            if (drop || !roi.contains(p)) continue;
            scene.cloud.data.insert(scene.cloud.data.end(),
                                    {static_cast<float>(p.x()), static_cast<float>(p.y()),
                                     static_cast<float>(p.z()), intensity});
        }
    }
    for (int i = 0; i < cfg.clutter_points; ++i) {
        double x = rng.uniform(roi.x_min, roi.x_max);
        double y = rng.uniform(roi.y_min, roi.y_max);
        double z = rng.uniform(-0.05, 0.05);
        scene.cloud.data.insert(scene.cloud.data.end(),
                                {static_cast<float>(x), static_cast<float>(y),
                                 static_cast<float>(z), static_cast<float>(rng.uniform(0, 0.3))});
    }

    // rasterize: textured background, then boxes far-to-near
    std::vector<int> order(scene.boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    scene.images.resize(rig.size());
    for (size_t ci = 0; ci < rig.size(); ++ci) {
        const geo::CameraModel& cam = rig[ci];
        Image& img = scene.images[ci];
        img.height = cam.height();
        img.width = cam.width();
        img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) =
                        0.25f + 0.2f * detail_scene::texture_noise(seed, static_cast<int>(ci), y,
                                                                   x, c);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return scene.boxes[a].center.norm() > scene.boxes[b].center.norm();
        });
        for (int bi : order) {
            const GtBox& b = scene.boxes[bi];
            double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
            std::vector<detail_scene::Pixel> px;
            for (int corner = 0; corner < 8; ++corner) {
                double lx = (corner & 1 ? 0.5 : -0.5) * b.w;
                double ly = (corner & 2 ? 0.5 : -0.5) * b.l;
                double lz = (corner & 4 ? 0.5 : -0.5) * b.h;
                geo::Vec3 p = b.center + geo::Vec3(lx * cy - ly * sy, lx * sy + ly * cy, lz);
                auto proj = cam.project_unbounded(p);
                if (proj) px.push_back({proj->u_px, proj->v_px});
            }
            if (px.size() < 3) continue;
            auto hull = detail_scene::convex_hull(px);
            double dist = b.center.norm();
            float shade = static_cast<float>(1.0 / (1.0 + 0.02 * dist));
            double u_lo = img.width, u_hi = 0, v_lo = img.height, v_hi = 0;
            for (auto& p : hull) {
                u_lo = std::min(u_lo, p.u);
                u_hi = std::max(u_hi, p.u);
                v_lo = std::min(v_lo, p.v);
                v_hi = std::max(v_hi, p.v);
            }
            int x0 = std::max(0, static_cast<int>(std::floor(u_lo)));
            int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(u_hi)));
            int y0 = std::max(0, static_cast<int>(std::floor(v_lo)));
            int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(v_hi)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    if (!detail_scene::inside_hull(hull, x + 0.5, y + 0.5)) continue;
                    for (int c = 0; c < 3; ++c) {
                        float noise =
                            0.1f * detail_scene::texture_noise(seed ^ 0xabcdull,
                                                               static_cast<int>(ci), y, x, c);
                        img.at(y, x, c) = kClassColors[b.cls][c] * shade + noise;
                    }
                }
        }
    }
    return scene;
}

// ---------------------------------------------------------------------------
// Serialization: UTF-8 header + little-endian float32 binary blocks.
// ---------------------------------------------------------------------------

namespace detail_scene {

inline void write_f64(std::ostream& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
}

}  // namespace detail_scene

inline void save_scene(const Scene& scene, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write scene file: " + path);
    out << "CMTSCENE v1\n";
    out << "id " << scene.id << "\n";
    out << "classes " << scene.n_classes << "\n";
    out << "cameras " << scene.rig.size() << "\n";
    for (const auto& cam : scene.rig) {
        out << "cam ";
        detail_scene::write_f64(out, cam.fx());
        out << " ";
        detail_scene::write_f64(out, cam.fy());
        out << " ";
        detail_scene::write_f64(out, cam.cx());
        out << " ";
        detail_scene::write_f64(out, cam.cy());
        out << " " << cam.width() << " " << cam.height() << " " << cam.stride();
        const geo::Mat4& t = cam.cam_to_lidar();
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                out << " ";
                detail_scene::write_f64(out, t(i, j));
            }
        out << "\n";
    }
    out << "boxes " << scene.boxes.size() << "\n";
    for (const auto& b : scene.boxes) {
        out << "box";
        for (double v : {b.center.x(), b.center.y(), b.center.z(), b.w, b.l, b.h, b.yaw}) {
            out << " ";
            detail_scene::write_f64(out, v);
        }
        out << " " << b.cls << "\n";
    }
    out << "cloud " << scene.cloud.size() << "\n";
    if (!scene.images.empty())
        out << "image_dims " << scene.images[0].height << " " << scene.images[0].width << "\n";
    else
        out << "image_dims 0 0\n";
    out << "END_HEADER\n";
    out.write(reinterpret_cast<const char*>(scene.cloud.data.data()),
              static_cast<std::streamsize>(scene.cloud.data.size() * sizeof(float)));
    for (const auto& img : scene.images)
        out.write(reinterpret_cast<const char*>(img.rgb.data()),
                  static_cast<std::streamsize>(img.rgb.size() * sizeof(float)));
}

inline Scene load_scene(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open scene file: " + path);
    std::string line;
    std::getline(in, line);
    if (line != "CMTSCENE v1") throw std::runtime_error(path + ": bad magic/version");
    Scene scene;
    std::int64_t n_cloud = 0;
    int img_h = 0, img_w = 0;
    size_t n_cams = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "END_HEADER") break;
        if (tag == "id") {
            ls >> scene.id;
        } else if (tag == "classes") {
            ls >> scene.n_classes;
        } else if (tag == "cameras") {
            ls >> n_cams;
        } else if (tag == "cam") {
            double fx, fy, cx, cy;
            int w, h, stride;
            ls >> fx >> fy >> cx >> cy >> w >> h >> stride;
            geo::Mat4 t;
            // %.17g round-trips doubles exactly, so the parsed transform is
            // bit-identical to the saved one.
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) ls >> t(i, j);
            scene.rig.emplace_back(fx, fy, cx, cy, w, h, stride, t);
        } else if (tag == "box") {
            GtBox b;
            ls >> b.center.x() >> b.center.y() >> b.center.z() >> b.w >> b.l >> b.h >> b.yaw >>
                b.cls;
            scene.boxes.push_back(b);
        } else if (tag == "boxes" || tag == "") {
            // count line; boxes parsed individually
        } else if (tag == "cloud") {
            ls >> n_cloud;
        } else if (tag == "image_dims") {
            ls >> img_h >> img_w;
        } else {
            throw std::runtime_error(path + ": unknown header tag '" + tag + "'");
        }
    }
    if (scene.rig.size() != n_cams) throw std::runtime_error(path + ": camera count mismatch");
    scene.cloud.data.resize(static_cast<size_t>(n_cloud) * 4);
    in.read(reinterpret_cast<char*>(scene.cloud.data.data()),
            static_cast<std::streamsize>(scene.cloud.data.size() * sizeof(float)));
    scene.images.resize(n_cams);
    for (auto& img : scene.images) {
        img.height = img_h;
        img.width = img_w;
        img.rgb.resize(static_cast<size_t>(img_h) * img_w * 3);
        in.read(reinterpret_cast<char*>(img.rgb.data()),
                static_cast<std::streamsize>(img.rgb.size() * sizeof(float)));
    }
    if (!in) throw std::runtime_error(path + ": truncated binary payload");
    return scene;
}

}  // namespace cmt
