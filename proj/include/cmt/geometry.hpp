#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <vector>

namespace cmt::geo {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

/// Axis-aligned detection region in the LiDAR frame, meters.
struct RoI {
    double x_min, x_max, y_min, y_max, z_min, z_max;

    RoI(double xmin, double xmax, double ymin, double ymax, double zmin, double zmax)
        : x_min(xmin), x_max(xmax), y_min(ymin), y_max(ymax), z_min(zmin), z_max(zmax) {
        if (!(x_min < x_max && y_min < y_max && z_min < z_max))
            throw std::invalid_argument("RoI: min must be < max per axis");
    }

    double x_extent() const { return x_max - x_min; }
    double y_extent() const { return y_max - y_min; }
    double z_extent() const { return z_max - z_min; }
    bool contains(const Vec3& p) const {
        return p.x() >= x_min && p.x() <= x_max && p.y() >= y_min && p.y() <= y_max &&
               p.z() >= z_min && p.z() <= z_max;
    }
};

/// Pinhole camera with homogeneous 4x4 intrinsics and a rigid camera->LiDAR
/// extrinsic. Camera frame: x right, y down, z forward (depth).
class CameraModel {
public:
    CameraModel(double fx, double fy, double cx, double cy, int width, int height,
                int feature_stride, const Mat4& cam_to_lidar)
        : width_(width), height_(height), stride_(feature_stride), t_(cam_to_lidar) {
        if (fx == 0.0 || fy == 0.0) throw std::invalid_argument("CameraModel: singular intrinsics");
        if (width % feature_stride != 0 || height % feature_stride != 0)
            throw std::invalid_argument("CameraModel: feature_stride must divide image size");
        Eigen::Matrix3d r = t_.topLeftCorner<3, 3>();
        if (((r.transpose() * r) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
            std::abs(r.determinant() - 1.0) > 1e-9)
            throw std::invalid_argument("CameraModel: extrinsic top-left 3x3 is not a rotation");
        k_ = Mat4::Identity();
        k_(0, 0) = fx;
        k_(1, 1) = fy;
        k_(0, 2) = cx;
        k_(1, 2) = cy;
        k_inv_ = Mat4::Identity();
        k_inv_(0, 0) = 1.0 / fx;
        k_inv_(1, 1) = 1.0 / fy;
        k_inv_(0, 2) = -cx / fx;
        k_inv_(1, 2) = -cy / fy;
        t_inv_ = Mat4::Identity();
        t_inv_.topLeftCorner<3, 3>() = r.transpose();
        t_inv_.topRightCorner<3, 1>() = -r.transpose() * t_.topRightCorner<3, 1>();
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int stride() const { return stride_; }
    int grid_w() const { return width_ / stride_; }
    int grid_h() const { return height_ / stride_; }
    double fx() const { return k_(0, 0); }
    double fy() const { return k_(1, 1); }
    double cx() const { return k_(0, 2); }
    double cy() const { return k_(1, 2); }
    const Mat4& intrinsics() const { return k_; }
    const Mat4& cam_to_lidar() const { return t_; }

    /// Frustum point at pixel coordinates and depth: (u*d, v*d, d, 1).
    static Vec4 frustum_point(double u_px, double v_px, double depth) {
        return Vec4(u_px * depth, v_px * depth, depth, 1.0);
    }

    Vec3 frustum_to_lidar(const Vec4& p_frustum) const {
        if (p_frustum.z() <= 0.0)
            throw std::domain_error("frustum_to_lidar: depth must be positive");
        Vec4 p = t_ * (k_inv_ * p_frustum);
        return p.head<3>() / p.w();
    }

    struct Projection {
        double u_px, v_px, depth;
    };

    /// Projects a LiDAR-frame point; nullopt when behind the camera plane
    /// (depth <= 1e-3 m) or outside the image bounds.
    std::optional<Projection> project(const Vec3& p_world) const {
        Vec4 cam = t_inv_ * Vec4(p_world.x(), p_world.y(), p_world.z(), 1.0);
        double depth = cam.z();
        if (depth <= kDepthEps) return std::nullopt;
        Vec4 px = k_ * cam;
        double u = px.x() / depth;
        double v = px.y() / depth;
        if (u < 0.0 || u >= width_ || v < 0.0 || v >= height_) return std::nullopt;
        return Projection{u, v, depth};
    }

    /// Like project(), but without the image-bounds test (rasterization needs
    /// off-screen corner positions).
    std::optional<Projection> project_unbounded(const Vec3& p_world) const {
        Vec4 cam = t_inv_ * Vec4(p_world.x(), p_world.y(), p_world.z(), 1.0);
        double depth = cam.z();
        if (depth <= kDepthEps) return std::nullopt;
        Vec4 px = k_ * cam;
        return Projection{px.x() / depth, px.y() / depth, depth};
    }

    static constexpr double kDepthEps = 1e-3;

private:
    int width_, height_, stride_;
    Mat4 k_, k_inv_, t_, t_inv_;
};

using CameraRig = std::vector<CameraModel>;

/// BEV lattice over the RoI footprint.
struct BevGridSpec {
    int n_u, n_v;
    double u_d, v_d;  // cell size, meters
    std::vector<double> heights{0.0};

    static BevGridSpec for_roi(const RoI& roi, int n_u, int n_v,
                               std::vector<double> heights = {0.0}) {
        BevGridSpec s;
        s.n_u = n_u;
        s.n_v = n_v;
        s.u_d = roi.x_extent() / n_u;
        s.v_d = roi.y_extent() / n_v;
        s.heights = std::move(heights);
        return s;
    }
};

/// Linearly spaced candidate depths, endpoints included.
inline std::vector<double> depth_samples(int d, double d_min, double d_max) {
    if (d < 1 || d_min <= 0.0 || d_max <= d_min)
        throw std::invalid_argument("depth_samples: need d >= 1 and 0 < d_min < d_max");
    std::vector<double> out(d);
    if (d == 1) {
        out[0] = d_min;
        return out;
    }
    for (int k = 0; k < d; ++k) out[k] = d_min + (d_max - d_min) * k / (d - 1);
    return out;
}

/// Frustum points for a feature cell, using the cell-center (+0.5) pixel
/// convention.
inline std::vector<Vec4> frustum_points(const CameraModel& cam, int u_cell, int v_cell,
                                        const std::vector<double>& depths) {
    double u_px = (u_cell + 0.5) * cam.stride();
    double v_px = (v_cell + 0.5) * cam.stride();
    std::vector<Vec4> out;
    out.reserve(depths.size());
    double prev = 0.0;
    for (double d : depths) {
        if (d <= 0.0 || d <= prev)
            throw std::domain_error("frustum_points: depths must be positive and increasing");
        prev = d;
        out.push_back(CameraModel::frustum_point(u_px, v_px, d));
    }
    return out;
}

/// Cell-center world coordinate; the grid tiles the RoI footprint.
inline Vec3 bev_cell_to_world(const BevGridSpec& spec, const RoI& roi, int u, int v, int k) {
    if (u < 0 || u >= spec.n_u || v < 0 || v >= spec.n_v || k < 0 ||
        k >= static_cast<int>(spec.heights.size()))
        throw std::out_of_range("bev_cell_to_world: index out of range");
    return Vec3(roi.x_min + (u + 0.5) * spec.u_d, roi.y_min + (v + 0.5) * spec.v_d,
                spec.heights[k]);
}

/// Affine map from the unit cube onto the RoI box.
inline Vec3 denormalize_anchor(const Vec3& a, const RoI& roi) {
    for (int i = 0; i < 3; ++i)
        if (a[i] < 0.0 || a[i] > 1.0)
            throw std::domain_error("denormalize_anchor: component outside [0,1]");
    return Vec3(a.x() * roi.x_extent() + roi.x_min, a.y() * roi.y_extent() + roi.y_min,
                a.z() * roi.z_extent() + roi.z_min);
}

inline std::vector<Vec3> denormalize_anchors(const std::vector<Vec3>& anchors, const RoI& roi) {
    std::vector<Vec3> out;
    out.reserve(anchors.size());
    for (const auto& a : anchors) out.push_back(denormalize_anchor(a, roi));
    return out;
}

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

/// Inverse of the anchor map on x,y, clamped to [0,1].
inline Eigen::Vector2d world_to_bev_norm(const Vec3& p, const RoI& roi) {
    return Eigen::Vector2d(clamp01((p.x() - roi.x_min) / roi.x_extent()),
                           clamp01((p.y() - roi.y_min) / roi.y_extent()));
}

/// Full 3D normalization into [0,1]^3, clamped (used for CEM inputs).
inline Vec3 normalize_point(const Vec3& p, const RoI& roi) {
    return Vec3(clamp01((p.x() - roi.x_min) / roi.x_extent()),
                clamp01((p.y() - roi.y_min) / roi.y_extent()),
                clamp01((p.z() - roi.z_min) / roi.z_extent()));
}

}  // namespace cmt::geo
