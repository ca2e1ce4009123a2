#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "cmt/geometry.hpp"

namespace cmt {

/// Flat configuration: every knob is a `key = value` line. Paper-reported
/// hyperparameters are the defaults; desk-scale runs override via file or
/// CLI.
struct Config {
    // model
    int d_model = 256;
    int n_heads = 8;
    int mlp_hidden = 256;
    int n_layers = 6;
    int n_queries = 900;
    int classes = 3;
    int learnable_anchors = 1;
    // denoising
    int dn_enable = 1;
    int dn_groups = 3;
    double dn_noise_scale = 1.0;
    int dn_negatives = 1;
    // RoI
    double roi_x_min = -54.0, roi_x_max = 54.0;
    double roi_y_min = -54.0, roi_y_max = 54.0;
    double roi_z_min = -5.0, roi_z_max = 3.0;
    // grids and cameras
    int bev_cells = 180;
    int img_width = 64, img_height = 64;
    int img_stride = 8;
    int n_cameras = 6;
    double cam_fov_deg = 70.0;
    double cam_height = 1.6;
    int depth_bins = 16;
    double depth_min = 1.0, depth_max = 60.0;
    // encoders
    int pillar_hidden = 64;
    int mixer_channels = 64;
    // sin/cos octaves applied to normalized coordinates before the psi MLPs;
    // 0 feeds raw coordinates. The expansion gives position embeddings a
    // dot-product locality structure that raw 3-vectors lack.
    int pe_freqs = 4;
    // loss
    double w_cls = 2.0;   // omega_1
    double w_reg = 0.25;  // omega_2
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    // training
    double lr = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999;
    int epochs = 10;
    int batch_size = 1;
    double eta1 = 0.0;  // camera-only probability
    double eta2 = 0.0;  // lidar-only probability
    int seed = 1;
    int ckpt_interval = 0;  // epochs between interval checkpoints; 0 = final only
    // scene generation
    int min_boxes = 1, max_boxes = 10;
    int clutter_points = 512;
    double points_per_box = 60000.0;  // surface samples scaled by 1/dist^2
    double point_dropout = 0.1;
    // evaluation
    double score_thresh = 0.05;
    int threads = 1;

    geo::RoI roi() const {
        return geo::RoI(roi_x_min, roi_x_max, roi_y_min, roi_y_max, roi_z_min, roi_z_max);
    }

    using FieldPtr = std::variant<int Config::*, double Config::*>;
    static const std::map<std::string, FieldPtr>& fields() {
        static const std::map<std::string, FieldPtr> f = {
            {"d_model", &Config::d_model},
            {"n_heads", &Config::n_heads},
            {"mlp_hidden", &Config::mlp_hidden},
            {"n_layers", &Config::n_layers},
            {"n_queries", &Config::n_queries},
            {"classes", &Config::classes},
            {"learnable_anchors", &Config::learnable_anchors},
            {"dn_enable", &Config::dn_enable},
            {"dn_groups", &Config::dn_groups},
            {"dn_noise_scale", &Config::dn_noise_scale},
            {"dn_negatives", &Config::dn_negatives},
            {"roi_x_min", &Config::roi_x_min},
            {"roi_x_max", &Config::roi_x_max},
            {"roi_y_min", &Config::roi_y_min},
            {"roi_y_max", &Config::roi_y_max},
            {"roi_z_min", &Config::roi_z_min},
            {"roi_z_max", &Config::roi_z_max},
            {"bev_cells", &Config::bev_cells},
            {"img_width", &Config::img_width},
            {"img_height", &Config::img_height},
            {"img_stride", &Config::img_stride},
            {"n_cameras", &Config::n_cameras},
            {"cam_fov_deg", &Config::cam_fov_deg},
            {"cam_height", &Config::cam_height},
            {"depth_bins", &Config::depth_bins},
            {"depth_min", &Config::depth_min},
            {"depth_max", &Config::depth_max},
            {"pillar_hidden", &Config::pillar_hidden},
            {"mixer_channels", &Config::mixer_channels},
            {"pe_freqs", &Config::pe_freqs},
            {"w_cls", &Config::w_cls},
            {"w_reg", &Config::w_reg},
            {"focal_alpha", &Config::focal_alpha},
            {"focal_gamma", &Config::focal_gamma},
            {"lr", &Config::lr},
            {"weight_decay", &Config::weight_decay},
            {"beta1", &Config::beta1},
            {"beta2", &Config::beta2},
            {"epochs", &Config::epochs},
            {"batch_size", &Config::batch_size},
            {"eta1", &Config::eta1},
            {"eta2", &Config::eta2},
            {"seed", &Config::seed},
            {"ckpt_interval", &Config::ckpt_interval},
            {"min_boxes", &Config::min_boxes},
            {"max_boxes", &Config::max_boxes},
            {"clutter_points", &Config::clutter_points},
            {"points_per_box", &Config::points_per_box},
            {"point_dropout", &Config::point_dropout},
            {"score_thresh", &Config::score_thresh},
            {"threads", &Config::threads},
        };
        return f;
    }

    void set(const std::string& key, const std::string& value) {
        auto it = fields().find(key);
        if (it == fields().end()) throw std::invalid_argument("unknown config key: " + key);
        std::visit(
            [&](auto ptr) {
                std::istringstream in(value);
                in >> (this->*ptr);
                if (in.fail()) throw std::invalid_argument("bad value for " + key + ": " + value);
            },
            it->second);
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (line.find_first_not_of(" \t\r") != std::string::npos)
                    throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                             ": expected 'key = value'");
                continue;
            }
            auto trim = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        validate();
    }

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("config: lr must be > 0");
        if (eta1 < 0 || eta2 < 0 || eta1 + eta2 > 1.0)
            throw std::invalid_argument("config: need eta1, eta2 >= 0 and eta1 + eta2 <= 1");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("config: d_model must be divisible by n_heads");
        if (img_width % img_stride != 0 || img_height % img_stride != 0)
            throw std::invalid_argument("config: img_stride must divide image size");
        roi();  // min < max checks
    }

    /// Deterministic dump used for run manifests.
    std::string dump() const {
        std::ostringstream out;
        out.precision(17);
        for (const auto& [key, ptr] : fields()) {
            out << key << " = ";
            std::visit([&](auto p) { out << this->*p; }, ptr);
            out << "\n";
        }
        return out.str();
    }
};

}  // namespace cmt
