#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "cmt/checkpoint.hpp"

namespace cmt {

/// Camera-only with probability eta1, LiDAR-only with eta2, both otherwise.
inline ModalityMask sample_modality_mask(double eta1, double eta2, Rng& rng) {
    if (eta1 < 0 || eta2 < 0 || eta1 + eta2 > 1.0)
        throw std::invalid_argument("sample_modality_mask: need eta1, eta2 >= 0, sum <= 1");
    double u = rng.uniform();
    if (u < eta1) return ModalityMask{true, false};
    if (u < eta1 + eta2) return ModalityMask{false, true};
    return ModalityMask{true, true};
}

// ---------------------------------------------------------------------------
// Dataset directory: scene_NNNNN.cmt files plus index.txt listing train and
// val files ("train <file>" / "val <file>" lines).
// ---------------------------------------------------------------------------

struct DatasetPaths {
    std::vector<std::filesystem::path> train, val;
};

inline void write_dataset(const std::filesystem::path& dir, int n_train, int n_val,
                          const Config& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    geo::CameraRig rig = make_rig(cfg);
    std::ofstream index(dir / "index.txt", std::ios::binary);
    if (!index) throw std::runtime_error("write_dataset: cannot write index in " + dir.string());
    auto emit = [&](const char* split, int i, std::uint64_t seed) {
        char file[32];
        std::snprintf(file, sizeof(file), "scene_%05d.cmt", i);
        save_scene(generate_scene(seed, cfg, rig), (dir / file).string());
        index << split << " " << file << "\n";
    };
    // disjoint seed ranges so the val split never repeats a training scene
    const std::uint64_t base = static_cast<std::uint64_t>(cfg.seed) << 20;
    for (int i = 0; i < n_train; ++i) emit("train", i, base + i);
    for (int i = 0; i < n_val; ++i) emit("val", n_train + i, base + (1u << 19) + i);
}

inline DatasetPaths read_dataset_index(const std::filesystem::path& dir) {
    std::ifstream index(dir / "index.txt");
    if (!index) throw std::runtime_error("dataset index not found in " + dir.string());
    DatasetPaths out;
    std::string split, file;
    while (index >> split >> file) {
        if (split == "train") {
            out.train.push_back(dir / file);
        } else if (split == "val") {
            out.val.push_back(dir / file);
        } else {
            throw std::runtime_error("dataset index: unknown split '" + split + "'");
        }
    }
    return out;
}

inline std::vector<Scene> load_scenes(const std::vector<std::filesystem::path>& paths) {
    std::vector<Scene> out;
    out.reserve(paths.size());
    for (const auto& p : paths) out.push_back(load_scene(p.string()));
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline constexpr const char* kTrainLogHeader = "step,cls,reg,dn_cls,dn_reg,total";

template <class T>
struct StepStats {
    int step;
    double cls, reg, dn_cls, dn_reg, total;
};

/// One optimizer step over `batch` scenes under a shared modality mask.
/// Gradients are accumulated scene by scene on the mean loss. A non-finite
/// loss aborts with the offending scene id.
template <class T>
StepStats<T> train_step(CmtModel<T>& model, AdamW<T>& opt,
                        const std::vector<const Scene*>& batch, const ModalityMask& mask,
                        Rng& dn_rng, int step) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    model.params().zero_grads();
    StepStats<T> stats{step, 0, 0, 0, 0, 0};
    const T inv_b = static_cast<T>(1.0 / batch.size());
    for (const Scene* scene : batch) {
        auto fwd = model.forward(*scene, mask, {}, model.config().dn_enable != 0, &dn_rng);
        LossBreakdown<T> lb = model.loss(fwd, scene->boxes);
        if (!std::isfinite(lb.value()))
            throw std::runtime_error("train_step: non-finite loss at step " +
                                     std::to_string(step) + ", scene id " +
                                     std::to_string(scene->id));
        scale(lb.total, inv_b).backward();
        stats.cls += lb.cls / batch.size();
        stats.reg += lb.reg / batch.size();
        stats.dn_cls += lb.dn_cls / batch.size();
        stats.dn_reg += lb.dn_reg / batch.size();
        stats.total += lb.value() / batch.size();
    }
    opt.step();
    return stats;
}

/// Epoch-based loop: seeded shuffle visits every scene exactly once per
/// epoch; one modality-mask draw per batch. Writes one CSV row per step to
/// `log` when given; `on_step` runs after each optimizer update.
template <class T>
void train_model(CmtModel<T>& model, AdamW<T>& opt, const std::vector<Scene>& scenes,
                 std::ostream* log = nullptr,
                 const std::function<void(const StepStats<T>&)>& on_step = {}) {
    const Config& cfg = model.config();
    if (scenes.empty()) throw std::invalid_argument("train_model: no training scenes");
    Rng root(static_cast<std::uint64_t>(cfg.seed));
    Rng shuffle_rng = root.fork(0x5151);
    Rng mask_rng = root.fork(0x6161);
    Rng dn_rng = root.fork(0x7171);
    if (log) *log << kTrainLogHeader << "\n";
    int step = 0;
    std::vector<int> order(scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) order[i] = static_cast<int>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        cmt::shuffle(order.begin(), order.end(), shuffle_rng);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const Scene*> batch;
            for (size_t i = start; i < order.size() && i < start + cfg.batch_size; ++i)
                batch.push_back(&scenes[order[i]]);
            ModalityMask mask = sample_modality_mask(cfg.eta1, cfg.eta2, mask_rng);
            StepStats<T> stats = train_step(model, opt, batch, mask, dn_rng, step);
            if (log) {
                std::ostringstream row;
                row.precision(9);
                row << stats.step << ',' << stats.cls << ',' << stats.reg << ',' << stats.dn_cls
                    << ',' << stats.dn_reg << ',' << stats.total;
                *log << row.str() << "\n";
            }
            if (on_step) on_step(stats);
            ++step;
        }
    }
    if (log) log->flush();
}

}  // namespace cmt
