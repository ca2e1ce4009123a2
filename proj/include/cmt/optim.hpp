#pragma once

#include "cmt/nn.hpp"

namespace cmt {

/// Adam with decoupled weight decay, constant learning rate. Parameters
/// whose gradient was never touched this step (e.g. a masked-out encoder
/// branch) are skipped entirely, moments included.
template <class T>
class AdamW {
public:
    AdamW(ParamStore<T>& store, const Config& cfg) : store_(store), cfg_(cfg) {}

    std::int64_t step_count() const { return t_; }

    /// Serialized alongside parameters so training resumes bit-exactly.
    std::map<std::string, std::vector<T>>& moments_m() { return m_; }
    std::map<std::string, std::vector<T>>& moments_v() { return v_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    void step() {
        ++t_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (auto& [name, p] : store_.params) {
            if (p.grad_empty()) continue;
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) m.assign(p.size(), T(0));
            if (v.empty()) v.assign(p.size(), T(0));
            T* data = p.data().data();
            const T* g = p.grad_ref().data();
            for (std::int64_t i = 0; i < p.size(); ++i) {
                double gi = g[i];
                double mi = b1 * m[i] + (1.0 - b1) * gi;
                double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + kEps) +
                                cfg_.weight_decay * data[i];
                data[i] = static_cast<T>(data[i] - cfg_.lr * update);
            }
        }
    }

private:
    static constexpr double kEps = 1e-8;
    ParamStore<T>& store_;
    Config cfg_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace cmt
