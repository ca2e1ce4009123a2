#pragma once

#include <map>
#include <string>

#include "cmt/ops.hpp"

namespace cmt {

/// Ordered name -> parameter map. Iteration order is the serialization and
/// optimizer-update order, so it must stay deterministic.
template <class T>
struct ParamStore {
    std::map<std::string, Tensor<T>> params;

    Tensor<T> create(const std::string& name, Shape shape, Rng& rng, int fan_in) {
        T bound = fan_in > 0 ? T(1) / std::sqrt(static_cast<T>(fan_in)) : T(0);
        Tensor<T> t = Tensor<T>::uniform(std::move(shape), rng, -bound, bound, true);
        return insert(name, t);
    }

    Tensor<T> create_zeros(const std::string& name, Shape shape) {
        return insert(name, Tensor<T>::zeros(std::move(shape), true));
    }

    Tensor<T> create_filled(const std::string& name, Shape shape, T value) {
        return insert(name, Tensor<T>::filled(std::move(shape), value, true));
    }

    Tensor<T> insert(const std::string& name, Tensor<T> t) {
        auto [it, ok] = params.emplace(name, t);
        if (!ok) throw std::logic_error("duplicate parameter name: " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [name, p] : params) p.zero_grad();
    }
};

template <class T>
class Linear {
public:
    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& prefix, int in, int out, Rng& rng)
        : weight_(store.create(prefix + ".weight", {in, out}, rng, in)),
          bias_(store.create(prefix + ".bias", {out}, rng, in)) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return add_rowvec(matmul(x, weight_), bias_);
    }

    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

private:
    Tensor<T> weight_, bias_;
};

/// MLP with ReLU between layers (none after the last).
template <class T>
class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore<T>& store, const std::string& prefix, const std::vector<int>& dims, Rng& rng) {
        if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least in/out dims");
        for (size_t i = 0; i + 1 < dims.size(); ++i)
            layers_.emplace_back(store, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1],
                                 rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = x;
        for (size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(h);
            if (i + 1 < layers_.size()) h = relu(h);
        }
        return h;
    }

private:
    std::vector<Linear<T>> layers_;
};

template <class T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& prefix, int dim)
        : gamma_(store.create_filled(prefix + ".gamma", {dim}, T(1))),
          beta_(store.create_zeros(prefix + ".beta", {dim})) {}

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

private:
    Tensor<T> gamma_, beta_;
};

/// Standard multi-head scaled dot-product attention. `mask` (n_q x n_k,
/// true = forbidden) applies to every head.
template <class T>
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& store, const std::string& prefix, int dim, int heads,
                       Rng& rng)
        : dim_(dim),
          heads_(heads),
          wq_(store, prefix + ".wq", dim, dim, rng),
          wk_(store, prefix + ".wk", dim, dim, rng),
          wv_(store, prefix + ".wv", dim, dim, rng),
          wo_(store, prefix + ".wo", dim, dim, rng) {
        if (dim % heads != 0) throw std::invalid_argument("attention dim not divisible by heads");
        // tied query/key initialization: logits start as a similarity in a
        // shared random projection, so positionally-close query/key
        // embeddings attend to each other from the first step instead of
        // having to rediscover locality through two independent projections
        store.params.at(prefix + ".wk.weight").data() =
            store.params.at(prefix + ".wq.weight").data();
        store.params.at(prefix + ".wk.bias").data() = store.params.at(prefix + ".wq.bias").data();
    }

    Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                      const std::vector<std::uint8_t>* mask = nullptr) const {
        if (q.cols() != dim_ || k.cols() != dim_ || v.cols() != dim_)
            throw std::invalid_argument("attention: feature dim mismatch");
        if (k.rows() != v.rows()) throw std::invalid_argument("attention: key/value count mismatch");
        Tensor<T> qp = wq_.forward(q);
        Tensor<T> kp = wk_.forward(k);
        Tensor<T> vp = wv_.forward(v);
        const int dh = dim_ / heads_;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(heads_);
        for (int h = 0; h < heads_; ++h) {
            Tensor<T> qh = slice_cols(qp, h * dh, dh);
            Tensor<T> kh = slice_cols(kp, h * dh, dh);
            Tensor<T> vh = slice_cols(vp, h * dh, dh);
            Tensor<T> scores = scale(matmul(qh, kh, false, true), inv_sqrt);
            Tensor<T> attn = softmax_rows(scores, mask);
            head_outs.push_back(matmul(attn, vh));
        }
        return wo_.forward(concat_cols(head_outs));
    }

    /// Post-softmax attention weights averaged over heads (for inspection).
    std::vector<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k,
                                     const std::vector<std::uint8_t>* mask = nullptr) const {
        Tensor<T> qp = wq_.forward(q);
        Tensor<T> kp = wk_.forward(k);
        const int dh = dim_ / heads_;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<T> acc(static_cast<size_t>(q.rows()) * k.rows(), T(0));
        for (int h = 0; h < heads_; ++h) {
            Tensor<T> qh = slice_cols(qp, h * dh, dh);
            Tensor<T> kh = slice_cols(kp, h * dh, dh);
            Tensor<T> attn = softmax_rows(scale(matmul(qh, kh, false, true), inv_sqrt), mask);
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += attn.data()[i] / heads_;
        }
        return acc;
    }

private:
    int dim_ = 0, heads_ = 0;
    Linear<T> wq_, wk_, wv_, wo_;
};

}  // namespace cmt
