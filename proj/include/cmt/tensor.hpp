#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmt/rng.hpp"

namespace cmt {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out + "]";
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;
    bool visited_mark = false;  // scratch for backward traversal

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rows() const {
        std::int64_t r = 1;
        for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
        return static_cast<int>(r);
    }
    int cols() const { return shape.empty() ? 1 : shape.back(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

inline std::uint64_t next_tensor_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

/// Handle to a node in the gradient tape. Copies share the node.
template <class T>
class Tensor {
public:
    using Node = TensorNode<T>;
    using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<EigenMat>;
    using CMap = Eigen::Map<const EigenMat>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(static_cast<size_t>(numel(t.n_->shape)), value);
        t.n_->requires_grad = requires_grad;
        t.n_->id = next_tensor_id();
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != numel(shape))
            throw std::invalid_argument("Tensor::from: data size does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(values);
        t.n_->requires_grad = requires_grad;
        t.n_->id = next_tensor_id();
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return n_; }

    const Shape& shape() const { return n_->shape; }
    std::int64_t size() const { return n_->size(); }
    int rows() const { return n_->rows(); }
    int cols() const { return n_->cols(); }
    bool requires_grad() const { return n_->requires_grad; }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    T item() const {
        if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
        return n_->data[0];
    }
    T at(std::int64_t i) const { return n_->data[static_cast<size_t>(i)]; }
    T at(int r, int c) const { return n_->data[static_cast<size_t>(r) * cols() + c]; }

    /// Gradient values; zeros if backward never reached this node.
    std::vector<T> grad() const {
        if (n_->grad.empty()) return std::vector<T>(n_->data.size(), T(0));
        return n_->grad;
    }
    std::vector<T>& grad_ref() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }
    /// True if backward never reached this node since the last zero_grad().
    bool grad_empty() const { return n_->grad.empty(); }

    Map mat() { return Map(n_->data.data(), rows(), cols()); }
    CMap mat() const { return CMap(n_->data.data(), rows(), cols()); }
    Map grad_mat() {
        n_->ensure_grad();
        return Map(n_->grad.data(), rows(), cols());
    }

    /// Run reverse-mode accumulation from this scalar.
    void backward() const {
        if (size() != 1) throw std::logic_error("backward(): root must be scalar");
        // Reachable set, then reverse creation order; creation order is a
        // valid topological order of the tape.
        std::vector<Node*> order;
        std::vector<std::shared_ptr<Node>> keep;
        collect(n_, order, keep);
        std::sort(order.begin(), order.end(),
                  [](const Node* a, const Node* b) { return a->id > b->id; });
        n_->ensure_grad();
        n_->grad[0] = T(1);
        for (Node* node : order) {
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }

private:
    static void collect(const std::shared_ptr<Node>& node, std::vector<Node*>& order,
                        std::vector<std::shared_ptr<Node>>& keep) {
        // Iterative DFS; graphs can be deep (per-layer chains).
        std::vector<std::shared_ptr<Node>> stack{node};
        while (!stack.empty()) {
            auto cur = stack.back();
            stack.pop_back();
            if (cur->visited_mark) continue;
            cur->visited_mark = true;
            order.push_back(cur.get());
            keep.push_back(cur);
            for (auto& p : cur->parents) stack.push_back(p);
        }
        for (auto& n : keep) n->visited_mark = false;
    }

    std::shared_ptr<Node> n_;
};

}  // namespace cmt
