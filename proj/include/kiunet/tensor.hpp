#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kiunet/errors.hpp"

namespace kiunet {

enum class Precision { single, double_ };

template <typename T>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors hold float or double");
    return std::is_same_v<T, float> ? Precision::single : Precision::double_;
}

/// (batch, channels, rows, cols).
struct Shape {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    constexpr std::size_t numel() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }
    constexpr bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }
};

enum class OpKind {
    leaf,
    conv2d,
    maxpool2x2,
    avgpool2x2,
    resize_bilinear,
    relu,
    sigmoid,
    add,
    weighted_sum,
    bce_loss,
    concat_batch,
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Storage;

/// Recorded operation. `backward` receives the upstream gradient of the node's
/// output and one destination buffer per parent (null when that parent needs no
/// gradient); it must accumulate, never overwrite.
template <typename T>
struct Node {
    using BackwardFn =
        std::function<void(std::span<const T> upstream, std::span<std::vector<T>*> parent_grads)>;

    OpKind kind = OpKind::leaf;
    std::vector<std::shared_ptr<Storage<T>>> parents;
    BackwardFn backward;
};

template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    std::shared_ptr<Node<T>> grad_fn;
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// While alive, operations on the current thread do not record graph nodes.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Dense 4-D tensor with an optional gradient, shared-handle semantics.
///
/// Copies alias the same storage. Values are fixed once an operation has
/// produced them; only leaf tensors (parameters, inputs) may be written through
/// `mutable_values`, which is how optimizers update parameters in place.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;

    Tensor() : Tensor(Shape{}) {}

    explicit Tensor(Shape shape, T fill = T(0)) : storage_(std::make_shared<detail::Storage<T>>()) {
        check_dims(shape);
        storage_->shape = shape;
        storage_->values.assign(shape.numel(), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<detail::Storage<T>>()) {
        check_dims(shape);
        if (values.size() != shape.numel()) {
            throw ShapeError("tensor of shape " + shape.str() + " needs " +
                             std::to_string(shape.numel()) + " values, got " +
                             std::to_string(values.size()));
        }
        storage_->shape = shape;
        storage_->values = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
    static Tensor ones(Shape shape) { return Tensor(shape, T(1)); }
    static Tensor scalar(T value) { return Tensor(Shape{}, value); }

    /// Builds the output of a recorded operation.
    static Tensor from_op(Shape shape, std::vector<T> values,
                          std::shared_ptr<detail::Node<T>> node) {
        Tensor out(shape, std::move(values));
        if (node) {
            out.storage_->requires_grad = true;
            out.storage_->grad_fn = std::move(node);
        }
        return out;
    }

    const Shape& shape() const { return storage_->shape; }
    std::size_t numel() const { return storage_->values.size(); }
    static constexpr Precision precision() { return precision_of<T>(); }

    std::span<const T> values() const { return storage_->values; }

    std::span<T> mutable_values() {
        if (!is_leaf()) {
            throw Error("mutable_values() is only allowed on leaf tensors");
        }
        return storage_->values;
    }

    T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        const Shape& s = shape();
        return storage_->values[((n * s.c + c) * s.h + y) * s.w + x];
    }
    T item() const {
        if (numel() != 1) {
            throw ShapeError("item() on tensor of shape " + shape().str());
        }
        return storage_->values[0];
    }

    bool requires_grad() const { return storage_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        if (!is_leaf()) {
            throw Error("requires_grad can only be toggled on leaf tensors");
        }
        storage_->requires_grad = on;
        return *this;
    }

    bool is_leaf() const { return storage_->grad_fn == nullptr; }
    OpKind op_kind() const { return is_leaf() ? OpKind::leaf : storage_->grad_fn->kind; }

    bool has_grad() const { return !storage_->grad.empty(); }
    std::span<const T> grad() const { return storage_->grad; }
    void zero_grad() { storage_->grad.clear(); }

    /// A new leaf sharing no storage with this tensor.
    Tensor detach() const { return Tensor(shape(), storage_->values); }

    /// Populates `grad` of every requires_grad leaf reachable from this scalar.
    void backward() const {
        if (numel() != 1) {
            throw ShapeError("backward() needs a scalar loss, got shape " + shape().str());
        }
        run_backward(std::vector<T>{T(1)});
    }

    /// Backward with an explicit upstream gradient for a non-scalar output.
    void backward(std::span<const T> seed) const {
        if (seed.size() != numel()) {
            throw ShapeError("backward seed length does not match tensor " + shape().str());
        }
        run_backward(std::vector<T>(seed.begin(), seed.end()));
    }

    const std::shared_ptr<detail::Storage<T>>& storage() const { return storage_; }
    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

private:
    static void check_dims(const Shape& s) {
        if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
            throw ShapeError("tensor dimensions must be >= 1, got " + s.str());
        }
    }

    void run_backward(std::vector<T> seed) const {
        using detail::Storage;
        if (!requires_grad()) {
            throw Error("backward() on a tensor that does not require grad");
        }

        // Post-order DFS gives a topological order with parents before children.
        std::vector<Storage<T>*> order;
        std::unordered_set<Storage<T>*> visited;
        std::vector<std::pair<Storage<T>*, std::size_t>> stack{{storage_.get(), 0}};
        visited.insert(storage_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            const auto* fn = node->grad_fn.get();
            if (fn && next < fn->parents.size()) {
                Storage<T>* parent = fn->parents[next++].get();
                if (parent->requires_grad && !visited.contains(parent)) {
                    visited.insert(parent);
                    stack.emplace_back(parent, 0);
                }
                continue;
            }
            order.push_back(node);
            stack.pop_back();
        }

        std::unordered_map<Storage<T>*, std::vector<T>> pending;
        pending.emplace(storage_.get(), std::move(seed));
        auto buffer_for = [&](Storage<T>* s) -> std::vector<T>* {
            if (!s->requires_grad) {
                return nullptr;
            }
            std::vector<T>& buf = s->grad_fn ? pending[s] : s->grad;
            if (buf.empty()) {
                buf.assign(s->values.size(), T(0));
            }
            return &buf;
        };

        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Storage<T>* s = *it;
            if (!s->grad_fn) {
                if (s == storage_.get()) {
                    auto& g = s->grad;
                    const auto& seed_buf = pending[s];
                    if (g.empty()) {
                        g.assign(seed_buf.size(), T(0));
                    }
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += seed_buf[i];
                    }
                }
                continue;
            }
            auto found = pending.find(s);
            if (found == pending.end()) {
                continue;
            }
            std::vector<T> upstream = std::move(found->second);
            pending.erase(found);

            auto& parents = s->grad_fn->parents;
            std::vector<std::vector<T>*> dests(parents.size());
            for (std::size_t p = 0; p < parents.size(); ++p) {
                dests[p] = buffer_for(parents[p].get());
            }
            s->grad_fn->backward(upstream, dests);
        }
    }

    std::shared_ptr<detail::Storage<T>> storage_;
};

/// Fresh leaf holding the values of `src` converted to `To`.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
    auto v = src.values();
    std::vector<To> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](From x) { return static_cast<To>(x); });
    return Tensor<To>(src.shape(), std::move(out));
}

namespace detail {

template <typename T>
void ensure_finite(std::span<const T> values, const char* op) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                               std::to_string(i));
        }
    }
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_mode_enabled()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
std::shared_ptr<Node<T>> make_node(OpKind kind, std::initializer_list<const Tensor<T>*> inputs,
                                   typename Node<T>::BackwardFn fn) {
    auto node = std::make_shared<Node<T>>();
    node->kind = kind;
    for (const Tensor<T>* t : inputs) {
        node->parents.push_back(t->storage());
    }
    node->backward = std::move(fn);
    return node;
}

}  // namespace detail

}  // namespace kiunet
