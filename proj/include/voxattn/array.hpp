#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "voxattn/error.hpp"
#include "voxattn/rng.hpp"

namespace vx {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("array shape must be positive, got dim " + std::to_string(d));
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

inline std::uint64_t next_array_uid() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Dense row-major array. Values are immutable after creation; the grad buffer
// is the only mutable part and is allocated lazily during backward. Copies
// share the data buffer and the grad slot, so an ArrayT behaves as a handle:
// a gradient allocated through any copy is visible to all of them.
template <class T>
struct ArrayT {
    using GradSlot = std::shared_ptr<std::vector<T>>;

    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<GradSlot> grad = std::make_shared<GradSlot>();
    bool requires_grad = false;
    std::uint64_t uid = 0;

    ArrayT() = default;
    ArrayT(Shape s, std::shared_ptr<std::vector<T>> d, bool rg)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg), uid(next_array_uid()) {}

    bool valid() const { return static_cast<bool>(data); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data->size()); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }
    std::size_t rank() const { return shape.size(); }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T& operator[](std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

    bool has_grad() const { return grad && static_cast<bool>(*grad); }
    void ensure_grad() {
        if (!grad) grad = std::make_shared<GradSlot>();
        if (!*grad) *grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    }
    std::vector<T>& grad_vec() { return **grad; }
    const std::vector<T>& grad_vec() const { return **grad; }
    T* grad_ptr() { return (*grad)->data(); }
    const T* grad_ptr() const { return (*grad)->data(); }
};

template <class T>
ArrayT<T> zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return ArrayT<T>(std::move(shape), std::make_shared<std::vector<T>>(static_cast<std::size_t>(n), T(0)),
                     requires_grad);
}

template <class T>
ArrayT<T> full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return ArrayT<T>(std::move(shape), std::make_shared<std::vector<T>>(static_cast<std::size_t>(n), value),
                     requires_grad);
}

template <class T>
ArrayT<T> from_vector(Shape shape, std::vector<T> values, bool requires_grad = false) {
    auto n = numel_of(shape);
    if (n != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from_vector: " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
                         std::to_string(values.size()));
    return ArrayT<T>(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)), requires_grad);
}

template <class T>
ArrayT<T> scalar_array(T value, bool requires_grad = false) {
    return from_vector<T>({1}, {value}, requires_grad);
}

template <class T>
ArrayT<T> uniform_array(Rng& rng, Shape shape, T lo, T hi, bool requires_grad = false) {
    auto out = zeros<T>(std::move(shape), requires_grad);
    for (auto& v : *out.data) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return out;
}

template <class T>
ArrayT<T> normal_array(Rng& rng, Shape shape, T mu, T sigma, bool requires_grad = false) {
    auto out = zeros<T>(std::move(shape), requires_grad);
    for (auto& v : *out.data) v = static_cast<T>(rng.normal(static_cast<double>(mu), static_cast<double>(sigma)));
    return out;
}

// Fresh buffer, same contents. The copy does not share grad state.
template <class T>
ArrayT<T> clone(const ArrayT<T>& a, bool requires_grad = false) {
    return ArrayT<T>(a.shape, std::make_shared<std::vector<T>>(*a.data), requires_grad);
}

using Array = ArrayT<double>;
using ArrayF = ArrayT<float>;

template <class T>
struct NamedParamT {
    std::string name;
    ArrayT<T> array;  // handle into the owning struct; data and grad are shared
};

using NamedParam = NamedParamT<double>;

}  // namespace vx
