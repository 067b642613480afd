#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "didipose/common.hpp"

namespace didipose {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d <= 0) throw DimensionError("tensor shape has non-positive extent");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Copies are shallow (data is shared); every op in the
// library produces a fresh buffer, so treat tensors as immutable values after
// they are filled. In-place mutation is reserved for construction-time fills
// and the optimizer step, which both run outside any live tape.
template <typename T>
class TensorT {
public:
    TensorT() : shape_{}, data_(std::make_shared<std::vector<T>>()) {}

    explicit TensorT(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)), T(0))) {}

    TensorT(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_))
            throw DimensionError("tensor init: value count does not match shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<T>>(std::move(values));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.raw().begin(), t.raw().end(), v);
        return t;
    }

    static TensorT scalar(T v) { return full({1}, v); }

    static TensorT randn(Shape shape, Rng& rng, T stddev = T(1)) {
        TensorT t(std::move(shape));
        for (auto& x : t.raw()) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }

    const T* data() const { return data_->data(); }
    const T& operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // 2-D accessor (row-major)
    const T& at(std::int64_t r, std::int64_t c) const {
        return (*data_)[static_cast<std::size_t>(r * shape_[1] + c)];
    }
    T& at(std::int64_t r, std::int64_t c) {
        return (*data_)[static_cast<std::size_t>(r * shape_[1] + c)];
    }

    const std::vector<T>& raw() const { return *data_; }

    // Mutable access; see class comment for when mutation is legal.
    std::vector<T>& raw() { return *data_; }
    T* mut() { return data_->data(); }

    TensorT clone() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    TensorT reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw DimensionError("reshape: " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        TensorT t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& x : *data_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    // Surfaces NaN/Inf as an explicit error state.
    void validate_finite(const std::string& what) const {
        if (!all_finite()) throw DivergenceError("non-finite values in " + what);
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

using Tensor = TensorT<double>;

}  // namespace didipose
