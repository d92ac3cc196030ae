#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mama {

namespace detail {

/// Allocator that leaves doubles uninitialized unless a value is given.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

#if defined(__GLIBC__)
// Large temporaries are allocated and freed at a high rate during unrolled
// training; keep them on the heap instead of fresh mmap pages.
inline const bool kMallocTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

}  // namespace detail

/// Dense row-major matrix of doubles. Every value in the library is 2-D:
/// batches of images are (batch, C*H*W), scalars are 1x1.
class Tensor {
public:
    using Storage = std::vector<double, detail::DefaultInitAllocator<double>>;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, const std::vector<double>& data)
        : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(rows, cols));
        }
    }

    static Tensor scalar(double v) { return Tensor(1, 1, v); }
    static Tensor row(const std::vector<double>& v) { return Tensor(1, v.size(), v); }

    /// Contents are unspecified; every element must be written before use.
    static Tensor uninitialized(std::size_t rows, std::size_t cols) {
        Tensor t;
        t.rows_ = rows;
        t.cols_ = cols;
        t.data_.resize(rows * cols);
        return t;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    [[nodiscard]] double& operator[](std::size_t i) { return data_[i]; }
    [[nodiscard]] double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row_span(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }
    [[nodiscard]] std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

    [[nodiscard]] double item() const {
        if (data_.size() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_string(rows_, cols_));
        return data_[0];
    }

    [[nodiscard]] bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    Tensor reshaped(std::size_t rows, std::size_t cols) const {
        if (rows * cols != size()) {
            throw std::invalid_argument("Tensor::reshaped: " + shape_string(rows_, cols_) + " -> " +
                                        shape_string(rows, cols));
        }
        Tensor t = *this;
        t.rows_ = rows;
        t.cols_ = cols;
        return t;
    }

    Tensor row_copy(std::size_t r) const {
        Tensor t = uninitialized(1, cols_);
        std::copy(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                  data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_), t.data_.begin());
        return t;
    }

    void set_row(std::size_t r, std::span<const double> values) {
        if (values.size() != cols_) throw std::invalid_argument("Tensor::set_row: width mismatch");
        std::copy(values.begin(), values.end(), data_.begin() + r * cols_);
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor& o) const noexcept = default;

    static std::string shape_string(std::size_t r, std::size_t c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }
    [[nodiscard]] std::string shape_string() const { return shape_string(rows_, cols_); }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Storage data_;
};

/// Elementwise helpers on plain tensors, used where no gradient is needed.
namespace tensor_ops {

template <typename F>
Tensor map(const Tensor& a, F&& f) {
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F&& f) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("tensor zip: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Tensor sign(const Tensor& a) { return map(a, [](double v) { return sign(v); }); }

inline double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double l1_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace tensor_ops

}  // namespace mama
