#pragma once

// Dense row-major double tensor. Small by design: shape + flat storage plus
// the handful of constructors and Eigen views the rest of the library needs.

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adcss/error.hpp"
#include "adcss/rng.hpp"

namespace adcss {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor {
  public:
    using MatView = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatView =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using VecView = Eigen::Map<Eigen::VectorXd>;
    using ConstVecView = Eigen::Map<const Eigen::VectorXd>;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {
        for (int64_t d : shape_) ADCSS_CHECK_INPUT(d >= 0, "Tensor: negative dimension");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from_vector(std::vector<double> data, Shape shape) {
        ADCSS_CHECK_INPUT(static_cast<int64_t>(data.size()) == shape_numel(shape),
                          "Tensor::from_vector: size mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data_) v = rng.normal() * stddev;
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(std::initializer_list<int64_t> idx) { return data_[flat_index(idx)]; }
    double at(std::initializer_list<int64_t> idx) const { return data_[flat_index(idx)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape shape) const {
        ADCSS_CHECK_INPUT(shape_numel(shape) == numel(), "reshape: element count mismatch " +
                                                             shape_str(shape_) + " -> " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    // 2-D Eigen view over the flat data; rows*cols must cover the tensor.
    MatView mat(int64_t rows, int64_t cols) {
        ADCSS_CHECK_INPUT(rows * cols == numel(), "mat view: size mismatch");
        return MatView(data(), rows, cols);
    }
    ConstMatView mat(int64_t rows, int64_t cols) const {
        ADCSS_CHECK_INPUT(rows * cols == numel(), "mat view: size mismatch");
        return ConstMatView(data(), rows, cols);
    }
    VecView vec() { return VecView(data(), numel()); }
    ConstVecView vec() const { return ConstVecView(data(), numel()); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& o) {
        ADCSS_CHECK_INPUT(same_shape(o), "add_: shape mismatch");
        for (int64_t i = 0; i < numel(); ++i) data_[static_cast<size_t>(i)] += o[i];
    }

    void scale_(double s) {
        for (double& v : data_) v *= s;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    size_t flat_index(std::initializer_list<int64_t> idx) const {
        ADCSS_CHECK_INPUT(static_cast<int64_t>(idx.size()) == ndim(), "at: rank mismatch");
        int64_t flat = 0;
        int64_t i = 0;
        for (int64_t v : idx) {
            ADCSS_CHECK_INPUT(v >= 0 && v < shape_[static_cast<size_t>(i)], "at: index out of range");
            flat = flat * shape_[static_cast<size_t>(i)] + v;
            ++i;
        }
        return static_cast<size_t>(flat);
    }

    Shape shape_;
    std::vector<double> data_;
};

} // namespace adcss
