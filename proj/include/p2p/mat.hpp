#pragma once

#include <cstddef>
#include <vector>

#include "p2p/errors.hpp"

namespace p2p {

// Dense row-major matrix. Vectors are 1xN or Nx1 as noted at each use site.
template <typename T>
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}
    Mat(std::size_t rows, std::size_t cols, T value)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}

    static Mat from(std::size_t rows, std::size_t cols, std::vector<T> values) {
        if (values.size() != rows * cols) throw ShapeMismatch("Mat::from: data length mismatch");
        Mat m;
        m.rows_ = rows;
        m.cols_ = cols;
        m.data_ = std::move(values);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T* row(std::size_t i) { return data_.data() + i * cols_; }
    const T* row(std::size_t i) const { return data_.data() + i * cols_; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    T operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    void fill(T v) { data_.assign(data_.size(), v); }
    void resize(std::size_t rows, std::size_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(rows * cols, T(0));
    }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool operator==(const Mat& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

}  // namespace p2p
