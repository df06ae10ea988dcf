#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fscnn {

// Dense row-major matrix used for feature blocks and weight planes.
template <class S>
struct Matrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<S> v;

    Matrix() = default;
    Matrix(std::int64_t r, std::int64_t c, S fill = S(0))
        : rows(r), cols(c), v(std::size_t(r) * std::size_t(c), fill) {}

    S& operator()(std::int64_t i, std::int64_t j) { return v[std::size_t(i * cols + j)]; }
    const S& operator()(std::int64_t i, std::int64_t j) const { return v[std::size_t(i * cols + j)]; }

    S* row(std::int64_t i) { return v.data() + i * cols; }
    const S* row(std::int64_t i) const { return v.data() + i * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

template <class S>
Matrix<S> make_matrix(std::int64_t rows, std::int64_t cols, std::initializer_list<S> vals) {
    Matrix<S> m(rows, cols);
    if (std::int64_t(vals.size()) != rows * cols)
        throw std::invalid_argument("make_matrix: value count does not match shape");
    std::int64_t i = 0;
    for (S s : vals) m.v[std::size_t(i++)] = s;
    return m;
}

} // namespace fscnn
