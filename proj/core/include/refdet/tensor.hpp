#pragma once

#include <Eigen/Core>

#include "refdet/rng.hpp"

namespace refdet {

/// Row-major dense matrix. Rows index sequence positions, columns features.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

template <typename T>
Mat<T> random_normal(int rows, int cols, T stddev, Rng& rng) {
    Mat<T> m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            m(i, j) = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return m;
}

} // namespace refdet
