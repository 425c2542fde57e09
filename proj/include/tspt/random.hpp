// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

#include "tspt/tensor3.hpp"

namespace tspt {

using Rng = std::mt19937_64;

inline Tensor3 random_tensor(int n1, int n2, int n3, Rng& rng,
                             double stddev = 1.0) {
    Tensor3 t(n1, n2, n3);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data) v = dist(rng);
    return t;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, Rng& rng,
                                     double stddev = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
    return m;
}

inline Eigen::VectorXd random_vector(int n, Rng& rng, double stddev = 1.0) {
    Eigen::VectorXd v(n);
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = dist(rng);
    return v;
}

}  // namespace tspt
