#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace qdl {

// Row-major so that one sample is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;

using Labels = std::vector<std::uint32_t>;
using Indices = std::vector<std::size_t>;

}  // namespace qdl
