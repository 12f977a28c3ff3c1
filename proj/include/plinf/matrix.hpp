#pragma once

#include <Eigen/Dense>

namespace plinf {

// Rows are samples (playlists, nodes or users) throughout the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

}  // namespace plinf
