#pragma once

#include <Eigen/Core>

namespace kdlab {

// Pipeline scalar type. The network kernels are templated and accept double
// as well (the gradient tests instantiate them that way); the data path and
// checkpoints use Real.
using Real = float;

template <typename S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VectorT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matrix = MatrixT<Real>;
using Vector = VectorT<Real>;

}  // namespace kdlab
