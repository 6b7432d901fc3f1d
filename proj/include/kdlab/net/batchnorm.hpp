#pragma once

// Per-feature batch normalization over the active rows of a step-major
// sequence batch. Padded rows are excluded from the batch statistics; they
// still receive the affine transform, which is harmless because every
// downstream consumer ignores them.

#include <cmath>
#include <vector>

#include "kdlab/linalg.hpp"

namespace kdlab::net {

template <typename S>
struct BatchNorm {
  VectorT<S> gamma, beta;
  VectorT<S> running_mean, running_var;
  S epsilon = S(1e-3);
  S momentum = S(0.99);

  void init(int features) {
    gamma = VectorT<S>::Ones(features);
    beta = VectorT<S>::Zero(features);
    running_mean = VectorT<S>::Zero(features);
    running_var = VectorT<S>::Ones(features);
  }

  int features() const { return static_cast<int>(gamma.size()); }

  struct Cache {
    VectorT<S> inv_std;
    MatrixT<S> xhat;
    S n_active = 0;
  };

  // Training-mode forward. `mask` has one entry per row of X (1 active,
  // 0 padding); statistics are computed over active rows only and the
  // running estimates are updated in place.
  MatrixT<S> forward_train(const MatrixT<S>& X, const VectorT<S>& mask, Cache& cache) {
    const S n = mask.sum();
    cache.n_active = n;
    const VectorT<S> mean = (X.transpose() * mask) / n;
    const VectorT<S> mean_sq = ((X.array().square().matrix()).transpose() * mask) / n;
    VectorT<S> var = mean_sq - mean.array().square().matrix();
    var = var.cwiseMax(S(0));  // guard tiny negative round-off

    cache.inv_std = (var.array() + epsilon).rsqrt().matrix();
    cache.xhat = ((X.rowwise() - mean.transpose()).array().rowwise() *
                  cache.inv_std.transpose().array())
                     .matrix();

    running_mean = momentum * running_mean + (S(1) - momentum) * mean;
    running_var = momentum * running_var + (S(1) - momentum) * var;

    MatrixT<S> y = cache.xhat.array().rowwise() * gamma.transpose().array();
    y.rowwise() += beta.transpose();
    return y;
  }

  MatrixT<S> forward_eval(const MatrixT<S>& X) const {
    const VectorT<S> inv_std = (running_var.array() + epsilon).rsqrt().matrix();
    MatrixT<S> y = ((X.rowwise() - running_mean.transpose()).array().rowwise() *
                    (inv_std.array() * gamma.array()).transpose())
                       .matrix();
    y.rowwise() += beta.transpose();
    return y;
  }

  // dY must be zero on padded rows; the returned dX is zero there too.
  MatrixT<S> backward(const MatrixT<S>& dY, const VectorT<S>& mask, const Cache& cache,
                      VectorT<S>& dgamma, VectorT<S>& dbeta) const {
    const S n = cache.n_active;
    dbeta = dY.colwise().sum().transpose();
    dgamma = (dY.array() * cache.xhat.array()).colwise().sum().matrix().transpose();

    const MatrixT<S> dxhat = (dY.array().rowwise() * gamma.transpose().array()).matrix();
    const VectorT<S> sum_dxhat = dxhat.colwise().sum().transpose();
    const VectorT<S> sum_dxhat_xhat =
        (dxhat.array() * cache.xhat.array()).colwise().sum().matrix().transpose();

    MatrixT<S> dX = dxhat * n;
    dX.rowwise() -= sum_dxhat.transpose();
    dX -= (cache.xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
    dX.array().rowwise() *= (cache.inv_std / n).transpose().array();
    dX.array().colwise() *= mask.array();
    return dX;
  }
};

}  // namespace kdlab::net
