#pragma once

// Adam parameter updates with bias correction.

#include <cmath>

#include "kdlab/linalg.hpp"

namespace kdlab::net {

template <typename S>
struct AdamConfig {
  S learning_rate = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S epsilon = S(1e-8);
};

template <typename S>
struct AdamSlot {
  MatrixT<S> m, v;

  void init(Eigen::Index rows, Eigen::Index cols) {
    m = MatrixT<S>::Zero(rows, cols);
    v = MatrixT<S>::Zero(rows, cols);
  }
};

// `step` is 1-based. Accepts any dense block (matrices and vectors alike).
template <typename S, typename ParamDerived, typename GradDerived>
void adam_update(Eigen::MatrixBase<ParamDerived>& param,
                 const Eigen::MatrixBase<GradDerived>& grad, AdamSlot<S>& slot,
                 const AdamConfig<S>& cfg, std::uint64_t step) {
  slot.m = cfg.beta1 * slot.m + (S(1) - cfg.beta1) * grad;
  slot.v = (cfg.beta2 * slot.v.array() + (S(1) - cfg.beta2) * grad.array().square()).matrix();
  const S bias1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg.beta1), static_cast<double>(step)));
  const S bias2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg.beta2), static_cast<double>(step)));
  param.derived().array() -=
      (cfg.learning_rate / bias1) * slot.m.array() /
      ((slot.v.array() / bias2).sqrt() + cfg.epsilon);
}

}  // namespace kdlab::net
