#pragma once

// Masked LSTM layer over step-major sequence batches.
//
// Batches are stored as a single (T*B) x F matrix where rows [t*B, (t+1)*B)
// hold timestep t. Each sample carries a true length; at padded timesteps the
// hidden and cell state are held, so the state at the final timestep equals
// the state at the sample's last real row. Gate order in the fused kernels is
// (input, forget, candidate, output); gate activations are sigmoid except the
// candidate and the cell output, which are tanh.

#include <cmath>
#include <vector>

#include <Eigen/QR>

#include "kdlab/linalg.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::net {

template <typename S>
struct Lstm {
  MatrixT<S> W;  // input kernel, in x 4u
  MatrixT<S> U;  // recurrent kernel, u x 4u
  VectorT<S> b;  // bias, 4u; forget-gate block initialized to one

  int units() const { return static_cast<int>(U.rows()); }
  int input_dim() const { return static_cast<int>(W.rows()); }

  void init(int in_dim, int u, Rng& rng) {
    // Glorot-uniform input kernel, orthogonal recurrent kernel (per gate
    // block), zero bias with unit forget bias.
    W.resize(in_dim, 4 * u);
    const double limit = std::sqrt(6.0 / (in_dim + 4 * u));
    for (int c = 0; c < W.cols(); ++c)
      for (int r = 0; r < W.rows(); ++r) W(r, c) = static_cast<S>(rng.uniform(-limit, limit));

    U.resize(u, 4 * u);
    for (int g = 0; g < 4; ++g) {
      MatrixT<double> block = orthogonal_square(u, rng);
      U.middleCols(g * u, u) = block.cast<S>();
    }

    b = VectorT<S>::Zero(4 * u);
    b.segment(u, u).setOnes();
  }

  struct Cache {
    MatrixT<S> gates;  // (T*B) x 4u, post-activation
    MatrixT<S> C;      // (T*B) x u, blended cell state
    MatrixT<S> H;      // (T*B) x u, blended hidden state
    int T = 0, B = 0;
  };

  // Forward over T steps of batch size B. `step_mask[t]` is a B-vector of
  // 0/1 activity flags. Returns the full hidden sequence (T*B) x u; when
  // `cache` is null only the per-step state is kept (inference).
  MatrixT<S> forward(const MatrixT<S>& X, const std::vector<VectorT<S>>& step_mask, int T, int B,
                     Cache* cache) const {
    const int u = units();
    MatrixT<S> H_seq(T * B, u);
    if (cache) {
      cache->gates.resize(T * B, 4 * u);
      cache->C.resize(T * B, u);
      cache->H.resize(T * B, u);
      cache->T = T;
      cache->B = B;
    }

    MatrixT<S> h = MatrixT<S>::Zero(B, u);
    MatrixT<S> c = MatrixT<S>::Zero(B, u);
    MatrixT<S> z(B, 4 * u);

    for (int t = 0; t < T; ++t) {
      z.noalias() = X.middleRows(t * B, B) * W;
      z.noalias() += h * U;
      z.rowwise() += b.transpose();

      auto zi = z.leftCols(u).array();
      auto zf = z.middleCols(u, u).array();
      auto zg = z.middleCols(2 * u, u).array();
      auto zo = z.rightCols(u).array();

      const MatrixT<S> gi = (S(1) / (S(1) + (-zi).exp())).matrix();
      const MatrixT<S> gf = (S(1) / (S(1) + (-zf).exp())).matrix();
      const MatrixT<S> gg = zg.tanh().matrix();
      const MatrixT<S> go = (S(1) / (S(1) + (-zo).exp())).matrix();

      MatrixT<S> c_new = (gf.array() * c.array() + gi.array() * gg.array()).matrix();
      MatrixT<S> h_new = (go.array() * c_new.array().tanh()).matrix();

      const auto& m = step_mask[static_cast<std::size_t>(t)];
      c = (c_new.array().colwise() * m.array() + c.array().colwise() * (S(1) - m.array())).matrix();
      h = (h_new.array().colwise() * m.array() + h.array().colwise() * (S(1) - m.array())).matrix();

      H_seq.middleRows(t * B, B) = h;
      if (cache) {
        cache->gates.middleRows(t * B, B).leftCols(u) = gi;
        cache->gates.middleRows(t * B, B).middleCols(u, u) = gf;
        cache->gates.middleRows(t * B, B).middleCols(2 * u, u) = gg;
        cache->gates.middleRows(t * B, B).rightCols(u) = go;
        cache->C.middleRows(t * B, B) = c;
        cache->H.middleRows(t * B, B) = h;
      }
    }
    return H_seq;
  }

  struct Grads {
    MatrixT<S> dW;
    MatrixT<S> dU;
    VectorT<S> db;
  };

  // Backpropagation through time. `dH_ext` is the gradient arriving at the
  // hidden sequence (zero rows where nothing is consumed). Returns the
  // gradient w.r.t. X; parameter gradients accumulate into `grads`.
  MatrixT<S> backward(const MatrixT<S>& X, const std::vector<VectorT<S>>& step_mask,
                      const Cache& cache, const MatrixT<S>& dH_ext, Grads& grads) const {
    const int u = units();
    const int T = cache.T;
    const int B = cache.B;

    grads.dW = MatrixT<S>::Zero(W.rows(), W.cols());
    grads.dU = MatrixT<S>::Zero(U.rows(), U.cols());
    grads.db = VectorT<S>::Zero(b.size());
    MatrixT<S> dX(T * B, input_dim());

    MatrixT<S> dh_carry = MatrixT<S>::Zero(B, u);
    MatrixT<S> dc_carry = MatrixT<S>::Zero(B, u);
    MatrixT<S> dz(B, 4 * u);

    for (int t = T - 1; t >= 0; --t) {
      const auto& m = step_mask[static_cast<std::size_t>(t)];
      const auto gi = cache.gates.middleRows(t * B, B).leftCols(u).array();
      const auto gf = cache.gates.middleRows(t * B, B).middleCols(u, u).array();
      const auto gg = cache.gates.middleRows(t * B, B).middleCols(2 * u, u).array();
      const auto go = cache.gates.middleRows(t * B, B).rightCols(u).array();

      const MatrixT<S> dh_total = dH_ext.middleRows(t * B, B) + dh_carry;
      const MatrixT<S> dh_cand = (dh_total.array().colwise() * m.array()).matrix();
      const MatrixT<S> dh_hold =
          (dh_total.array().colwise() * (S(1) - m.array())).matrix();
      const MatrixT<S> dc_hold =
          (dc_carry.array().colwise() * (S(1) - m.array())).matrix();

      const auto tc = cache.C.middleRows(t * B, B).array().tanh();
      const MatrixT<S> do_ = (dh_cand.array() * tc).matrix();
      const MatrixT<S> dc_cand =
          ((dc_carry.array().colwise() * m.array()) +
           dh_cand.array() * go * (S(1) - tc.square()))
              .matrix();

      const MatrixT<S> di = (dc_cand.array() * gg).matrix();
      MatrixT<S> df(B, u);
      if (t > 0)
        df = (dc_cand.array() * cache.C.middleRows((t - 1) * B, B).array()).matrix();
      else
        df.setZero();
      const MatrixT<S> dg = (dc_cand.array() * gi).matrix();

      dz.leftCols(u) = (di.array() * gi * (S(1) - gi)).matrix();
      dz.middleCols(u, u) = (df.array() * gf * (S(1) - gf)).matrix();
      dz.middleCols(2 * u, u) = (dg.array() * (S(1) - gg.square())).matrix();
      dz.rightCols(u) = (do_.array() * go * (S(1) - go)).matrix();

      grads.dW.noalias() += X.middleRows(t * B, B).transpose() * dz;
      if (t > 0) grads.dU.noalias() += cache.H.middleRows((t - 1) * B, B).transpose() * dz;
      grads.db += dz.colwise().sum().transpose();

      dX.middleRows(t * B, B).noalias() = dz * W.transpose();
      dh_carry.noalias() = dz * U.transpose();
      dh_carry += dh_hold;
      dc_carry = (dc_cand.array() * gf).matrix() + dc_hold;
    }
    return dX;
  }

 private:
  static MatrixT<double> orthogonal_square(int n, Rng& rng) {
    MatrixT<double> g(n, n);
    for (int c = 0; c < n; ++c)
      for (int r = 0; r < n; ++r) g(r, c) = rng.normal();
    Eigen::HouseholderQR<MatrixT<double>> qr(g);
    MatrixT<double> q = qr.householderQ() * MatrixT<double>::Identity(n, n);
    const MatrixT<double> r = qr.matrixQR().template triangularView<Eigen::Upper>();
    for (int c = 0; c < n; ++c)
      if (r(c, c) < 0) q.col(c) = -q.col(c);
    return q;
  }
};

}  // namespace kdlab::net
