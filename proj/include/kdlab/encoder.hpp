#pragma once

// The sequence encoder and its training loop.
//
// Architecture: masking -> batch norm -> LSTM (sequence output) -> dropout ->
// batch norm -> LSTM -> embedding (final hidden state, 128-dim by default).
// Three weight-shared applications of the encoder process the anchor,
// positive and negative of each triplet; the hinge triplet loss on squared
// Euclidean distances drives Adam updates. Padded rows never enter the
// normalization statistics and never advance the recurrent state, so the
// embedding of a sample depends only on its real rows.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/features.hpp"
#include "kdlab/linalg.hpp"
#include "kdlab/net/adam.hpp"
#include "kdlab/net/batchnorm.hpp"
#include "kdlab/net/lstm.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sampler.hpp"

namespace kdlab::encoder {

using features::FeatureSample;
using sampler::TripletSpec;

struct EncoderConfig {
  int seq_len = 70;       // M, rows per sample
  int feature_cols = 5;   // n
  int embedding_dim = 128;
  std::vector<int> lstm_units{128, 128};
  double dropout_rate = 0.2;
  double margin = 1.5;
  int batch_size = 512;   // triplets per update
  double learning_rate = 1e-3;
  std::uint64_t triplet_budget = 0;
  std::uint64_t seed = 0;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int validation_evals = 10;

  void validate() const {
    if (seq_len < 1) throw std::invalid_argument("seq_len must be >= 1");
    if (feature_cols < 1) throw std::invalid_argument("feature_cols must be >= 1");
    if (lstm_units.size() != 2 || lstm_units[0] < 1 || lstm_units[1] < 1)
      throw std::invalid_argument("lstm_units must list two positive layer sizes");
    if (embedding_dim != lstm_units.back())
      throw std::invalid_argument("embedding_dim must equal the final LSTM layer size");
    if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("dropout_rate must lie in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (validation_evals < 1) throw std::invalid_argument("validation_evals must be >= 1");
  }
};

inline nlohmann::json config_to_json(const EncoderConfig& c) {
  return nlohmann::json{{"seq_len", c.seq_len},
                        {"feature_cols", c.feature_cols},
                        {"embedding_dim", c.embedding_dim},
                        {"lstm_units", c.lstm_units},
                        {"dropout_rate", c.dropout_rate},
                        {"margin", c.margin},
                        {"batch_size", c.batch_size},
                        {"learning_rate", c.learning_rate},
                        {"triplet_budget", c.triplet_budget},
                        {"seed", c.seed},
                        {"bn_momentum", c.bn_momentum},
                        {"bn_epsilon", c.bn_epsilon},
                        {"adam_beta1", c.adam_beta1},
                        {"adam_beta2", c.adam_beta2},
                        {"adam_epsilon", c.adam_epsilon},
                        {"validation_evals", c.validation_evals}};
}

inline EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.seq_len = j.value("seq_len", c.seq_len);
  c.feature_cols = j.value("feature_cols", c.feature_cols);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  if (j.contains("lstm_units")) c.lstm_units = j.at("lstm_units").get<std::vector<int>>();
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.margin = j.value("margin", c.margin);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.triplet_budget = j.value("triplet_budget", c.triplet_budget);
  c.seed = j.value("seed", c.seed);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_epsilon = j.value("bn_epsilon", c.bn_epsilon);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.validation_evals = j.value("validation_evals", c.validation_evals);
  return c;
}

// --- Triplet loss -------------------------------------------------------------

template <typename DA, typename DP, typename DN>
double triplet_loss(const Eigen::MatrixBase<DA>& anchor, const Eigen::MatrixBase<DP>& positive,
                    const Eigen::MatrixBase<DN>& negative, double alpha) {
  if (anchor.size() != positive.size() || anchor.size() != negative.size())
    throw std::invalid_argument("triplet_loss: embedding dimensions differ");
  if (!(alpha > 0.0)) throw std::invalid_argument("triplet_loss: margin must be positive");
  const double d_ap = (anchor - positive).squaredNorm();
  const double d_an = (anchor - negative).squaredNorm();
  return std::max(0.0, d_ap - d_an + alpha);
}

template <typename S>
struct TripletLossGrad {
  double loss = 0.0;
  VectorT<S> d_anchor, d_positive, d_negative;
};

template <typename S>
TripletLossGrad<S> triplet_loss_grad(const VectorT<S>& anchor, const VectorT<S>& positive,
                                     const VectorT<S>& negative, double alpha) {
  TripletLossGrad<S> out;
  out.loss = triplet_loss(anchor, positive, negative, alpha);
  if (out.loss > 0.0) {
    out.d_anchor = S(2) * (negative - positive);
    out.d_positive = S(2) * (positive - anchor);
    out.d_negative = S(2) * (anchor - negative);
  } else {
    out.d_anchor = VectorT<S>::Zero(anchor.size());
    out.d_positive = VectorT<S>::Zero(anchor.size());
    out.d_negative = VectorT<S>::Zero(anchor.size());
  }
  return out;
}

// --- Encoder state -------------------------------------------------------------

template <typename S>
struct EncoderStateT {
  EncoderConfig config;
  std::uint64_t step = 0;
  net::BatchNorm<S> bn1, bn2;
  net::Lstm<S> lstm1, lstm2;

  static EncoderStateT init(const EncoderConfig& cfg) {
    cfg.validate();
    EncoderStateT st;
    st.config = cfg;
    Rng rng(stable_hash64(std::string_view{"encoder-init"}, cfg.seed));
    st.bn1.init(cfg.feature_cols);
    st.bn1.epsilon = static_cast<S>(cfg.bn_epsilon);
    st.bn1.momentum = static_cast<S>(cfg.bn_momentum);
    st.lstm1.init(cfg.feature_cols, cfg.lstm_units[0], rng);
    st.bn2.init(cfg.lstm_units[0]);
    st.bn2.epsilon = static_cast<S>(cfg.bn_epsilon);
    st.bn2.momentum = static_cast<S>(cfg.bn_momentum);
    st.lstm2.init(cfg.lstm_units[0], cfg.lstm_units[1], rng);
    return st;
  }

  // Visits the trainable parameters in update order; `f(name, tensor)` must
  // be generic over matrix/vector.
  template <typename F>
  void for_each_parameter(F&& f) {
    f("bn1.gamma", bn1.gamma);
    f("bn1.beta", bn1.beta);
    f("lstm1.kernel", lstm1.W);
    f("lstm1.recurrent", lstm1.U);
    f("lstm1.bias", lstm1.b);
    f("bn2.gamma", bn2.gamma);
    f("bn2.beta", bn2.beta);
    f("lstm2.kernel", lstm2.W);
    f("lstm2.recurrent", lstm2.U);
    f("lstm2.bias", lstm2.b);
  }

  // Visits every tensor (trainable parameters and running statistics) with
  // a stable name; `f(name, tensor)` must be generic over matrix/vector.
  template <typename F>
  void for_each_tensor(F&& f) {
    f("bn1.gamma", bn1.gamma);
    f("bn1.beta", bn1.beta);
    f("bn1.running_mean", bn1.running_mean);
    f("bn1.running_var", bn1.running_var);
    f("lstm1.kernel", lstm1.W);
    f("lstm1.recurrent", lstm1.U);
    f("lstm1.bias", lstm1.b);
    f("bn2.gamma", bn2.gamma);
    f("bn2.beta", bn2.beta);
    f("bn2.running_mean", bn2.running_mean);
    f("bn2.running_var", bn2.running_var);
    f("lstm2.kernel", lstm2.W);
    f("lstm2.recurrent", lstm2.U);
    f("lstm2.bias", lstm2.b);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<EncoderStateT*>(this)->for_each_tensor(
        [&](const char* name, auto& t) { f(name, std::as_const(t)); });
  }
};

using EncoderState = EncoderStateT<Real>;

// --- Batch assembly -----------------------------------------------------------

namespace detail {

template <typename S>
struct SeqBatch {
  MatrixT<S> X;                        // (T*B) x n, step-major
  std::vector<VectorT<S>> step_mask;   // per step, B activity flags
  VectorT<S> row_mask;                 // T*B activity flags
  int T = 0, B = 0;
};

template <typename S>
SeqBatch<S> assemble_batch(const EncoderConfig& cfg,
                           const std::vector<const FeatureSample*>& samples) {
  SeqBatch<S> batch;
  batch.B = static_cast<int>(samples.size());
  int max_len = 1;
  for (const FeatureSample* s : samples) {
    if (s->seq_len() != cfg.seq_len || s->cols() != cfg.feature_cols) {
      std::ostringstream msg;
      msg << "sample shape " << s->seq_len() << "x" << s->cols() << " does not match encoder "
          << cfg.seq_len << "x" << cfg.feature_cols;
      throw std::invalid_argument(msg.str());
    }
    if (!s->rows.allFinite()) throw std::invalid_argument("sample contains non-finite values");
    max_len = std::max(max_len, s->valid_rows);
  }
  batch.T = max_len;
  batch.X.setZero(batch.T * batch.B, cfg.feature_cols);
  batch.step_mask.assign(static_cast<std::size_t>(batch.T), VectorT<S>::Zero(batch.B));
  batch.row_mask.setZero(batch.T * batch.B);
  for (int b = 0; b < batch.B; ++b) {
    const FeatureSample* s = samples[static_cast<std::size_t>(b)];
    for (int t = 0; t < s->valid_rows; ++t) {
      batch.X.row(t * batch.B + b) = s->rows.row(t).template cast<S>();
      batch.step_mask[static_cast<std::size_t>(t)](b) = S(1);
      batch.row_mask(t * batch.B + b) = S(1);
    }
  }
  return batch;
}

}  // namespace detail

// --- Inference -----------------------------------------------------------------

// Embeds a batch of samples in inference mode: dropout off, normalization
// from running statistics. Each sample's embedding is independent of the
// rest of the batch.
template <typename S>
MatrixT<S> embed_batch(const EncoderStateT<S>& state,
                       const std::vector<const FeatureSample*>& samples) {
  const int d = state.config.embedding_dim;
  MatrixT<S> out(static_cast<Eigen::Index>(samples.size()), d);
  const std::size_t chunk = 1024;
  for (std::size_t base = 0; base < samples.size(); base += chunk) {
    const std::size_t count = std::min(chunk, samples.size() - base);
    std::vector<const FeatureSample*> part(samples.begin() + static_cast<std::ptrdiff_t>(base),
                                           samples.begin() + static_cast<std::ptrdiff_t>(base + count));
    auto batch = detail::assemble_batch<S>(state.config, part);
    const MatrixT<S> x1 = state.bn1.forward_eval(batch.X);
    const MatrixT<S> h1 = state.lstm1.forward(x1, batch.step_mask, batch.T, batch.B, nullptr);
    const MatrixT<S> x2 = state.bn2.forward_eval(h1);
    const MatrixT<S> h2 = state.lstm2.forward(x2, batch.step_mask, batch.T, batch.B, nullptr);
    out.middleRows(static_cast<Eigen::Index>(base), static_cast<Eigen::Index>(count)) =
        h2.middleRows((batch.T - 1) * batch.B, batch.B);
  }
  return out;
}

template <typename S>
VectorT<S> embed(const EncoderStateT<S>& state, const FeatureSample& sample) {
  std::vector<const FeatureSample*> one{&sample};
  return embed_batch(state, one).row(0).transpose();
}

// --- Training -------------------------------------------------------------------

struct TrainLogEntry {
  std::uint64_t step = 0;
  int batch_triplets = 0;
  double mean_loss = 0.0;
  double validation_eer = std::numeric_limits<double>::quiet_NaN();

  bool has_validation() const { return !std::isnan(validation_eer); }
};

using TrainLog = std::vector<TrainLogEntry>;

inline void write_train_log(const TrainLog& log, const std::string& path) {
  csv::Writer out(path);
  out.row("step", "batch_triplets", "mean_loss", "validation_eer");
  for (const auto& e : log) {
    std::ostringstream line;
    line << e.step << ',' << e.batch_triplets << ',' << e.mean_loss << ',';
    if (e.has_validation()) line << e.validation_eer;
    out.raw_line(line.str());
  }
}

template <typename S>
struct TrainResult {
  EncoderStateT<S> state;
  TrainLog log;
};

template <typename S>
using ValidationHook = std::function<double(const EncoderStateT<S>&)>;

// Parameter gradients in EncoderStateT::for_each_parameter order; vectors
// are stored as single-column matrices.
template <typename S>
struct Gradients {
  std::vector<MatrixT<S>> tensors;
};

template <typename S>
class TripletTrainer {
 public:
  explicit TripletTrainer(EncoderStateT<S>& state)
      : state_(state), dropout_rng_(stable_hash64(std::string_view{"dropout"}, state.config.seed)) {
    adam_.learning_rate = static_cast<S>(state.config.learning_rate);
    adam_.beta1 = static_cast<S>(state.config.adam_beta1);
    adam_.beta2 = static_cast<S>(state.config.adam_beta2);
    adam_.epsilon = static_cast<S>(state.config.adam_epsilon);
    state_.for_each_parameter([this](const char*, auto& tensor) {
      slots_.emplace_back();
      slots_.back().init(tensor.rows(), tensor.cols());
    });
  }

  // Training-mode forward and backward over one batch of resolved triplets
  // (element k of the three lists forms triplet k), without touching the
  // parameters. Returns the mean batch loss; gradients land in `grads` in
  // for_each_parameter order.
  double forward_backward(const std::vector<const FeatureSample*>& anchors,
                          const std::vector<const FeatureSample*>& positives,
                          const std::vector<const FeatureSample*>& negatives,
                          Gradients<S>& grads) {
    const int b = static_cast<int>(anchors.size());
    std::vector<const FeatureSample*> all;
    all.reserve(static_cast<std::size_t>(3 * b));
    all.insert(all.end(), anchors.begin(), anchors.end());
    all.insert(all.end(), positives.begin(), positives.end());
    all.insert(all.end(), negatives.begin(), negatives.end());

    auto batch = detail::assemble_batch<S>(state_.config, all);
    const int B3 = batch.B;
    const int T = batch.T;
    const int u1 = state_.config.lstm_units[0];

    typename net::BatchNorm<S>::Cache bn1_cache, bn2_cache;
    typename net::Lstm<S>::Cache lstm1_cache, lstm2_cache;

    const MatrixT<S> x1 = state_.bn1.forward_train(batch.X, batch.row_mask, bn1_cache);
    const MatrixT<S> h1 = state_.lstm1.forward(x1, batch.step_mask, T, B3, &lstm1_cache);

    // Inverted dropout on the layer-1 sequence output.
    const S keep = S(1) - static_cast<S>(state_.config.dropout_rate);
    MatrixT<S> drop_mask;
    MatrixT<S> h1d;
    if (state_.config.dropout_rate > 0.0) {
      drop_mask.resize(T * B3, u1);
      for (Eigen::Index c = 0; c < drop_mask.cols(); ++c)
        for (Eigen::Index r = 0; r < drop_mask.rows(); ++r)
          drop_mask(r, c) = dropout_rng_.uniform() < static_cast<double>(keep) ? S(1) / keep : S(0);
      h1d = h1.cwiseProduct(drop_mask);
    } else {
      h1d = h1;
    }

    const MatrixT<S> x2 = state_.bn2.forward_train(h1d, batch.row_mask, bn2_cache);
    const MatrixT<S> h2 = state_.lstm2.forward(x2, batch.step_mask, T, B3, &lstm2_cache);
    const MatrixT<S> emb = h2.middleRows((T - 1) * B3, B3);
    if (!emb.allFinite()) {
      std::ostringstream msg;
      msg << "training diverged at step " << state_.step + 1
          << ": non-finite embeddings over a batch of " << b << " triplets";
      throw std::runtime_error(msg.str());
    }

    // Triplet loss over (anchor, positive, negative) rows and its gradient
    // w.r.t. the embeddings, averaged over the batch.
    MatrixT<S> d_emb = MatrixT<S>::Zero(B3, emb.cols());
    double loss_sum = 0.0;
    const double alpha = state_.config.margin;
    const S inv_b = S(1) / static_cast<S>(b);
    for (int k = 0; k < b; ++k) {
      const auto a = emb.row(k);
      const auto p = emb.row(b + k);
      const auto n = emb.row(2 * b + k);
      const double d_ap = (a - p).squaredNorm();
      const double d_an = (a - n).squaredNorm();
      const double l = d_ap - d_an + alpha;
      if (l > 0.0) {
        loss_sum += l;
        d_emb.row(k) += (S(2) * (n - p)) * inv_b;
        d_emb.row(b + k) += (S(2) * (p - a)) * inv_b;
        d_emb.row(2 * b + k) += (S(2) * (a - n)) * inv_b;
      }
    }
    const double mean_loss = loss_sum / b;
    if (!std::isfinite(mean_loss)) {
      std::ostringstream msg;
      msg << "training diverged at step " << state_.step + 1 << ": mean batch loss " << mean_loss
          << " over " << b << " triplets; embedding range [" << emb.minCoeff() << ", "
          << emb.maxCoeff() << "]";
      throw std::runtime_error(msg.str());
    }

    // Backward.
    MatrixT<S> dh2 = MatrixT<S>::Zero(T * B3, emb.cols());
    dh2.middleRows((T - 1) * B3, B3) = d_emb;
    typename net::Lstm<S>::Grads g_lstm2, g_lstm1;
    const MatrixT<S> dx2 = state_.lstm2.backward(x2, batch.step_mask, lstm2_cache, dh2, g_lstm2);
    VectorT<S> d_bn2_gamma, d_bn2_beta;
    MatrixT<S> dh1d = state_.bn2.backward(dx2, batch.row_mask, bn2_cache, d_bn2_gamma, d_bn2_beta);
    if (state_.config.dropout_rate > 0.0) dh1d = dh1d.cwiseProduct(drop_mask);
    const MatrixT<S> dx1 = state_.lstm1.backward(x1, batch.step_mask, lstm1_cache, dh1d, g_lstm1);
    VectorT<S> d_bn1_gamma, d_bn1_beta;
    state_.bn1.backward(dx1, batch.row_mask, bn1_cache, d_bn1_gamma, d_bn1_beta);

    grads.tensors.clear();
    grads.tensors.reserve(10);
    grads.tensors.emplace_back(std::move(d_bn1_gamma));
    grads.tensors.emplace_back(std::move(d_bn1_beta));
    grads.tensors.emplace_back(std::move(g_lstm1.dW));
    grads.tensors.emplace_back(std::move(g_lstm1.dU));
    grads.tensors.emplace_back(std::move(g_lstm1.db));
    grads.tensors.emplace_back(std::move(d_bn2_gamma));
    grads.tensors.emplace_back(std::move(d_bn2_beta));
    grads.tensors.emplace_back(std::move(g_lstm2.dW));
    grads.tensors.emplace_back(std::move(g_lstm2.dU));
    grads.tensors.emplace_back(std::move(g_lstm2.db));
    return mean_loss;
  }

  // One Adam update on a batch of triplets; returns the mean batch loss.
  double step(const std::vector<const FeatureSample*>& anchors,
              const std::vector<const FeatureSample*>& positives,
              const std::vector<const FeatureSample*>& negatives) {
    Gradients<S> grads;
    const double mean_loss = forward_backward(anchors, positives, negatives, grads);
    ++state_.step;
    std::size_t i = 0;
    state_.for_each_parameter([&](const char*, auto& param) {
      net::adam_update(param, grads.tensors[i], slots_[i], adam_, state_.step);
      ++i;
    });
    return mean_loss;
  }

 private:
  EncoderStateT<S>& state_;
  net::AdamConfig<S> adam_;
  std::vector<net::AdamSlot<S>> slots_;
  Rng dropout_rng_;
};

// Consumes `config.triplet_budget` triplets from the generator in batches of
// `config.batch_size` (final batch partial). When a validation hook is given
// it runs `config.validation_evals` times over the run plus once at the end,
// and the state with the lowest validation EER is returned.
template <typename S>
TrainResult<S> train(const EncoderConfig& config,
                     const std::map<std::string, std::vector<FeatureSample>>& samples,
                     sampler::TripletGenerator& triplets,
                     const ValidationHook<S>& validation = {}) {
  config.validate();
  if (config.triplet_budget == 0) throw std::invalid_argument("triplet_budget must be positive");

  TrainResult<S> result;
  result.state = EncoderStateT<S>::init(config);
  TripletTrainer<S> trainer(result.state);

  const std::uint64_t total_steps =
      (config.triplet_budget + static_cast<std::uint64_t>(config.batch_size) - 1) /
      static_cast<std::uint64_t>(config.batch_size);
  const std::uint64_t eval_every =
      std::max<std::uint64_t>(1, total_steps / static_cast<std::uint64_t>(config.validation_evals));

  auto resolve = [&](const TripletSpec& spec, const std::string& subject,
                     int index) -> const FeatureSample* {
    const auto it = samples.find(subject);
    if (it == samples.end())
      throw std::runtime_error("triplet references unknown subject " + subject);
    if (index < 0 || static_cast<std::size_t>(index) >= it->second.size()) {
      std::ostringstream msg;
      msg << "triplet references sample " << index << " of subject " << subject << " which has "
          << it->second.size() << " samples";
      throw std::runtime_error(msg.str());
    }
    (void)spec;
    return &it->second[static_cast<std::size_t>(index)];
  };

  double best_eer = std::numeric_limits<double>::infinity();
  EncoderStateT<S> best_state;
  bool have_best = false;

  std::uint64_t remaining = config.triplet_budget;
  for (std::uint64_t s = 1; s <= total_steps; ++s) {
    const int b = static_cast<int>(
        std::min<std::uint64_t>(remaining, static_cast<std::uint64_t>(config.batch_size)));
    remaining -= static_cast<std::uint64_t>(b);

    std::vector<const FeatureSample*> anchors, positives, negatives;
    anchors.reserve(static_cast<std::size_t>(b));
    positives.reserve(static_cast<std::size_t>(b));
    negatives.reserve(static_cast<std::size_t>(b));
    for (int k = 0; k < b; ++k) {
      const TripletSpec spec = triplets.next();
      anchors.push_back(resolve(spec, spec.anchor_subject, spec.anchor_index));
      positives.push_back(resolve(spec, spec.anchor_subject, spec.positive_index));
      negatives.push_back(resolve(spec, spec.negative_subject, spec.negative_index));
    }

    TrainLogEntry entry;
    entry.step = s;
    entry.batch_triplets = b;
    entry.mean_loss = trainer.step(anchors, positives, negatives);

    if (validation && (s % eval_every == 0 || s == total_steps)) {
      entry.validation_eer = validation(result.state);
      if (entry.validation_eer < best_eer) {
        best_eer = entry.validation_eer;
        best_state = result.state;
        have_best = true;
      }
    }
    result.log.push_back(entry);
  }

  if (validation && have_best) result.state = std::move(best_state);
  return result;
}

// --- Checkpoints -----------------------------------------------------------------
//
// Binary container: magic, format version, a JSON header describing the
// config, step counter, scalar type and tensor shapes, then raw column-major
// tensor data followed by a content hash of the data section.

namespace detail {

constexpr char kCheckpointMagic[8] = {'K', 'D', 'L', 'A', 'B', 'C', 'K', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
const char* scalar_tag() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else if constexpr (std::is_same_v<S, double>) return "f64";
  else return "unknown";
}

inline std::uint64_t fnv1a(const char* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

template <typename S>
void save_state(const EncoderStateT<S>& state, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = detail::kCheckpointVersion;
  header["scalar"] = detail::scalar_tag<S>();
  header["step"] = state.step;
  header["config"] = config_to_json(state.config);
  nlohmann::json tensors = nlohmann::json::array();
  state.for_each_tensor([&](const char* name, const auto& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  header["tensors"] = tensors;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  std::uint64_t hash = 0xcbf29ce484222325ULL;
  state.for_each_tensor([&](const char*, const auto& t) {
    const char* bytes = reinterpret_cast<const char*>(t.derived().data());
    const std::size_t len = static_cast<std::size_t>(t.size()) * sizeof(S);
    out.write(bytes, static_cast<std::streamsize>(len));
    hash = detail::fnv1a(bytes, len, hash);
  });
  out.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename S>
EncoderStateT<S> load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint header: " + path);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded()) throw std::runtime_error("corrupt checkpoint header: " + path);
  const std::uint32_t version = header.value("format_version", 0u);
  if (version != detail::kCheckpointVersion) {
    std::ostringstream msg;
    msg << "checkpoint format version " << version << " not supported (expected "
        << detail::kCheckpointVersion << ")";
    throw std::runtime_error(msg.str());
  }
  const std::string scalar = header.value("scalar", "");
  if (scalar != detail::scalar_tag<S>()) {
    std::ostringstream msg;
    msg << "checkpoint scalar type '" << scalar << "' does not match expected '"
        << detail::scalar_tag<S>() << "'";
    throw std::runtime_error(msg.str());
  }

  EncoderStateT<S> state = EncoderStateT<S>::init(config_from_json(header.at("config")));
  state.step = header.value("step", std::uint64_t{0});

  // Shape manifest must agree with the config-derived layout; a mismatch
  // names the offending tensor.
  std::size_t idx = 0;
  const auto& tensors = header.at("tensors");
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  state.for_each_tensor([&](const char* name, auto& t) {
    if (idx >= tensors.size())
      throw std::runtime_error(std::string("checkpoint missing tensor ") + name);
    const auto& meta = tensors[idx++];
    if (meta.value("name", "") != name)
      throw std::runtime_error("checkpoint tensor order mismatch at " + meta.value("name", ""));
    const auto rows = meta.value("rows", Eigen::Index{0});
    const auto cols = meta.value("cols", Eigen::Index{0});
    if (rows != t.rows() || cols != t.cols()) {
      std::ostringstream msg;
      msg << "checkpoint tensor " << name << " has shape " << rows << "x" << cols
          << " but the config requires " << t.rows() << "x" << t.cols();
      throw std::runtime_error(msg.str());
    }
    char* bytes = reinterpret_cast<char*>(t.derived().data());
    const std::size_t len = static_cast<std::size_t>(t.size()) * sizeof(S);
    in.read(bytes, static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error(std::string("truncated checkpoint at tensor ") + name);
    hash = detail::fnv1a(bytes, len, hash);
  });
  std::uint64_t stored_hash = 0;
  in.read(reinterpret_cast<char*>(&stored_hash), sizeof(stored_hash));
  if (!in) throw std::runtime_error("truncated checkpoint (missing content hash): " + path);
  if (stored_hash != hash) throw std::runtime_error("checkpoint content hash mismatch: " + path);
  return state;
}

}  // namespace kdlab::encoder
