#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <vector>

#include "kdlab/encoder.hpp"
#include "kdlab/features.hpp"
#include "kdlab/rng.hpp"
#include "kdlab/sampler.hpp"
#include "test_util.hpp"

using namespace kdlab;
using encoder::EncoderConfig;
using encoder::EncoderState;
using encoder::EncoderStateT;
using features::FeatureSample;
using kdlab_test::TempDir;
using Catch::Approx;

namespace {

FeatureSample random_sample(int M, int n, int valid, Rng& rng, const std::string& subject = "s") {
  FeatureSample s;
  s.subject_id = subject;
  s.rows = Matrix::Zero(M, n);
  for (int r = 0; r < valid; ++r)
    for (int c = 0; c < n; ++c) s.rows(r, c) = static_cast<Real>(rng.uniform(-1.0, 1.0));
  s.valid_rows = valid;
  s.session_id = "s0";
  return s;
}

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.seq_len = 4;
  cfg.feature_cols = 3;
  cfg.lstm_units = {6, 6};
  cfg.embedding_dim = 6;
  cfg.dropout_rate = 0.0;
  cfg.batch_size = 8;
  cfg.seed = 5;
  return cfg;
}

// Samples map with per-subject signatures that overlap enough to leave the
// hinge active at initialization but remain learnable.
std::map<std::string, std::vector<FeatureSample>> separable_samples(int M, int n,
                                                                    int per_subject) {
  std::map<std::string, std::vector<FeatureSample>> out;
  Rng rng(3);
  const double centers[2] = {-0.25, 0.25};
  for (int subj = 0; subj < 2; ++subj) {
    const std::string id = subj == 0 ? "low" : "high";
    for (int k = 0; k < per_subject; ++k) {
      FeatureSample s;
      s.subject_id = id;
      s.rows = Matrix::Zero(M, n);
      for (int r = 0; r < M; ++r)
        for (int c = 0; c < n; ++c)
          s.rows(r, c) = static_cast<Real>(centers[subj] + rng.uniform(-0.2, 0.2));
      s.valid_rows = M;
      out[id].push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace

// --- Triplet loss ---------------------------------------------------------------

TEST_CASE("triplet loss tagged examples", "[encoder][loss]") {
  VectorT<double> f = VectorT<double>::Constant(4, 0.5);
  CHECK(encoder::triplet_loss(f, f, f, 1.5) == 1.5);

  // ||a-p||^2 = 1, ||a-n||^2 = 4.
  VectorT<double> a = VectorT<double>::Zero(4);
  VectorT<double> p = VectorT<double>::Zero(4);
  VectorT<double> n = VectorT<double>::Zero(4);
  p(0) = 1.0;
  n(0) = 2.0;
  CHECK(encoder::triplet_loss(a, p, n, 1.5) == 0.0);
  CHECK(encoder::triplet_loss(a, n, p, 1.5) == 4.5);  // swapped: 4 - 1 + 1.5
}

TEST_CASE("triplet loss is a non-negative hinge", "[encoder][loss]") {
  Rng rng(21);
  for (int i = 0; i < 500; ++i) {
    VectorT<double> a(8), p(8), n(8);
    for (int k = 0; k < 8; ++k) {
      a(k) = rng.normal();
      p(k) = rng.normal();
      n(k) = rng.normal();
    }
    const double l = encoder::triplet_loss(a, p, n, 1.5);
    REQUIRE(l >= 0.0);
    const double d_ap = (a - p).squaredNorm();
    const double d_an = (a - n).squaredNorm();
    if (d_an >= d_ap + 1.5) REQUIRE(l == 0.0);
  }
}

TEST_CASE("triplet loss rejects mismatched dimensions and bad margins", "[encoder][loss]") {
  VectorT<double> a = VectorT<double>::Zero(4), b = VectorT<double>::Zero(5);
  CHECK_THROWS(encoder::triplet_loss(a, a, b, 1.5));
  CHECK_THROWS(encoder::triplet_loss(a, a, a, 0.0));
}

TEST_CASE("triplet loss gradients match central finite differences", "[encoder][loss]") {
  Rng rng(77);
  const int dim = 16;
  const double alpha = 1.5;
  const double eps = 1e-6;
  int checked = 0;
  while (checked < 100) {
    VectorT<double> a(dim), p(dim), n(dim);
    for (int k = 0; k < dim; ++k) {
      a(k) = rng.normal();
      p(k) = rng.normal();
      n(k) = rng.normal();
    }
    const double hinge_arg = (a - p).squaredNorm() - (a - n).squaredNorm() + alpha;
    if (std::abs(hinge_arg) < 1e-2) continue;  // stay away from the kink
    ++checked;

    const auto grad = encoder::triplet_loss_grad(a, p, n, alpha);
    auto check_block = [&](VectorT<double>& x, const VectorT<double>& gx) {
      for (int k = 0; k < dim; ++k) {
        const double keep = x(k);
        x(k) = keep + eps;
        const double lp = encoder::triplet_loss(a, p, n, alpha);
        x(k) = keep - eps;
        const double lm = encoder::triplet_loss(a, p, n, alpha);
        x(k) = keep;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double rel = std::abs(numeric - gx(k)) / std::max(1.0, std::abs(gx(k)));
        REQUIRE(rel < 1e-4);
      }
    };
    check_block(a, grad.d_anchor);
    check_block(p, grad.d_positive);
    check_block(n, grad.d_negative);
  }
}

// --- Embedding ---------------------------------------------------------------------

TEST_CASE("embed returns the configured number of finite values", "[encoder]") {
  EncoderConfig cfg;  // defaults: 128-dim embedding, M=70, n=5
  cfg.seq_len = 12;
  auto state = EncoderState::init(cfg);
  Rng rng(2);
  const auto sample = random_sample(12, 5, 9, rng);
  const auto emb = encoder::embed(state, sample);
  REQUIRE(emb.size() == 128);
  CHECK(emb.allFinite());
}

TEST_CASE("masking: padding tails cannot influence the embedding", "[encoder]") {
  auto state = EncoderState::init(tiny_config());
  Rng rng(4);
  auto sample = random_sample(4, 3, 2, rng);
  const auto reference = encoder::embed(state, sample);

  // Perturb the padding tail, then re-zero it; also run inside a batch of
  // unrelated samples. Both must reproduce the reference bits.
  auto perturbed = sample;
  perturbed.rows.bottomRows(2).setConstant(9.0f);
  perturbed.rows.bottomRows(2).setZero();
  const auto emb2 = encoder::embed(state, perturbed);
  REQUIRE((emb2.array() == reference.array()).all());

  // Inside a batch the processed timestep count differs, so only numeric
  // closeness is guaranteed, not bit equality.
  auto longer = random_sample(4, 3, 4, rng);
  std::vector<const FeatureSample*> batch{&sample, &longer};
  const auto both = encoder::embed_batch(state, batch);
  REQUIRE((both.row(0).transpose() - reference).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("embed validates shapes and finiteness", "[encoder]") {
  auto state = EncoderState::init(tiny_config());
  Rng rng(6);
  auto wrong_m = random_sample(5, 3, 3, rng);
  CHECK_THROWS(encoder::embed(state, wrong_m));
  auto wrong_n = random_sample(4, 4, 3, rng);
  CHECK_THROWS(encoder::embed(state, wrong_n));
  auto nan_sample = random_sample(4, 3, 3, rng);
  nan_sample.rows(0, 0) = std::numeric_limits<Real>::quiet_NaN();
  CHECK_THROWS(encoder::embed(state, nan_sample));
}

TEST_CASE("forward passes share one parameter set and do not mutate it", "[encoder]") {
  auto state = EncoderState::init(tiny_config());
  std::vector<Matrix> before;
  state.for_each_parameter([&](const char*, const auto& t) { before.emplace_back(t); });

  Rng rng(8);
  std::vector<FeatureSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(random_sample(4, 3, 4, rng));
  std::vector<const FeatureSample*> anchors{&samples[0], &samples[1]},
      positives{&samples[2], &samples[3]}, negatives{&samples[4], &samples[5]};

  encoder::TripletTrainer<Real> trainer(state);
  encoder::Gradients<Real> grads;
  trainer.forward_backward(anchors, positives, negatives, grads);

  std::size_t i = 0;
  state.for_each_parameter([&](const char*, const auto& t) {
    REQUIRE((t.array() == before[i].array()).all());
    ++i;
  });
}

// --- Full-network gradient check ------------------------------------------------------

TEST_CASE("backprop through the whole encoder matches finite differences", "[encoder][grad]") {
  EncoderConfig cfg;
  cfg.seq_len = 4;
  cfg.feature_cols = 3;
  cfg.lstm_units = {5, 5};
  cfg.embedding_dim = 5;
  cfg.dropout_rate = 0.0;  // dropout off: the loss must be a pure function of the parameters
  cfg.seed = 11;
  auto state = EncoderStateT<double>::init(cfg);

  Rng rng(13);
  std::vector<FeatureSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(random_sample(4, 3, 2 + static_cast<int>(rng.below(3)), rng));
  std::vector<const FeatureSample*> anchors{&samples[0], &samples[1]},
      positives{&samples[2], &samples[3]}, negatives{&samples[4], &samples[5]};

  encoder::TripletTrainer<double> trainer(state);
  encoder::Gradients<double> grads;
  trainer.forward_backward(anchors, positives, negatives, grads);

  // Walk each tensor and probe a few coordinates with central differences.
  const double eps = 1e-5;
  std::size_t tensor_idx = 0;
  state.for_each_parameter([&](const char* name, auto& tensor) {
    const auto& analytic = grads.tensors[tensor_idx];
    Rng coord_rng(stable_hash64(std::string_view{name}, tensor_idx));
    const int probes = 4;
    for (int probe = 0; probe < probes; ++probe) {
      const Eigen::Index r = static_cast<Eigen::Index>(coord_rng.below(static_cast<std::uint64_t>(tensor.rows())));
      const Eigen::Index c = static_cast<Eigen::Index>(coord_rng.below(static_cast<std::uint64_t>(tensor.cols())));
      const double keep = tensor(r, c);
      encoder::Gradients<double> scratch;
      tensor(r, c) = keep + eps;
      const double lp = trainer.forward_backward(anchors, positives, negatives, scratch);
      tensor(r, c) = keep - eps;
      const double lm = trainer.forward_backward(anchors, positives, negatives, scratch);
      tensor(r, c) = keep;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double rel =
          std::abs(numeric - analytic(r, c)) / std::max(1e-4, std::abs(analytic(r, c)));
      INFO(name << "(" << r << "," << c << "): numeric " << numeric << " analytic "
                << analytic(r, c));
      CHECK(rel < 1e-3);
    }
    ++tensor_idx;
  });
}

// --- Training --------------------------------------------------------------------------

TEST_CASE("train consumes the budget in ceil(budget/batch) steps", "[encoder][train]") {
  auto cfg = tiny_config();
  cfg.seq_len = 2;
  cfg.feature_cols = 2;
  cfg.lstm_units = {4, 4};
  cfg.embedding_dim = 4;
  cfg.batch_size = 512;
  cfg.triplet_budget = 120'000;
  cfg.learning_rate = 1e-4;

  auto samples = separable_samples(2, 2, 4);
  std::map<std::string, std::size_t> pool{{"low", 4}, {"high", 4}};
  sampler::TripletGenerator gen(pool, 1);
  const auto result = encoder::train<Real>(cfg, samples, gen);
  REQUIRE(result.log.size() == 235);
  CHECK(result.log.back().batch_triplets == 192);
  CHECK(result.log.front().batch_triplets == 512);
  CHECK(result.state.step == 235);
}

TEST_CASE("a budget of one batch performs exactly one update", "[encoder][train]") {
  auto cfg = tiny_config();
  cfg.batch_size = 16;
  cfg.triplet_budget = 16;
  auto samples = separable_samples(4, 3, 4);
  std::map<std::string, std::size_t> pool{{"low", 4}, {"high", 4}};
  sampler::TripletGenerator gen(pool, 2);
  const auto result = encoder::train<Real>(cfg, samples, gen);
  REQUIRE(result.log.size() == 1);
  CHECK(result.state.step == 1);
}

TEST_CASE("training separable subjects reduces the loss", "[encoder][train]") {
  auto cfg = tiny_config();
  cfg.lstm_units = {16, 16};
  cfg.embedding_dim = 16;
  cfg.batch_size = 32;
  cfg.triplet_budget = 3200;
  cfg.dropout_rate = 0.1;
  auto samples = separable_samples(4, 3, 10);
  std::map<std::string, std::size_t> pool{{"low", 10}, {"high", 10}};
  sampler::TripletGenerator gen(pool, 3);
  const auto result = encoder::train<Real>(cfg, samples, gen);
  CHECK(result.log.back().mean_loss < result.log.front().mean_loss);
}

TEST_CASE("training logs are reproducible for a fixed seed", "[encoder][train]") {
  auto run = [] {
    auto cfg = tiny_config();
    cfg.dropout_rate = 0.2;
    cfg.batch_size = 16;
    cfg.triplet_budget = 320;
    auto samples = separable_samples(4, 3, 5);
    std::map<std::string, std::size_t> pool{{"low", 5}, {"high", 5}};
    sampler::TripletGenerator gen(pool, 4);
    return encoder::train<Real>(cfg, samples, gen);
  };
  const auto r1 = run();
  const auto r2 = run();
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    REQUIRE(r1.log[i].mean_loss == r2.log[i].mean_loss);
}

TEST_CASE("a non-finite loss aborts with a diagnostic", "[encoder][train]") {
  auto state = EncoderState::init(tiny_config());
  state.lstm2.W(0, 0) = std::numeric_limits<Real>::quiet_NaN();
  Rng rng(9);
  std::vector<FeatureSample> samples;
  for (int i = 0; i < 3; ++i) samples.push_back(random_sample(4, 3, 4, rng));
  std::vector<const FeatureSample*> a{&samples[0]}, p{&samples[1]}, n{&samples[2]};
  encoder::TripletTrainer<Real> trainer(state);
  REQUIRE_THROWS_WITH(trainer.step(a, p, n), Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("the validation hook selects the best state", "[encoder][train]") {
  auto cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.triplet_budget = 80;
  cfg.validation_evals = 5;
  auto samples = separable_samples(4, 3, 5);
  std::map<std::string, std::size_t> pool{{"low", 5}, {"high", 5}};
  sampler::TripletGenerator gen(pool, 5);
  int calls = 0;
  encoder::ValidationHook<Real> hook = [&calls](const EncoderState&) {
    ++calls;
    return 1.0 / static_cast<double>(calls);  // keeps improving; last state wins
  };
  const auto result = encoder::train<Real>(cfg, samples, gen, hook);
  CHECK(calls >= 5);
  int logged = 0;
  for (const auto& e : result.log)
    if (e.has_validation()) ++logged;
  CHECK(logged == calls);
  CHECK(result.state.step == 10);  // best == last here
}

// --- Checkpoints -----------------------------------------------------------------------

TEST_CASE("checkpoint round-trip restores bit-identical embeddings", "[encoder][io]") {
  auto cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.triplet_budget = 64;
  auto samples = separable_samples(4, 3, 5);
  std::map<std::string, std::size_t> pool{{"low", 5}, {"high", 5}};
  sampler::TripletGenerator gen(pool, 6);
  auto trained = encoder::train<Real>(cfg, samples, gen);

  TempDir dir;
  const auto path = dir.file("model.kdck");
  encoder::save_state(trained.state, path);
  const auto restored = encoder::load_state<Real>(path);
  CHECK(restored.step == trained.state.step);

  Rng rng(31);
  for (int i = 0; i < 100; ++i) {
    const auto sample = random_sample(4, 3, 1 + static_cast<int>(rng.below(4)), rng);
    const auto e1 = encoder::embed(trained.state, sample);
    const auto e2 = encoder::embed(restored, sample);
    REQUIRE((e1.array() == e2.array()).all());
  }
}

TEST_CASE("truncated checkpoints are rejected without partial state", "[encoder][io]") {
  auto state = EncoderState::init(tiny_config());
  TempDir dir;
  const auto path = dir.file("model.kdck");
  encoder::save_state(state, path);

  const auto full = kdlab_test::read_file(path);
  const auto truncated_path = dir.file("truncated.kdck");
  std::ofstream out(truncated_path, std::ios::binary);
  out.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
  out.close();
  CHECK_THROWS_WITH(encoder::load_state<Real>(truncated_path),
                    Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("corrupted tensor data fails the content hash", "[encoder][io]") {
  auto state = EncoderState::init(tiny_config());
  TempDir dir;
  const auto path = dir.file("model.kdck");
  encoder::save_state(state, path);
  auto bytes = kdlab_test::read_file(path);
  bytes[bytes.size() - 16] = static_cast<char>(bytes[bytes.size() - 16] ^ 0x5a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  CHECK_THROWS(encoder::load_state<Real>(path));
}

TEST_CASE("a column-count mismatch names the offending tensor", "[encoder][io]") {
  auto state = EncoderState::init(tiny_config());  // feature_cols = 3
  TempDir dir;
  const auto path = dir.file("model.kdck");
  encoder::save_state(state, path);

  // Claim a different column count in the header; shapes no longer match.
  auto bytes = kdlab_test::read_file(path);
  const auto pos = bytes.find("\"feature_cols\":3");
  REQUIRE(pos != std::string::npos);
  bytes.replace(pos, std::string("\"feature_cols\":3").size(), "\"feature_cols\":4");
  // Keep the header length prefix valid: same byte count.
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  CHECK_THROWS_WITH(encoder::load_state<Real>(path),
                    Catch::Matchers::ContainsSubstring("bn1.gamma"));
}

TEST_CASE("foreign files and version mismatches are rejected", "[encoder][io]") {
  TempDir dir;
  const auto path = dir.file("not_a_checkpoint.bin");
  kdlab_test::write_file(path, {"this is not a checkpoint"});
  CHECK_THROWS(encoder::load_state<Real>(path));
}

TEST_CASE("config validation rejects inconsistent settings", "[encoder]") {
  EncoderConfig cfg = tiny_config();
  cfg.embedding_dim = 7;  // != lstm_units.back()
  CHECK_THROWS(EncoderState::init(cfg));
  cfg = tiny_config();
  cfg.margin = 0.0;
  CHECK_THROWS(EncoderState::init(cfg));
  cfg = tiny_config();
  cfg.dropout_rate = 1.0;
  CHECK_THROWS(EncoderState::init(cfg));
}
