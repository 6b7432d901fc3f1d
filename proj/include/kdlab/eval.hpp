#pragma once

// Verification-style evaluation.
//
// For each test subject the first G embeddings form the gallery; the
// remaining genuine embeddings become genuine queries and one seeded sample
// from every other subject becomes an impostor query. A query's score is its
// distance to the gallery (mean of the G Euclidean distances by default;
// minimum available as an option), lower meaning more genuine. Per-subject
// equal error rates are computed from the genuine and impostor score lists
// and averaged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/csv.hpp"
#include "kdlab/encoder.hpp"
#include "kdlab/linalg.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::eval {

enum class Aggregation { mean, min };

inline Aggregation aggregation_from_name(const std::string& name) {
  if (name == "mean") return Aggregation::mean;
  if (name == "min") return Aggregation::min;
  throw std::runtime_error("unknown score aggregation: " + name);
}

struct SubjectEvalSet {
  std::string subject_id;
  std::vector<Vector> gallery;
  std::vector<Vector> genuine_queries;
  std::vector<Vector> impostor_queries;
  std::vector<std::string> impostor_sources;  // parallel to impostor_queries
};

struct EvalResult {
  std::map<std::string, double> per_subject_eer;  // fractions in [0, 1]
  double mean_eer = 0.0;
  int G = 0;
  std::string score_convention = "distance (lower = more genuine)";
};

// --- Equal error rate ---------------------------------------------------------

// Threshold sweep over the pooled scores with the lower-is-genuine
// convention: FAR(t) = fraction of impostor scores <= t, FRR(t) = fraction of
// genuine scores > t. The EER is taken by linear interpolation between the
// two adjacent operating points bracketing the FAR/FRR crossing.
inline double equal_error_rate(std::vector<double> genuine, std::vector<double> impostor) {
  if (genuine.empty() || impostor.empty())
    throw std::invalid_argument("equal_error_rate requires non-empty score lists");
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());

  std::vector<double> pooled;
  pooled.reserve(genuine.size() + impostor.size());
  pooled.insert(pooled.end(), genuine.begin(), genuine.end());
  pooled.insert(pooled.end(), impostor.begin(), impostor.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

  const double n_g = static_cast<double>(genuine.size());
  const double n_i = static_cast<double>(impostor.size());
  double prev_far = 0.0, prev_frr = 1.0;  // operating point below every score
  for (const double t : pooled) {
    const auto accepted =
        std::upper_bound(impostor.begin(), impostor.end(), t) - impostor.begin();
    const auto passed = std::upper_bound(genuine.begin(), genuine.end(), t) - genuine.begin();
    const double far = static_cast<double>(accepted) / n_i;
    const double frr = 1.0 - static_cast<double>(passed) / n_g;
    const double d = far - frr;
    if (d >= 0.0) {
      if (d == 0.0) return far;
      const double d0 = prev_far - prev_frr;
      const double lambda = -d0 / (d - d0);
      return prev_far + lambda * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
  return 1.0;  // not reachable: FAR=1, FRR=0 at the largest score
}

// --- Scoring -------------------------------------------------------------------

inline double query_score(const Vector& query, const std::vector<Vector>& gallery,
                          Aggregation agg) {
  double acc = agg == Aggregation::mean ? 0.0 : std::numeric_limits<double>::infinity();
  for (const auto& g : gallery) {
    const double d = static_cast<double>((query - g).norm());
    if (agg == Aggregation::mean)
      acc += d;
    else
      acc = std::min(acc, d);
  }
  return agg == Aggregation::mean ? acc / static_cast<double>(gallery.size()) : acc;
}

struct ScoredQueries {
  std::vector<double> genuine_scores;
  std::vector<double> impostor_scores;
};

inline ScoredQueries score_queries(const SubjectEvalSet& set,
                                   Aggregation agg = Aggregation::mean) {
  if (set.gallery.empty() || (set.genuine_queries.empty() && set.impostor_queries.empty()))
    throw std::invalid_argument("score_queries requires a gallery and at least one query");
  ScoredQueries out;
  out.genuine_scores.reserve(set.genuine_queries.size());
  out.impostor_scores.reserve(set.impostor_queries.size());
  for (const auto& q : set.genuine_queries) out.genuine_scores.push_back(query_score(q, set.gallery, agg));
  for (const auto& q : set.impostor_queries) out.impostor_scores.push_back(query_score(q, set.gallery, agg));
  return out;
}

// --- Evaluation sets -----------------------------------------------------------

using EmbeddingsBySubject = std::map<std::string, std::vector<Vector>>;

// One seeded impostor sample index per ordered (subject, impostor) pair,
// fixed by (test set, seed) and therefore identical across G values and
// checkpoints.
inline std::map<std::pair<std::string, std::string>, std::size_t> select_impostors(
    const EmbeddingsBySubject& embeddings, std::uint64_t seed) {
  Rng rng(stable_hash64(std::string_view{"impostors"}, seed));
  std::map<std::pair<std::string, std::string>, std::size_t> selection;
  for (const auto& [subject, _] : embeddings) {
    for (const auto& [other, other_embeddings] : embeddings) {
      if (other == subject) continue;
      selection[{subject, other}] =
          static_cast<std::size_t>(rng.below(other_embeddings.size()));
    }
  }
  return selection;
}

inline std::vector<SubjectEvalSet> build_eval_sets(
    const EmbeddingsBySubject& embeddings, int G,
    const std::map<std::pair<std::string, std::string>, std::size_t>& impostor_selection) {
  if (embeddings.size() < 2)
    throw std::invalid_argument("evaluation requires at least two test subjects");
  if (G < 1) throw std::invalid_argument("gallery size G must be >= 1");
  std::vector<SubjectEvalSet> sets;
  sets.reserve(embeddings.size());
  for (const auto& [subject, vectors] : embeddings) {
    if (vectors.size() <= static_cast<std::size_t>(G)) {
      std::ostringstream msg;
      msg << "subject " << subject << " has " << vectors.size()
          << " samples but the gallery needs more than " << G;
      throw std::runtime_error(msg.str());
    }
    SubjectEvalSet set;
    set.subject_id = subject;
    set.gallery.assign(vectors.begin(), vectors.begin() + G);
    set.genuine_queries.assign(vectors.begin() + G, vectors.end());
    for (const auto& [other, other_embeddings] : embeddings) {
      if (other == subject) continue;
      const std::size_t idx = impostor_selection.at({subject, other});
      set.impostor_queries.push_back(other_embeddings[idx]);
      set.impostor_sources.push_back(other);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

inline std::vector<SubjectEvalSet> build_eval_sets(const EmbeddingsBySubject& embeddings, int G,
                                                   std::uint64_t seed) {
  return build_eval_sets(embeddings, G, select_impostors(embeddings, seed));
}

template <typename S>
EmbeddingsBySubject embed_subjects(
    const encoder::EncoderStateT<S>& state,
    const std::map<std::string, std::vector<features::FeatureSample>>& samples) {
  EmbeddingsBySubject out;
  for (const auto& [subject, list] : samples) {
    std::vector<const features::FeatureSample*> ptrs;
    ptrs.reserve(list.size());
    for (const auto& s : list) ptrs.push_back(&s);
    const MatrixT<S> emb = encoder::embed_batch(state, ptrs);
    auto& vectors = out[subject];
    vectors.reserve(list.size());
    for (Eigen::Index r = 0; r < emb.rows(); ++r)
      vectors.push_back(emb.row(r).transpose().template cast<Real>());
  }
  return out;
}

template <typename S>
std::vector<SubjectEvalSet> build_eval_sets(
    const encoder::EncoderStateT<S>& state,
    const std::map<std::string, std::vector<features::FeatureSample>>& test_samples, int G,
    std::uint64_t seed) {
  return build_eval_sets(embed_subjects(state, test_samples), G, seed);
}

// --- Full evaluation -----------------------------------------------------------

inline std::vector<EvalResult> evaluate_embeddings(const EmbeddingsBySubject& embeddings,
                                                   const std::vector<int>& G_list,
                                                   std::uint64_t seed,
                                                   Aggregation agg = Aggregation::mean) {
  if (G_list.empty()) throw std::invalid_argument("G_list must not be empty");
  const auto impostors = select_impostors(embeddings, seed);
  std::vector<EvalResult> results;
  results.reserve(G_list.size());
  for (const int G : G_list) {
    const auto sets = build_eval_sets(embeddings, G, impostors);
    EvalResult result;
    result.G = G;
    double sum = 0.0;
    for (const auto& set : sets) {
      const auto scores = score_queries(set, agg);
      const double eer = equal_error_rate(scores.genuine_scores, scores.impostor_scores);
      result.per_subject_eer[set.subject_id] = eer;
      sum += eer;
    }
    result.mean_eer = sum / static_cast<double>(sets.size());
    results.push_back(std::move(result));
  }
  return results;
}

// Embeds every test sample once and reuses the embeddings (and the impostor
// selections) across all requested gallery sizes.
template <typename S>
std::vector<EvalResult> evaluate(
    const encoder::EncoderStateT<S>& state,
    const std::map<std::string, std::vector<features::FeatureSample>>& test_samples,
    const std::vector<int>& G_list, std::uint64_t seed, Aggregation agg = Aggregation::mean) {
  return evaluate_embeddings(embed_subjects(state, test_samples), G_list, seed, agg);
}

// Validation hook for training: mean EER over the given samples at one G.
template <typename S>
encoder::ValidationHook<S> make_validation_hook(
    std::map<std::string, std::vector<features::FeatureSample>> samples, int G,
    std::uint64_t seed, Aggregation agg = Aggregation::mean) {
  return [samples = std::move(samples), G, seed, agg](const encoder::EncoderStateT<S>& state) {
    return evaluate(state, samples, {G}, seed, agg).front().mean_eer;
  };
}

// Optional score dump for external DET tooling.
inline void write_scores(const std::vector<SubjectEvalSet>& sets, Aggregation agg,
                         const std::string& path) {
  csv::Writer out(path);
  out.row("subject", "query_origin", "label", "score");
  for (const auto& set : sets) {
    const auto scores = score_queries(set, agg);
    for (std::size_t i = 0; i < scores.genuine_scores.size(); ++i) {
      std::ostringstream origin;
      origin << "sample" << set.gallery.size() + i;
      out.row(set.subject_id, origin.str(), "genuine", scores.genuine_scores[i]);
    }
    for (std::size_t i = 0; i < scores.impostor_scores.size(); ++i)
      out.row(set.subject_id, set.impostor_sources[i], "impostor", scores.impostor_scores[i]);
  }
}

}  // namespace kdlab::eval
