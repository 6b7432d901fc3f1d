#pragma once

// Triplet counting and generation.
//
// A triplet is (anchor sample, positive sample, negative sample): anchor and
// positive are two distinct samples of one subject, the negative is a sample
// of another subject. Counting is exact in 128-bit arithmetic; realistic
// corpora reach trillions of possible triplets, far beyond 32-bit counters.
// Generation is a seeded stream with replacement, uniform over the space of
// (anchor subject, unordered genuine pair, impostor subject, impostor
// sample); which pair element acts as anchor is a fair coin.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/csv.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::sampler {

using BigCount = unsigned __int128;

inline std::string to_string(BigCount v) {
  if (v == 0) return "0";
  std::string digits;
  while (v > 0) {
    digits.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return {digits.rbegin(), digits.rend()};
}

inline BigCount genuine_pairs(std::uint64_t n_samples) {
  if (n_samples < 2) return 0;
  return BigCount(n_samples) * (n_samples - 1) / 2;
}

inline BigCount possible_triplets(std::uint64_t subjects, std::uint64_t n_samples) {
  if (subjects < 2 || n_samples < 2) return 0;
  return BigCount(subjects) * genuine_pairs(n_samples) * (subjects - 1) * n_samples;
}

struct TripletSpec {
  std::string anchor_subject;
  int anchor_index = 0;
  int positive_index = 0;
  std::string negative_subject;
  int negative_index = 0;
};

struct TripletBudget {
  std::uint64_t requested = 0;
  BigCount possible = 0;
  std::uint64_t seed = 0;
};

// Deterministic stream of triplets over a pool of per-subject sample counts.
// Subjects with fewer than two samples cannot anchor but still serve as
// negatives when they have at least one sample.
class TripletGenerator {
 public:
  TripletGenerator(const std::map<std::string, std::size_t>& pool, std::uint64_t seed)
      : rng_(stable_hash64(std::string_view{"triplets"}, seed)) {
    for (const auto& [subject, count] : pool) {
      if (count == 0) continue;
      if (count >= 2) anchor_pos_.push_back(subjects_.size());
      subjects_.push_back(subject);
      counts_.push_back(count);
    }
    if (subjects_.size() < 2 || anchor_pos_.empty())
      throw std::runtime_error("triplet generation needs at least two subjects with samples "
                               "and one subject with two or more samples");
  }

  TripletSpec next() {
    TripletSpec spec;
    const std::size_t a = anchor_pos_[static_cast<std::size_t>(rng_.below(anchor_pos_.size()))];
    const std::size_t n = counts_[a];
    // Ordered distinct (i, j) drawn uniformly == uniform unordered pair plus
    // a fair anchor/positive role assignment.
    const std::size_t i = static_cast<std::size_t>(rng_.below(n));
    std::size_t j = static_cast<std::size_t>(rng_.below(n - 1));
    if (j >= i) ++j;
    std::size_t neg = static_cast<std::size_t>(rng_.below(subjects_.size() - 1));
    if (neg >= a) ++neg;
    spec.anchor_subject = subjects_[a];
    spec.anchor_index = static_cast<int>(i);
    spec.positive_index = static_cast<int>(j);
    spec.negative_subject = subjects_[neg];
    spec.negative_index = static_cast<int>(rng_.below(counts_[neg]));
    return spec;
  }

 private:
  Rng rng_;
  std::vector<std::string> subjects_;
  std::vector<std::size_t> counts_;
  std::vector<std::size_t> anchor_pos_;  // indices into subjects_ usable as anchors
};

inline std::vector<TripletSpec> generate_triplets(const std::map<std::string, std::size_t>& pool,
                                                  std::uint64_t requested, std::uint64_t seed) {
  TripletGenerator gen(pool, seed);
  std::vector<TripletSpec> out;
  out.reserve(requested);
  for (std::uint64_t i = 0; i < requested; ++i) out.push_back(gen.next());
  return out;
}

inline void write_triplet_manifest(const std::vector<TripletSpec>& triplets,
                                   const std::string& path) {
  csv::Writer out(path);
  out.row("anchor_subject", "anchor_index", "positive_index", "negative_subject", "negative_index");
  for (const auto& t : triplets)
    out.row(t.anchor_subject, t.anchor_index, t.positive_index, t.negative_subject,
            t.negative_index);
}

}  // namespace kdlab::sampler
