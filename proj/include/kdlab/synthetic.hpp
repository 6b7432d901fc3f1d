#pragma once

// Synthetic keystroke corpora with per-subject Gaussian timing signatures.
//
// Each subject gets bucket-wise mean hold times and press-to-press intervals
// drawn once from wide uniform ranges; individual keystrokes jitter around
// those means. Subjects are therefore separable by construction while the
// row-level data still looks like real typing (variable keys, rollover
// latencies, session structure).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "kdlab/corpus.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::synthetic {

struct SyntheticConfig {
  int subjects = 20;
  int sessions_per_subject = 20;
  int keys_per_session = 60;
  double noise_ms = 10.0;  // per-event jitter around the subject means
  std::uint64_t seed = 0;
  std::string subject_prefix = "subj";
};

inline std::vector<corpus::SubjectStream> generate(const SyntheticConfig& cfg) {
  constexpr int kAlphabet = 24;  // 'a'..'x'
  constexpr int kBuckets = 8;

  std::vector<corpus::SubjectStream> streams;
  streams.reserve(static_cast<std::size_t>(cfg.subjects));
  for (int subj = 0; subj < cfg.subjects; ++subj) {
    Rng rng(stable_hash64(std::string_view{"synthetic"}, cfg.seed, subj));

    double hold_mean[kBuckets], interval_mean[kBuckets];
    for (int b = 0; b < kBuckets; ++b) {
      hold_mean[b] = rng.uniform(50.0, 220.0);
      interval_mean[b] = rng.uniform(90.0, 420.0);
    }

    corpus::SubjectStream stream;
    {
      std::ostringstream id;
      id << cfg.subject_prefix;
      id.width(3);
      id.fill('0');
      id << subj;
      stream.subject_id = id.str();
    }

    for (int session = 0; session < cfg.sessions_per_subject; ++session) {
      std::ostringstream sid;
      sid << 's';
      sid.width(4);
      sid.fill('0');
      sid << session;
      const std::string session_id = sid.str();

      std::int64_t press = 0;
      for (int k = 0; k < cfg.keys_per_session; ++k) {
        const int letter = static_cast<int>(rng.below(kAlphabet));
        const int bucket = letter % kBuckets;
        const double hold = std::max(5.0, rng.normal(hold_mean[bucket], cfg.noise_ms));
        corpus::KeystrokeEvent ev;
        ev.session_id = session_id;
        ev.key_code = 'a' + letter;
        ev.press_ms = press;
        ev.release_ms = press + static_cast<std::int64_t>(std::llround(hold));
        stream.events.push_back(std::move(ev));
        const double interval = std::max(15.0, rng.normal(interval_mean[bucket], cfg.noise_ms));
        press += static_cast<std::int64_t>(std::llround(interval));
      }
    }
    streams.push_back(std::move(stream));
  }
  return streams;
}

}  // namespace kdlab::synthetic
