#pragma once

// Timing-feature extraction and fixed-shape sample assembly.
//
// Event streams become rows of (m, ud, dd, uu, id): hold time of a key,
// release-to-press, press-to-press and release-to-release latencies to the
// next key, all in seconds, plus the key's code scaled to [0,1]. Digraphs are
// never formed across session boundaries. Fixed-text table streams carry
// their published 4-feature rows (no uu) and bypass re-derivation.
//
// Rows are then filtered (digraph latencies above a threshold dropped) and
// segmented into M-row samples, truncated or zero-padded with a validity
// prefix mask.

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/corpus.hpp"
#include "kdlab/csv.hpp"
#include "kdlab/linalg.hpp"

namespace kdlab::features {

struct FeatureRow {
  double m = 0.0;   // hold time, >= 0
  double ud = 0.0;  // release(i) -> press(i+1); negative under rollover typing
  double dd = 0.0;  // press(i) -> press(i+1)
  double uu = 0.0;  // release(i) -> release(i+1); unset for 4-column layouts
  double id = 0.0;  // key_code(i) / 255
};

enum class ColumnLayout { cmu4, full5 };

inline int column_count(ColumnLayout layout) { return layout == ColumnLayout::cmu4 ? 4 : 5; }

struct SessionRows {
  std::string session_id;
  std::vector<FeatureRow> rows;
};

struct ExtractedFeatures {
  std::string subject_id;
  ColumnLayout layout = ColumnLayout::full5;
  std::vector<SessionRows> sessions;

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& s : sessions) n += s.rows.size();
    return n;
  }
};

inline ExtractedFeatures extract_features(const corpus::SubjectStream& stream) {
  ExtractedFeatures out;
  out.subject_id = stream.subject_id;

  if (!stream.precomputed.empty()) {
    out.layout = ColumnLayout::cmu4;
    out.sessions.reserve(stream.precomputed.size());
    for (const auto& block : stream.precomputed) {
      SessionRows session;
      session.session_id = block.session_id;
      session.rows.reserve(block.rows.size());
      for (const auto& r : block.rows)
        session.rows.push_back(FeatureRow{r.m, r.ud, r.dd, 0.0, r.key_code / 255.0});
      out.sessions.push_back(std::move(session));
    }
    return out;
  }

  out.layout = ColumnLayout::full5;
  const auto& events = stream.events;
  std::size_t i = 0;
  while (i < events.size()) {
    SessionRows session;
    session.session_id = events[i].session_id;
    std::size_t j = i;
    while (j + 1 < events.size() && events[j + 1].session_id == session.session_id) ++j;
    for (std::size_t k = i; k < j; ++k) {
      const auto& a = events[k];
      const auto& b = events[k + 1];
      FeatureRow row;
      row.m = static_cast<double>(a.release_ms - a.press_ms) / 1000.0;
      row.ud = static_cast<double>(b.press_ms - a.release_ms) / 1000.0;
      row.dd = static_cast<double>(b.press_ms - a.press_ms) / 1000.0;
      row.uu = static_cast<double>(b.release_ms - a.release_ms) / 1000.0;
      row.id = a.key_code / 255.0;
      session.rows.push_back(row);
    }
    if (!session.rows.empty()) out.sessions.push_back(std::move(session));
    i = j + 1;
  }
  return out;
}

struct FilterResult {
  ExtractedFeatures rows;
  std::size_t removed = 0;
};

// Drops rows whose digraph latencies exceed the threshold (strictly).
// Monographs and negative latencies are untouched.
inline FilterResult filter_outliers(ExtractedFeatures input, double threshold = 5.0) {
  if (!(threshold > 0.0)) throw std::invalid_argument("outlier threshold must be positive");
  FilterResult result;
  result.rows.subject_id = input.subject_id;
  result.rows.layout = input.layout;
  for (auto& session : input.sessions) {
    SessionRows kept;
    kept.session_id = session.session_id;
    for (const auto& row : session.rows) {
      if (row.ud > threshold || row.dd > threshold || row.uu > threshold) {
        ++result.removed;
      } else {
        kept.rows.push_back(row);
      }
    }
    if (!kept.rows.empty()) result.rows.sessions.push_back(std::move(kept));
  }
  return result;
}

struct FeatureSample {
  std::string subject_id;
  Matrix rows;          // M x n; rows at index >= valid_rows are all-zero
  int valid_rows = 0;   // prefix length of real data
  std::string session_id;
  int start_index = 0;  // row offset of the sample's first row within its source

  int seq_len() const { return static_cast<int>(rows.rows()); }
  int cols() const { return static_cast<int>(rows.cols()); }
};

enum class SegmentPolicy { session_per_sample, fixed_window };

namespace detail {

inline void fill_row(Matrix& m, int r, const FeatureRow& row, ColumnLayout layout) {
  m(r, 0) = static_cast<Real>(row.m);
  m(r, 1) = static_cast<Real>(row.ud);
  m(r, 2) = static_cast<Real>(row.dd);
  if (layout == ColumnLayout::cmu4) {
    m(r, 3) = static_cast<Real>(row.id);
  } else {
    m(r, 3) = static_cast<Real>(row.uu);
    m(r, 4) = static_cast<Real>(row.id);
  }
}

}  // namespace detail

inline std::vector<FeatureSample> segment_samples(const ExtractedFeatures& features,
                                                  SegmentPolicy policy, int M,
                                                  std::size_t max_samples) {
  if (M < 1) throw std::invalid_argument("sequence length M must be >= 1");
  if (max_samples < 1) throw std::invalid_argument("max_samples must be >= 1");
  const int n = column_count(features.layout);
  std::vector<FeatureSample> samples;

  if (policy == SegmentPolicy::session_per_sample) {
    for (const auto& session : features.sessions) {
      if (samples.size() >= max_samples) break;
      if (session.rows.empty()) continue;
      FeatureSample s;
      s.subject_id = features.subject_id;
      s.session_id = session.session_id;
      s.start_index = 0;
      s.rows = Matrix::Zero(M, n);
      const int take = std::min<int>(M, static_cast<int>(session.rows.size()));
      for (int r = 0; r < take; ++r) detail::fill_row(s.rows, r, session.rows[static_cast<std::size_t>(r)], features.layout);
      s.valid_rows = take;
      samples.push_back(std::move(s));
    }
    return samples;
  }

  // fixed_window: consecutive non-overlapping M-row windows over the
  // subject's full row stream; the trailing partial window is discarded.
  struct Flat {
    const FeatureRow* row;
    const std::string* session;
  };
  std::vector<Flat> flat;
  flat.reserve(features.total_rows());
  for (const auto& session : features.sessions)
    for (const auto& row : session.rows) flat.push_back({&row, &session.session_id});

  const std::size_t windows = flat.size() / static_cast<std::size_t>(M);
  for (std::size_t w = 0; w < windows && samples.size() < max_samples; ++w) {
    FeatureSample s;
    s.subject_id = features.subject_id;
    const std::size_t base = w * static_cast<std::size_t>(M);
    s.session_id = *flat[base].session;
    s.start_index = static_cast<int>(base);
    s.rows = Matrix::Zero(M, n);
    for (int r = 0; r < M; ++r) detail::fill_row(s.rows, r, *flat[base + static_cast<std::size_t>(r)].row, features.layout);
    s.valid_rows = M;
    samples.push_back(std::move(s));
  }
  return samples;
}

// Optional dump: one line per real feature row, prefixed by the sample index.
inline void write_feature_dump(const std::vector<FeatureSample>& samples, const std::string& path) {
  csv::Writer out(path);
  if (!samples.empty() && samples.front().cols() == 4)
    out.row("sample", "m", "ud", "dd", "id");
  else
    out.row("sample", "m", "ud", "dd", "uu", "id");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (int r = 0; r < s.valid_rows; ++r) {
      std::ostringstream line;
      line << i;
      for (int c = 0; c < s.cols(); ++c) line << ',' << s.rows(r, c);
      out.raw_line(line.str());
    }
  }
}

}  // namespace kdlab::features
