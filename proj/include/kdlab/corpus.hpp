#pragma once

// Raw keystroke ingestion. Every supported dataset format is converted into
// the same event model: per-subject streams of (session, key, press, release)
// records with millisecond timestamps. Fixed-text timing tables additionally
// attach their source feature rows per repetition block, so downstream
// feature extraction can reuse the published values instead of re-deriving
// them from quantized timestamps.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/csv.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::corpus {

struct KeystrokeEvent {
  std::string session_id;  // empty allowed (uncontrolled free text)
  int key_code = 0;        // 0-255; named keys mapped, unknown keys 0
  std::int64_t press_ms = 0;
  std::int64_t release_ms = 0;
};

// One 4-feature timing row taken verbatim from a fixed-text table
// (hold, release-to-press latency, press-to-press latency, key), seconds.
struct TimingRow {
  double m = 0.0;
  double ud = 0.0;
  double dd = 0.0;
  int key_code = 0;
};

struct PrecomputedBlock {
  std::string session_id;
  std::vector<TimingRow> rows;
};

struct SubjectStream {
  std::string subject_id;
  std::vector<KeystrokeEvent> events;
  // Non-empty only for fixed-text table adapters.
  std::vector<PrecomputedBlock> precomputed;

  std::size_t event_count() const { return events.size(); }
};

struct IngestReport {
  std::size_t rows_read = 0;
  std::size_t rows_rejected = 0;
  std::size_t unmatched_press = 0;
  std::size_t unmatched_release = 0;
  std::size_t subjects = 0;
  std::size_t events = 0;
};

struct SplitPlan {
  std::vector<std::string> train_subjects;
  std::vector<std::string> validation_subjects;
  std::vector<std::string> test_subjects;
  std::uint64_t seed = 0;
};

enum class Adapter { cmu, aalto, clarkson2, generic };

inline Adapter adapter_from_name(const std::string& name) {
  if (name == "cmu") return Adapter::cmu;
  if (name == "aalto") return Adapter::aalto;
  if (name == "clarkson2") return Adapter::clarkson2;
  if (name == "generic") return Adapter::generic;
  throw std::runtime_error("unknown adapter: " + name);
}

inline const char* adapter_name(Adapter a) {
  switch (a) {
    case Adapter::cmu: return "cmu";
    case Adapter::aalto: return "aalto";
    case Adapter::clarkson2: return "clarkson2";
    case Adapter::generic: return "generic";
  }
  return "generic";
}

// Named-key mapping: conventional ASCII control codes where one exists,
// single characters to their byte value, everything else to 0.
inline int key_code_from_name(std::string name) {
  if (name.size() == 1) {
    const unsigned char c = static_cast<unsigned char>(name[0]);
    return static_cast<int>(c);
  }
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "enter" || lower == "return") return 13;
  if (lower == "tab") return 9;
  if (lower == "backspace") return 8;
  if (lower == "escape" || lower == "esc") return 27;
  if (lower == "space") return 32;
  if (lower == "delete" || lower == "del") return 127;
  if (lower == "period") return static_cast<int>('.');
  if (lower == "comma") return static_cast<int>(',');
  if (lower == "five") return static_cast<int>('5');
  if (lower == "shift.r") return static_cast<int>('R');
  return 0;
}

namespace detail {

inline bool event_less(const KeystrokeEvent& a, const KeystrokeEvent& b) {
  if (a.press_ms != b.press_ms) return a.press_ms < b.press_ms;
  if (a.release_ms != b.release_ms) return a.release_ms < b.release_ms;
  return a.key_code < b.key_code;
}

// Sorts a subject's events session-by-session: sessions ordered by their
// earliest press (ties by session id), events within a session by
// (press, release, key).
inline void sort_stream(SubjectStream& stream) {
  std::map<std::string, std::vector<KeystrokeEvent>> by_session;
  for (auto& ev : stream.events) by_session[ev.session_id].push_back(std::move(ev));
  stream.events.clear();
  struct SessionOrder {
    std::int64_t min_press;
    std::string id;
  };
  std::vector<SessionOrder> order;
  order.reserve(by_session.size());
  for (auto& [sid, events] : by_session) {
    std::sort(events.begin(), events.end(), event_less);
    order.push_back({events.front().press_ms, sid});
  }
  std::sort(order.begin(), order.end(), [](const SessionOrder& a, const SessionOrder& b) {
    if (a.min_press != b.min_press) return a.min_press < b.min_press;
    return a.id < b.id;
  });
  for (const auto& s : order) {
    auto& events = by_session[s.id];
    stream.events.insert(stream.events.end(), std::make_move_iterator(events.begin()),
                         std::make_move_iterator(events.end()));
  }
}

inline std::vector<SubjectStream> finalize(std::map<std::string, SubjectStream>&& by_subject,
                                           IngestReport* report) {
  std::vector<SubjectStream> streams;
  streams.reserve(by_subject.size());
  for (auto& [id, stream] : by_subject) {
    if (stream.events.empty() && stream.precomputed.empty()) continue;
    sort_stream(stream);
    streams.push_back(std::move(stream));
  }
  if (report) {
    report->subjects = streams.size();
    for (const auto& s : streams) report->events += s.events.size();
  }
  return streams;
}

inline int find_column(const std::vector<std::string>& header,
                       std::initializer_list<const char*> candidates) {
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string h = lower(csv::strip(header[i]));
    for (const char* cand : candidates)
      if (h == cand) return static_cast<int>(i);
  }
  return -1;
}

inline std::int64_t parse_ms(const std::string& s, std::size_t line_no) {
  // Timestamps may be integers or decimal milliseconds; stored rounded.
  const double v = csv::parse_real(s, line_no, "timestamp");
  return static_cast<std::int64_t>(std::llround(v));
}

}  // namespace detail

// --- Fixed-text timing tables (CMU password format) -------------------------
//
// Expected header: subject, sessionIndex, rep, then an interleaved run of
// H.<key> / DD.<k1>.<k2> / UD.<k1>.<k2> columns in typing order. Values are
// seconds. Each row is one password repetition; it becomes one session block
// tagged s<session>r<rep> with events reconstructed at millisecond
// resolution and the source timing features attached verbatim.
inline std::vector<SubjectStream> load_fixed_text_table(const std::string& path,
                                                        IngestReport* report = nullptr) {
  std::vector<std::string> header;
  const auto rows = csv::read_rows(path, &header);
  if (rows.empty() && header.empty()) {
    if (report) *report = IngestReport{};
    return {};
  }

  const int col_subject = detail::find_column(header, {"subject"});
  const int col_session = detail::find_column(header, {"sessionindex", "session"});
  const int col_rep = detail::find_column(header, {"rep", "repetition"});
  if (col_subject < 0 || col_session < 0 || col_rep < 0)
    throw std::runtime_error("fixed-text table header must name subject, sessionIndex and rep columns");

  // Walk the header once, collecting hold columns (which define the key
  // sequence) and the digraph columns between them.
  struct FeatureColumn {
    char kind;  // 'H', 'D' (DD) or 'U' (UD)
    int index;
  };
  std::vector<FeatureColumn> feature_columns;
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string name = csv::strip(header[i]);
    if (name.rfind("H.", 0) == 0) {
      feature_columns.push_back({'H', static_cast<int>(i)});
      keys.push_back(name.substr(2));
    } else if (name.rfind("DD.", 0) == 0) {
      feature_columns.push_back({'D', static_cast<int>(i)});
    } else if (name.rfind("UD.", 0) == 0) {
      feature_columns.push_back({'U', static_cast<int>(i)});
    }
  }
  const std::size_t n_keys = keys.size();
  if (n_keys < 2) throw std::runtime_error("fixed-text table defines fewer than two hold columns");
  std::vector<int> hold_col(n_keys, -1), dd_col(n_keys - 1, -1), ud_col(n_keys - 1, -1);
  {
    std::size_t h = 0, d = 0, u = 0;
    for (const auto& fc : feature_columns) {
      if (fc.kind == 'H') hold_col[h++] = fc.index;
      else if (fc.kind == 'D' && d < n_keys - 1) dd_col[d++] = fc.index;
      else if (fc.kind == 'U' && u < n_keys - 1) ud_col[u++] = fc.index;
    }
    if (h != n_keys || d != n_keys - 1 || u != n_keys - 1)
      throw std::runtime_error("fixed-text table hold/digraph column counts do not line up");
  }
  std::vector<int> key_codes(n_keys);
  for (std::size_t k = 0; k < n_keys; ++k) key_codes[k] = key_code_from_name(keys[k]);

  std::map<std::string, SubjectStream> by_subject;
  for (const auto& row : rows) {
    if (report) ++report->rows_read;
    auto field = [&](int idx) -> const std::string& {
      if (idx < 0 || static_cast<std::size_t>(idx) >= row.fields.size()) {
        std::ostringstream msg;
        msg << "row " << row.line_number << ": missing column " << idx;
        throw std::runtime_error(msg.str());
      }
      return row.fields[static_cast<std::size_t>(idx)];
    };

    const std::string subject = csv::strip(field(col_subject));
    const long long session = csv::parse_int(field(col_session), row.line_number, "sessionIndex");
    const long long rep = csv::parse_int(field(col_rep), row.line_number, "rep");
    std::ostringstream sid;
    sid << 's';
    sid.width(3);
    sid.fill('0');
    sid << session << 'r';
    sid.width(4);
    sid.fill('0');
    sid << rep;
    const std::string session_id = sid.str();

    std::vector<double> hold(n_keys), dd(n_keys - 1), ud(n_keys - 1);
    for (std::size_t k = 0; k < n_keys; ++k)
      hold[k] = csv::parse_real(field(hold_col[k]), row.line_number, "hold time");
    for (std::size_t k = 0; k + 1 < n_keys; ++k) {
      dd[k] = csv::parse_real(field(dd_col[k]), row.line_number, "down-down latency");
      ud[k] = csv::parse_real(field(ud_col[k]), row.line_number, "up-down latency");
      // Negative latencies are legitimate (rollover typing); no rejection.
    }

    auto& stream = by_subject[subject];
    stream.subject_id = subject;

    PrecomputedBlock block;
    block.session_id = session_id;
    block.rows.reserve(n_keys - 1);
    for (std::size_t k = 0; k + 1 < n_keys; ++k)
      block.rows.push_back(TimingRow{hold[k], ud[k], dd[k], key_codes[k]});
    stream.precomputed.push_back(std::move(block));

    // Reconstruct events at session-relative millisecond timestamps.
    std::int64_t press = 0;
    for (std::size_t k = 0; k < n_keys; ++k) {
      KeystrokeEvent ev;
      ev.session_id = session_id;
      ev.key_code = key_codes[k];
      ev.press_ms = press;
      ev.release_ms = press + static_cast<std::int64_t>(std::llround(hold[k] * 1000.0));
      stream.events.push_back(std::move(ev));
      if (k + 1 < n_keys) press += static_cast<std::int64_t>(std::llround(dd[k] * 1000.0));
    }
  }

  auto streams = detail::finalize(std::move(by_subject), report);
  for (auto& s : streams) {
    std::sort(s.precomputed.begin(), s.precomputed.end(),
              [](const PrecomputedBlock& a, const PrecomputedBlock& b) {
                return a.session_id < b.session_id;
              });
  }
  return streams;
}

// --- Event logs --------------------------------------------------------------

namespace detail {

struct PairingState {
  // Pending presses per (session, key), FIFO.
  std::map<std::pair<std::string, int>, std::vector<std::pair<std::int64_t, std::size_t>>> pending;
};

inline std::vector<SubjectStream> load_paired_rows(
    const std::vector<csv::Row>& rows, int col_subject, int col_session, int col_key,
    int col_action, int col_time, IngestReport* report) {
  std::map<std::string, SubjectStream> by_subject;
  std::map<std::string, PairingState> pairing;

  for (const auto& row : rows) {
    if (report) ++report->rows_read;
    auto field = [&](int idx) -> const std::string& {
      static const std::string empty;
      if (idx < 0) return empty;
      if (static_cast<std::size_t>(idx) >= row.fields.size()) {
        std::ostringstream msg;
        msg << "row " << row.line_number << ": too few columns";
        throw std::runtime_error(msg.str());
      }
      return row.fields[static_cast<std::size_t>(idx)];
    };

    const std::string subject = csv::strip(field(col_subject));
    const std::string session = col_session >= 0 ? csv::strip(field(col_session)) : std::string{};
    const std::string key_field = csv::strip(field(col_key));
    int key_code = 0;
    if (!key_field.empty() && (std::isdigit(static_cast<unsigned char>(key_field[0])) ||
                               (key_field.size() > 1 && key_field[0] == '-'))) {
      const long long v = csv::parse_int(key_field, row.line_number, "key code");
      key_code = (v >= 0 && v <= 255) ? static_cast<int>(v) : 0;
    } else {
      key_code = key_code_from_name(key_field);
    }
    const std::int64_t t = parse_ms(field(col_time), row.line_number);

    std::string action = csv::strip(field(col_action));
    std::transform(action.begin(), action.end(), action.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    const bool is_press = (action == "keydown" || action == "press" || action == "p" || action == "down");
    const bool is_release = (action == "keyup" || action == "release" || action == "r" || action == "up");
    if (!is_press && !is_release) {
      std::ostringstream msg;
      msg << "row " << row.line_number << ": unknown action '" << action << "'";
      throw std::runtime_error(msg.str());
    }

    auto& state = pairing[subject];
    const auto pkey = std::make_pair(session, key_code);
    if (is_press) {
      state.pending[pkey].push_back({t, row.line_number});
    } else {
      auto it = state.pending.find(pkey);
      if (it == state.pending.end() || it->second.empty()) {
        if (report) ++report->unmatched_release;
        continue;
      }
      const auto [press_t, press_line] = it->second.front();
      it->second.erase(it->second.begin());
      if (t < press_t) {
        // Release earlier than its press: drop both sides.
        if (report) {
          ++report->unmatched_release;
          ++report->unmatched_press;
        }
        continue;
      }
      auto& stream = by_subject[subject];
      stream.subject_id = subject;
      stream.events.push_back(KeystrokeEvent{session, key_code, press_t, t});
    }
  }

  // Presses that never saw a release are dropped and counted.
  if (report) {
    for (const auto& [subject, state] : pairing)
      for (const auto& [key, pending] : state.pending) report->unmatched_press += pending.size();
  }
  return finalize(std::move(by_subject), report);
}

inline std::vector<SubjectStream> load_event_rows(
    const std::vector<csv::Row>& rows, int col_subject, int col_session, int col_key,
    int col_letter, int col_press, int col_release, IngestReport* report) {
  std::map<std::string, SubjectStream> by_subject;
  for (const auto& row : rows) {
    if (report) ++report->rows_read;
    auto field = [&](int idx) -> const std::string& {
      static const std::string empty;
      if (idx < 0) return empty;
      if (static_cast<std::size_t>(idx) >= row.fields.size()) {
        std::ostringstream msg;
        msg << "row " << row.line_number << ": too few columns";
        throw std::runtime_error(msg.str());
      }
      return row.fields[static_cast<std::size_t>(idx)];
    };

    const std::string subject = csv::strip(field(col_subject));
    const std::string session = col_session >= 0 ? csv::strip(field(col_session)) : std::string{};
    const std::int64_t press = parse_ms(field(col_press), row.line_number);
    const std::int64_t release = parse_ms(field(col_release), row.line_number);
    if (release < press) {
      if (report) ++report->rows_rejected;
      continue;
    }

    int key_code = 0;
    const std::string key_field = csv::strip(field(col_key));
    if (!key_field.empty()) {
      bool numeric = true;
      for (std::size_t i = (key_field[0] == '-' ? 1 : 0); i < key_field.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(key_field[i]))) numeric = false;
      if (numeric) {
        const long long v = csv::parse_int(key_field, row.line_number, "key code");
        key_code = (v >= 0 && v <= 255) ? static_cast<int>(v) : 0;
      } else {
        key_code = key_code_from_name(key_field);
      }
    }
    if (key_code == 0 && col_letter >= 0) {
      const std::string letter = csv::strip(field(col_letter));
      if (!letter.empty()) key_code = key_code_from_name(letter);
    }

    auto& stream = by_subject[subject];
    stream.subject_id = subject;
    stream.events.push_back(KeystrokeEvent{session, key_code, press, release});
  }
  return finalize(std::move(by_subject), report);
}

}  // namespace detail

// Loads a free-text event log. The generic adapter understands both
// one-event-per-row files (press and release columns) and paired
// press/release action rows; aalto maps the desktop dataset's column names
// and tags sentence sections as sessions; clarkson2 expects paired action
// rows keyed by key name.
inline std::vector<SubjectStream> load_event_log(const std::string& path, Adapter adapter,
                                                 IngestReport* report = nullptr) {
  std::vector<std::string> header;
  const auto rows = csv::read_rows(path, &header);
  if (rows.empty() && header.empty()) {
    if (report) *report = IngestReport{};
    return {};
  }

  int col_subject = -1, col_session = -1, col_key = -1, col_letter = -1;
  int col_press = -1, col_release = -1, col_action = -1, col_time = -1;
  switch (adapter) {
    case Adapter::aalto:
      col_subject = detail::find_column(header, {"participant_id", "participant", "subject_id", "subject"});
      col_session = detail::find_column(header, {"test_section_id", "test_section", "section", "sentence_id"});
      col_key = detail::find_column(header, {"keycode", "key_code", "key"});
      col_letter = detail::find_column(header, {"letter"});
      col_press = detail::find_column(header, {"press_time", "press_ms", "press"});
      col_release = detail::find_column(header, {"release_time", "release_ms", "release"});
      break;
    case Adapter::clarkson2:
      col_subject = detail::find_column(header, {"subject_id", "subject", "user_id", "user"});
      col_session = detail::find_column(header, {"session_id", "session"});
      col_key = detail::find_column(header, {"key", "key_name", "keycode", "key_code"});
      col_action = detail::find_column(header, {"action", "event", "direction"});
      col_time = detail::find_column(header, {"time_ms", "time", "timestamp", "timestamp_ms"});
      break;
    case Adapter::generic:
      col_subject = detail::find_column(header, {"subject_id", "subject", "participant_id", "user"});
      col_session = detail::find_column(header, {"session_id", "session", "test_section_id"});
      col_key = detail::find_column(header, {"key_code", "keycode", "key"});
      col_letter = detail::find_column(header, {"letter"});
      col_press = detail::find_column(header, {"press_ms", "press_time", "press"});
      col_release = detail::find_column(header, {"release_ms", "release_time", "release"});
      col_action = detail::find_column(header, {"action", "event", "direction"});
      col_time = detail::find_column(header, {"time_ms", "time", "timestamp", "timestamp_ms"});
      break;
    case Adapter::cmu:
      throw std::runtime_error("use load_fixed_text_table for the cmu adapter");
  }
  if (col_subject < 0) throw std::runtime_error("event log header must name a subject column: " + path);

  if (col_press >= 0 && col_release >= 0)
    return detail::load_event_rows(rows, col_subject, col_session, col_key, col_letter, col_press,
                                   col_release, report);
  if (col_action >= 0 && col_time >= 0 && col_key >= 0)
    return detail::load_paired_rows(rows, col_subject, col_session, col_key, col_action, col_time,
                                    report);
  throw std::runtime_error(
      "event log header must provide either press/release columns or action/time columns: " + path);
}

inline std::vector<SubjectStream> load_dataset(const std::string& path, Adapter adapter,
                                               IngestReport* report = nullptr) {
  if (adapter == Adapter::cmu) return load_fixed_text_table(path, report);
  return load_event_log(path, adapter, report);
}

// --- Canonical on-disk format ------------------------------------------------

inline void write_canonical(const std::vector<SubjectStream>& streams, const std::string& path) {
  csv::Writer out(path);
  out.row("subject_id", "session_id", "key_code", "press_ms", "release_ms");
  std::vector<const SubjectStream*> ordered;
  ordered.reserve(streams.size());
  for (const auto& s : streams) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(),
            [](const SubjectStream* a, const SubjectStream* b) { return a->subject_id < b->subject_id; });
  for (const SubjectStream* s : ordered)
    for (const auto& ev : s->events)
      out.row(s->subject_id, ev.session_id, ev.key_code, ev.press_ms, ev.release_ms);
}

inline void write_report(const IngestReport& report, const std::string& path) {
  csv::Writer out(path);
  out.row("rows_read", "rows_rejected", "unmatched_press", "unmatched_release", "subjects", "events");
  out.row(report.rows_read, report.rows_rejected, report.unmatched_press, report.unmatched_release,
          report.subjects, report.events);
}

// --- Eligibility and splits --------------------------------------------------

inline std::vector<std::string> eligible_subjects(const std::vector<SubjectStream>& streams,
                                                  std::size_t min_keystrokes) {
  std::vector<std::string> out;
  for (const auto& s : streams)
    if (s.event_count() >= min_keystrokes) out.push_back(s.subject_id);
  std::sort(out.begin(), out.end());
  return out;
}

inline SplitPlan make_split(std::vector<std::string> subjects, std::size_t n_test,
                            std::size_t n_validation, std::uint64_t seed) {
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (n_test + n_validation > subjects.size()) {
    std::ostringstream msg;
    msg << "split needs " << n_test + n_validation << " subjects but only " << subjects.size()
        << " are available";
    throw std::runtime_error(msg.str());
  }
  Rng rng(stable_hash64(std::string_view{"split"}, seed));
  rng.shuffle(subjects);
  SplitPlan plan;
  plan.seed = seed;
  plan.test_subjects.assign(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_test));
  plan.validation_subjects.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_test),
                                  subjects.begin() + static_cast<std::ptrdiff_t>(n_test + n_validation));
  plan.train_subjects.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_test + n_validation),
                             subjects.end());
  std::sort(plan.test_subjects.begin(), plan.test_subjects.end());
  std::sort(plan.validation_subjects.begin(), plan.validation_subjects.end());
  std::sort(plan.train_subjects.begin(), plan.train_subjects.end());
  return plan;
}

}  // namespace kdlab::corpus
