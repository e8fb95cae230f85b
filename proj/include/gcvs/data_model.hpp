#pragma once

// Observed-data representation for hybrid-control studies: one row per
// subject holding (z, a, y, x), where z flags the randomized trial
// (z=1) versus the external control source (z=0), a is the treatment
// indicator, y the outcome and x the covariate vector. External
// subjects are controls by design, so z=0 forces a=0.
//
// Datasets are immutable after construction and safe to share across
// threads.

#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcvs/common.hpp"

namespace gcvs {

enum class OutcomeKind { continuous, binary };

struct StudyRow {
  int z = 0;
  int a = 0;
  double y = 0.0;
  std::vector<double> x;
};

struct StrataCounts {
  int n_trt = 0;  // z=1, a=1
  int n_ic = 0;   // z=1, a=0
  int n_ec = 0;   // z=0
};

class StudyDataset {
 public:
  StudyDataset(std::vector<StudyRow> rows, OutcomeKind kind)
      : rows_(std::move(rows)), kind_(kind) {
    if (rows_.empty()) throw DataError("dataset is empty");
    p_ = static_cast<int>(rows_[0].x.size());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      const StudyRow& r = rows_[i];
      const std::string where = " (row " + std::to_string(i + 1) + ")";
      if (r.z != 0 && r.z != 1) throw DataError("z must be 0 or 1" + where);
      if (r.a != 0 && r.a != 1) throw DataError("a must be 0 or 1" + where);
      if (r.z == 0 && r.a == 1) {
        throw DataError("external subject with a=1" + where);
      }
      if (!std::isfinite(r.y)) throw DataError("non-finite outcome" + where);
      if (kind_ == OutcomeKind::binary && r.y != 0.0 && r.y != 1.0) {
        throw DataError("binary outcome must be 0 or 1" + where);
      }
      if (static_cast<int>(r.x.size()) != p_) {
        throw DataError("inconsistent covariate length" + where);
      }
      for (double v : r.x) {
        if (!std::isfinite(v)) throw DataError("non-finite covariate" + where);
      }
      if (r.z == 1) {
        ++n1_;
        if (r.a == 1) ++counts_.n_trt; else ++counts_.n_ic;
      } else {
        ++counts_.n_ec;
      }
    }
    if (n1_ < 1) throw DataError("no internal (z=1) subjects");
  }

  const std::vector<StudyRow>& rows() const { return rows_; }
  OutcomeKind outcome_kind() const { return kind_; }
  int p() const { return p_; }
  int n() const { return static_cast<int>(rows_.size()); }
  int n1() const { return n1_; }
  int n0() const { return counts_.n_ec; }
  const StrataCounts& counts() const { return counts_; }

 private:
  std::vector<StudyRow> rows_;
  OutcomeKind kind_;
  int p_ = 0;
  int n1_ = 0;
  StrataCounts counts_;
};

inline StrataCounts strata_counts(const StudyDataset& d) { return d.counts(); }

// Effect scale for delta = g(mu1) - g(mu0).
struct EffectMeasure {
  enum class Kind { difference, log_ratio, log_odds_ratio };
  Kind kind = Kind::difference;

  static EffectMeasure difference() { return {Kind::difference}; }
  static EffectMeasure log_ratio() { return {Kind::log_ratio}; }
  static EffectMeasure log_odds_ratio() { return {Kind::log_odds_ratio}; }

  double g(double mu) const {
    switch (kind) {
      case Kind::difference:
        return mu;
      case Kind::log_ratio:
        if (!(mu > 0.0)) {
          throw FitError("log ratio requires a positive mean estimate");
        }
        return std::log(mu);
      case Kind::log_odds_ratio:
        if (!(mu > 0.0 && mu < 1.0)) {
          throw FitError("log odds ratio requires a mean estimate in (0,1)");
        }
        return logit(mu);
    }
    throw ConfigError("unknown effect measure");
  }

  // derivative of g
  double gdot(double mu) const {
    switch (kind) {
      case Kind::difference:
        return 1.0;
      case Kind::log_ratio:
        if (!(mu > 0.0)) {
          throw FitError("log ratio requires a positive mean estimate");
        }
        return 1.0 / mu;
      case Kind::log_odds_ratio:
        if (!(mu > 0.0 && mu < 1.0)) {
          throw FitError("log odds ratio requires a mean estimate in (0,1)");
        }
        return 1.0 / (mu * (1.0 - mu));
    }
    throw ConfigError("unknown effect measure");
  }

  const char* name() const {
    switch (kind) {
      case Kind::difference: return "difference";
      case Kind::log_ratio: return "log_ratio";
      case Kind::log_odds_ratio: return "log_odds_ratio";
    }
    return "?";
  }
};

namespace detail {

inline std::string trim_eol(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_number(const std::string& cell, std::size_t line_no,
                           const std::string& col) {
  if (cell.empty()) {
    throw DataError("missing value in column '" + col + "' at line " +
                    std::to_string(line_no));
  }
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw DataError("non-numeric cell '" + cell + "' in column '" + col +
                    "' at line " + std::to_string(line_no));
  }
  return value;
}

inline int parse_indicator(const std::string& cell, std::size_t line_no,
                           const std::string& col) {
  const double v = parse_number(cell, line_no, col);
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  throw DataError("column '" + col + "' must be 0 or 1 at line " +
                  std::to_string(line_no));
}

}  // namespace detail

// Schema: required header `z,a,y,x1,...,xp`; UTF-8, plain decimal reals,
// no quoting. Missing values are rejected; covariate transformations are
// the caller's job.
inline StudyDataset load_csv(const std::string& path, OutcomeKind kind) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path);
  const auto header = detail::split_csv_line(detail::trim_eol(line));
  if (header.size() < 3 || header[0] != "z" || header[1] != "a" ||
      header[2] != "y") {
    throw DataError("header must start with z,a,y");
  }
  const int p = static_cast<int>(header.size()) - 3;
  for (int j = 0; j < p; ++j) {
    if (header[3 + j] != "x" + std::to_string(j + 1)) {
      throw DataError("covariate columns must be named x1..x" +
                      std::to_string(p) + "; got '" + header[3 + j] + "'");
    }
  }

  std::vector<StudyRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = detail::trim_eol(line);
    if (stripped.empty()) {
      if (in.eof()) break;  // tolerate one trailing newline
      throw DataError("blank line at " + std::to_string(line_no));
    }
    const auto cells = detail::split_csv_line(stripped);
    if (cells.size() != header.size()) {
      throw DataError("expected " + std::to_string(header.size()) +
                      " columns, got " + std::to_string(cells.size()) +
                      " at line " + std::to_string(line_no));
    }
    StudyRow r;
    r.z = detail::parse_indicator(cells[0], line_no, "z");
    r.a = detail::parse_indicator(cells[1], line_no, "a");
    if (r.z == 0 && r.a == 1) {
      throw DataError("external subject with a=1 at line " +
                      std::to_string(line_no));
    }
    r.y = detail::parse_number(cells[2], line_no, "y");
    if (kind == OutcomeKind::binary && r.y != 0.0 && r.y != 1.0) {
      throw DataError("binary outcome must be 0 or 1 at line " +
                      std::to_string(line_no));
    }
    r.x.resize(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
      r.x[static_cast<std::size_t>(j)] =
          detail::parse_number(cells[static_cast<std::size_t>(3 + j)], line_no,
                               header[static_cast<std::size_t>(3 + j)]);
    }
    rows.push_back(std::move(r));
  }

  StudyDataset d(std::move(rows), kind);
  if (d.counts().n_ic == 0) {
    throw DataError("empty internal control stratum (no z=1,a=0 rows)");
  }
  return d;
}

// Writes the same schema load_csv reads. Reals use %.17g so that a
// save/load round-trip reproduces every field bit-exactly.
inline void save_csv(const StudyDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "z,a,y";
  for (int j = 1; j <= d.p(); ++j) out << ",x" << j;
  out << "\n";
  char buf[64];
  for (const StudyRow& r : d.rows()) {
    out << r.z << ',' << r.a;
    std::snprintf(buf, sizeof(buf), ",%.17g", r.y);
    out << buf;
    for (double v : r.x) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace gcvs
