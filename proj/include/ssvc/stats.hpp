#pragma once

// Paired t-test and MUSHRA-style listening-test CSV ingestion.

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "ssvc/tensor.hpp"

namespace ssvc::stats {

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
  double mean_difference = 0.0;
};

/// Raised when the paired differences have zero variance but a nonzero mean.
struct ZeroVarianceError : DataError {
  double mean_difference;
  explicit ZeroVarianceError(double md)
      : DataError(cat("paired t-test undefined: differences have zero variance (mean difference ", md, ")")),
        mean_difference(md) {}
};

/// Two-sided paired t-test on A - B with n - 1 degrees of freedom. All-zero
/// differences give t = 0, p = 1.
inline TTest paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError(cat("paired_ttest: lengths ", a.size(), " and ", b.size(), " differ"));
  if (a.size() < 2) throw DataError("paired_ttest needs at least 2 pairs");
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  bool all_zero = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    all_zero = all_zero && d == 0.0;
    ss += (d - mean) * (d - mean);
  }
  TTest r;
  r.df = static_cast<int>(a.size()) - 1;
  r.mean_difference = mean;
  if (all_zero) return r;
  const double var = ss / (n - 1.0);
  if (!(var > 0.0)) throw ZeroVarianceError(mean);
  r.t = mean / std::sqrt(var / n);
  const double df = r.df;
  r.p = boost::math::ibeta(df / 2.0, 0.5, df / (df + r.t * r.t));
  return r;
}

struct MushraTable {
  std::vector<std::string> systems;                       // first-appearance order
  std::vector<std::pair<std::string, std::string>> keys;  // (tester, item), first-appearance order
  std::map<std::string, std::vector<double>> scores;      // per system, aligned with keys

  [[nodiscard]] const std::vector<double>& of(const std::string& system) const {
    auto it = scores.find(system);
    if (it == scores.end()) throw DataError(cat("no MUSHRA scores for system '", system, "'"));
    return it->second;
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Parses "tester,system,item,score" rows. Row numbers in errors count the
/// header as row 1.
inline MushraTable parse_mushra(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) throw DataError("MUSHRA csv: empty file");
  ++row;
  if (detail::split_csv(line) != std::vector<std::string>{"tester", "system", "item", "score"})
    throw DataError("MUSHRA csv row 1: header must be tester,system,item,score");
  MushraTable t;
  std::map<std::pair<std::string, std::string>, int> key_index, key_row;
  std::map<std::string, std::map<int, double>> by_system;
  std::map<std::tuple<std::string, std::string, std::string>, int> seen;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 4) throw DataError(cat("MUSHRA csv row ", row, ": expected 4 fields, got ", f.size()));
    for (const auto& cell : f)
      if (cell.empty()) throw DataError(cat("MUSHRA csv row ", row, ": empty field"));
    double score;
    try {
      std::size_t used = 0;
      score = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(cat("MUSHRA csv row ", row, ": score '", f[3], "' is not a number"));
    }
    if (!(score >= 0.0 && score <= 100.0))
      throw DataError(cat("MUSHRA csv row ", row, ": score ", f[3], " outside [0,100]"));
    const auto full = std::make_tuple(f[0], f[1], f[2]);
    if (auto it = seen.find(full); it != seen.end())
      throw DataError(cat("MUSHRA csv row ", row, ": duplicate (tester ", f[0], ", system ", f[1], ", item ", f[2],
                          ") first seen at row ", it->second));
    seen.emplace(full, row);
    const auto key = std::make_pair(f[0], f[2]);
    if (!key_index.count(key)) {
      key_index.emplace(key, static_cast<int>(t.keys.size()));
      key_row.emplace(key, row);
      t.keys.push_back(key);
    }
    if (!by_system.count(f[1])) t.systems.push_back(f[1]);
    by_system[f[1]][key_index.at(key)] = score;
  }
  if (t.systems.empty()) throw DataError("MUSHRA csv: no score rows");
  for (const auto& s : t.systems) {
    const auto& m = by_system.at(s);
    for (std::size_t k = 0; k < t.keys.size(); ++k)
      if (!m.count(static_cast<int>(k)))
        throw DataError(cat("MUSHRA csv row ", key_row.at(t.keys[k]), ": ragged block, system '", s,
                            "' has no score for tester ", t.keys[k].first, ", item ", t.keys[k].second));
    auto& v = t.scores[s];
    for (const auto& [k, score] : m) v.push_back(score);
  }
  return t;
}

inline MushraTable mushra_ingest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(cat("cannot open ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_mushra(ss.str());
}

}  // namespace ssvc::stats
