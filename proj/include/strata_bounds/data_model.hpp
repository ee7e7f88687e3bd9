#pragma once

// Experiment representation: unit records, CSV ingestion and the per-block
// design summary (sizes, treated quotas, shares, control selection rates).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "strata_bounds/errors.hpp"

namespace strata_bounds {

struct UnitRecord {
  std::optional<double> y;  // present iff s == 1
  int s = 0;
  int d = 0;
  std::string block;
  std::vector<double> x;

  bool treated() const noexcept { return d == 1; }
  bool observed() const noexcept { return s == 1; }
  /// Outcome with unobserved units mapped to zero (Y = S * Y*).
  double y_or_zero() const noexcept { return y.value_or(0.0); }

  friend bool operator==(const UnitRecord&, const UnitRecord&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

inline void check_record(const UnitRecord& r, std::size_t index) {
  auto fail = [&](const std::string& msg) {
    throw ValidationError("unit " + std::to_string(index) + ": " + msg);
  };
  if (r.d != 0 && r.d != 1) fail("d must be 0/1");
  if (r.s != 0 && r.s != 1) fail("s must be 0/1");
  if (r.s == 0 && r.y.has_value()) fail("y present with s=0");
  if (r.s == 1 && !r.y.has_value()) fail("y missing with s=1");
  if (r.y && !std::isfinite(*r.y)) fail("y must be finite");
  if (r.block.empty()) fail("empty block label");
}

}  // namespace detail

/// Ordered collection of units. Immutable once constructed.
class Dataset {
 public:
  explicit Dataset(std::vector<UnitRecord> records) : records_(std::move(records)) {
    if (records_.size() < 2) throw ValidationError("dataset needs at least 2 units");
    std::map<std::string, std::size_t> counts;
    std::size_t treated = 0;
    const std::size_t k = records_.front().x.size();
    for (std::size_t i = 0; i < records_.size(); ++i) {
      auto& r = records_[i];
      r.block = detail::trim(r.block);
      detail::check_record(r, i + 1);
      if (r.x.size() != k) {
        throw ValidationError("unit " + std::to_string(i + 1) + ": covariate count differs");
      }
      treated += static_cast<std::size_t>(r.d);
      ++counts[r.block];
    }
    if (treated == 0 || treated == records_.size()) {
      throw ValidationError("dataset needs at least one treated and one control unit");
    }
    for (const auto& [label, c] : counts) {
      if (c < 2) throw ValidationError("block '" + label + "' has fewer than 2 units");
    }
  }

  const std::vector<UnitRecord>& records() const noexcept { return records_; }
  const UnitRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const noexcept { return records_.size(); }
  std::size_t covariate_count() const noexcept { return records_.front().x.size(); }

  auto begin() const noexcept { return records_.begin(); }
  auto end() const noexcept { return records_.end(); }

  /// Same units with treatment relabelled d := 1 - d.
  Dataset with_arms_swapped() const {
    auto copy = records_;
    for (auto& r : copy) r.d = 1 - r.d;
    return Dataset(std::move(copy));
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::vector<UnitRecord> records_;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  out.push_back(std::move(cell));
  return out;
}

inline bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  char* end = nullptr;
  out = std::strtod(text.c_str(), &end);
  return end == text.c_str() + text.size() && std::isfinite(out);
}

inline int parse_binary(const std::string& text, const char* name, std::size_t row) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  throw ParseError(row, std::string(name) + " must be 0/1");
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses `y,s,d,block[,x1..xk]` CSV (columns in any order). Empty or "NA" y
/// marks an unobserved outcome.
inline Dataset parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) {
    throw ValidationError("empty CSV input");
  }
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);
  int col_y = -1, col_s = -1, col_d = -1, col_block = -1;
  std::map<int, int> x_cols;  // covariate number -> column
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const auto name = detail::trim(header[c]);
    if (name == "y") col_y = c;
    else if (name == "s") col_s = c;
    else if (name == "d") col_d = c;
    else if (name == "block") col_block = c;
    else if (name.size() > 1 && name[0] == 'x' &&
             std::all_of(name.begin() + 1, name.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      x_cols[std::stoi(name.substr(1))] = c;
    } else {
      throw ParseError(1, "unknown column '" + name + "'");
    }
  }
  if (col_y < 0 || col_s < 0 || col_d < 0 || col_block < 0) {
    throw ParseError(1, "header must contain y, s, d, block");
  }
  int expect = 1;
  for (const auto& [k, c] : x_cols) {
    if (k != expect++) throw ParseError(1, "covariate columns must be x1..xk");
  }

  std::vector<UnitRecord> records;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError(row, "expected " + std::to_string(header.size()) + " cells, got " +
                                std::to_string(cells.size()));
    }
    UnitRecord r;
    r.d = detail::parse_binary(detail::trim(cells[col_d]), "d", row);
    r.s = detail::parse_binary(detail::trim(cells[col_s]), "s", row);
    const auto ycell = detail::trim(cells[col_y]);
    if (!ycell.empty() && ycell != "NA") {
      double v = 0;
      if (!detail::parse_double(ycell, v)) throw ParseError(row, "y is not a finite number");
      r.y = v;
    }
    if (r.s == 1 && !r.y) throw ParseError(row, "y missing with s=1");
    if (r.s == 0 && r.y) throw ParseError(row, "y present with s=0");
    r.block = detail::trim(cells[col_block]);
    if (r.block.empty()) throw ParseError(row, "empty block label");
    for (const auto& [k, c] : x_cols) {
      double v = 0;
      if (!detail::parse_double(detail::trim(cells[c]), v)) {
        throw ParseError(row, "x" + std::to_string(k) + " is not a finite number");
      }
      r.x.push_back(v);
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ValidationError("CSV has a header but no rows");
  return Dataset(std::move(records));
}

inline Dataset parse_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return parse_csv(in);
}

/// Writes the dataset in the same format parse_csv reads (full precision).
inline void write_csv(const Dataset& data, std::ostream& out) {
  out << "y,s,d,block";
  for (std::size_t k = 0; k < data.covariate_count(); ++k) out << ",x" << (k + 1);
  out << '\n';
  for (const auto& r : data) {
    if (r.y) out << detail::format_double(*r.y);
    out << ',' << r.s << ',' << r.d << ',';
    if (r.block.find_first_of(",\"") != std::string::npos) {
      out << '"';
      for (char c : r.block) out << (c == '"' ? "\"\"" : std::string(1, c));
      out << '"';
    } else {
      out << r.block;
    }
    for (double v : r.x) out << ',' << detail::format_double(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Block design

struct BlockSummary {
  std::string label;
  std::size_t n_g = 0;    // units
  std::size_t t_g = 0;    // treated units
  double eta_g = 0.0;     // t_g / n_g
  double m_g = 0.0;       // observed controls / controls
  std::size_t n1s_g = 0;  // observed treated
  std::size_t n0s_g = 0;  // observed controls
  std::vector<double> x_mean;

  std::size_t controls() const noexcept { return n_g - t_g; }
  std::size_t arm_size(int d) const noexcept { return d == 1 ? t_g : n_g - t_g; }
};

struct BlockDesign {
  std::vector<BlockSummary> blocks;  // sorted by label
  std::vector<std::size_t> unit_block;  // block index of every unit, in row order
  std::size_t n = 0;
  std::size_t treated = 0;
  double p_hat = 0.0;

  std::size_t block_count() const noexcept { return blocks.size(); }
  const BlockSummary& block_of(std::size_t unit) const { return blocks[unit_block[unit]]; }

  /// True when every block has the same treated share (compared as rationals).
  bool equal_shares() const noexcept {
    const auto& b0 = blocks.front();
    return std::all_of(blocks.begin(), blocks.end(), [&](const BlockSummary& b) {
      return b.t_g * b0.n_g == b0.t_g * b.n_g;
    });
  }
};

/// Summarises blocks and validates that every block contains both arms.
inline BlockDesign block_design(const Dataset& data) {
  std::map<std::string, std::size_t> index;
  for (const auto& r : data) index.emplace(r.block, 0);
  BlockDesign design;
  design.blocks.resize(index.size());
  std::size_t g = 0;
  for (auto& [label, idx] : index) {
    idx = g;
    design.blocks[g].label = label;
    design.blocks[g].x_mean.assign(data.covariate_count(), 0.0);
    ++g;
  }
  design.unit_block.reserve(data.size());
  for (const auto& r : data) {
    const auto b = index.at(r.block);
    design.unit_block.push_back(b);
    auto& s = design.blocks[b];
    ++s.n_g;
    s.t_g += static_cast<std::size_t>(r.d);
    if (r.s == 1) (r.d == 1 ? s.n1s_g : s.n0s_g) += 1;
    for (std::size_t k = 0; k < r.x.size(); ++k) s.x_mean[k] += r.x[k];
  }
  std::string bad;
  for (auto& s : design.blocks) {
    if (s.t_g == 0 || s.t_g == s.n_g) {
      bad += (bad.empty() ? "" : ", ") + ("'" + s.label + "'");
      continue;
    }
    s.eta_g = static_cast<double>(s.t_g) / static_cast<double>(s.n_g);
    s.m_g = static_cast<double>(s.n0s_g) / static_cast<double>(s.controls());
    for (auto& v : s.x_mean) v /= static_cast<double>(s.n_g);
    design.treated += s.t_g;
  }
  if (!bad.empty()) {
    throw ValidationError("infeasible design: block(s) " + bad +
                          " lack a treated or a control unit");
  }
  design.n = data.size();
  design.p_hat = static_cast<double>(design.treated) / static_cast<double>(design.n);
  return design;
}

/// Blocks with no observed unit in some arm. Point estimation still works for
/// pooled estimators; callers surface these as soft warnings.
inline std::vector<std::string> design_warnings(const BlockDesign& design) {
  std::vector<std::string> out;
  for (const auto& b : design.blocks) {
    if (b.n1s_g == 0) out.push_back("block '" + b.label + "' has no observed treated unit");
    if (b.n0s_g == 0) out.push_back("block '" + b.label + "' has no observed control unit");
  }
  return out;
}

}  // namespace strata_bounds
