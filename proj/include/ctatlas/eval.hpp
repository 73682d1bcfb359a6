#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctatlas/volume.hpp"

namespace ctatlas {

using Mask = std::vector<char>;

inline Mask organ_mask(const LabelVolume& labels, std::uint16_t id) {
  Mask m(labels.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.data[i] == id;
  return m;
}

inline Mask nonzero_mask(const LabelVolume& labels) {
  Mask m(labels.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.data[i] != 0;
  return m;
}

inline double dice(const Mask& p, const Mask& g) {
  if (p.size() != g.size()) throw Error(ErrorCode::Shape, "mask sizes differ");
  std::size_t np = 0, ng = 0, both = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    np += p[i] != 0;
    ng += g[i] != 0;
    both += (p[i] != 0) && (g[i] != 0);
  }
  if (np == 0 && ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

// Dice of the two volumes restricted to label `id`.
inline double dice(const LabelVolume& p, const LabelVolume& g, std::uint16_t id) {
  if (!p.geometry.same_as(g.geometry)) throw Error(ErrorCode::Shape, "label geometries differ");
  return dice(organ_mask(p, id), organ_mask(g, id));
}

// Mask voxels with at least one face neighbour outside the mask (or the grid).
inline Mask boundary(const Mask& m, const Index3& dims) {
  Mask b(m.size(), 0);
  auto in = [&](int i, int j, int k) {
    if (i < 0 || j < 0 || k < 0 || i >= dims[0] || j >= dims[1] || k >= dims[2]) return false;
    return m[i + static_cast<std::size_t>(dims[0]) * (j + static_cast<std::size_t>(dims[1]) * k)] != 0;
  };
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i) {
        if (!in(i, j, k)) continue;
        if (!in(i - 1, j, k) || !in(i + 1, j, k) || !in(i, j - 1, k) || !in(i, j + 1, k) || !in(i, j, k - 1) ||
            !in(i, j, k + 1))
          b[i + static_cast<std::size_t>(dims[0]) * (j + static_cast<std::size_t>(dims[1]) * k)] = 1;
      }
  return b;
}

namespace detail {

// out[p] = min_q f[q] + (s (p - q))^2 along one line.
inline void edt_1d(std::vector<double>& f, double s, std::vector<int>& v, std::vector<double>& z,
                   std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  out.assign(n, inf);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = -1;
  const double w = s * s;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    auto intersect = [&](int r) { return ((f[q] + w * q * q) - (f[r] + w * r * r)) / (2.0 * w * (q - r)); };
    double x = intersect(v[k]);
    while (x <= z[k]) x = intersect(v[--k]);  // z[0] = -inf stops the loop
    ++k;
    v[k] = q;
    z[k] = x;
    z[k + 1] = inf;
  }
  if (k < 0) return;
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const double d = s * (p - v[j]);
    out[p] = f[v[j]] + d * d;
  }
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest set voxel.
inline std::vector<double> squared_edt(const Mask& m, const Index3& dims, const Vec3& spacing) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) d[i] = m[i] ? 0.0 : inf;
  const std::size_t sx = 1, sy = dims[0], sz = static_cast<std::size_t>(dims[0]) * dims[1];
  const std::size_t stride[3] = {sx, sy, sz};
  std::vector<double> line, out, z;
  std::vector<int> v;
  for (int a = 0; a < 3; ++a) {
    const int b = (a + 1) % 3, c = (a + 2) % 3;
    for (int ic = 0; ic < dims[c]; ++ic)
      for (int ib = 0; ib < dims[b]; ++ib) {
        const std::size_t base = ib * stride[b] + ic * stride[c];
        line.resize(dims[a]);
        for (int ia = 0; ia < dims[a]; ++ia) line[ia] = d[base + ia * stride[a]];
        edt_1d(line, spacing[a], v, z, out);
        for (int ia = 0; ia < dims[a]; ++ia) d[base + ia * stride[a]] = out[ia];
      }
  }
  return d;
}

inline double directed_hausdorff(const Mask& from, const std::vector<double>& sq_dist_to) {
  double worst = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i)
    if (from[i]) worst = std::max(worst, sq_dist_to[i]);
  return std::sqrt(worst);
}

}  // namespace detail

// Symmetric Hausdorff distance (mm) between the boundary voxel centres of two masks.
inline double hausdorff(const Mask& p, const Mask& g, const Index3& dims, const Vec3& spacing) {
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (p.size() != n || g.size() != n) throw Error(ErrorCode::Shape, "mask sizes differ from the grid");
  const Mask bp = boundary(p, dims), bg = boundary(g, dims);
  if (std::none_of(bp.begin(), bp.end(), [](char c) { return c; }) ||
      std::none_of(bg.begin(), bg.end(), [](char c) { return c; }))
    throw Error(ErrorCode::UndefinedDistance, "Hausdorff distance of an empty mask");
  const auto dp = detail::squared_edt(bp, dims, spacing);
  const auto dg = detail::squared_edt(bg, dims, spacing);
  return std::max(detail::directed_hausdorff(bp, dg), detail::directed_hausdorff(bg, dp));
}

inline double hausdorff(const LabelVolume& p, const LabelVolume& g, std::uint16_t id) {
  if (!p.geometry.same_as(g.geometry)) throw Error(ErrorCode::Shape, "label geometries differ");
  return hausdorff(organ_mask(p, id), organ_mask(g, id), p.geometry.dims, p.geometry.spacing);
}

struct SignedRankResult {
  double w_plus = 0.0;
  int n = 0;  // nonzero differences
  double p_value = 1.0;
  bool exact = false;
};

// Two-sided Wilcoxon signed-rank test on paired samples (zero differences dropped).
inline SignedRankResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Shape, "paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  if (d.empty()) throw Error(ErrorCode::DegenerateSample, "all paired differences are zero");
  if (d.size() < 5) throw Error(ErrorCode::DegenerateSample, "fewer than 5 nonzero paired differences");

  const int n = static_cast<int>(d.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) { return std::abs(d[x]) < std::abs(d[y]); });
  std::vector<int> doubled(n);  // twice the average rank
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const int t = j - i + 1;
    for (int m = i; m <= j; ++m) doubled[order[m]] = i + j + 2;
    tie_term += static_cast<double>(t) * t * t - t;
    i = j + 1;
  }

  SignedRankResult r;
  r.n = n;
  long twice_w = 0;
  for (int i = 0; i < n; ++i)
    if (d[i] > 0) twice_w += doubled[i];
  r.w_plus = twice_w / 2.0;

  if (n <= 12) {
    r.exact = true;
    long total = 0;
    for (int x : doubled) total += x;
    std::vector<double> count(total + 1, 0.0);
    count[0] = 1.0;
    for (int x : doubled)
      for (long s = total; s >= x; --s) count[s] += count[s - x];
    double lower = 0.0, upper = 0.0;
    for (long s = 0; s <= total; ++s) {
      if (s <= twice_w) lower += count[s];
      if (s >= twice_w) upper += count[s];
    }
    const double all = std::ldexp(1.0, n);
    r.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    return r;
  }

  const double mean = n * (n + 1) / 4.0;
  const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_term / 48.0;
  const double dev = std::max(0.0, std::abs(r.w_plus - mean) - 0.5);
  const double z = var > 0.0 ? dev / std::sqrt(var) : 0.0;
  r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

struct EvalRecord {
  std::string subject;
  std::string method;
  std::uint16_t organ = 0;
  std::string organ_name;
  double dice = 0.0;
  std::optional<double> hd_mm;  // absent when undefined (empty mask)
};

struct SummaryStat {
  double mean = 0.0;
  double sd = 0.0;  // population
  std::size_t n = 0;
};

inline SummaryStat summarize(const std::vector<double>& xs) {
  SummaryStat s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  for (double x : xs) s.sd += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(s.sd / static_cast<double>(xs.size()));
  return s;
}

struct EvalRow {
  std::string method;
  std::string organ;  // "average" for the overall row
  SummaryStat dice;
  SummaryStat hd_mm;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  std::vector<EvalRow> rows;
  std::map<std::string, double> p_values;  // organ -> p, when comparing two methods
  std::vector<std::string> failures;

  nlohmann::json to_json() const {
    auto stat = [](const SummaryStat& s) { return nlohmann::json{{"mean", s.mean}, {"sd", s.sd}, {"n", s.n}}; };
    nlohmann::json j;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records)
      j["records"].push_back({{"subject", r.subject},
                              {"method", r.method},
                              {"organ", r.organ},
                              {"organ_name", r.organ_name},
                              {"dice", r.dice},
                              {"hd_mm", r.hd_mm ? nlohmann::json(*r.hd_mm) : nlohmann::json()}});
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows)
      j["rows"].push_back({{"method", r.method}, {"organ", r.organ}, {"dice", stat(r.dice)}, {"hd_mm", stat(r.hd_mm)}});
    j["p_values"] = p_values;
    j["failures"] = failures;
    return j;
  }

  // Method rows, organ columns, "mean±sd" Dice cells.
  std::string to_table() const {
    std::vector<std::string> methods, organs;
    for (const auto& r : rows) {
      if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
      if (std::find(organs.begin(), organs.end(), r.organ) == organs.end()) organs.push_back(r.organ);
    }
    auto cell = [&](const std::string& m, const std::string& o) -> std::string {
      for (const auto& r : rows)
        if (r.method == m && r.organ == o) {
          std::ostringstream s;
          s << std::fixed << std::setprecision(3) << r.dice.mean << "±" << r.dice.sd;
          return s.str();
        }
      return "-";
    };
    std::size_t w0 = 6;
    for (const auto& m : methods) w0 = std::max(w0, m.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(w0) + 2) << "method";
    for (const auto& o : organs) out << std::setw(std::max<int>(14, static_cast<int>(o.size()) + 2)) << o;
    out << "\n";
    for (const auto& m : methods) {
      out << std::setw(static_cast<int>(w0) + 2) << m;
      for (const auto& o : organs) {
        // setw counts bytes; "±" is two bytes in UTF-8.
        out << std::setw(std::max<int>(14, static_cast<int>(o.size()) + 2) + 1) << cell(m, o);
      }
      out << "\n";
    }
    return out.str();
  }
};

inline EvalReport build_report(std::vector<EvalRecord> records) {
  EvalReport rep;
  rep.records = std::move(records);
  std::vector<std::string> methods;
  for (const auto& r : rep.records)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  for (const auto& m : methods) {
    std::map<std::uint16_t, std::string> names;
    std::map<std::uint16_t, std::pair<std::vector<double>, std::vector<double>>> by_organ;
    std::vector<double> all_d, all_h;
    for (const auto& r : rep.records) {
      if (r.method != m) continue;
      names.emplace(r.organ, r.organ_name.empty() ? std::to_string(r.organ) : r.organ_name);
      by_organ[r.organ].first.push_back(r.dice);
      all_d.push_back(r.dice);
      if (r.hd_mm) {
        by_organ[r.organ].second.push_back(*r.hd_mm);
        all_h.push_back(*r.hd_mm);
      }
    }
    for (const auto& [id, v] : by_organ) rep.rows.push_back({m, names[id], summarize(v.first), summarize(v.second)});
    rep.rows.push_back({m, "average", summarize(all_d), summarize(all_h)});
  }
  return rep;
}

// Per-organ paired Dice comparison of two methods, matched by subject.
inline void add_paired_pvalues(EvalReport& rep, const std::string& method_a, const std::string& method_b) {
  std::map<std::string, std::map<std::string, std::pair<std::optional<double>, std::optional<double>>>> pairs;
  for (const auto& r : rep.records) {
    const std::string organ = r.organ_name.empty() ? std::to_string(r.organ) : r.organ_name;
    if (r.method == method_a) pairs[organ][r.subject].first = r.dice;
    if (r.method == method_b) pairs[organ][r.subject].second = r.dice;
  }
  for (const auto& [organ, subjects] : pairs) {
    std::vector<double> a, b;
    for (const auto& [s, v] : subjects)
      if (v.first && v.second) {
        a.push_back(*v.first);
        b.push_back(*v.second);
      }
    try {
      rep.p_values[organ] = wilcoxon_signed_rank(a, b).p_value;
    } catch (const Error& e) {
      rep.failures.push_back("p-value for " + organ + ": " + e.what());
    }
  }
}

}  // namespace ctatlas
