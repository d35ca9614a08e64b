#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scd/errors.hpp"

namespace scd {

// Bijection between change types and matrix indices. Index 0 is non-change;
// ordered pairs (l1,l2) of semantic classes 1..N (same-class pairs included)
// fill the remaining N*N slots.
struct ChangeTypeIndex {
  int num_classes = 0;

  explicit ChangeTypeIndex(int n) : num_classes(n) {
    if (n < 1) throw ConfigError("ChangeTypeIndex: need at least one semantic class");
  }

  int num_types() const { return num_classes * num_classes + 1; }

  int pair_to_class(int l1, int l2) const {
    if (l1 == 0 && l2 == 0) return 0;
    if (l1 == 0 || l2 == 0)
      throw AnnotationError("mixed zero/nonzero label pair (" + std::to_string(l1) + "," +
                            std::to_string(l2) + ")");
    if (l1 < 0 || l1 > num_classes || l2 < 0 || l2 > num_classes)
      throw ValueError("label pair (" + std::to_string(l1) + "," + std::to_string(l2) +
                       ") outside 0.." + std::to_string(num_classes));
    return 1 + (l1 - 1) * num_classes + (l2 - 1);
  }

  std::pair<int, int> class_to_pair(int idx) const {
    if (idx == 0) return {0, 0};
    if (idx < 0 || idx >= num_types())
      throw ValueError("change type index out of range: " + std::to_string(idx));
    const int r = idx - 1;
    return {r / num_classes + 1, r % num_classes + 1};
  }
};

// C x C count matrix: row = predicted change type, column = true change type.
// The merge operation makes it a commutative monoid, so evaluation shards can
// be accumulated independently and combined.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_types) : c_(num_types) {
    if (num_types < 2) throw ConfigError("ConfusionMatrix: need at least 2 types");
    q_.assign(static_cast<std::size_t>(num_types) * num_types, 0);
  }

  int num_types() const { return c_; }

  std::int64_t& at(int pred, int gt) {
    return q_[static_cast<std::size_t>(pred) * c_ + static_cast<std::size_t>(gt)];
  }
  std::int64_t at(int pred, int gt) const {
    return q_[static_cast<std::size_t>(pred) * c_ + static_cast<std::size_t>(gt)];
  }

  void add(int pred, int gt, std::int64_t n = 1) {
    if (pred < 0 || pred >= c_ || gt < 0 || gt >= c_)
      throw ValueError("confusion index out of range");
    at(pred, gt) += n;
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : q_) t += v;
    return t;
  }

  void merge(const ConfusionMatrix& other) {
    if (other.c_ != c_)
      throw ShapeError("merge: type count mismatch " + std::to_string(c_) + " vs " +
                       std::to_string(other.c_));
    for (std::size_t i = 0; i < q_.size(); ++i) q_[i] += other.q_[i];
  }

  friend ConfusionMatrix merged(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    ConfusionMatrix out = a;
    out.merge(b);
    return out;
  }

  bool operator==(const ConfusionMatrix& other) const {
    return c_ == other.c_ && q_ == other.q_;
  }

  std::vector<std::int64_t> row_sums() const {
    std::vector<std::int64_t> r(static_cast<std::size_t>(c_), 0);
    for (int i = 0; i < c_; ++i)
      for (int j = 0; j < c_; ++j) r[static_cast<std::size_t>(i)] += at(i, j);
    return r;
  }
  std::vector<std::int64_t> col_sums() const {
    std::vector<std::int64_t> c(static_cast<std::size_t>(c_), 0);
    for (int i = 0; i < c_; ++i)
      for (int j = 0; j < c_; ++j) c[static_cast<std::size_t>(j)] += at(i, j);
    return c;
  }

  const std::vector<std::int64_t>& counts() const { return q_; }

 private:
  int c_ = 0;
  std::vector<std::int64_t> q_;
};

// Per-pixel accumulation of predicted vs true label pairs.
inline void accumulate(ConfusionMatrix& q, const ChangeTypeIndex& index,
                       const std::vector<int>& pred_l1, const std::vector<int>& pred_l2,
                       const std::vector<int>& gt_l1, const std::vector<int>& gt_l2) {
  if (pred_l1.size() != pred_l2.size() || gt_l1.size() != gt_l2.size() ||
      pred_l1.size() != gt_l1.size())
    throw ShapeError("accumulate: prediction and ground truth extents differ");
  for (std::size_t p = 0; p < pred_l1.size(); ++p)
    q.add(index.pair_to_class(pred_l1[p], pred_l2[p]),
          index.pair_to_class(gt_l1[p], gt_l2[p]));
}

namespace detail {
inline void require_nonempty(const ConfusionMatrix& q) {
  if (q.total() == 0) throw ValueError("metric undefined on an empty confusion matrix");
}
}  // namespace detail

inline double oa(const ConfusionMatrix& q) {
  detail::require_nonempty(q);
  std::int64_t diag = 0;
  for (int i = 0; i < q.num_types(); ++i) diag += q.at(i, i);
  return static_cast<double>(diag) / static_cast<double>(q.total());
}

inline double kappa(const ConfusionMatrix& q) {
  detail::require_nonempty(q);
  const double total = static_cast<double>(q.total());
  const double rho = oa(q);
  const auto rows = q.row_sums();
  const auto cols = q.col_sums();
  double eta = 0.0;
  for (int j = 0; j < q.num_types(); ++j)
    eta += static_cast<double>(rows[static_cast<std::size_t>(j)]) *
           static_cast<double>(cols[static_cast<std::size_t>(j)]);
  eta /= total * total;
  if (1.0 - eta < 1e-12) return rho >= 1.0 - 1e-12 ? 1.0 : 0.0;
  return (rho - eta) / (1.0 - eta);
}

// (IOU of the non-change type, IOU of the pooled changed types).
inline std::pair<double, double> iou_pair(const ConfusionMatrix& q) {
  detail::require_nonempty(q);
  const auto rows = q.row_sums();
  const auto cols = q.col_sums();
  const double q00 = static_cast<double>(q.at(0, 0));
  const double den1 = static_cast<double>(rows[0]) + static_cast<double>(cols[0]) - q00;
  const double iou1 = den1 <= 0.0 ? 1.0 : q00 / den1;

  const double changed = static_cast<double>(q.total()) - q00;
  double inter = 0.0;
  for (int i = 1; i < q.num_types(); ++i)
    for (int j = 1; j < q.num_types(); ++j) inter += static_cast<double>(q.at(i, j));
  const double iou2 = changed <= 0.0 ? 1.0 : inter / changed;
  return {iou1, iou2};
}

inline double miou(const ConfusionMatrix& q) {
  const auto [i1, i2] = iou_pair(q);
  return 0.5 * (i1 + i2);
}

// Two readings of "row/column sums of the confusion matrix without q00":
// EntryZeroed keeps row 0 and column 0 but zeroes the single q00 cell, so
// missed and hallucinated changes still drive eta-hat. RowColDeleted drops
// the whole row and column instead.
enum class SekVariant { EntryZeroed, RowColDeleted };

inline double sek(const ConfusionMatrix& q, SekVariant variant = SekVariant::EntryZeroed) {
  detail::require_nonempty(q);
  const double q00 = static_cast<double>(q.at(0, 0));
  const double changed = static_cast<double>(q.total()) - q00;
  const double iou2 = iou_pair(q).second;
  if (changed <= 0.0) return 1.0;  // no change anywhere, none predicted

  std::int64_t diag = 0;
  for (int i = 1; i < q.num_types(); ++i) diag += q.at(i, i);
  const double rho_hat = static_cast<double>(diag) / changed;

  auto rows = q.row_sums();
  auto cols = q.col_sums();
  double eta_hat = 0.0;
  if (variant == SekVariant::EntryZeroed) {
    rows[0] -= q.at(0, 0);
    cols[0] -= q.at(0, 0);
    for (int j = 0; j < q.num_types(); ++j)
      eta_hat += static_cast<double>(rows[static_cast<std::size_t>(j)]) *
                 static_cast<double>(cols[static_cast<std::size_t>(j)]);
  } else {
    for (int j = 1; j < q.num_types(); ++j) {
      const double r = static_cast<double>(rows[static_cast<std::size_t>(j)] - q.at(j, 0));
      const double c = static_cast<double>(cols[static_cast<std::size_t>(j)] - q.at(0, j));
      eta_hat += r * c;
    }
  }
  eta_hat /= changed * changed;

  double kappa_hat;
  if (1.0 - eta_hat < 1e-12)
    kappa_hat = rho_hat >= 1.0 - 1e-12 ? 1.0 : 0.0;
  else
    kappa_hat = (rho_hat - eta_hat) / (1.0 - eta_hat);
  return std::exp(iou2 - 1.0) * kappa_hat;
}

// SeK of the 2x2 collapse concentrating on one change type; everything else
// (including non-change) plays the non-change slot. Returns nullopt when the
// type appears in neither prediction nor ground truth.
inline std::optional<double> categorical_sek(const ConfusionMatrix& q, int change_type,
                                             SekVariant variant = SekVariant::EntryZeroed) {
  if (change_type <= 0 || change_type >= q.num_types())
    throw ValueError("categorical_sek: type must be a changed type index");
  const auto rows = q.row_sums();
  const auto cols = q.col_sums();
  const std::int64_t present = rows[static_cast<std::size_t>(change_type)] +
                               cols[static_cast<std::size_t>(change_type)];
  if (present == 0) return std::nullopt;

  ConfusionMatrix two(2);
  const std::int64_t tt = q.at(change_type, change_type);
  two.add(1, 1, tt);
  two.add(1, 0, rows[static_cast<std::size_t>(change_type)] - tt);
  two.add(0, 1, cols[static_cast<std::size_t>(change_type)] - tt);
  two.add(0, 0, q.total() - rows[static_cast<std::size_t>(change_type)] -
                    cols[static_cast<std::size_t>(change_type)] + tt);
  return sek(two, variant);
}

struct MetricReport {
  double oa = 0.0;
  double kappa = 0.0;
  double iou1 = 0.0;
  double iou2 = 0.0;
  double miou = 0.0;
  double sek = 0.0;
  // keyed "(l1,l2)"; nullopt renders as null / "--"
  std::vector<std::pair<std::string, std::optional<double>>> per_type_sek;
  ConfusionMatrix matrix;
  int num_classes = 0;
};

inline MetricReport report(const ConfusionMatrix& q, const ChangeTypeIndex& index,
                           SekVariant variant = SekVariant::EntryZeroed) {
  MetricReport r;
  r.oa = oa(q);
  r.kappa = kappa(q);
  std::tie(r.iou1, r.iou2) = iou_pair(q);
  r.miou = 0.5 * (r.iou1 + r.iou2);
  r.sek = sek(q, variant);
  r.matrix = q;
  r.num_classes = index.num_classes;
  for (int l1 = 1; l1 <= index.num_classes; ++l1)
    for (int l2 = 1; l2 <= index.num_classes; ++l2) {
      const int t = index.pair_to_class(l1, l2);
      std::ostringstream key;
      key << '(' << l1 << ',' << l2 << ')';
      r.per_type_sek.emplace_back(key.str(), categorical_sek(q, t, variant));
    }
  return r;
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["oa"] = r.oa;
  j["kappa"] = r.kappa;
  j["iou1"] = r.iou1;
  j["iou2"] = r.iou2;
  j["miou"] = r.miou;
  j["sek"] = r.sek;
  nlohmann::json pts = nlohmann::json::object();
  for (const auto& [key, value] : r.per_type_sek) {
    if (value.has_value())
      pts[key] = *value;
    else
      pts[key] = nullptr;
  }
  j["per_type_sek"] = pts;
  nlohmann::json counts = nlohmann::json::array();
  for (int i = 0; i < r.matrix.num_types(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int jj = 0; jj < r.matrix.num_types(); ++jj) row.push_back(r.matrix.at(i, jj));
    counts.push_back(row);
  }
  j["counts"] = counts;
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.oa = j.at("oa").get<double>();
  r.kappa = j.at("kappa").get<double>();
  r.iou1 = j.at("iou1").get<double>();
  r.iou2 = j.at("iou2").get<double>();
  r.miou = j.at("miou").get<double>();
  r.sek = j.at("sek").get<double>();
  for (const auto& [key, value] : j.at("per_type_sek").items()) {
    if (value.is_null())
      r.per_type_sek.emplace_back(key, std::nullopt);
    else
      r.per_type_sek.emplace_back(key, value.get<double>());
  }
  const auto& counts = j.at("counts");
  const int c = static_cast<int>(counts.size());
  r.matrix = ConfusionMatrix(c);
  for (int i = 0; i < c; ++i)
    for (int jj = 0; jj < c; ++jj)
      r.matrix.at(i, jj) = counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(jj)]
                               .get<std::int64_t>();
  r.num_classes = static_cast<int>(std::lround(std::sqrt(static_cast<double>(c - 1))));
  return r;
}

// N x N categorical-SeK grid as CSV: rows = class in image 1, columns =
// class in image 2, absent types empty.
inline std::string report_to_csv(const MetricReport& r,
                                 const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "class";
  for (int l2 = 1; l2 <= r.num_classes; ++l2)
    os << ',' << class_names[static_cast<std::size_t>(l2)];
  os << '\n';
  std::size_t idx = 0;
  for (int l1 = 1; l1 <= r.num_classes; ++l1) {
    os << class_names[static_cast<std::size_t>(l1)];
    for (int l2 = 1; l2 <= r.num_classes; ++l2, ++idx) {
      os << ',';
      const auto& v = r.per_type_sek[idx].second;
      if (v.has_value()) os << std::setprecision(6) << std::fixed << *v;
    }
    os << '\n';
  }
  os << "iou1," << std::setprecision(6) << std::fixed << r.iou1 << '\n';
  os << "iou2," << std::setprecision(6) << std::fixed << r.iou2 << '\n';
  return os.str();
}

// Aligned text table: categorical SeK grid with the scalar suite underneath.
inline std::string report_to_text(const MetricReport& r,
                                  const std::vector<std::string>& class_names) {
  std::ostringstream os;
  std::size_t width = 10;
  for (const auto& n : class_names) width = std::max(width, n.size() + 2);
  auto cell = [&](const std::string& s) {
    os << std::setw(static_cast<int>(width)) << s;
  };
  os << "categorical SeK (rows: image 1 class, cols: image 2 class)\n";
  cell("");
  for (int l2 = 1; l2 <= r.num_classes; ++l2)
    cell(class_names[static_cast<std::size_t>(l2)]);
  os << '\n';
  std::size_t idx = 0;
  for (int l1 = 1; l1 <= r.num_classes; ++l1) {
    cell(class_names[static_cast<std::size_t>(l1)]);
    for (int l2 = 1; l2 <= r.num_classes; ++l2, ++idx) {
      const auto& v = r.per_type_sek[idx].second;
      if (v.has_value()) {
        std::ostringstream num;
        num << std::setprecision(4) << std::fixed << *v;
        cell(num.str());
      } else {
        cell("--");
      }
    }
    os << '\n';
  }
  os << '\n';
  auto scalar = [&](const char* name, double v) {
    os << std::left << std::setw(8) << name << std::right << std::setprecision(6)
       << std::fixed << v << '\n';
  };
  scalar("OA", r.oa);
  scalar("kappa", r.kappa);
  scalar("IOU1", r.iou1);
  scalar("IOU2", r.iou2);
  scalar("mIOU", r.miou);
  scalar("SeK", r.sek);
  return os.str();
}

}  // namespace scd
