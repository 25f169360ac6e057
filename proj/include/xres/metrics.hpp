#pragma once

// Confusion matrix (rows = truth, columns = prediction) and the derived
// segmentation scores.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xres/errors.hpp"
#include "xres/raster.hpp"

namespace xres {

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;  // classes × classes

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

  std::uint64_t& operator()(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
  std::uint64_t operator()(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw DimensionError("merging confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const LabelRaster& pred, const LabelRaster& truth, std::size_t k) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw DimensionError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t t = truth.labels[i], p = pred.labels[i];
    if (t >= k || p >= k) throw DataError("class index out of range for K=" + std::to_string(k));
    ++cm(t, p);
  }
  return cm;
}

struct Scores {
  double oa = 0, miou = 0, fwiou = 0, kappa = 0;
  std::vector<double> iou;         // per class; 0 where the class is absent on both sides
  std::vector<std::uint8_t> present;  // class appears in truth or prediction
};

inline Scores score(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes;
  const double total = static_cast<double>(cm.total());
  if (total == 0) throw ContractError("scoring an empty confusion matrix");
  std::vector<double> row(k, 0), col(k, 0);
  double diag = 0;
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p) {
      const double v = static_cast<double>(cm(t, p));
      row[t] += v;
      col[p] += v;
      if (t == p) diag += v;
    }
  Scores s;
  s.oa = diag / total;
  s.iou.assign(k, 0);
  s.present.assign(k, 0);
  std::size_t n_present = 0;
  double pe = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double inter = static_cast<double>(cm(c, c));
    const double uni = row[c] + col[c] - inter;
    if (uni > 0) {
      s.iou[c] = inter / uni;
      s.present[c] = 1;
      s.miou += s.iou[c];
      ++n_present;
    }
    s.fwiou += row[c] / total * s.iou[c];
    pe += row[c] * col[c];
  }
  s.miou /= static_cast<double>(n_present);
  pe /= total * total;
  s.kappa = 1.0 - pe == 0.0 ? 0.0 : (s.oa - pe) / (1.0 - pe);
  return s;
}

// Column order of the report: I.S., L.V., T.C., W.
inline constexpr std::size_t kReportOrder[4] = {0, 2, 1, 3};
inline constexpr const char* kReportNames[4] = {"I.S.", "L.V.", "T.C.", "W."};

inline nlohmann::ordered_json scores_json(const std::string& tile, const ConfusionMatrix& cm) {
  const Scores s = score(cm);
  nlohmann::ordered_json j;
  j["tile"] = tile;
  j["mIoU"] = s.miou;
  j["FWIoU"] = s.fwiou;
  j["Kappa"] = s.kappa;
  j["OA"] = s.oa;
  nlohmann::ordered_json iou;
  if (cm.classes == 4) {
    for (std::size_t i = 0; i < 4; ++i) iou[kReportNames[i]] = s.iou[kReportOrder[i]];
  } else {
    for (std::size_t c = 0; c < cm.classes; ++c) iou[std::to_string(c)] = s.iou[c];
  }
  j["IoU"] = iou;
  j["pixels"] = cm.total();
  return j;
}

}  // namespace xres
