#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/volume.hpp"

namespace meshnet {

/// Per-class voxel tallies between a predicted and a reference labeling.
struct ConfusionCounts {
  std::int64_t total = 0;
  std::vector<std::int64_t> tp, fp, fn, tn;
  std::vector<std::int64_t> vol_pred, vol_gt;  // V_p = TP+FP, V_g = TP+FN

  int classes() const { return static_cast<int>(tp.size()); }
};

inline ConfusionCounts confusion(const LabelVolume& pred, const LabelVolume& gt,
                                 int num_classes) {
  if (pred.dims != gt.dims)
    throw ShapeError("confusion: volume dimensions differ");
  ConfusionCounts c;
  c.total = static_cast<std::int64_t>(pred.voxel_count());
  c.vol_pred.assign(num_classes, 0);
  c.vol_gt.assign(num_classes, 0);
  std::vector<std::int64_t> match(num_classes, 0);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const std::int32_t p = pred.data[i], g = gt.data[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
      throw ShapeError("confusion: label out of range [0, " +
                       std::to_string(num_classes) + ")");
    ++c.vol_pred[p];
    ++c.vol_gt[g];
    if (p == g) ++match[p];
  }
  c.tp = match;
  c.fp.resize(num_classes);
  c.fn.resize(num_classes);
  c.tn.resize(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    c.fp[k] = c.vol_pred[k] - match[k];
    c.fn[k] = c.vol_gt[k] - match[k];
    c.tn[k] = c.total - c.tp[k] - c.fp[k] - c.fn[k];
  }
  return c;
}

/// Spatial overlap 2TP/(2TP+FN+FP). A class absent from both volumes
/// scores 1.0, which keeps macro averages defined on subjects missing
/// small structures.
inline double dice(const ConfusionCounts& c, int cls) {
  const double denom =
      static_cast<double>(2 * c.tp[cls] + c.fn[cls] + c.fp[cls]);
  if (denom == 0.0) return 1.0;
  return 2.0 * static_cast<double>(c.tp[cls]) / denom;
}

/// The published equation for this metric prints an intersection in the
/// numerator, which would score 1 for a perfect prediction; every use of
/// it in the source material treats it as a relative volume difference
/// where lower is better. `volume_difference` is that reading;
/// `literal_intersection` reproduces the printed formula.
enum class AvdForm { volume_difference, literal_intersection };

inline double avd(const ConfusionCounts& c, int cls,
                  AvdForm form = AvdForm::volume_difference) {
  const double vp = static_cast<double>(c.vol_pred[cls]);
  const double vg = static_cast<double>(c.vol_gt[cls]);
  if (vg == 0.0) {
    if (vp == 0.0) return 0.0;
    return std::numeric_limits<double>::infinity();
  }
  if (form == AvdForm::literal_intersection)
    return static_cast<double>(c.tp[cls]) / vg;
  return std::abs(vp - vg) / vg;
}

/// Unweighted mean over a class subset.
inline double macro(const std::vector<double>& per_class,
                    const std::vector<int>& subset) {
  if (subset.empty()) throw ShapeError("macro: empty class subset");
  double acc = 0;
  for (int c : subset) acc += per_class.at(c);
  return acc / static_cast<double>(subset.size());
}

/// All classes except background (class 0) unless asked otherwise.
inline std::vector<int> metric_classes(int num_classes,
                                       bool include_background = false) {
  std::vector<int> out;
  for (int c = include_background ? 0 : 1; c < num_classes; ++c)
    out.push_back(c);
  if (out.empty()) out.push_back(0);  // single-class volumes
  return out;
}

inline double macro_dice(const ConfusionCounts& c,
                         bool include_background = false) {
  std::vector<double> per(c.classes());
  for (int k = 0; k < c.classes(); ++k) per[k] = dice(c, k);
  return macro(per, metric_classes(c.classes(), include_background));
}

inline double macro_avd(const ConfusionCounts& c,
                        AvdForm form = AvdForm::volume_difference,
                        bool include_background = false) {
  std::vector<double> per(c.classes());
  for (int k = 0; k < c.classes(); ++k) per[k] = avd(c, k, form);
  return macro(per, metric_classes(c.classes(), include_background));
}

/// Tab-separated per-region table plus a macro summary row.
inline void write_metric_report(std::ostream& os, const ConfusionCounts& c,
                                const std::vector<std::string>& region_names = {},
                                bool avd_percent = false,
                                AvdForm form = AvdForm::volume_difference) {
  os << "region\tclass\tdice\tavd\n";
  const double avd_scale = avd_percent ? 100.0 : 1.0;
  for (int k = 0; k < c.classes(); ++k) {
    const std::string name = k < static_cast<int>(region_names.size())
                                 ? region_names[k]
                                 : "class_" + std::to_string(k);
    os << name << "\t" << k << "\t" << dice(c, k) << "\t"
       << avd(c, k, form) * avd_scale << "\n";
  }
  os << "macro\t-\t" << macro_dice(c) << "\t" << macro_avd(c, form) * avd_scale
     << "\n";
}

}  // namespace meshnet
