#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "odg/geometry.hpp"

namespace odg {

struct Detection {
  int image_id = 0;
  OrientedBox box;
  int class_id = 0;
  double score = 0.0;
};

struct GtBox {
  int image_id = 0;
  OrientedBox box;
  int class_id = 0;
};

/// Greedy matching outcome: detections in evaluation order (score descending,
/// ties by image id then original index), a TP flag per detection, and the
/// matched (prediction angle, ground-truth angle) pairs.
struct MatchResult {
  std::vector<int> order;  // indices into the input detections
  std::vector<char> is_tp;
  std::vector<std::pair<double, double>> matched_angles;
  int num_gt = 0;
};

/// Greedy matcher at a rotated-IoU threshold: each detection (best first)
/// claims the highest-IoU unmatched ground truth of its own class and image;
/// a ground truth is claimed at most once.
inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                    double iou_thr, std::optional<int> class_filter = std::nullopt) {
  MatchResult result;
  std::vector<int> det_idx;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (!class_filter || dets[i].class_id == *class_filter) det_idx.push_back(static_cast<int>(i));
  std::sort(det_idx.begin(), det_idx.end(), [&](int a, int b) {
    const Detection& da = dets[static_cast<std::size_t>(a)];
    const Detection& db = dets[static_cast<std::size_t>(b)];
    if (da.score != db.score) return da.score > db.score;
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    return a < b;
  });

  std::vector<char> gt_used(gts.size(), 0);
  int num_gt = 0;
  for (const GtBox& g : gts)
    if (!class_filter || g.class_id == *class_filter) ++num_gt;

  for (int di : det_idx) {
    const Detection& d = dets[static_cast<std::size_t>(di)];
    int best_gt = -1;
    double best_iou = 0.0;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const GtBox& g = gts[gi];
      if (gt_used[gi] || g.image_id != d.image_id || g.class_id != d.class_id) continue;
      if (class_filter && g.class_id != *class_filter) continue;
      const double iou = rotated_iou(d.box, g.box);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(gi);
      }
    }
    const bool tp = best_gt >= 0 && best_iou >= iou_thr;
    result.order.push_back(di);
    result.is_tp.push_back(tp ? 1 : 0);
    if (tp) {
      gt_used[static_cast<std::size_t>(best_gt)] = 1;
      result.matched_angles.emplace_back(d.box.theta, gts[static_cast<std::size_t>(best_gt)].box.theta);
    }
  }
  result.num_gt = num_gt;
  return result;
}

/// All-point average precision: the precision envelope integrated over
/// recall. Flags must already be in evaluation order.
inline double average_precision(const std::vector<char>& tp_flags, int num_gt) {
  if (num_gt <= 0) throw InvalidInput("average_precision: num_gt must be positive");
  if (tp_flags.empty()) return 0.0;
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / num_gt;
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct ClassCounts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// Per-class AP, their mean over classes present in the ground truth, and the
/// angle RMSD over matched pairs. Classes without ground truth are reported
/// as absent and excluded from the mean.
struct EvalReport {
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  std::optional<double> angle_rmsd;
  std::vector<ClassCounts> counts;

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const {
    nlohmann::json j;
    j["per_class_ap"] = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class_ap.size(); ++c) {
      nlohmann::json jc;
      jc["class"] = c < class_names.size() ? nlohmann::json(class_names[c]) : nlohmann::json(c);
      jc["ap"] = per_class_ap[c] ? nlohmann::json(*per_class_ap[c]) : nlohmann::json(nullptr);
      jc["tp"] = counts[c].tp;
      jc["fp"] = counts[c].fp;
      jc["fn"] = counts[c].fn;
      j["per_class_ap"].push_back(std::move(jc));
    }
    j["map"] = map;
    j["angle_rmsd"] = angle_rmsd ? nlohmann::json(*angle_rmsd) : nlohmann::json(nullptr);
    return j;
  }

  std::string to_csv_row(const std::string& tag) const {
    std::ostringstream out;
    out.precision(17);
    out << tag << "," << map << ",";
    if (angle_rmsd) out << *angle_rmsd;
    for (std::size_t c = 0; c < per_class_ap.size(); ++c) {
      out << ",";
      if (per_class_ap[c]) out << *per_class_ap[c];
    }
    return out.str();
  }
};

inline EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                      double iou_thr, int num_classes) {
  EvalReport report;
  report.per_class_ap.resize(static_cast<std::size_t>(num_classes));
  report.counts.resize(static_cast<std::size_t>(num_classes));
  double ap_sum = 0.0;
  int present = 0;
  std::vector<std::pair<double, double>> all_angles;
  for (int c = 0; c < num_classes; ++c) {
    const MatchResult m = match_detections(dets, gts, iou_thr, c);
    ClassCounts& counts = report.counts[static_cast<std::size_t>(c)];
    for (char f : m.is_tp) (f ? counts.tp : counts.fp)++;
    counts.fn = m.num_gt - counts.tp;
    all_angles.insert(all_angles.end(), m.matched_angles.begin(), m.matched_angles.end());
    if (m.num_gt == 0) continue;  // absent class
    const double ap = average_precision(m.is_tp, m.num_gt);
    report.per_class_ap[static_cast<std::size_t>(c)] = ap;
    ap_sum += ap;
    ++present;
  }
  report.map = present > 0 ? ap_sum / present : 0.0;
  if (!all_angles.empty()) {
    double s = 0.0;
    for (const auto& [pred, gt] : all_angles) {
      const double d = angle_delta(pred, gt);
      s += d * d;
    }
    report.angle_rmsd = std::sqrt(s / static_cast<double>(all_angles.size()));
  }
  return report;
}

/// RMSD of the wrapped angular error over matched true positives across all
/// classes; absent when nothing matches.
inline std::optional<double> angle_rmsd(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                        double iou_thr, int num_classes) {
  return evaluate_detections(dets, gts, iou_thr, num_classes).angle_rmsd;
}

inline void write_eval_report(const EvalReport& report, const std::filesystem::path& path,
                              const std::vector<std::string>& class_names = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path.string());
  out << report.to_json(class_names).dump(2) << "\n";
}

}  // namespace odg
