#include "scmii/eval.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace scmii {
namespace {

struct Ranked {
  double score;
  std::size_t frame;
  std::size_t index;
};

}  // namespace

double iou3d(const Eigen::Vector3d& center_a, const Eigen::Vector3d& size_a,
             const Eigen::Vector3d& center_b, const Eigen::Vector3d& size_b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(center_a[k] - size_a[k] / 2.0, center_b[k] - size_b[k] / 2.0);
    const double hi = std::min(center_a[k] + size_a[k] / 2.0, center_b[k] + size_b[k] / 2.0);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double uni = size_a.prod() + size_b.prod() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

double iou3d(const Detection& a, const Box3& b) {
  return iou3d(a.center, a.size, b.center, b.size);
}

double iou3d(const Detection& a, const Detection& b) {
  return iou3d(a.center, a.size, b.center, b.size);
}

double interpolated_area(const std::vector<PrPoint>& curve) {
  // Envelope from the right so precision is non-increasing in recall.
  std::vector<double> env(curve.size());
  double best = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    best = std::max(best, curve[i].precision);
    env[i] = best;
  }
  double area = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    area += (curve[i].recall - prev_recall) * env[i];
    prev_recall = curve[i].recall;
  }
  return area;
}

ApResult average_precision(const std::vector<EvalFrame>& frames, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("IoU threshold must be in (0, 1)");
  }
  std::vector<Ranked> ranked;
  std::size_t truth_count = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    truth_count += frames[f].truth.size();
    for (std::size_t i = 0; i < frames[f].detections.size(); ++i) {
      ranked.push_back({frames[f].detections[i].score, f, i});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  ApResult out;
  if (truth_count == 0) {
    out.no_truth = !ranked.empty();
    out.false_positives = ranked.size();
    return out;
  }
  std::vector<std::vector<bool>> used(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) used[f].assign(frames[f].truth.size(), false);

  for (const Ranked& r : ranked) {
    const Detection& d = frames[r.frame].detections[r.index];
    const std::vector<Box3>& truth = frames[r.frame].truth;
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[r.frame][j]) continue;
      const double iou = iou3d(d, truth[j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      used[r.frame][best_j] = true;
      ++out.true_positives;
    } else {
      ++out.false_positives;
    }
    const double tp = static_cast<double>(out.true_positives);
    out.curve.push_back({tp / static_cast<double>(truth_count),
                         tp / static_cast<double>(out.true_positives + out.false_positives)});
  }
  out.missed = truth_count - out.true_positives;
  out.ap = interpolated_area(out.curve);
  return out;
}

ApResult average_precision(const std::vector<Detection>& detections, const std::vector<Box3>& truth,
                           double iou_threshold) {
  return average_precision(std::vector<EvalFrame>{{detections, truth}}, iou_threshold);
}

EvalResult evaluate(const std::string& label, const std::vector<EvalFrame>& frames) {
  return {label, average_precision(frames, kApLooseIou), average_precision(frames, kApStrictIou)};
}

namespace {

nlohmann::json ap_to_json(const ApResult& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const PrPoint& p : r.curve) curve.push_back({p.recall, p.precision});
  return {{"ap", r.ap},
          {"true_positives", r.true_positives},
          {"false_positives", r.false_positives},
          {"missed", r.missed},
          {"no_truth", r.no_truth},
          {"pr_curve", curve}};
}

std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v * 100.0;
  return os.str();
}

}  // namespace

EvalReport eval_report(const std::vector<EvalResult>& results, const TimingReport* timing) {
  EvalReport report;
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalResult& r : results) {
    rows.push_back({{"label", r.label},
                    {"ap_0.3", ap_to_json(r.ap_loose)},
                    {"ap_0.5", ap_to_json(r.ap_strict)}});
  }
  report.json = {{"accuracy", rows}};
  if (timing != nullptr) report.json["timing"] = timing->to_json();

  std::size_t label_width = std::string("configuration").size();
  for (const EvalResult& r : results) label_width = std::max(label_width, r.label.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_width)) << "configuration" << std::right
     << "  " << std::setw(8) << "AP@0.3" << "  " << std::setw(8) << "AP@0.5" << "\n";
  for (const EvalResult& r : results) {
    os << std::left << std::setw(static_cast<int>(label_width)) << r.label << std::right << "  "
       << std::setw(8) << percent(r.ap_loose.ap) << "  " << std::setw(8) << percent(r.ap_strict.ap)
       << "\n";
  }
  if (timing != nullptr) os << "\n" << timing->to_table();
  report.text = os.str();
  return report;
}

}  // namespace scmii
