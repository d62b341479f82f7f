#ifndef COUNTERSEG_QC_HPP
#define COUNTERSEG_QC_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "counterseg/seg.hpp"

namespace counterseg {

// Scalar per-case uncertainty; the single switchable flagging statistic
// behind the QC curves.
//
// kPredictedCystMeanElseBox: mean std over the predicted cyst region, falling
//   back to the ROI-box mean when the prediction is empty.
// kUncertainVolumeRatio: count of box voxels whose std exceeds a threshold,
//   divided by (predicted cyst voxel count + 1). Large uncertain regions with
//   small or empty predictions rank highest, which is what flags confident
//   misses; a clean segmentation carries only its thin boundary shell.
enum class CaseUncertaintyPolicy { kPredictedCystMeanElseBox, kUncertainVolumeRatio };

inline double case_uncertainty(const std::vector<double>& unc_map, const LabelMask& predicted,
                               const BoundingBox& box,
                               CaseUncertaintyPolicy policy = CaseUncertaintyPolicy::kPredictedCystMeanElseBox,
                               double std_threshold = 0.15) {
  CSEG_CHECK(unc_map.size() == predicted.data.size(), "case_uncertainty: map/mask misaligned");
  box.validate({predicted.nx, predicted.ny, predicted.nz});
  std::int64_t n_pred = 0;
  for (std::size_t i = 0; i < unc_map.size(); ++i) n_pred += predicted.data[i] == kCyst;

  if (policy == CaseUncertaintyPolicy::kUncertainVolumeRatio) {
    std::int64_t uncertain = 0;
    for (int z = box.start[2]; z < box.end(2); ++z)
      for (int y = box.start[1]; y < box.end(1); ++y)
        for (int x = box.start[0]; x < box.end(0); ++x)
          uncertain += unc_map[static_cast<std::size_t>(predicted.index(x, y, z))] > std_threshold;
    return static_cast<double>(uncertain) / static_cast<double>(n_pred + 1);
  }

  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < unc_map.size(); ++i)
    if (predicted.data[i] == kCyst) {
      sum += unc_map[i];
      ++n;
    }
  if (n > 0) return sum / static_cast<double>(n);
  for (int z = box.start[2]; z < box.end(2); ++z)
    for (int y = box.start[1]; y < box.end(1); ++y)
      for (int x = box.start[0]; x < box.end(0); ++x) {
        sum += unc_map[static_cast<std::size_t>(predicted.index(x, y, z))];
        ++n;
      }
  return sum / static_cast<double>(n);
}

inline CaseUncertaintyPolicy uncertainty_policy_from(const std::string& name) {
  if (name == "cyst_mean") return CaseUncertaintyPolicy::kPredictedCystMeanElseBox;
  if (name == "uncertain_volume_ratio") return CaseUncertaintyPolicy::kUncertainVolumeRatio;
  throw std::invalid_argument("unknown uncertainty policy: " + name);
}

// ----- quality-control curve -----

struct QcPoint {
  double threshold = 0.0;          // flag cases with uncertainty >= threshold
  double flagged_fraction = 0.0;
  double remaining_poor_fraction = 0.0;
  double ideal = 0.0;
  double random_expectation = 0.0;
};

struct QcCurve {
  std::vector<QcPoint> points;  // one per flagged count 0..N
  double baseline_poor_fraction = 0.0;

  // remaining poor fraction at a given flagged fraction (nearest grid point)
  double remaining_at(double flagged) const {
    CSEG_CHECK(!points.empty(), "qc curve: empty");
    std::size_t best = 0;
    double bestd = 1e9;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double d = std::abs(points[i].flagged_fraction - flagged);
      if (d < bestd) {
        bestd = d;
        best = i;
      }
    }
    return points[best].remaining_poor_fraction;
  }
};

struct QcCase {
  double uncertainty = 0.0;
  double dsc = 0.0;
};

// Flag the k most uncertain cases for each k = 0..N; flagged cases count as
// manually corrected. Also emits the ideal curve (poor cases flagged first)
// and the uniform-random expectation baseline * (1 - flagged_fraction).
inline QcCurve qc_curve(const std::vector<QcCase>& cases, double poor_threshold = 0.75) {
  CSEG_CHECK(!cases.empty(), "qc_curve: empty input");
  const std::size_t n = cases.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cases[a].uncertainty > cases[b].uncertainty;
  });

  std::size_t poor_total = 0;
  for (const auto& c : cases) poor_total += c.dsc < poor_threshold;
  const double baseline = static_cast<double>(poor_total) / static_cast<double>(n);
  double max_u = cases[order[0]].uncertainty;

  QcCurve curve;
  curve.baseline_poor_fraction = baseline;
  std::size_t poor_flagged = 0;
  for (std::size_t k = 0; k <= n; ++k) {
    if (k > 0) poor_flagged += cases[order[k - 1]].dsc < poor_threshold;
    QcPoint pt;
    pt.threshold = k == 0 ? max_u + 1.0 : cases[order[k - 1]].uncertainty;
    pt.flagged_fraction = static_cast<double>(k) / static_cast<double>(n);
    pt.remaining_poor_fraction = static_cast<double>(poor_total - poor_flagged) / static_cast<double>(n);
    pt.ideal = static_cast<double>(poor_total > k ? poor_total - k : 0) / static_cast<double>(n);
    pt.random_expectation = baseline * (1.0 - pt.flagged_fraction);
    curve.points.push_back(pt);
  }
  return curve;
}

inline void write_qc_csv(const QcCurve& curve, const std::filesystem::path& path) {
  std::ofstream f(path);
  CSEG_RUNTIME_CHECK(f.good(), "cannot write qc csv: " + path.string());
  f << "threshold,flagged_fraction,remaining_poor_fraction,ideal,random_expectation\n";
  char buf[256];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,%.10g,%.10g\n", p.threshold,
                  p.flagged_fraction, p.remaining_poor_fraction, p.ideal, p.random_expectation);
    f << buf;
  }
}

// ----- snapshot ensemble serialization -----

namespace detail {
inline nlohmann::json segconfig_json(const SegConfig& c) {
  return {{"patch", {c.patch[0], c.patch[1], c.patch[2]}},
          {"depth", c.depth},
          {"widths", c.widths},
          {"ds_weights", c.ds_weights},
          {"num_classes", c.num_classes},
          {"dice_smooth", c.dice_smooth},
          {"lrelu_alpha", c.lrelu_alpha},
          {"instnorm_eps", c.instnorm_eps}};
}

inline SegConfig segconfig_from_json(const nlohmann::json& j) {
  SegConfig c;
  auto p = j.at("patch").get<std::vector<int>>();
  CSEG_RUNTIME_CHECK(p.size() == 3, "bad patch dims in config");
  c.patch = {p[0], p[1], p[2]};
  c.depth = j.at("depth").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.ds_weights = j.at("ds_weights").get<std::vector<double>>();
  c.num_classes = j.at("num_classes").get<int>();
  c.dice_smooth = j.at("dice_smooth").get<double>();
  c.lrelu_alpha = j.at("lrelu_alpha").get<double>();
  c.instnorm_eps = j.at("instnorm_eps").get<double>();
  return c;
}

inline nlohmann::json schedule_json(const ScheduleConfig& s) {
  return {{"t_max", s.t_max},
          {"t_cycle", s.t_cycle},
          {"plateau_fraction", s.plateau_fraction},
          {"base_lr", s.base_lr},
          {"restart_lr", s.restart_lr},
          {"exponent", s.exponent},
          {"snapshots_per_cycle", s.snapshots_per_cycle}};
}

inline ScheduleConfig schedule_from_json(const nlohmann::json& j) {
  ScheduleConfig s;
  s.t_max = j.at("t_max").get<int>();
  s.t_cycle = j.at("t_cycle").get<int>();
  s.plateau_fraction = j.at("plateau_fraction").get<double>();
  s.base_lr = j.at("base_lr").get<double>();
  s.restart_lr = j.at("restart_lr").get<double>();
  s.exponent = j.at("exponent").get<double>();
  s.snapshots_per_cycle = j.at("snapshots_per_cycle").get<int>();
  return s;
}
}  // namespace detail

// Layout: <dir>/cycle<i>/epoch<j>/ parameter sets + <dir>/ensemble.json.
inline void save_ensemble(const SnapshotEnsemble& ens, const std::filesystem::path& dir) {
  ens.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["schedule"] = detail::schedule_json(ens.schedule);
  manifest["net"] = detail::segconfig_json(ens.net);
  manifest["members"] = nlohmann::json::array();
  for (const auto& m : ens.members) {
    std::string rel = "cycle" + std::to_string(m.cycle) + "/epoch" + std::to_string(m.epoch);
    save_params(m.params, dir / rel);
    manifest["members"].push_back({{"cycle", m.cycle}, {"epoch", m.epoch}, {"path", rel}});
  }
  std::ofstream f(dir / "ensemble.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot write ensemble manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline SnapshotEnsemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream f(dir / "ensemble.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot read ensemble manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  SnapshotEnsemble ens;
  ens.schedule = detail::schedule_from_json(manifest.at("schedule"));
  ens.net = detail::segconfig_from_json(manifest.at("net"));
  for (const auto& m : manifest.at("members")) {
    SnapshotMember mem;
    mem.cycle = m.at("cycle").get<int>();
    mem.epoch = m.at("epoch").get<int>();
    mem.params = load_params(dir / m.at("path").get<std::string>());
    ens.members.push_back(std::move(mem));
  }
  ens.validate();
  return ens;
}

}  // namespace counterseg

#endif
