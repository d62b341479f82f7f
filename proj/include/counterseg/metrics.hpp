#ifndef COUNTERSEG_METRICS_HPP
#define COUNTERSEG_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "counterseg/volume.hpp"

namespace counterseg {

// ----- dice -----

// 2|A.B|/(|A|+|B|); both-empty = 1.0 (absence handled by the matching layer).
inline double dice(const LabelMask& a, const LabelMask& b) {
  CSEG_CHECK(a.nx == b.nx && a.ny == b.ny && a.nz == b.nz, "dice: shape mismatch");
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    bool av = a.data[i] != 0, bv = b.data[i] != 0;
    na += av;
    nb += bv;
    ni += av && bv;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

inline LabelMask binarize(const LabelMask& m, std::uint8_t label) {
  LabelMask out(m.nx, m.ny, m.nz, m.spacing);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] == label ? 1 : 0;
  return out;
}

// ----- connected components (26-connectivity) -----

inline std::vector<std::vector<std::int64_t>> connected_components_26(const LabelMask& binary) {
  std::vector<std::vector<std::int64_t>> comps;
  std::vector<std::uint8_t> seen(binary.data.size(), 0);
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < binary.numel(); ++start) {
    if (binary.data[static_cast<std::size_t>(start)] == 0 || seen[static_cast<std::size_t>(start)])
      continue;
    std::vector<std::int64_t> comp;
    stack.clear();
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      std::int64_t idx = stack.back();
      stack.pop_back();
      comp.push_back(idx);
      int z = static_cast<int>(idx / (static_cast<std::int64_t>(binary.nx) * binary.ny));
      int rem = static_cast<int>(idx % (static_cast<std::int64_t>(binary.nx) * binary.ny));
      int y = rem / binary.nx;
      int x = rem % binary.nx;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0 && dz == 0) continue;
            int nx2 = x + dx, ny2 = y + dy, nz2 = z + dz;
            if (nx2 < 0 || ny2 < 0 || nz2 < 0 || nx2 >= binary.nx || ny2 >= binary.ny ||
                nz2 >= binary.nz)
              continue;
            std::int64_t nidx = binary.index(nx2, ny2, nz2);
            if (binary.data[static_cast<std::size_t>(nidx)] != 0 &&
                !seen[static_cast<std::size_t>(nidx)]) {
              seen[static_cast<std::size_t>(nidx)] = 1;
              stack.push_back(nidx);
            }
          }
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  return comps;
}

// ----- detection matching -----

struct MatchedPair {
  int gt_component = -1;
  int pred_component = -1;
  double dsc = 0.0;
  bool true_positive = false;  // dsc strictly above the detection threshold
};

struct ScanDetections {
  std::vector<MatchedPair> matches;                       // greedy matches, any overlap
  std::vector<std::vector<std::int64_t>> gt_components;   // cyst voxel index sets
  std::vector<std::vector<std::int64_t>> pred_components;
  int tp = 0, fp = 0, fn = 0;
  std::vector<double> gt_dsc;           // per gt component; 0 when unmatched
  std::vector<SizeClass> gt_size_class;
};

// Greedy descending-DSC matching between 26-connected cyst components.
// A pair is a detection only when DSC > threshold, strictly.
inline ScanDetections match_detections(const LabelMask& pred, const LabelMask& gt,
                                       double threshold = 0.1) {
  CSEG_CHECK(pred.nx == gt.nx && pred.ny == gt.ny && pred.nz == gt.nz,
             "match_detections: shape mismatch");
  ScanDetections out;
  out.gt_components = connected_components_26(binarize(gt, kCyst));
  out.pred_components = connected_components_26(binarize(pred, kCyst));

  // overlap counts via a gt component id per voxel
  std::vector<int> gt_of(static_cast<std::size_t>(gt.numel()), -1);
  for (std::size_t g = 0; g < out.gt_components.size(); ++g)
    for (std::int64_t idx : out.gt_components[g]) gt_of[static_cast<std::size_t>(idx)] = static_cast<int>(g);

  struct Cand {
    double dsc;
    int p, g;
  };
  std::vector<Cand> cands;
  for (std::size_t p = 0; p < out.pred_components.size(); ++p) {
    std::map<int, std::int64_t> overlap;
    for (std::int64_t idx : out.pred_components[p]) {
      int g = gt_of[static_cast<std::size_t>(idx)];
      if (g >= 0) ++overlap[g];
    }
    for (const auto& [g, inter] : overlap) {
      double d = 2.0 * static_cast<double>(inter) /
                 static_cast<double>(out.pred_components[p].size() + out.gt_components[g].size());
      cands.push_back({d, static_cast<int>(p), g});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dsc != b.dsc) return a.dsc > b.dsc;
    if (a.g != b.g) return a.g < b.g;
    return a.p < b.p;
  });
  std::vector<bool> gt_used(out.gt_components.size(), false), pred_used(out.pred_components.size(), false);
  out.gt_dsc.assign(out.gt_components.size(), 0.0);
  for (const Cand& c : cands) {
    if (gt_used[c.g] || pred_used[c.p]) continue;
    gt_used[c.g] = true;
    pred_used[c.p] = true;
    MatchedPair mp;
    mp.gt_component = c.g;
    mp.pred_component = c.p;
    mp.dsc = c.dsc;
    mp.true_positive = c.dsc > threshold;
    out.gt_dsc[static_cast<std::size_t>(c.g)] = c.dsc;
    out.matches.push_back(mp);
    if (mp.true_positive) ++out.tp;
  }
  out.fn = static_cast<int>(out.gt_components.size()) - out.tp;
  out.fp = static_cast<int>(out.pred_components.size()) - out.tp;

  out.gt_size_class.reserve(out.gt_components.size());
  for (const auto& comp : out.gt_components) out.gt_size_class.push_back(stratify_by_volume(gt, comp));
  return out;
}

// ----- dataset summaries (the shape of a performance table) -----

struct SummaryRow {
  std::string split;
  int scans = 0;
  int cysts = 0;
  double dsc = 0.0;
  double dsc_small = std::nan("");
  double dsc_medium = std::nan("");
  double dsc_large = std::nan("");
  double sensitivity = 0.0;
  double sens_small = std::nan("");
  double sens_medium = std::nan("");
  double sens_large = std::nan("");
  double fppi = 0.0;
};

inline SummaryRow summarize(const std::string& split, const std::vector<ScanDetections>& reports) {
  CSEG_CHECK(!reports.empty(), "summarize: no reports");
  SummaryRow row;
  row.split = split;
  row.scans = static_cast<int>(reports.size());
  double dsc_sum[4] = {0, 0, 0, 0};
  int cyst_n[4] = {0, 0, 0, 0};
  int tp_n[4] = {0, 0, 0, 0};
  int fp_total = 0;
  for (const auto& r : reports) {
    fp_total += r.fp;
    for (std::size_t g = 0; g < r.gt_components.size(); ++g) {
      int cls = 1 + static_cast<int>(r.gt_size_class[g]);
      double d = r.gt_dsc[g];
      bool tp = d > 0.1;
      for (int slot : {0, cls}) {
        dsc_sum[slot] += d;
        cyst_n[slot] += 1;
        tp_n[slot] += tp ? 1 : 0;
      }
    }
  }
  row.cysts = cyst_n[0];
  if (cyst_n[0] > 0) {
    row.dsc = dsc_sum[0] / cyst_n[0];
    row.sensitivity = static_cast<double>(tp_n[0]) / cyst_n[0];
  }
  auto fill = [&](int slot, double& dsc_out, double& sens_out) {
    if (cyst_n[slot] > 0) {
      dsc_out = dsc_sum[slot] / cyst_n[slot];
      sens_out = static_cast<double>(tp_n[slot]) / cyst_n[slot];
    }
  };
  fill(1, row.dsc_small, row.sens_small);
  fill(2, row.dsc_medium, row.sens_medium);
  fill(3, row.dsc_large, row.sens_large);
  row.fppi = static_cast<double>(fp_total) / row.scans;
  return row;
}

// ----- two-sided rank-sum test -----

struct RankSumResult {
  double u = 0.0;
  double p = 1.0;
  bool exact = false;
};

namespace detail {
inline double mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) {
      if (x > y)
        u += 1.0;
      else if (x == y)
        u += 0.5;
    }
  return u;
}

inline void enumerate_labelings(const std::vector<double>& pooled, std::size_t n_a, std::size_t pos,
                                std::vector<double>& cur_a, std::vector<double>& cur_b,
                                double center, double dev_obs, std::int64_t& total,
                                std::int64_t& at_least) {
  if (cur_a.size() == n_a) {
    std::vector<double> rest = cur_b;
    rest.insert(rest.end(), pooled.begin() + pos, pooled.end());
    double u = mann_whitney_u(cur_a, rest);
    ++total;
    if (std::abs(u - center) >= dev_obs - 1e-9) ++at_least;
    return;
  }
  if (pooled.size() - pos < n_a - cur_a.size()) return;
  cur_a.push_back(pooled[pos]);
  enumerate_labelings(pooled, n_a, pos + 1, cur_a, cur_b, center, dev_obs, total, at_least);
  cur_a.pop_back();
  cur_b.push_back(pooled[pos]);
  enumerate_labelings(pooled, n_a, pos + 1, cur_a, cur_b, center, dev_obs, total, at_least);
  cur_b.pop_back();
}
}  // namespace detail

// Exact permutation p for n+m <= 12, normal approximation with tie correction
// otherwise. Two-sided: P(|U - nm/2| >= |u_obs - nm/2|).
inline RankSumResult rank_sum_test(const std::vector<double>& a, const std::vector<double>& b) {
  CSEG_CHECK(!a.empty() && !b.empty(), "rank_sum_test: both samples must be nonempty");
  RankSumResult res;
  res.u = detail::mann_whitney_u(a, b);
  const std::size_t n = a.size(), m = b.size();
  const double center = static_cast<double>(n) * static_cast<double>(m) / 2.0;

  bool constant = true;
  for (double x : a)
    if (x != a[0]) constant = false;
  for (double x : b)
    if (x != a[0]) constant = false;
  if (constant) {
    res.p = 1.0;
    res.exact = true;
    return res;
  }

  if (n + m <= 12) {
    std::vector<double> pooled = a;
    pooled.insert(pooled.end(), b.begin(), b.end());
    std::sort(pooled.begin(), pooled.end());
    std::vector<double> cur_a, cur_b;
    std::int64_t total = 0, at_least = 0;
    detail::enumerate_labelings(pooled, n, 0, cur_a, cur_b, center, std::abs(res.u - center), total,
                                at_least);
    res.p = static_cast<double>(at_least) / static_cast<double>(total);
    res.exact = true;
    return res;
  }

  // tie-corrected variance
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::sort(pooled.begin(), pooled.end());
  const double nn = static_cast<double>(n + m);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
    double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  double var = (static_cast<double>(n) * m / 12.0) * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
  if (var <= 0.0) {
    res.p = 1.0;
    return res;
  }
  double z = (std::abs(res.u - center) - 0.5) / std::sqrt(var);
  if (z < 0.0) z = 0.0;
  res.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

}  // namespace counterseg

#endif
