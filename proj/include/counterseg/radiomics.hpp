#ifndef COUNTERSEG_RADIOMICS_HPP
#define COUNTERSEG_RADIOMICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "counterseg/common.hpp"

namespace counterseg {

// Handcrafted feature extraction over a fixed ROI. Conventions pinned here
// (and covered by tests): distance-1 26-neighborhood everywhere, fixed bin
// width anchored at the ROI minimum, feature values averaged over the 13
// unique GLCM directions, dependence size includes the center voxel, and the
// degenerate single-level conventions listed next to each formula.

constexpr double kLog2Eps = 2.220446049250313e-16;  // added inside every log2

inline double log2e(double x) { return std::log2(x + kLog2Eps); }

// ----- ROI containers -----

struct RoiVoxels {
  std::vector<double> values;                 // raw intensities, ROI order
  std::vector<std::array<int, 3>> coords;     // (x,y,z)
  double voxel_volume = 1.0;                  // mm^3, for total energy
};

inline RoiVoxels extract_roi(const std::vector<double>& vox, std::array<int, 3> dims,
                             const std::vector<std::uint8_t>& mask, std::uint8_t label,
                             double voxel_volume = 1.0) {
  CSEG_CHECK(vox.size() == mask.size() &&
                 vox.size() == static_cast<std::size_t>(dims[0]) * dims[1] * dims[2],
             "extract_roi: buffer sizes disagree");
  RoiVoxels out;
  out.voxel_volume = voxel_volume;
  std::size_t i = 0;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x, ++i)
        if (mask[i] == label) {
          out.values.push_back(vox[i]);
          out.coords.push_back({x, y, z});
        }
  return out;
}

// Integer bins over a bounding grid for O(1) neighbor lookups.
struct DiscretizedRoi {
  std::vector<int> bins;                    // per ROI voxel, 1..n_levels
  std::vector<std::array<int, 3>> coords;
  int n_levels = 0;
  double bin_width = 25.0;
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> dims{0, 0, 0};
  std::vector<int> grid;  // index into bins, or -1

  int voxel_at(int x, int y, int z) const {
    x -= lo[0];
    y -= lo[1];
    z -= lo[2];
    if (x < 0 || y < 0 || z < 0 || x >= dims[0] || y >= dims[1] || z >= dims[2]) return -1;
    return grid[static_cast<std::size_t>((static_cast<std::int64_t>(z) * dims[1] + y) * dims[0] + x)];
  }
  std::size_t size() const { return bins.size(); }
};

// bin = floor((v - min_ROI)/width) + 1, anchored at the ROI minimum.
inline DiscretizedRoi discretize(const RoiVoxels& roi, double bin_width = 25.0) {
  CSEG_CHECK(!roi.values.empty(), "discretize: empty ROI");
  CSEG_CHECK(bin_width > 0.0, "discretize: bin width must be positive");
  DiscretizedRoi d;
  d.bin_width = bin_width;
  d.coords = roi.coords;
  const double mn = *std::min_element(roi.values.begin(), roi.values.end());
  d.bins.reserve(roi.values.size());
  for (double v : roi.values) {
    int b = static_cast<int>(std::floor((v - mn) / bin_width)) + 1;
    d.bins.push_back(b);
    d.n_levels = std::max(d.n_levels, b);
  }
  std::array<int, 3> hi = roi.coords[0];
  d.lo = roi.coords[0];
  for (const auto& c : roi.coords)
    for (int a = 0; a < 3; ++a) {
      d.lo[a] = std::min(d.lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a]);
    }
  for (int a = 0; a < 3; ++a) d.dims[a] = hi[a] - d.lo[a] + 1;
  d.grid.assign(static_cast<std::size_t>(d.dims[0]) * d.dims[1] * d.dims[2], -1);
  for (std::size_t i = 0; i < d.coords.size(); ++i) {
    const auto& c = d.coords[i];
    d.grid[static_cast<std::size_t>(
        (static_cast<std::int64_t>(c[2] - d.lo[2]) * d.dims[1] + (c[1] - d.lo[1])) * d.dims[0] +
        (c[0] - d.lo[0]))] = static_cast<int>(i);
  }
  return d;
}

// the 13 unique direction offsets at distance 1 in 3D
inline const std::array<std::array<int, 3>, 13>& glcm_directions() {
  static const std::array<std::array<int, 3>, 13> dirs{{{1, 0, 0},
                                                        {0, 1, 0},
                                                        {0, 0, 1},
                                                        {1, 1, 0},
                                                        {1, -1, 0},
                                                        {1, 0, 1},
                                                        {1, 0, -1},
                                                        {0, 1, 1},
                                                        {0, 1, -1},
                                                        {1, 1, 1},
                                                        {1, 1, -1},
                                                        {1, -1, 1},
                                                        {1, -1, -1}}};
  return dirs;
}

// all 26 neighbor offsets
inline const std::vector<std::array<int, 3>>& neighborhood26() {
  static const std::vector<std::array<int, 3>> offs = [] {
    std::vector<std::array<int, 3>> v;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx || dy || dz) v.push_back({dx, dy, dz});
    return v;
  }();
  return offs;
}

// ----- named vector -----

struct RadiomicsVector {
  std::vector<double> values;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n = [] {
      std::vector<std::string> v;
      const char* fo[] = {"energy", "total_energy", "entropy", "minimum", "percentile_10",
                          "percentile_90", "maximum", "mean", "median", "interquartile_range",
                          "range", "mean_absolute_deviation", "robust_mean_absolute_deviation",
                          "root_mean_squared", "skewness", "kurtosis", "variance", "uniformity"};
      for (auto s : fo) v.push_back(std::string("firstorder_") + s);
      const char* gl[] = {"autocorrelation", "cluster_prominence", "cluster_shade",
                          "cluster_tendency", "contrast", "correlation", "difference_average",
                          "difference_entropy", "difference_variance", "id", "idm", "idmn", "idn",
                          "imc1", "imc2", "inverse_variance", "joint_average", "joint_energy",
                          "joint_entropy", "maximum_probability", "mcc", "sum_average",
                          "sum_entropy", "sum_squares"};
      for (auto s : gl) v.push_back(std::string("glcm_") + s);
      const char* gd[] = {"small_dependence_emphasis", "large_dependence_emphasis",
                          "gray_level_non_uniformity", "dependence_non_uniformity",
                          "dependence_non_uniformity_normalized", "gray_level_variance",
                          "dependence_variance", "dependence_entropy", "low_gray_level_emphasis",
                          "high_gray_level_emphasis", "small_dependence_low_gray_level_emphasis",
                          "small_dependence_high_gray_level_emphasis",
                          "large_dependence_low_gray_level_emphasis",
                          "large_dependence_high_gray_level_emphasis"};
      for (auto s : gd) v.push_back(std::string("gldm_") + s);
      const char* gz[] = {"small_area_emphasis", "large_area_emphasis", "gray_level_non_uniformity",
                          "gray_level_non_uniformity_normalized", "size_zone_non_uniformity",
                          "size_zone_non_uniformity_normalized", "zone_percentage",
                          "gray_level_variance", "zone_variance", "zone_entropy",
                          "low_gray_level_zone_emphasis", "high_gray_level_zone_emphasis",
                          "small_area_low_gray_level_emphasis", "small_area_high_gray_level_emphasis",
                          "large_area_low_gray_level_emphasis", "large_area_high_gray_level_emphasis"};
      for (auto s : gz) v.push_back(std::string("glszm_") + s);
      const char* ng[] = {"coarseness", "contrast", "busyness", "complexity", "strength"};
      for (auto s : ng) v.push_back(std::string("ngtdm_") + s);
      return v;
    }();
    return n;
  }

  static int index_of(const std::string& name) {
    const auto& n = names();
    for (std::size_t i = 0; i < n.size(); ++i)
      if (n[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("unknown radiomics feature: " + name);
  }

  double at(const std::string& name) const { return values[static_cast<std::size_t>(index_of(name))]; }
};

// ----- first order (18) -----

namespace detail {
// linear-interpolation percentile on a sorted copy
inline double percentile(std::vector<double> sorted, double q) {
  const double rank = q / 100.0 * (static_cast<double>(sorted.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}
}  // namespace detail

inline std::vector<double> first_order(const RoiVoxels& roi, const DiscretizedRoi& d) {
  CSEG_CHECK(!roi.values.empty(), "first_order: empty ROI");
  CSEG_CHECK(d.size() == roi.values.size(), "first_order: discretization mismatch");
  const auto& x = roi.values;
  const double n = static_cast<double>(x.size());

  double sum = 0.0, sumsq = 0.0, mn = x[0], mx = x[0];
  for (double v : x) {
    sum += v;
    sumsq += v * v;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const double mean = sum / n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0, mad = 0.0;
  for (double v : x) {
    const double dlt = v - mean;
    m2 += dlt * dlt;
    m3 += dlt * dlt * dlt;
    m4 += dlt * dlt * dlt * dlt;
    mad += std::abs(dlt);
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  mad /= n;

  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const double p10 = detail::percentile(sorted, 10.0);
  const double p25 = detail::percentile(sorted, 25.0);
  const double p75 = detail::percentile(sorted, 75.0);
  const double p90 = detail::percentile(sorted, 90.0);
  const double median = x.size() % 2 == 1
                            ? sorted[x.size() / 2]
                            : 0.5 * (sorted[x.size() / 2 - 1] + sorted[x.size() / 2]);

  // robust MAD: deviation from the mean of the 10-90 percentile subset
  double rsum = 0.0;
  std::int64_t rcount = 0;
  for (double v : x)
    if (v >= p10 && v <= p90) {
      rsum += v;
      ++rcount;
    }
  double rmad = 0.0;
  if (rcount > 0) {
    const double rmean = rsum / static_cast<double>(rcount);
    for (double v : x)
      if (v >= p10 && v <= p90) rmad += std::abs(v - rmean);
    rmad /= static_cast<double>(rcount);
  }

  // histogram entropy/uniformity on the discretized bins
  std::vector<double> hist(static_cast<std::size_t>(d.n_levels), 0.0);
  for (int b : d.bins) hist[static_cast<std::size_t>(b - 1)] += 1.0;
  double entropy = 0.0, uniformity = 0.0;
  for (double h : hist) {
    const double p = h / n;
    if (p > 0.0) entropy -= p * log2e(p);
    uniformity += p * p;
  }

  const double skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  const double kurt = m2 > 0.0 ? m4 / (m2 * m2) : 0.0;

  return {sumsq,
          roi.voxel_volume * sumsq,
          entropy,
          mn,
          p10,
          p90,
          mx,
          mean,
          median,
          p75 - p25,
          mx - mn,
          mad,
          rmad,
          std::sqrt(sumsq / n),
          skew,
          kurt,
          m2,
          uniformity};
}

// ----- GLCM (24) -----

namespace detail {
// cyclic Jacobi eigenvalues of a symmetric matrix (row-major)
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n) {
  auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    if (off < 1e-24) break;
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(at(p, q)) < 1e-18) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ev[static_cast<std::size_t>(i)] = at(i, i);
  return ev;
}

struct GlcmStats {
  int ng = 0;
  std::vector<double> p;  // ng x ng, normalized symmetric
  bool valid = false;
};

inline GlcmStats glcm_matrix(const DiscretizedRoi& d, const std::array<int, 3>& dir) {
  GlcmStats st;
  st.ng = d.n_levels;
  st.p.assign(static_cast<std::size_t>(st.ng) * st.ng, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& c = d.coords[i];
    const int j = d.voxel_at(c[0] + dir[0], c[1] + dir[1], c[2] + dir[2]);
    if (j < 0) continue;
    const int bi = d.bins[i] - 1;
    const int bj = d.bins[static_cast<std::size_t>(j)] - 1;
    st.p[static_cast<std::size_t>(bi) * st.ng + bj] += 1.0;  // ordered pair (v, v+d)
    st.p[static_cast<std::size_t>(bj) * st.ng + bi] += 1.0;  // symmetrized
    total += 2.0;
  }
  if (total == 0.0) return st;
  for (double& v : st.p) v /= total;
  st.valid = true;
  return st;
}

inline std::vector<double> glcm_features_one(const GlcmStats& st) {
  const int ng = st.ng;
  auto p = [&](int i, int j) { return st.p[static_cast<std::size_t>(i) * ng + j]; };

  std::vector<double> px(static_cast<std::size_t>(ng), 0.0);
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) px[static_cast<std::size_t>(i)] += p(i, j);
  double mu = 0.0;
  for (int i = 0; i < ng; ++i) mu += (i + 1) * px[static_cast<std::size_t>(i)];
  double sig2 = 0.0;
  for (int i = 0; i < ng; ++i) sig2 += (i + 1 - mu) * (i + 1 - mu) * px[static_cast<std::size_t>(i)];
  const double sig = std::sqrt(sig2);

  std::vector<double> psum(static_cast<std::size_t>(2 * ng + 1), 0.0);   // index i+j, 2..2ng
  std::vector<double> pdiff(static_cast<std::size_t>(ng), 0.0);          // index |i-j|, 0..ng-1
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      psum[static_cast<std::size_t>(i + j + 2)] += p(i, j);
      pdiff[static_cast<std::size_t>(std::abs(i - j))] += p(i, j);
    }

  double autoc = 0, prom = 0, shade = 0, tend = 0, contrast = 0, corr_num = 0;
  double joint_energy = 0, joint_entropy = 0, idm = 0, idmn = 0, idf = 0, idn = 0, inv_var = 0;
  double maxp = 0, sumsq = 0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      const double v = p(i, j);
      const double ii = i + 1, jj = j + 1;
      autoc += ii * jj * v;
      const double cs = ii + jj - 2.0 * mu;
      prom += cs * cs * cs * cs * v;
      shade += cs * cs * cs * v;
      tend += cs * cs * v;
      contrast += (ii - jj) * (ii - jj) * v;
      corr_num += (ii - mu) * (jj - mu) * v;
      joint_energy += v * v;
      if (v > 0.0) joint_entropy -= v * log2e(v);
      idm += v / (1.0 + (ii - jj) * (ii - jj));
      idmn += v / (1.0 + ((ii - jj) / ng) * ((ii - jj) / ng));
      idf += v / (1.0 + std::abs(ii - jj));
      idn += v / (1.0 + std::abs(ii - jj) / ng);
      if (i != j) inv_var += v / ((ii - jj) * (ii - jj));
      maxp = std::max(maxp, v);
      sumsq += (ii - mu) * (ii - mu) * v;
    }
  const double correlation = sig2 > 0.0 ? corr_num / (sig * sig) : 1.0;

  double diff_avg = 0, diff_entropy = 0;
  for (int k = 0; k < ng; ++k) {
    diff_avg += k * pdiff[static_cast<std::size_t>(k)];
    if (pdiff[static_cast<std::size_t>(k)] > 0.0)
      diff_entropy -= pdiff[static_cast<std::size_t>(k)] * log2e(pdiff[static_cast<std::size_t>(k)]);
  }
  double diff_var = 0;
  for (int k = 0; k < ng; ++k)
    diff_var += (k - diff_avg) * (k - diff_avg) * pdiff[static_cast<std::size_t>(k)];

  double sum_avg = 0, sum_entropy = 0;
  for (int k = 2; k <= 2 * ng; ++k) {
    sum_avg += k * psum[static_cast<std::size_t>(k)];
    if (psum[static_cast<std::size_t>(k)] > 0.0)
      sum_entropy -= psum[static_cast<std::size_t>(k)] * log2e(psum[static_cast<std::size_t>(k)]);
  }

  // information measures
  double hx = 0.0;
  for (int i = 0; i < ng; ++i)
    if (px[static_cast<std::size_t>(i)] > 0.0)
      hx -= px[static_cast<std::size_t>(i)] * log2e(px[static_cast<std::size_t>(i)]);
  double hxy1 = 0.0, hxy2 = 0.0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      const double pipj = px[static_cast<std::size_t>(i)] * px[static_cast<std::size_t>(j)];
      if (pipj > 0.0) {
        if (p(i, j) > 0.0) hxy1 -= p(i, j) * log2e(pipj);
        hxy2 -= pipj * log2e(pipj);
      }
    }
  const double imc1 = hx > 0.0 ? (joint_entropy - hxy1) / hx : 0.0;
  const double imc2_inner = 1.0 - std::exp(-2.0 * (hxy2 - joint_entropy));
  const double imc2 = imc2_inner > 0.0 ? std::sqrt(imc2_inner) : 0.0;

  // MCC via the symmetric similarity D^-1/2 P D^-1/2 on levels with px > 0
  double mcc = 1.0;
  {
    std::vector<int> live;
    for (int i = 0; i < ng; ++i)
      if (px[static_cast<std::size_t>(i)] > 0.0) live.push_back(i);
    const int m = static_cast<int>(live.size());
    if (m >= 2) {
      std::vector<double> s(static_cast<std::size_t>(m) * m, 0.0);
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
          s[static_cast<std::size_t>(a) * m + b] =
              p(live[static_cast<std::size_t>(a)], live[static_cast<std::size_t>(b)]) /
              std::sqrt(px[static_cast<std::size_t>(live[static_cast<std::size_t>(a)])] *
                        px[static_cast<std::size_t>(live[static_cast<std::size_t>(b)])]);
      auto ev = symmetric_eigenvalues(std::move(s), m);
      for (double& e : ev) e = std::abs(e);
      std::sort(ev.begin(), ev.end(), std::greater<>());
      mcc = ev[1];
    }
  }

  return {autoc,      prom,        shade,    tend,  contrast, correlation, diff_avg, diff_entropy,
          diff_var,   idf,         idm,      idmn,  idn,      imc1,        imc2,     inv_var,
          mu,         joint_energy, joint_entropy, maxp, mcc,  sum_avg,   sum_entropy, sumsq};
}
}  // namespace detail

// Per-direction features averaged over the 13 unique offsets; empty directions
// are skipped. A pairless ROI falls back to the delta-matrix conventions.
inline std::vector<double> glcm_features(const DiscretizedRoi& d) {
  CSEG_CHECK(d.size() > 0, "glcm_features: empty ROI");
  std::vector<double> acc(24, 0.0);
  int valid = 0;
  for (const auto& dir : glcm_directions()) {
    detail::GlcmStats st = detail::glcm_matrix(d, dir);
    if (!st.valid) continue;
    auto f = detail::glcm_features_one(st);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
    ++valid;
  }
  if (valid == 0) {
    // isolated voxels: treat as a delta distribution at the lowest level
    detail::GlcmStats st;
    st.ng = d.n_levels;
    st.p.assign(static_cast<std::size_t>(st.ng) * st.ng, 0.0);
    int lowest = d.bins[0];
    for (int b : d.bins) lowest = std::min(lowest, b);
    st.p[static_cast<std::size_t>(lowest - 1) * st.ng + (lowest - 1)] = 1.0;
    st.valid = true;
    return detail::glcm_features_one(st);
  }
  for (double& v : acc) v /= valid;
  return acc;
}

// ----- GLDM (14) -----

inline std::vector<double> gldm_features(const DiscretizedRoi& d) {
  CSEG_CHECK(d.size() > 0, "gldm_features: empty ROI");
  const int ng = d.n_levels;
  const int nd = 27;  // dependence size including the center voxel
  std::vector<double> pmat(static_cast<std::size_t>(ng) * nd, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& c = d.coords[i];
    int dep = 1;
    for (const auto& o : neighborhood26()) {
      const int j = d.voxel_at(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
      if (j >= 0 && d.bins[static_cast<std::size_t>(j)] == d.bins[i]) ++dep;
    }
    pmat[static_cast<std::size_t>(d.bins[i] - 1) * nd + (dep - 1)] += 1.0;
  }
  const double nvp = static_cast<double>(d.size());

  double sde = 0, lde = 0, glv = 0, dv = 0, de = 0, lgle = 0, hgle = 0;
  double sdlgle = 0, sdhgle = 0, ldlgle = 0, ldhgle = 0;
  std::vector<double> pi(static_cast<std::size_t>(ng), 0.0), pj(static_cast<std::size_t>(nd), 0.0);
  double mu_i = 0, mu_j = 0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < nd; ++j) {
      const double raw = pmat[static_cast<std::size_t>(i) * nd + j];
      if (raw == 0.0) continue;
      const double p = raw / nvp;
      const double ii = i + 1, jj = j + 1;
      pi[static_cast<std::size_t>(i)] += raw;
      pj[static_cast<std::size_t>(j)] += raw;
      mu_i += p * ii;
      mu_j += p * jj;
      sde += p / (jj * jj);
      lde += p * jj * jj;
      de -= p * log2e(p);
      lgle += p / (ii * ii);
      hgle += p * ii * ii;
      sdlgle += p / (ii * ii * jj * jj);
      sdhgle += p * ii * ii / (jj * jj);
      ldlgle += p * jj * jj / (ii * ii);
      ldhgle += p * ii * ii * jj * jj;
    }
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < nd; ++j) {
      const double p = pmat[static_cast<std::size_t>(i) * nd + j] / nvp;
      if (p == 0.0) continue;
      glv += p * (i + 1 - mu_i) * (i + 1 - mu_i);
      dv += p * (j + 1 - mu_j) * (j + 1 - mu_j);
    }
  double gln = 0, dn = 0;
  for (double v : pi) gln += v * v;
  for (double v : pj) dn += v * v;
  gln /= nvp;
  dn /= nvp;
  const double dnn = dn / nvp;

  return {sde, lde, gln, dn, dnn, glv, dv, de, lgle, hgle, sdlgle, sdhgle, ldlgle, ldhgle};
}

// ----- GLSZM (16) -----

inline std::vector<double> glszm_features(const DiscretizedRoi& d) {
  CSEG_CHECK(d.size() > 0, "glszm_features: empty ROI");
  // zones: 26-connected components of equal bins
  std::vector<int> zone_gray;
  std::vector<std::int64_t> zone_size;
  std::vector<char> seen(d.size(), 0);
  std::vector<int> stack;
  for (std::size_t start = 0; start < d.size(); ++start) {
    if (seen[start]) continue;
    seen[start] = 1;
    stack.clear();
    stack.push_back(static_cast<int>(start));
    std::int64_t count = 0;
    const int bin = d.bins[start];
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      ++count;
      const auto& c = d.coords[static_cast<std::size_t>(v)];
      for (const auto& o : neighborhood26()) {
        const int j = d.voxel_at(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
        if (j >= 0 && !seen[static_cast<std::size_t>(j)] && d.bins[static_cast<std::size_t>(j)] == bin) {
          seen[static_cast<std::size_t>(j)] = 1;
          stack.push_back(j);
        }
      }
    }
    zone_gray.push_back(bin);
    zone_size.push_back(count);
  }

  const double nz = static_cast<double>(zone_gray.size());
  const double nvp = static_cast<double>(d.size());
  std::map<int, double> by_gray;
  std::map<std::int64_t, double> by_size;
  double sae = 0, lae = 0, glv = 0, zv = 0, ze = 0, lglze = 0, hglze = 0;
  double salgle = 0, sahgle = 0, lalgle = 0, lahgle = 0;
  double mu_i = 0, mu_s = 0;

  std::map<std::pair<int, std::int64_t>, double> cell;
  for (std::size_t z = 0; z < zone_gray.size(); ++z) {
    cell[{zone_gray[z], zone_size[z]}] += 1.0;
    by_gray[zone_gray[z]] += 1.0;
    by_size[zone_size[z]] += 1.0;
  }
  for (const auto& [key, raw] : cell) {
    const double p = raw / nz;
    const double ii = key.first;
    const double ss = static_cast<double>(key.second);
    mu_i += p * ii;
    mu_s += p * ss;
    sae += p / (ss * ss);
    lae += p * ss * ss;
    ze -= p * log2e(p);
    lglze += p / (ii * ii);
    hglze += p * ii * ii;
    salgle += p / (ii * ii * ss * ss);
    sahgle += p * ii * ii / (ss * ss);
    lalgle += p * ss * ss / (ii * ii);
    lahgle += p * ii * ii * ss * ss;
  }
  for (const auto& [key, raw] : cell) {
    const double p = raw / nz;
    glv += p * (key.first - mu_i) * (key.first - mu_i);
    zv += p * (static_cast<double>(key.second) - mu_s) * (static_cast<double>(key.second) - mu_s);
  }
  double gln = 0, szn = 0;
  for (const auto& [g, c] : by_gray) gln += c * c;
  for (const auto& [s, c] : by_size) szn += c * c;

  return {sae,        lae,        gln / nz,  gln / (nz * nz), szn / nz, szn / (nz * nz),
          nz / nvp,   glv,        zv,        ze,              lglze,    hglze,
          salgle,     sahgle,     lalgle,    lahgle};
}

// ----- NGTDM (5) -----

inline std::vector<double> ngtdm_features(const DiscretizedRoi& d) {
  CSEG_CHECK(d.size() > 0, "ngtdm_features: empty ROI");
  const int ng = d.n_levels;
  std::vector<double> s(static_cast<std::size_t>(ng), 0.0), n(static_cast<std::size_t>(ng), 0.0);
  double nvp = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& c = d.coords[i];
    double sum = 0.0;
    int cnt = 0;
    for (const auto& o : neighborhood26()) {
      const int j = d.voxel_at(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
      if (j >= 0) {
        sum += d.bins[static_cast<std::size_t>(j)];
        ++cnt;
      }
    }
    if (cnt == 0) continue;  // isolated voxels are excluded
    const double avg = sum / cnt;
    s[static_cast<std::size_t>(d.bins[i] - 1)] += std::abs(d.bins[i] - avg);
    n[static_cast<std::size_t>(d.bins[i] - 1)] += 1.0;
    nvp += 1.0;
  }
  if (nvp == 0.0) return {1e6, 0.0, 0.0, 0.0, 0.0};  // all voxels isolated

  std::vector<double> p(static_cast<std::size_t>(ng), 0.0);
  int ngp = 0;
  for (int i = 0; i < ng; ++i) {
    p[static_cast<std::size_t>(i)] = n[static_cast<std::size_t>(i)] / nvp;
    if (n[static_cast<std::size_t>(i)] > 0.0) ++ngp;
  }

  double psum = 0.0, ssum = 0.0;
  for (int i = 0; i < ng; ++i) {
    psum += p[static_cast<std::size_t>(i)] * s[static_cast<std::size_t>(i)];
    ssum += s[static_cast<std::size_t>(i)];
  }
  const double coarseness = psum > 0.0 ? std::min(1.0 / psum, 1e6) : 1e6;

  double contrast = 0.0;
  if (ngp > 1) {
    double pair_term = 0.0;
    for (int i = 0; i < ng; ++i)
      for (int j = 0; j < ng; ++j)
        pair_term += p[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(j)] * (i - j) * (i - j);
    contrast = pair_term / (static_cast<double>(ngp) * (ngp - 1)) * (ssum / nvp);
  }

  double denom_busy = 0.0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      if (p[static_cast<std::size_t>(i)] == 0.0 || p[static_cast<std::size_t>(j)] == 0.0) continue;
      denom_busy += std::abs((i + 1) * p[static_cast<std::size_t>(i)] - (j + 1) * p[static_cast<std::size_t>(j)]);
    }
  const double busyness = denom_busy > 0.0 ? psum / denom_busy : 0.0;

  double complexity = 0.0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      const double pi2 = p[static_cast<std::size_t>(i)], pj2 = p[static_cast<std::size_t>(j)];
      if (pi2 == 0.0 || pj2 == 0.0) continue;
      complexity += std::abs(i - j) * (pi2 * s[static_cast<std::size_t>(i)] + pj2 * s[static_cast<std::size_t>(j)]) /
                    (pi2 + pj2);
    }
  complexity /= nvp;

  double strength_num = 0.0;
  for (int i = 0; i < ng; ++i)
    for (int j = 0; j < ng; ++j) {
      const double pi2 = p[static_cast<std::size_t>(i)], pj2 = p[static_cast<std::size_t>(j)];
      if (pi2 == 0.0 || pj2 == 0.0) continue;
      strength_num += (pi2 + pj2) * (i - j) * (i - j);
    }
  const double strength = ssum > 0.0 ? strength_num / ssum : 0.0;

  return {coarseness, contrast, busyness, complexity, strength};
}

// ----- full vector -----

inline RadiomicsVector extract_all(const RoiVoxels& roi, double bin_width = 25.0) {
  CSEG_CHECK(!roi.values.empty(), "extract_all: empty ROI");
  DiscretizedRoi d = discretize(roi, bin_width);
  RadiomicsVector out;
  auto append = [&](const std::vector<double>& v) {
    out.values.insert(out.values.end(), v.begin(), v.end());
  };
  append(first_order(roi, d));
  append(glcm_features(d));
  append(gldm_features(d));
  append(glszm_features(d));
  append(ngtdm_features(d));
  CSEG_CHECK(out.values.size() == RadiomicsVector::names().size(), "extract_all: name registry drift");
  for (double v : out.values) CSEG_RUNTIME_CHECK(std::isfinite(v), "extract_all: non-finite feature");
  return out;
}

// ----- slope analysis -----

struct SlopeEntry {
  std::string feature;
  double slope = 0.0;
  std::array<double, 11> median_line{};
};

struct SlopeReport {
  std::vector<SlopeEntry> features;        // all 77, registry order
  std::vector<std::string> top_positive;   // up to 3
  std::vector<std::string> top_negative;   // up to 3

  const SlopeEntry& entry(const std::string& name) const {
    for (const auto& e : features)
      if (e.feature == name) return e;
    throw std::invalid_argument("slope report: unknown feature " + name);
  }
};

struct SweepSample {
  double dsc = 0.0;
  RadiomicsVector features;
};

namespace detail {
// evaluate a polyline (sorted, distinct x) at x, clamped to its range
inline double polyline_eval(const std::vector<std::pair<double, double>>& pts, double x) {
  if (x <= pts.front().first) return pts.front().second;
  if (x >= pts.back().first) return pts.back().second;
  std::size_t hi = 1;
  while (pts[hi].first < x) ++hi;
  const auto& a = pts[hi - 1];
  const auto& b = pts[hi];
  return a.second + (b.second - a.second) * (x - a.first) / (b.first - a.first);
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

// Per feature: each case's (DSC, value) polyline resampled onto the 0.0..1.0
// grid (linear interpolation, clamped to the achieved range), the per-grid
// median across cases, and the least-squares slope of that median line.
// Exactly-flat features (|slope| <= 1e-12) are excluded from the rankings.
inline SlopeReport slope_analysis(const std::vector<std::vector<SweepSample>>& cases) {
  CSEG_CHECK(!cases.empty(), "slope_analysis: no cases");
  bool any_spread = false;
  for (const auto& c : cases) {
    CSEG_CHECK(c.size() >= 2, "slope_analysis: every case needs >= 2 points");
    double mn = c.front().dsc, mx = c.front().dsc;
    for (const auto& s : c) {
      mn = std::min(mn, s.dsc);
      mx = std::max(mx, s.dsc);
    }
    if (mx > mn) any_spread = true;
  }
  CSEG_CHECK(any_spread, "slope_analysis: no case spans more than one DSC value");

  const auto& names = RadiomicsVector::names();
  SlopeReport report;
  std::array<double, 11> grid{};
  for (int i = 0; i < 11; ++i) grid[static_cast<std::size_t>(i)] = 0.1 * i;

  for (std::size_t f = 0; f < names.size(); ++f) {
    std::vector<std::array<double, 11>> lines;
    for (const auto& c : cases) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& s : c) pts.emplace_back(s.dsc, s.features.values[f]);
      std::sort(pts.begin(), pts.end());
      std::vector<std::pair<double, double>> uniq;  // duplicate DSCs averaged
      std::size_t i = 0;
      while (i < pts.size()) {
        std::size_t j = i;
        double sum = 0.0;
        while (j < pts.size() && pts[j].first == pts[i].first) sum += pts[j++].second;
        uniq.emplace_back(pts[i].first, sum / static_cast<double>(j - i));
        i = j;
      }
      std::array<double, 11> line{};
      for (int gi = 0; gi < 11; ++gi)
        line[static_cast<std::size_t>(gi)] = detail::polyline_eval(uniq, grid[static_cast<std::size_t>(gi)]);
      lines.push_back(line);
    }

    SlopeEntry entry;
    entry.feature = names[f];
    for (int gi = 0; gi < 11; ++gi) {
      std::vector<double> column;
      column.reserve(lines.size());
      for (const auto& l : lines) column.push_back(l[static_cast<std::size_t>(gi)]);
      entry.median_line[static_cast<std::size_t>(gi)] = detail::median_of(std::move(column));
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int gi = 0; gi < 11; ++gi) {
      sx += grid[static_cast<std::size_t>(gi)];
      sy += entry.median_line[static_cast<std::size_t>(gi)];
    }
    const double mx = sx / 11.0, my = sy / 11.0;
    for (int gi = 0; gi < 11; ++gi) {
      const double dx = grid[static_cast<std::size_t>(gi)] - mx;
      sxx += dx * dx;
      sxy += dx * (entry.median_line[static_cast<std::size_t>(gi)] - my);
    }
    entry.slope = sxy / sxx;
    report.features.push_back(entry);
  }

  std::vector<const SlopeEntry*> pos, neg;
  for (const auto& e : report.features) {
    if (e.slope > 1e-12) pos.push_back(&e);
    if (e.slope < -1e-12) neg.push_back(&e);
  }
  std::sort(pos.begin(), pos.end(), [](auto* a, auto* b) { return a->slope > b->slope; });
  std::sort(neg.begin(), neg.end(), [](auto* a, auto* b) { return a->slope < b->slope; });
  for (std::size_t i = 0; i < std::min<std::size_t>(3, pos.size()); ++i)
    report.top_positive.push_back(pos[i]->feature);
  for (std::size_t i = 0; i < std::min<std::size_t>(3, neg.size()); ++i)
    report.top_negative.push_back(neg[i]->feature);
  return report;
}

}  // namespace counterseg

#endif
