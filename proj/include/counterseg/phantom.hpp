#ifndef COUNTERSEG_PHANTOM_HPP
#define COUNTERSEG_PHANTOM_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "counterseg/rng.hpp"
#include "counterseg/volume.hpp"

namespace counterseg {

// Synthetic CT-like kidney/cyst volume description. One spec describes one
// volume; dataset-level variability comes from sampling specs.
struct PhantomSpec {
  int nx = 64, ny = 64, nz = 64;
  std::array<double, 3> spacing{1.6, 1.6, 1.6};

  std::array<double, 3> kidney_center_mm{0.0, 0.0, 0.0};  // offset from volume center
  std::array<double, 3> kidney_axes_mm{22.0, 19.0, 17.0};  // ellipsoid semi-axes
  double kidney_mean = 120.0;
  double kidney_texture_amp = 40.0;

  int cyst_count_min = 1;
  int cyst_count_max = 1;
  double cyst_radius_mm_min = 5.0;
  double cyst_radius_mm_max = 9.0;
  double cyst_mean = 10.0;
  double cyst_texture_amp = 10.0;
  double cyst_deform_amp = 0.0;  // radial modulation fraction, 0 = exact spheres

  double noise_sigma = 6.0;          // sensor noise, applied everywhere
  double boundary_smooth_sigma = 0.0;  // voxels; smooths intensities, never masks

  std::uint64_t seed = 0;

  void validate() const {
    CSEG_CHECK(nx >= 8 && ny >= 8 && nz >= 8, "phantom dims must be >= 8 per axis");
    CSEG_CHECK(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "phantom spacing must be positive");
    CSEG_CHECK(cyst_count_min >= 0 && cyst_count_max >= cyst_count_min, "bad cyst count range");
    CSEG_CHECK(cyst_radius_mm_min > 0 && cyst_radius_mm_max >= cyst_radius_mm_min,
               "bad cyst radius range");
    double min_axis = std::min({kidney_axes_mm[0], kidney_axes_mm[1], kidney_axes_mm[2]});
    CSEG_CHECK(cyst_radius_mm_max * (1.0 + cyst_deform_amp) < min_axis,
               "cyst radii must fit inside kidney axes");
    CSEG_CHECK(kidney_mean + kidney_texture_amp <= 344.0 && cyst_mean - cyst_texture_amp >= -71.0,
               "phantom intensities must stay within the clip window");
    CSEG_CHECK(cyst_deform_amp >= 0.0 && cyst_deform_amp < 0.5, "bad deform amplitude");
    CSEG_CHECK(noise_sigma >= 0.0 && boundary_smooth_sigma >= 0.0, "bad noise/smoothing");
  }

  std::string brief() const {
    return "dims=" + std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz) +
           " cysts=[" + std::to_string(cyst_count_min) + "," + std::to_string(cyst_count_max) +
           "] r=[" + std::to_string(cyst_radius_mm_min) + "," + std::to_string(cyst_radius_mm_max) +
           "]mm seed=" + std::to_string(seed);
  }
};

namespace detail {

// Band-limited texture: a fixed small sum of random cosine waves, |T| <= 1.
struct CosineField {
  static constexpr int kWaves = 6;
  std::array<std::array<double, 3>, kWaves> k;
  std::array<double, kWaves> phase;

  static CosineField sample(Rng& rng, double min_wavelength_mm, double max_wavelength_mm) {
    CosineField f;
    for (int j = 0; j < kWaves; ++j) {
      double wl = rng.uniform(min_wavelength_mm, max_wavelength_mm);
      // random direction via normalized Gaussian triple
      double dx = rng.normal(), dy = rng.normal(), dz = rng.normal();
      double n = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (n < 1e-9) n = 1.0;
      double w = 2.0 * 3.14159265358979323846 / wl;
      f.k[j] = {w * dx / n, w * dy / n, w * dz / n};
      f.phase[j] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    }
    return f;
  }

  double operator()(double x, double y, double z) const {
    double s = 0.0;
    for (int j = 0; j < kWaves; ++j)
      s += std::cos(k[j][0] * x + k[j][1] * y + k[j][2] * z + phase[j]);
    return s / kWaves;
  }
};

inline void gaussian_smooth_inplace(Volume& v, double sigma_vox) {
  gaussian_smooth3(v.data, {v.nx, v.ny, v.nz}, sigma_vox);
}

}  // namespace detail

// Deterministic phantom: ellipsoid kidney, spherical cysts strictly inside it,
// exact ground-truth masks by construction. Intensity = region mean + region
// texture, optional global boundary smoothing, then sensor noise; the mask is
// never smoothed.
inline std::pair<Volume, LabelMask> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  Volume vol(spec.nx, spec.ny, spec.nz, spec.spacing, IntensityUnit::kHuLike);
  LabelMask mask = LabelMask::like(vol);

  const double cx = (spec.nx * spec.spacing[0]) / 2.0 + spec.kidney_center_mm[0];
  const double cy = (spec.ny * spec.spacing[1]) / 2.0 + spec.kidney_center_mm[1];
  const double cz = (spec.nz * spec.spacing[2]) / 2.0 + spec.kidney_center_mm[2];
  const auto& ax = spec.kidney_axes_mm;

  // kidney must keep a 2-voxel margin from the volume boundary
  CSEG_CHECK(cx - ax[0] >= 2 * spec.spacing[0] && cx + ax[0] <= (spec.nx - 2) * spec.spacing[0] &&
                 cy - ax[1] >= 2 * spec.spacing[1] && cy + ax[1] <= (spec.ny - 2) * spec.spacing[1] &&
                 cz - ax[2] >= 2 * spec.spacing[2] && cz + ax[2] <= (spec.nz - 2) * spec.spacing[2],
             "kidney ellipsoid does not fit inside the volume: " + spec.brief());

  auto voxel_mm = [&](int x, int y, int z) {
    return std::array<double, 3>{(x + 0.5) * spec.spacing[0], (y + 0.5) * spec.spacing[1],
                                 (z + 0.5) * spec.spacing[2]};
  };

  for (int z = 0; z < spec.nz; ++z)
    for (int y = 0; y < spec.ny; ++y)
      for (int x = 0; x < spec.nx; ++x) {
        auto p = voxel_mm(x, y, z);
        double e = (p[0] - cx) * (p[0] - cx) / (ax[0] * ax[0]) +
                   (p[1] - cy) * (p[1] - cy) / (ax[1] * ax[1]) +
                   (p[2] - cz) * (p[2] - cz) / (ax[2] * ax[2]);
        if (e <= 1.0) mask.at(x, y, z) = kKidney;
      }

  // cyst placement: rejection sampling with a grid containment check against
  // the current mask, so "strictly inside the kidney" is exact
  const int count = spec.cyst_count_max == spec.cyst_count_min
                        ? spec.cyst_count_min
                        : rng.uniform_int(spec.cyst_count_min, spec.cyst_count_max);
  struct CystDef {
    std::array<double, 3> center;
    double radius;
    detail::CosineField deform;
    detail::CosineField texture;
  };
  std::vector<CystDef> cysts;
  const double margin = 1.5 * std::max({spec.spacing[0], spec.spacing[1], spec.spacing[2]});

  for (int ci = 0; ci < count; ++ci) {
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      double r = rng.uniform(spec.cyst_radius_mm_min, spec.cyst_radius_mm_max);
      double hx = ax[0] - r - margin, hy = ax[1] - r - margin, hz = ax[2] - r - margin;
      if (hx <= 0 || hy <= 0 || hz <= 0) continue;  // radius leaves no room for a center
      // sample the center within the shrunken kidney bounding box
      std::array<double, 3> c{
          cx + rng.uniform(-hx, hx),
          cy + rng.uniform(-hy, hy),
          cz + rng.uniform(-hz, hz),
      };
      detail::CosineField deform = detail::CosineField::sample(rng, 1.5 * r, 3.0 * r);
      detail::CosineField texture = detail::CosineField::sample(rng, 4.0, 12.0);

      double reach = r * (1.0 + spec.cyst_deform_amp) + margin;
      bool ok = true;
      for (const auto& prev : cysts) {
        double d = std::sqrt((prev.center[0] - c[0]) * (prev.center[0] - c[0]) +
                             (prev.center[1] - c[1]) * (prev.center[1] - c[1]) +
                             (prev.center[2] - c[2]) * (prev.center[2] - c[2]));
        if (d <= (r + prev.radius) * (1.0 + spec.cyst_deform_amp) + margin) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;

      int x0 = std::max(0, static_cast<int>((c[0] - reach) / spec.spacing[0]) - 1);
      int x1 = std::min(spec.nx - 1, static_cast<int>((c[0] + reach) / spec.spacing[0]) + 1);
      int y0 = std::max(0, static_cast<int>((c[1] - reach) / spec.spacing[1]) - 1);
      int y1 = std::min(spec.ny - 1, static_cast<int>((c[1] + reach) / spec.spacing[1]) + 1);
      int z0 = std::max(0, static_cast<int>((c[2] - reach) / spec.spacing[2]) - 1);
      int z1 = std::min(spec.nz - 1, static_cast<int>((c[2] + reach) / spec.spacing[2]) + 1);
      for (int z = z0; z <= z1 && ok; ++z)
        for (int y = y0; y <= y1 && ok; ++y)
          for (int x = x0; x <= x1 && ok; ++x) {
            auto p = voxel_mm(x, y, z);
            double d = std::sqrt((p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]) +
                                 (p[2] - c[2]) * (p[2] - c[2]));
            if (d <= reach && mask.at(x, y, z) != kKidney) ok = false;
          }
      if (!ok) continue;

      cysts.push_back({c, r, deform, texture});
      placed = true;
    }
    CSEG_CHECK(placed, "could not place cyst " + std::to_string(ci) +
                           " without overlap after bounded retries: " + spec.brief());
  }

  // carve cyst labels; the mask inequality is the ground truth by definition
  for (const auto& cd : cysts) {
    double reach = cd.radius * (1.0 + spec.cyst_deform_amp);
    int x0 = std::max(0, static_cast<int>((cd.center[0] - reach) / spec.spacing[0]) - 1);
    int x1 = std::min(spec.nx - 1, static_cast<int>((cd.center[0] + reach) / spec.spacing[0]) + 1);
    int y0 = std::max(0, static_cast<int>((cd.center[1] - reach) / spec.spacing[1]) - 1);
    int y1 = std::min(spec.ny - 1, static_cast<int>((cd.center[1] + reach) / spec.spacing[1]) + 1);
    int z0 = std::max(0, static_cast<int>((cd.center[2] - reach) / spec.spacing[2]) - 1);
    int z1 = std::min(spec.nz - 1, static_cast<int>((cd.center[2] + reach) / spec.spacing[2]) + 1);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          auto p = voxel_mm(x, y, z);
          double d = std::sqrt((p[0] - cd.center[0]) * (p[0] - cd.center[0]) +
                               (p[1] - cd.center[1]) * (p[1] - cd.center[1]) +
                               (p[2] - cd.center[2]) * (p[2] - cd.center[2]));
          double rloc = cd.radius *
                        (1.0 + spec.cyst_deform_amp * cd.deform(p[0] - cd.center[0],
                                                                p[1] - cd.center[1],
                                                                p[2] - cd.center[2]));
          if (d <= rloc) mask.at(x, y, z) = kCyst;
        }
  }

  detail::CosineField kidney_tex = detail::CosineField::sample(rng, 6.0, 18.0);
  for (int z = 0; z < spec.nz; ++z)
    for (int y = 0; y < spec.ny; ++y)
      for (int x = 0; x < spec.nx; ++x) {
        auto p = voxel_mm(x, y, z);
        double val = 0.0;
        switch (mask.at(x, y, z)) {
          case kKidney:
            val = spec.kidney_mean + spec.kidney_texture_amp * kidney_tex(p[0], p[1], p[2]);
            break;
          case kCyst: {
            // locate the owning cyst for its texture field
            for (const auto& cd : cysts) {
              double d = std::sqrt((p[0] - cd.center[0]) * (p[0] - cd.center[0]) +
                                   (p[1] - cd.center[1]) * (p[1] - cd.center[1]) +
                                   (p[2] - cd.center[2]) * (p[2] - cd.center[2]));
              if (d <= cd.radius * (1.0 + spec.cyst_deform_amp)) {
                val = spec.cyst_mean + spec.cyst_texture_amp * cd.texture(p[0], p[1], p[2]);
                break;
              }
            }
            break;
          }
          default:
            val = 0.0;
        }
        vol.at(x, y, z) = val;
      }

  detail::gaussian_smooth_inplace(vol, spec.boundary_smooth_sigma);

  if (spec.noise_sigma > 0.0)
    for (double& v : vol.data) v += rng.normal(0.0, spec.noise_sigma);

  // clamp to the clip window so downstream normalization is affine everywhere
  for (double& v : vol.data) v = std::min(std::max(v, -71.0), 344.0);

  return {std::move(vol), std::move(mask)};
}

}  // namespace counterseg

#endif
