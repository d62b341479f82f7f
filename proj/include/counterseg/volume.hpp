#ifndef COUNTERSEG_VOLUME_HPP
#define COUNTERSEG_VOLUME_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "counterseg/common.hpp"
#include "counterseg/tensor.hpp"

namespace counterseg {

enum class IntensityUnit { kHuLike, kNormalized };

inline const char* unit_name(IntensityUnit u) {
  return u == IntensityUnit::kHuLike ? "hu-like" : "normalized";
}

// Dense 3D scalar grid, x-fastest storage, physical voxel spacing in mm.
struct Volume {
  int nx = 0, ny = 0, nz = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  IntensityUnit unit = IntensityUnit::kHuLike;
  std::vector<double> data;

  Volume() = default;
  Volume(int x, int y, int z, std::array<double, 3> sp, IntensityUnit u = IntensityUnit::kHuLike)
      : nx(x), ny(y), nz(z), spacing(sp), unit(u) {
    CSEG_CHECK(nx >= 8 && ny >= 8 && nz >= 8, "volume dims must be >= 8 per axis");
    CSEG_CHECK(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "voxel spacing must be positive");
    data.assign(static_cast<std::size_t>(nx) * ny * nz, 0.0);
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(nx) * ny * nz; }
  std::int64_t index(int x, int y, int z) const {
    return static_cast<std::int64_t>(z) * ny * nx + static_cast<std::int64_t>(y) * nx + x;
  }
  double& at(int x, int y, int z) { return data[index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  void validate_finite() const {
    for (double v : data) CSEG_CHECK(std::isfinite(v), "volume rejects non-finite values");
  }
};

// 3-class voxel labeling aligned to a Volume.
enum : std::uint8_t { kBackground = 0, kKidney = 1, kCyst = 2 };

struct LabelMask {
  int nx = 0, ny = 0, nz = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;

  LabelMask() = default;
  LabelMask(int x, int y, int z, std::array<double, 3> sp) : nx(x), ny(y), nz(z), spacing(sp) {
    CSEG_CHECK(nx >= 1 && ny >= 1 && nz >= 1, "mask dims must be positive");
    data.assign(static_cast<std::size_t>(nx) * ny * nz, 0);
  }
  static LabelMask like(const Volume& v) { return LabelMask(v.nx, v.ny, v.nz, v.spacing); }

  std::int64_t numel() const { return static_cast<std::int64_t>(nx) * ny * nz; }
  std::int64_t index(int x, int y, int z) const {
    return static_cast<std::int64_t>(z) * ny * nx + static_cast<std::int64_t>(y) * nx + x;
  }
  std::uint8_t& at(int x, int y, int z) { return data[index(x, y, z)]; }
  std::uint8_t at(int x, int y, int z) const { return data[index(x, y, z)]; }

  void validate_labels() const {
    for (auto v : data) CSEG_CHECK(v <= 2, "mask labels restricted to {0,1,2}");
  }
  bool aligned_with(const Volume& v) const {
    return nx == v.nx && ny == v.ny && nz == v.nz && spacing == v.spacing;
  }
};

// ----- intensity preprocessing -----

struct NormalizeConfig {
  double lo_hu = -71.0;
  double hi_hu = 344.0;
  double mean = 117.1;
  double stddev = 89.9;
};

inline Volume clip_and_normalize(const Volume& v, const NormalizeConfig& cfg = {}) {
  CSEG_CHECK(cfg.stddev > 0.0, "clip_and_normalize: std must be positive");
  CSEG_CHECK(cfg.lo_hu < cfg.hi_hu, "clip_and_normalize: lo must be below hi");
  Volume out = v;
  out.unit = IntensityUnit::kNormalized;
  const double inv = 1.0 / cfg.stddev;
  for (double& x : out.data) {
    double c = x < cfg.lo_hu ? cfg.lo_hu : (x > cfg.hi_hu ? cfg.hi_hu : x);
    x = (c - cfg.mean) * inv;
  }
  return out;
}

inline double denormalize_value(double x, const NormalizeConfig& cfg = {}) {
  return x * cfg.stddev + cfg.mean;
}

// ----- resampling -----

namespace detail {
inline int resampled_extent(int n, double sp, double tsp) {
  int out = static_cast<int>(std::llround(static_cast<double>(n) * sp / tsp));
  CSEG_CHECK(out >= 1, "resample: output extent would be 0");
  return out;
}
}  // namespace detail

// Trilinear intensity resampling onto a new voxel grid. Voxel centers sit at
// (i + 0.5) * spacing.
inline Volume resample(const Volume& v, std::array<double, 3> target_spacing) {
  CSEG_CHECK(target_spacing[0] > 0 && target_spacing[1] > 0 && target_spacing[2] > 0,
             "resample: target spacing must be positive");
  const int onx = detail::resampled_extent(v.nx, v.spacing[0], target_spacing[0]);
  const int ony = detail::resampled_extent(v.ny, v.spacing[1], target_spacing[1]);
  const int onz = detail::resampled_extent(v.nz, v.spacing[2], target_spacing[2]);
  CSEG_CHECK(onx >= 8 && ony >= 8 && onz >= 8, "resample: output dims below volume minimum");
  Volume out(onx, ony, onz, target_spacing, v.unit);
  auto src_coord = [](int j, double tsp, double ssp, int n) {
    double u = ((static_cast<double>(j) + 0.5) * tsp) / ssp - 0.5;
    if (u < 0.0) u = 0.0;
    if (u > n - 1.0) u = n - 1.0;
    return u;
  };
  for (int z = 0; z < onz; ++z) {
    double uz = src_coord(z, target_spacing[2], v.spacing[2], v.nz);
    int z0 = static_cast<int>(uz), z1 = std::min(z0 + 1, v.nz - 1);
    double fz = uz - z0;
    for (int y = 0; y < ony; ++y) {
      double uy = src_coord(y, target_spacing[1], v.spacing[1], v.ny);
      int y0 = static_cast<int>(uy), y1 = std::min(y0 + 1, v.ny - 1);
      double fy = uy - y0;
      for (int x = 0; x < onx; ++x) {
        double ux = src_coord(x, target_spacing[0], v.spacing[0], v.nx);
        int x0 = static_cast<int>(ux), x1 = std::min(x0 + 1, v.nx - 1);
        double fx = ux - x0;
        double c00 = v.at(x0, y0, z0) * (1 - fx) + v.at(x1, y0, z0) * fx;
        double c10 = v.at(x0, y1, z0) * (1 - fx) + v.at(x1, y1, z0) * fx;
        double c01 = v.at(x0, y0, z1) * (1 - fx) + v.at(x1, y0, z1) * fx;
        double c11 = v.at(x0, y1, z1) * (1 - fx) + v.at(x1, y1, z1) * fx;
        double c0 = c00 * (1 - fy) + c10 * fy;
        double c1 = c01 * (1 - fy) + c11 * fy;
        out.at(x, y, z) = c0 * (1 - fz) + c1 * fz;
      }
    }
  }
  return out;
}

// Sibling entry point for masks: nearest-neighbor.
inline LabelMask resample_mask(const LabelMask& m, std::array<double, 3> target_spacing) {
  CSEG_CHECK(target_spacing[0] > 0 && target_spacing[1] > 0 && target_spacing[2] > 0,
             "resample_mask: target spacing must be positive");
  const int onx = detail::resampled_extent(m.nx, m.spacing[0], target_spacing[0]);
  const int ony = detail::resampled_extent(m.ny, m.spacing[1], target_spacing[1]);
  const int onz = detail::resampled_extent(m.nz, m.spacing[2], target_spacing[2]);
  LabelMask out(onx, ony, onz, target_spacing);
  auto src_idx = [](int j, double tsp, double ssp, int n) {
    double u = ((static_cast<double>(j) + 0.5) * tsp) / ssp - 0.5;
    int i = static_cast<int>(std::llround(u));
    return std::min(std::max(i, 0), n - 1);
  };
  for (int z = 0; z < onz; ++z) {
    int sz = src_idx(z, target_spacing[2], m.spacing[2], m.nz);
    for (int y = 0; y < ony; ++y) {
      int sy = src_idx(y, target_spacing[1], m.spacing[1], m.ny);
      for (int x = 0; x < onx; ++x)
        out.at(x, y, z) = m.at(src_idx(x, target_spacing[0], m.spacing[0], m.nx), sy, sz);
    }
  }
  return out;
}

// Separable Gaussian smoothing on an x-fastest buffer, clamped edges.
inline void gaussian_smooth3(std::vector<double>& data, std::array<int, 3> dims, double sigma_vox) {
  if (sigma_vox <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
  std::vector<double> kern(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kern[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox));
    sum += kern[static_cast<std::size_t>(i + radius)];
  }
  for (double& kv : kern) kv /= sum;
  std::vector<double> tmp(data.size());
  const int n[3] = {dims[0], dims[1], dims[2]};
  auto idx = [&](int x, int y, int z) {
    return static_cast<std::size_t>((static_cast<std::int64_t>(z) * n[1] + y) * n[0] + x);
  };
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < n[2]; ++z)
      for (int y = 0; y < n[1]; ++y)
        for (int x = 0; x < n[0]; ++x) {
          int c[3] = {x, y, z};
          double acc = 0.0;
          for (int t = -radius; t <= radius; ++t) {
            int q[3] = {x, y, z};
            q[axis] = std::min(std::max(c[axis] + t, 0), n[axis] - 1);
            acc += kern[static_cast<std::size_t>(t + radius)] * data[idx(q[0], q[1], q[2])];
          }
          tmp[idx(x, y, z)] = acc;
        }
    data.swap(tmp);
  }
}

// ----- size stratification -----

enum class SizeClass { kSmall, kMedium, kLarge };

inline const char* size_class_name(SizeClass c) {
  switch (c) {
    case SizeClass::kSmall: return "small";
    case SizeClass::kMedium: return "medium";
    case SizeClass::kLarge: return "large";
  }
  return "?";
}

// 1.8 ml / 11.5 ml cut points; the upper bound is inclusive for medium.
inline SizeClass classify_volume_ml(double ml) {
  CSEG_CHECK(ml > 0.0, "classify_volume_ml: volume must be positive");
  if (ml < 1.8) return SizeClass::kSmall;
  if (ml <= 11.5) return SizeClass::kMedium;
  return SizeClass::kLarge;
}

inline SizeClass stratify_by_volume(const LabelMask& mask, const std::vector<std::int64_t>& component) {
  CSEG_CHECK(!component.empty(), "stratify_by_volume: empty component");
  for (std::int64_t idx : component)
    CSEG_CHECK(idx >= 0 && idx < mask.numel() && mask.data[static_cast<std::size_t>(idx)] == kCyst,
               "stratify_by_volume: component must be a cyst region");
  double ml = static_cast<double>(component.size()) * mask.spacing[0] * mask.spacing[1] *
              mask.spacing[2] / 1000.0;
  return classify_volume_ml(ml);
}

// ----- file pairs: .raw payload + .json sidecar -----

namespace detail {
template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& v) {
  std::ofstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot open for write: " + path.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  CSEG_RUNTIME_CHECK(f.good(), "write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot open for read: " + path.string());
  std::vector<T> v(count);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(T)));
  CSEG_RUNTIME_CHECK(f.gcount() == static_cast<std::streamsize>(count * sizeof(T)),
                     "short read: " + path.string());
  return v;
}

inline void write_sidecar(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  CSEG_RUNTIME_CHECK(f.good(), "cannot write sidecar: " + path.string());
  f << j.dump(2) << "\n";
}

inline nlohmann::json read_sidecar(const std::filesystem::path& path) {
  std::ifstream f(path);
  CSEG_RUNTIME_CHECK(f.good(), "cannot read sidecar: " + path.string());
  return nlohmann::json::parse(f);
}
}  // namespace detail

// <stem>.vol.raw: little-endian float32, x-fastest then y then z.
inline void save_volume(const Volume& v, const std::filesystem::path& dir, const std::string& stem) {
  std::vector<float> raw(v.data.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(v.data[i]);
  detail::write_raw(dir / (stem + ".vol.raw"), raw);
  detail::write_sidecar(dir / (stem + ".vol.json"),
                        {{"dims", {v.nx, v.ny, v.nz}},
                         {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                         {"unit", unit_name(v.unit)},
                         {"checksum", checksum_hex(raw.data(), raw.size() * sizeof(float))}});
}

inline Volume load_volume(const std::filesystem::path& dir, const std::string& stem) {
  nlohmann::json j = detail::read_sidecar(dir / (stem + ".vol.json"));
  auto dims = j.at("dims").get<std::vector<int>>();
  auto sp = j.at("spacing").get<std::vector<double>>();
  CSEG_RUNTIME_CHECK(dims.size() == 3 && sp.size() == 3, "bad sidecar: " + stem);
  Volume v(dims[0], dims[1], dims[2], {sp[0], sp[1], sp[2]},
           j.at("unit").get<std::string>() == "hu-like" ? IntensityUnit::kHuLike
                                                        : IntensityUnit::kNormalized);
  auto raw = detail::read_raw<float>(dir / (stem + ".vol.raw"), v.data.size());
  CSEG_RUNTIME_CHECK(checksum_hex(raw.data(), raw.size() * sizeof(float)) ==
                         j.at("checksum").get<std::string>(),
                     "volume checksum mismatch: " + stem);
  for (std::size_t i = 0; i < raw.size(); ++i) v.data[i] = static_cast<double>(raw[i]);
  return v;
}

// <stem>.msk.raw: unsigned 8-bit labels, same ordering.
inline void save_mask(const LabelMask& m, const std::filesystem::path& dir, const std::string& stem) {
  detail::write_raw(dir / (stem + ".msk.raw"), m.data);
  detail::write_sidecar(dir / (stem + ".msk.json"),
                        {{"dims", {m.nx, m.ny, m.nz}},
                         {"spacing", {m.spacing[0], m.spacing[1], m.spacing[2]}},
                         {"unit", "labels"},
                         {"checksum", checksum_hex(m.data.data(), m.data.size())}});
}

inline LabelMask load_mask(const std::filesystem::path& dir, const std::string& stem) {
  nlohmann::json j = detail::read_sidecar(dir / (stem + ".msk.json"));
  auto dims = j.at("dims").get<std::vector<int>>();
  auto sp = j.at("spacing").get<std::vector<double>>();
  CSEG_RUNTIME_CHECK(dims.size() == 3 && sp.size() == 3, "bad sidecar: " + stem);
  LabelMask m(dims[0], dims[1], dims[2], {sp[0], sp[1], sp[2]});
  m.data = detail::read_raw<std::uint8_t>(dir / (stem + ".msk.raw"), m.data.size());
  CSEG_RUNTIME_CHECK(checksum_hex(m.data.data(), m.data.size()) == j.at("checksum").get<std::string>(),
                     "mask checksum mismatch: " + stem);
  m.validate_labels();
  return m;
}

}  // namespace counterseg

#endif
