#ifndef COUNTERSEG_SEG_HPP
#define COUNTERSEG_SEG_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "counterseg/schedule.hpp"
#include "counterseg/unet.hpp"
#include "counterseg/volume.hpp"

namespace counterseg {

// ----- bounding boxes -----

struct BoundingBox {
  std::array<int, 3> start{0, 0, 0};
  std::array<int, 3> extent{1, 1, 1};

  int end(int axis) const { return start[axis] + extent[axis]; }
  bool contains(int x, int y, int z) const {
    return x >= start[0] && x < end(0) && y >= start[1] && y < end(1) && z >= start[2] && z < end(2);
  }
  void validate(std::array<int, 3> dims) const {
    for (int a = 0; a < 3; ++a) {
      CSEG_CHECK(extent[a] >= 1, "bounding box extent must be >= 1");
      CSEG_CHECK(start[a] >= 0 && start[a] + extent[a] <= dims[a], "bounding box outside volume");
    }
  }
};

// Per-axis lower median of extents (documented tie rule for even counts).
inline std::array<int, 3> compute_min_box(const std::vector<BoundingBox>& boxes) {
  CSEG_CHECK(!boxes.empty(), "compute_min_box: empty box list");
  std::array<int, 3> out{};
  for (int a = 0; a < 3; ++a) {
    std::vector<int> ext;
    ext.reserve(boxes.size());
    for (const auto& b : boxes) ext.push_back(b.extent[a]);
    std::sort(ext.begin(), ext.end());
    out[a] = ext[(ext.size() - 1) / 2];
  }
  return out;
}

inline std::optional<BoundingBox> bbox_of_foreground(const LabelMask& m) {
  std::array<int, 3> lo{m.nx, m.ny, m.nz}, hi{-1, -1, -1};
  for (int z = 0; z < m.nz; ++z)
    for (int y = 0; y < m.ny; ++y)
      for (int x = 0; x < m.nx; ++x)
        if (m.at(x, y, z) != kBackground) {
          lo = {std::min(lo[0], x), std::min(lo[1], y), std::min(lo[2], z)};
          hi = {std::max(hi[0], x), std::max(hi[1], y), std::max(hi[2], z)};
        }
  if (hi[0] < 0) return std::nullopt;
  return BoundingBox{{lo[0], lo[1], lo[2]}, {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}};
}

// Grow each axis to at least min_extent, symmetric about the current center,
// clamped to the volume.
inline BoundingBox expand_box(BoundingBox box, std::array<int, 3> min_extent,
                              std::array<int, 3> dims) {
  for (int a = 0; a < 3; ++a) {
    int want = std::min(std::max(box.extent[a], min_extent[a]), dims[a]);
    if (want > box.extent[a]) {
      int grow = want - box.extent[a];
      box.start[a] -= grow / 2;
    }
    box.extent[a] = want;
    box.start[a] = std::min(std::max(box.start[a], 0), dims[a] - box.extent[a]);
  }
  return box;
}

inline BoundingBox centered_box(std::array<int, 3> extent, std::array<int, 3> dims) {
  BoundingBox b;
  for (int a = 0; a < 3; ++a) {
    b.extent[a] = std::min(extent[a], dims[a]);
    b.start[a] = std::max(0, (dims[a] - b.extent[a]) / 2);
  }
  return b;
}

// ----- patches -----

struct Patch {
  std::array<int, 3> dims{0, 0, 0};  // (x, y, z)
  std::vector<double> vox;           // x-fastest
  std::size_t idx(int x, int y, int z) const {
    return static_cast<std::size_t>((static_cast<std::int64_t>(z) * dims[1] + y) * dims[0] + x);
  }
};

struct MaskPatch {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> lab;
  std::size_t idx(int x, int y, int z) const {
    return static_cast<std::size_t>((static_cast<std::int64_t>(z) * dims[1] + y) * dims[0] + x);
  }
};

inline Patch extract_patch(const Volume& v, std::array<int, 3> start, std::array<int, 3> dims) {
  Patch p;
  p.dims = dims;
  p.vox.resize(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x)
        p.vox[p.idx(x, y, z)] = v.at(start[0] + x, start[1] + y, start[2] + z);
  return p;
}

inline MaskPatch extract_mask_patch(const LabelMask& m, std::array<int, 3> start,
                                    std::array<int, 3> dims) {
  MaskPatch p;
  p.dims = dims;
  p.lab.resize(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x)
        p.lab[p.idx(x, y, z)] = m.at(start[0] + x, start[1] + y, start[2] + z);
  return p;
}

// ----- augmentation -----

struct AugmentConfig {
  double zoom_lo = 0.9, zoom_hi = 1.2, p_zoom = 0.15;
  double noise_sigma = 0.01, p_noise = 0.15;
  double smooth_lo = 0.5, smooth_hi = 1.15, p_smooth = 0.15;
  double intensity_scale = 0.3, p_intensity = 0.15;  // factor drawn from [1-s, 1+s]
  double p_flip = 0.5;                               // per axis

  void validate() const {
    for (double p : {p_zoom, p_noise, p_smooth, p_intensity, p_flip})
      CSEG_CHECK(p >= 0.0 && p <= 1.0, "augment probabilities must be in [0,1]");
  }

  static AugmentConfig disabled() {
    AugmentConfig a;
    a.p_zoom = a.p_noise = a.p_smooth = a.p_intensity = a.p_flip = 0.0;
    return a;
  }
};

namespace detail {
inline void zoom_patch(Patch& p, MaskPatch& m, double factor) {
  const auto d = p.dims;
  Patch src = p;
  MaskPatch msrc = m;
  auto coord = [&](int j, int axis) {
    double c = (d[axis] - 1) / 2.0;
    double u = c + (static_cast<double>(j) - c) / factor;
    return std::min(std::max(u, 0.0), static_cast<double>(d[axis] - 1));
  };
  for (int z = 0; z < d[2]; ++z) {
    double uz = coord(z, 2);
    int z0 = static_cast<int>(uz), z1 = std::min(z0 + 1, d[2] - 1);
    double fz = uz - z0;
    for (int y = 0; y < d[1]; ++y) {
      double uy = coord(y, 1);
      int y0 = static_cast<int>(uy), y1 = std::min(y0 + 1, d[1] - 1);
      double fy = uy - y0;
      for (int x = 0; x < d[0]; ++x) {
        double ux = coord(x, 0);
        int x0 = static_cast<int>(ux), x1 = std::min(x0 + 1, d[0] - 1);
        double fx = ux - x0;
        double c00 = src.vox[src.idx(x0, y0, z0)] * (1 - fx) + src.vox[src.idx(x1, y0, z0)] * fx;
        double c10 = src.vox[src.idx(x0, y1, z0)] * (1 - fx) + src.vox[src.idx(x1, y1, z0)] * fx;
        double c01 = src.vox[src.idx(x0, y0, z1)] * (1 - fx) + src.vox[src.idx(x1, y0, z1)] * fx;
        double c11 = src.vox[src.idx(x0, y1, z1)] * (1 - fx) + src.vox[src.idx(x1, y1, z1)] * fx;
        p.vox[p.idx(x, y, z)] = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
        m.lab[m.idx(x, y, z)] = msrc.lab[msrc.idx(static_cast<int>(std::llround(ux)),
                                                  static_cast<int>(std::llround(uy)),
                                                  static_cast<int>(std::llround(uz)))];
      }
    }
  }
}

inline void flip_axis(Patch& p, MaskPatch& m, int axis) {
  const auto d = p.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int fx = axis == 0 ? d[0] - 1 - x : x;
        int fy = axis == 1 ? d[1] - 1 - y : y;
        int fz = axis == 2 ? d[2] - 1 - z : z;
        bool lower = axis == 0 ? x < fx : (axis == 1 ? y < fy : z < fz);
        if (lower) {
          std::swap(p.vox[p.idx(x, y, z)], p.vox[p.idx(fx, fy, fz)]);
          std::swap(m.lab[m.idx(x, y, z)], m.lab[m.idx(fx, fy, fz)]);
        }
      }
}
}  // namespace detail

// Table-driven augmentation: zoom / noise / smoothing / intensity scaling act
// on intensities (zoom also moves the mask, nearest-neighbor); flips apply to
// both. Each transform fires independently with its probability.
inline void augment(Patch& patch, MaskPatch& mask, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  CSEG_CHECK(patch.dims == mask.dims, "augment: patch/mask misaligned");
  if (rng.bernoulli(cfg.p_zoom)) detail::zoom_patch(patch, mask, rng.uniform(cfg.zoom_lo, cfg.zoom_hi));
  if (rng.bernoulli(cfg.p_noise))
    for (double& v : patch.vox) v += rng.normal(0.0, cfg.noise_sigma);
  if (rng.bernoulli(cfg.p_smooth))
    gaussian_smooth3(patch.vox, patch.dims, rng.uniform(cfg.smooth_lo, cfg.smooth_hi));
  if (rng.bernoulli(cfg.p_intensity)) {
    double f = rng.uniform(1.0 - cfg.intensity_scale, 1.0 + cfg.intensity_scale);
    for (double& v : patch.vox) v *= f;
  }
  for (int axis = 0; axis < 3; ++axis)
    if (rng.bernoulli(cfg.p_flip)) detail::flip_axis(patch, mask, axis);
}

// ----- loss -----

struct SegLossNodes {
  int total = -1;
  int dice_term = -1;  // supervision-weighted dice sum
  int ce_term = -1;    // supervision-weighted cross-entropy sum
};

// Per level: 0.5 * (1 - mean-class soft dice) + 0.5 * categorical CE, then the
// supervision-weighted sum across levels.
inline SegLossNodes build_seg_loss(Graph& g, const SegConfig& cfg, const UnetGraph& net,
                                   const std::string& prefix) {
  CSEG_CHECK(static_cast<int>(net.logits.size()) == cfg.levels(),
             "seg loss: level count differs from weight count");
  const int k = cfg.num_classes;
  SegLossNodes out;
  int dice_sum = -1, ce_sum = -1;
  for (int s = 0; s < cfg.levels(); ++s) {
    const Shape lshape = g.shape(net.logits[static_cast<std::size_t>(s)]);  // copy: pushes reallocate
    const std::int64_t sp = static_cast<std::int64_t>(lshape[1]) * lshape[2] * lshape[3];
    int onehot = g.input(prefix + "t" + std::to_string(s), lshape);
    int p = net.probs[static_cast<std::size_t>(s)];

    // per-class channel selectors
    int dice_acc = -1;
    int pt = g.mul(p, onehot);
    for (int c = 0; c < k; ++c) {
      Tensor sel = Tensor::zeros(lshape);
      std::fill(sel.v.begin() + c * sp, sel.v.begin() + (c + 1) * sp, 1.0);
      int selc = g.constant(sel);
      int inter = g.sum(g.mul(pt, selc));
      int psum = g.sum(g.mul(p, selc));
      int tsum = g.sum(g.mul(onehot, selc));
      int eps = g.constant_scalar(cfg.dice_smooth);
      int num = g.add(g.add(inter, inter), eps);
      int den = g.add(g.add(psum, tsum), eps);
      int frac = positive_ratio(g, num, den);
      dice_acc = dice_acc < 0 ? frac : g.add(dice_acc, frac);
    }
    int dice_loss = g.sub(g.constant_scalar(1.0),
                          g.mul(g.constant_scalar(1.0 / k), dice_acc));
    int ce = g.mul(g.constant_scalar(-1.0 / static_cast<double>(sp)),
                   g.sum(g.mul(onehot, g.log(p))));

    int wnode = g.constant_scalar(cfg.ds_weights[static_cast<std::size_t>(s)]);
    int wd = g.mul(wnode, dice_loss);
    int wc = g.mul(wnode, ce);
    dice_sum = dice_sum < 0 ? wd : g.add(dice_sum, wd);
    ce_sum = ce_sum < 0 ? wc : g.add(ce_sum, wc);
  }
  out.dice_term = dice_sum;
  out.ce_term = ce_sum;
  out.total = g.add(g.mul(g.constant_scalar(0.5), dice_sum), g.mul(g.constant_scalar(0.5), ce_sum));
  return out;
}

// Nearest-neighbor label decimation + one-hot for supervision level s.
inline Tensor onehot_target(const MaskPatch& m, int level, int num_classes) {
  const int f = 1 << level;
  const std::array<int, 3> d{m.dims[0] / f, m.dims[1] / f, m.dims[2] / f};
  Tensor t = Tensor::zeros({num_classes, d[2], d[1], d[0]});
  const std::int64_t sp = static_cast<std::int64_t>(d[0]) * d[1] * d[2];
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        std::uint8_t lab = m.lab[m.idx(x * f, y * f, z * f)];
        std::int64_t v = (static_cast<std::int64_t>(z) * d[1] + y) * d[0] + x;
        t.v[static_cast<std::size_t>(lab * sp + v)] = 1.0;
      }
  return t;
}

inline void set_loss_targets(Graph& g, const SegConfig& cfg, const MaskPatch& m,
                             const std::string& prefix) {
  for (int s = 0; s < cfg.levels(); ++s)
    g.set_input(prefix + "t" + std::to_string(s), onehot_target(m, s, cfg.num_classes));
}

struct SegLossValue {
  double total = 0.0;
  double dice_term = 0.0;
  double ce_term = 0.0;
};

// Standalone evaluation of the loss for given multiscale logits and a target
// mask patch (highest resolution first).
inline SegLossValue seg_loss(const std::vector<Tensor>& multiscale_logits, const MaskPatch& target,
                             const SegConfig& cfg) {
  CSEG_CHECK(static_cast<int>(multiscale_logits.size()) == cfg.levels(),
             "seg_loss: level count differs from weight count");
  Graph g;
  UnetGraph fake;
  for (int s = 0; s < cfg.levels(); ++s) {
    const Tensor& lg = multiscale_logits[static_cast<std::size_t>(s)];
    CSEG_CHECK(lg.shape.size() == 4 && lg.shape[0] == cfg.num_classes,
               "seg_loss: logits must be [K,z,y,x]");
    int in = g.input("logits" + std::to_string(s), lg.shape);
    g.set_input("logits" + std::to_string(s), lg);
    fake.logits.push_back(in);
    fake.probs.push_back(g.softmax_ch(in));
  }
  SegLossNodes nodes = build_seg_loss(g, cfg, fake, "");
  set_loss_targets(g, cfg, target, "");
  g.forward();
  return {g.scalar_value(nodes.total), g.scalar_value(nodes.dice_term), g.scalar_value(nodes.ce_term)};
}

// ----- snapshot ensemble -----

struct SnapshotMember {
  ParameterSet params;
  int cycle = 0;
  int epoch = 0;  // absolute epoch
};

struct SnapshotEnsemble {
  std::vector<SnapshotMember> members;
  ScheduleConfig schedule;
  SegConfig net;

  void validate() const {
    CSEG_CHECK(!members.empty(), "ensemble: no members");
    std::vector<int> per_cycle(static_cast<std::size_t>(schedule.cycles()), 0);
    for (const auto& m : members) {
      CSEG_CHECK(m.epoch % schedule.t_cycle >= schedule.plateau_start(),
                 "ensemble: member epoch before the plateau");
      CSEG_CHECK(m.cycle >= 0 && m.cycle < schedule.cycles(), "ensemble: bad cycle index");
      ++per_cycle[static_cast<std::size_t>(m.cycle)];
    }
    for (int c : per_cycle)
      CSEG_CHECK(c == schedule.snapshots_per_cycle, "ensemble: members per cycle mismatch");
  }
};

// ----- single-model prediction -----

// Builds the inference graph once; weights can be swapped between runs.
class SegPredictor {
 public:
  SegPredictor(const SegConfig& cfg, const ParameterSet& params) : cfg_(cfg) {
    cfg_.validate();
    net_ = build_unet(graph_, cfg_, ParamSource::from(params), "seg.", false);
  }

  void load(const ParameterSet& params) { params.load_into(graph_); }

  const SegConfig& config() const { return cfg_; }

  // patch voxels (x-fastest), returns class probabilities [K * pz*py*px]
  const std::vector<double>& run(const std::vector<double>& patch_vox) {
    graph_.set_input("seg.x", patch_vox);
    graph_.forward();
    return graph_.value(net_.probs[0]);
  }

 private:
  SegConfig cfg_;
  Graph graph_;
  UnetGraph net_;
};

struct PredictResult {
  LabelMask labels;
  std::vector<double> probs;  // [K, nz, ny, nx], full grid; background=1 outside the box
  BoundingBox box;
};

namespace detail {
inline std::vector<int> window_starts(int extent, int patch) {
  if (extent <= patch) return {0};
  const int stride = std::max(1, patch / 2);
  std::vector<int> starts;
  for (int s = 0;; s += stride) {
    if (s + patch >= extent) {
      starts.push_back(extent - patch);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Gaussian blending weights for one window position, sigma = patch/8.
inline std::vector<double> blend_weights(std::array<int, 3> patch) {
  std::vector<double> w(static_cast<std::size_t>(patch[0]) * patch[1] * patch[2]);
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    axis[a].resize(static_cast<std::size_t>(patch[a]));
    const double c = (patch[a] - 1) / 2.0;
    const double sigma = std::max(1.0, patch[a] / 8.0);
    for (int i = 0; i < patch[a]; ++i)
      axis[a][static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
  }
  std::size_t q = 0;
  for (int z = 0; z < patch[2]; ++z)
    for (int y = 0; y < patch[1]; ++y)
      for (int x = 0; x < patch[0]; ++x)
        w[q++] = axis[0][static_cast<std::size_t>(x)] * axis[1][static_cast<std::size_t>(y)] *
                     axis[2][static_cast<std::size_t>(z)] +
                 1e-9;
  return w;
}
}  // namespace detail

// Sliding-window prediction inside the box (50% overlap, Gaussian blending);
// everything outside the box is background. Boxes smaller than the patch are
// padded reflectively and cropped back.
inline PredictResult predict(const Volume& vol, SegPredictor& model, const BoundingBox& box) {
  const SegConfig& cfg = model.config();
  box.validate({vol.nx, vol.ny, vol.nz});
  const std::array<int, 3> patch = cfg.patch;
  const int k = cfg.num_classes;

  // padded ROI region covering the box, at least patch-sized
  std::array<int, 3> roi_dims, roi_off;  // roi_off: volume coord of roi origin (may be negative)
  for (int a = 0; a < 3; ++a) {
    roi_dims[a] = std::max(box.extent[a], patch[a]);
    roi_off[a] = box.start[a] - (roi_dims[a] - box.extent[a]) / 2;
  }
  const std::int64_t roi_n = static_cast<std::int64_t>(roi_dims[0]) * roi_dims[1] * roi_dims[2];
  std::vector<double> roi(static_cast<std::size_t>(roi_n));
  auto roi_idx = [&](int x, int y, int z) {
    return static_cast<std::size_t>((static_cast<std::int64_t>(z) * roi_dims[1] + y) * roi_dims[0] + x);
  };
  const int dims_v[3] = {vol.nx, vol.ny, vol.nz};
  for (int z = 0; z < roi_dims[2]; ++z)
    for (int y = 0; y < roi_dims[1]; ++y)
      for (int x = 0; x < roi_dims[0]; ++x)
        roi[roi_idx(x, y, z)] = vol.at(detail::reflect_index(roi_off[0] + x, dims_v[0]),
                                       detail::reflect_index(roi_off[1] + y, dims_v[1]),
                                       detail::reflect_index(roi_off[2] + z, dims_v[2]));

  std::vector<double> acc(static_cast<std::size_t>(k) * roi_n, 0.0);
  std::vector<double> wsum(static_cast<std::size_t>(roi_n), 0.0);
  const std::vector<double> bw = detail::blend_weights(patch);
  std::vector<double> pv(static_cast<std::size_t>(patch[0]) * patch[1] * patch[2]);

  for (int sz : detail::window_starts(roi_dims[2], patch[2]))
    for (int sy : detail::window_starts(roi_dims[1], patch[1]))
      for (int sx : detail::window_starts(roi_dims[0], patch[0])) {
        std::size_t q = 0;
        for (int z = 0; z < patch[2]; ++z)
          for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[0]; ++x) pv[q++] = roi[roi_idx(sx + x, sy + y, sz + z)];
        const std::vector<double>& probs = model.run(pv);
        const std::int64_t psp = static_cast<std::int64_t>(patch[0]) * patch[1] * patch[2];
        q = 0;
        for (int z = 0; z < patch[2]; ++z)
          for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[0]; ++x, ++q) {
              const std::size_t r = roi_idx(sx + x, sy + y, sz + z);
              const double w = bw[q];
              wsum[r] += w;
              for (int c = 0; c < k; ++c)
                acc[static_cast<std::size_t>(c) * roi_n + r] += w * probs[static_cast<std::size_t>(c * psp + q)];
            }
      }

  PredictResult out;
  out.box = box;
  out.labels = LabelMask(vol.nx, vol.ny, vol.nz, vol.spacing);
  const std::int64_t vn = vol.numel();
  out.probs.assign(static_cast<std::size_t>(k) * vn, 0.0);
  for (std::int64_t i = 0; i < vn; ++i) out.probs[static_cast<std::size_t>(i)] = 1.0;  // background

  for (int z = box.start[2]; z < box.end(2); ++z)
    for (int y = box.start[1]; y < box.end(1); ++y)
      for (int x = box.start[0]; x < box.end(0); ++x) {
        const std::size_t r = roi_idx(x - roi_off[0], y - roi_off[1], z - roi_off[2]);
        const std::int64_t v = vol.index(x, y, z);
        double best = -1.0;
        int best_c = 0;
        for (int c = 0; c < k; ++c) {
          double p = acc[static_cast<std::size_t>(c) * roi_n + r] / wsum[r];
          out.probs[static_cast<std::size_t>(c * vn + v)] = p;
          if (p > best) {
            best = p;
            best_c = c;
          }
        }
        out.labels.data[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best_c);
      }
  return out;
}

inline PredictResult predict(const Volume& vol, const ParameterSet& params, const SegConfig& cfg,
                             const BoundingBox& box) {
  SegPredictor model(cfg, params);
  return predict(vol, model, box);
}

// ----- ensemble prediction with per-voxel uncertainty -----

struct EnsembleResult {
  std::vector<double> mean_probs;   // [K, nz, ny, nx]
  LabelMask labels;
  std::vector<double> uncertainty;  // population std of the cyst probability
  BoundingBox box;
};

inline EnsembleResult ensemble_predict(const Volume& vol, const SnapshotEnsemble& ens,
                                       const BoundingBox& box) {
  CSEG_CHECK(!ens.members.empty(), "ensemble_predict: no members");
  const int k = ens.net.num_classes;
  const std::int64_t vn = vol.numel();
  EnsembleResult out;
  out.box = box;
  out.mean_probs.assign(static_cast<std::size_t>(k) * vn, 0.0);
  std::vector<double> cyst_sq(static_cast<std::size_t>(vn), 0.0);

  SegPredictor model(ens.net, ens.members.front().params);
  for (const auto& member : ens.members) {
    model.load(member.params);
    PredictResult r = predict(vol, model, box);
    for (std::size_t i = 0; i < out.mean_probs.size(); ++i) out.mean_probs[i] += r.probs[i];
    const double* cyst = r.probs.data() + static_cast<std::size_t>(kCyst) * vn;
    for (std::int64_t i = 0; i < vn; ++i) cyst_sq[static_cast<std::size_t>(i)] += cyst[i] * cyst[i];
  }
  const double inv_m = 1.0 / static_cast<double>(ens.members.size());
  for (double& p : out.mean_probs) p *= inv_m;

  out.uncertainty.assign(static_cast<std::size_t>(vn), 0.0);
  const double* cyst_mean = out.mean_probs.data() + static_cast<std::size_t>(kCyst) * vn;
  for (std::int64_t i = 0; i < vn; ++i) {
    double var = cyst_sq[static_cast<std::size_t>(i)] * inv_m - cyst_mean[i] * cyst_mean[i];
    out.uncertainty[static_cast<std::size_t>(i)] = var > 0.0 ? std::sqrt(var) : 0.0;
  }

  out.labels = LabelMask(vol.nx, vol.ny, vol.nz, vol.spacing);
  for (int z = box.start[2]; z < box.end(2); ++z)
    for (int y = box.start[1]; y < box.end(1); ++y)
      for (int x = box.start[0]; x < box.end(0); ++x) {
        const std::int64_t v = vol.index(x, y, z);
        double best = -1.0;
        int best_c = 0;
        for (int c = 0; c < k; ++c) {
          double p = out.mean_probs[static_cast<std::size_t>(c * vn + v)];
          if (p > best) {
            best = p;
            best_c = c;
          }
        }
        out.labels.data[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best_c);
      }
  return out;
}

// ----- ROI localization -----

struct LowresLocator {
  SegConfig cfg;
  ParameterSet params;
  int factor = 4;  // spacing multiplier for the low-resolution pass
};

struct RoiResult {
  BoundingBox box;
  bool fallback = false;
};

// Low-resolution prediction over the whole volume; the union of predicted
// kidney+cyst voxels is covered, expanded to the minimum extents, clamped.
// An empty prediction falls back to a centered minimum box, flagged.
inline RoiResult locate_roi(const Volume& vol, SegPredictor& lowres_model, int factor,
                            std::array<int, 3> min_extent) {
  CSEG_CHECK(factor >= 1, "locate_roi: factor must be >= 1");
  Volume lr = resample(vol, {vol.spacing[0] * factor, vol.spacing[1] * factor,
                             vol.spacing[2] * factor});
  BoundingBox full{{0, 0, 0}, {lr.nx, lr.ny, lr.nz}};
  PredictResult pred = predict(lr, lowres_model, full);

  auto fg = bbox_of_foreground(pred.labels);
  const std::array<int, 3> dims{vol.nx, vol.ny, vol.nz};
  if (!fg) return {expand_box(centered_box(min_extent, dims), min_extent, dims), true};

  const double sx = static_cast<double>(vol.nx) / lr.nx;
  const double sy = static_cast<double>(vol.ny) / lr.ny;
  const double sz = static_cast<double>(vol.nz) / lr.nz;
  BoundingBox up;
  up.start = {static_cast<int>(std::floor(fg->start[0] * sx)),
              static_cast<int>(std::floor(fg->start[1] * sy)),
              static_cast<int>(std::floor(fg->start[2] * sz))};
  std::array<int, 3> end{static_cast<int>(std::ceil(fg->end(0) * sx)),
                         static_cast<int>(std::ceil(fg->end(1) * sy)),
                         static_cast<int>(std::ceil(fg->end(2) * sz))};
  for (int a = 0; a < 3; ++a) {
    up.start[a] = std::min(std::max(up.start[a], 0), dims[a] - 1);
    end[a] = std::min(std::max(end[a], up.start[a] + 1), dims[a]);
    up.extent[a] = end[a] - up.start[a];
  }
  return {expand_box(up, min_extent, dims), false};
}

// ----- training -----

struct TrainItem {
  const Volume* vol = nullptr;
  const LabelMask* mask = nullptr;
  BoundingBox box;
};

struct SegTrainOptions {
  int iters_per_epoch = 8;
  AugmentConfig aug;
  double cyst_patch_fraction = 0.5;  // patches centered on random cyst voxels
  int box_margin = 8;                // uniform patches may reach this far beyond the box
  double momentum = 0.99;            // heavy-ball velocity, reset at every cycle restart
  double grad_clip = 12.0;           // global-norm clip; <= 0 disables
};

struct TrainLogRow {
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  double dice_term = 0.0;
  double ce_term = 0.0;
};

// Cyclic-LR SGD training; saves snapshot members on randomly chosen plateau
// epochs of every cycle.
inline SnapshotEnsemble train_segmenter(const std::vector<TrainItem>& items,
                                        const ScheduleConfig& schedule, const SegConfig& cfg,
                                        Rng& rng, const SegTrainOptions& opts,
                                        std::vector<TrainLogRow>* log = nullptr) {
  CSEG_CHECK(!items.empty(), "train_segmenter: empty dataset");
  schedule.validate();
  cfg.validate();
  for (const auto& it : items) {
    CSEG_CHECK(it.vol && it.mask && it.mask->aligned_with(*it.vol), "train_segmenter: bad item");
    it.box.validate({it.vol->nx, it.vol->ny, it.vol->nz});
  }

  Graph g;
  UnetGraph net = build_unet(g, cfg, ParamSource::he(rng.next_u64()), "seg.", true);
  SegLossNodes loss = build_seg_loss(g, cfg, net, "seg.");

  // per-item cyst voxel lists for centered sampling
  std::vector<std::vector<std::int64_t>> cyst_voxels(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::int64_t v = 0; v < items[i].mask->numel(); ++v)
      if (items[i].mask->data[static_cast<std::size_t>(v)] == kCyst) cyst_voxels[i].push_back(v);

  Rng snap_rng(rng.next_u64());
  std::vector<std::vector<int>> chosen(static_cast<std::size_t>(schedule.cycles()));
  for (int c = 0; c < schedule.cycles(); ++c)
    chosen[static_cast<std::size_t>(c)] = snapshot_select(schedule, schedule.snapshots_per_cycle, snap_rng);

  SnapshotEnsemble ens;
  ens.schedule = schedule;
  ens.net = cfg;

  // heavy-ball momentum buffers per trainable parameter
  std::vector<std::pair<int, std::vector<double>>> velocity;
  for (int id : g.param_ids())
    if (g.node_ref(id).requires_grad)
      velocity.emplace_back(id, std::vector<double>(g.node_ref(id).val.size(), 0.0));

  const std::array<int, 3> patch = cfg.patch;
  for (int epoch = 0; epoch < schedule.t_max; ++epoch) {
    const double lr = cyclic_lr(epoch, schedule);
    if (epoch % schedule.t_cycle == 0)
      for (auto& [id, v] : velocity) std::fill(v.begin(), v.end(), 0.0);
    double sum_total = 0.0, sum_dice = 0.0, sum_ce = 0.0;
    for (int iter = 0; iter < opts.iters_per_epoch; ++iter) {
      const std::size_t pick = static_cast<std::size_t>(rng.below(items.size()));
      const TrainItem& item = items[pick];
      const std::array<int, 3> dims{item.vol->nx, item.vol->ny, item.vol->nz};

      std::array<int, 3> start{};
      const bool want_cyst = rng.bernoulli(opts.cyst_patch_fraction) && !cyst_voxels[pick].empty();
      if (want_cyst) {
        std::int64_t v = cyst_voxels[pick][static_cast<std::size_t>(rng.below(cyst_voxels[pick].size()))];
        int cz = static_cast<int>(v / (static_cast<std::int64_t>(dims[0]) * dims[1]));
        int rem = static_cast<int>(v % (static_cast<std::int64_t>(dims[0]) * dims[1]));
        std::array<int, 3> c{rem % dims[0], rem / dims[0], cz};
        for (int a = 0; a < 3; ++a)
          start[a] = std::min(std::max(c[a] - patch[a] / 2, 0), dims[a] - patch[a]);
      } else {
        for (int a = 0; a < 3; ++a) {
          int lo = std::max(0, item.box.start[a] - opts.box_margin);
          int hi = std::min(dims[a] - patch[a], item.box.end(a) + opts.box_margin - patch[a]);
          if (hi < lo) {
            lo = std::max(0, std::min(lo, dims[a] - patch[a]));
            hi = lo;
          }
          start[a] = lo + (hi > lo ? static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))) : 0);
        }
      }

      Patch p = extract_patch(*item.vol, start, patch);
      MaskPatch mp = extract_mask_patch(*item.mask, start, patch);
      augment(p, mp, opts.aug, rng);

      g.set_input("seg.x", Tensor({1, patch[2], patch[1], patch[0]}, std::move(p.vox)));
      set_loss_targets(g, cfg, mp, "seg.");
      g.forward();
      const double total = g.scalar_value(loss.total);
      CSEG_RUNTIME_CHECK(std::isfinite(total),
                         "train_segmenter: loss diverged at epoch " + std::to_string(epoch));
      sum_total += total;
      sum_dice += g.scalar_value(loss.dice_term);
      sum_ce += g.scalar_value(loss.ce_term);
      g.backward(loss.total);
      if (opts.grad_clip > 0.0) {
        const double norm = g.grad_norm();
        if (norm > opts.grad_clip) g.scale_grads(opts.grad_clip / norm);
      }
      for (auto& [id, v] : velocity) {
        auto& node = g.node_mut(id);
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = opts.momentum * v[i] + node.grad[i];
          node.val[i] -= lr * v[i];
        }
      }
    }
    if (log)
      log->push_back({epoch, lr, sum_total / opts.iters_per_epoch, sum_dice / opts.iters_per_epoch,
                      sum_ce / opts.iters_per_epoch});

    const int cyc = epoch / schedule.t_cycle;
    const int t_mod = epoch % schedule.t_cycle;
    const auto& picks = chosen[static_cast<std::size_t>(cyc)];
    if (std::find(picks.begin(), picks.end(), t_mod) != picks.end())
      ens.members.push_back({ParameterSet::from_graph(g), cyc, epoch});
  }
  ens.validate();
  return ens;
}

}  // namespace counterseg

#endif
