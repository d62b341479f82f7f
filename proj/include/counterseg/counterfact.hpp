#ifndef COUNTERSEG_COUNTERFACT_HPP
#define COUNTERSEG_COUNTERFACT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "counterseg/vaegan.hpp"

namespace counterseg {

// Gradients of the per-class probability sums over the ground-truth cyst ROI
// with respect to the latent code.
struct RoiGradients {
  Tensor g_cyst;
  Tensor g_kid;
  Tensor g_bg;

  Tensor direction() const {  // g_cyst - g_kid - g_bg
    Tensor d = g_cyst;
    for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] -= g_kid.v[i] + g_bg.v[i];
    return d;
  }
};

// One graph composing decode(z) with the segmentation network. Forwarding
// yields the decoded patch and its class probabilities; three seeded backward
// passes give the per-class ROI gradients with respect to z.
class CounterfactualEngine {
 public:
  CounterfactualEngine(const VaeGanModel& vae, const SegConfig& seg_cfg,
                       const ParameterSet& seg_params, const MaskPatch& gt_cyst_roi)
      : vae_cfg_(vae.cfg), seg_cfg_(seg_cfg) {
    CSEG_CHECK(vae.cfg.patch == seg_cfg.patch, "counterfactual: decoder and segmenter patch dims differ");
    CSEG_CHECK(gt_cyst_roi.dims == vae.cfg.patch, "counterfactual: ROI mask must match the patch dims");
    roi_count_ = 0;
    for (auto l : gt_cyst_roi.lab) roi_count_ += l == kCyst ? 1 : 0;
    CSEG_CHECK(roi_count_ > 0, "counterfactual: empty ground-truth cyst ROI");

    z_in_ = g_.input("z", vae.cfg.latent_shape(), true);
    xhat_ = build_vae_decoder(g_, vae.cfg, ParamSource::from(vae.params), false, z_in_);
    UnetGraph net = build_unet(g_, seg_cfg, ParamSource::from(seg_params), "seg.", false, xhat_);
    probs_ = net.probs[0];

    // class sums over the ROI: sum(probs * roi selector per class)
    const Shape pshape = g_.shape(probs_);
    const std::int64_t sp = static_cast<std::int64_t>(pshape[1]) * pshape[2] * pshape[3];
    for (int c = 0; c < 3; ++c) {
      Tensor sel = Tensor::zeros(pshape);
      std::size_t q = 0;
      for (int z = 0; z < gt_cyst_roi.dims[2]; ++z)
        for (int y = 0; y < gt_cyst_roi.dims[1]; ++y)
          for (int x = 0; x < gt_cyst_roi.dims[0]; ++x, ++q)
            if (gt_cyst_roi.lab[q] == kCyst)
              sel.v[static_cast<std::size_t>(c * sp) + q] = 1.0;
      class_sums_[static_cast<std::size_t>(c)] = g_.sum(g_.mul(probs_, g_.constant(sel)));
    }
    gt_roi_ = gt_cyst_roi;
  }

  const VaeGanConfig& vae_config() const { return vae_cfg_; }
  const SegConfig& seg_config() const { return seg_cfg_; }
  const MaskPatch& roi() const { return gt_roi_; }

  // voxels excluded from the DSC computation (e.g. other ground-truth cysts
  // sharing the patch); they never count as predicted positives
  void set_ignore(const MaskPatch& ignore) {
    CSEG_CHECK(ignore.dims == gt_roi_.dims, "set_ignore: dims mismatch");
    ignore_ = ignore.lab;
  }

  struct Eval {
    Tensor xhat;                  // decoded patch [1,z,y,x]
    MaskPatch predicted;          // argmax labels over the patch
    double dsc = 0.0;             // cyst DSC vs the ground-truth ROI mask
  };

  Eval evaluate(const Tensor& z) {
    forward(z);
    Eval out;
    out.xhat = g_.tensor(xhat_);
    const auto& probs = g_.value(probs_);
    const auto& d = gt_roi_.dims;
    const std::int64_t sp = static_cast<std::int64_t>(d[0]) * d[1] * d[2];
    out.predicted.dims = d;
    out.predicted.lab.resize(static_cast<std::size_t>(sp));
    std::int64_t inter = 0, npred = 0;
    for (std::int64_t v = 0; v < sp; ++v) {
      int best = 0;
      double bp = probs[static_cast<std::size_t>(v)];
      for (int c = 1; c < 3; ++c)
        if (probs[static_cast<std::size_t>(c * sp + v)] > bp) {
          bp = probs[static_cast<std::size_t>(c * sp + v)];
          best = c;
        }
      out.predicted.lab[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
      const bool ignored = !ignore_.empty() && ignore_[static_cast<std::size_t>(v)] != 0;
      const bool pred_cyst = best == kCyst && !ignored;
      npred += pred_cyst;
      inter += pred_cyst && gt_roi_.lab[static_cast<std::size_t>(v)] == kCyst;
    }
    out.dsc = (npred + roi_count_) > 0
                  ? 2.0 * static_cast<double>(inter) / static_cast<double>(npred + roi_count_)
                  : 1.0;
    return out;
  }

  // three backward passes through segment(decode(z)), one per class sum
  RoiGradients roi_class_gradients(const Tensor& z) {
    forward(z);
    RoiGradients out;
    Tensor* slots[3] = {&out.g_bg, &out.g_kid, &out.g_cyst};
    for (int c = 0; c < 3; ++c) {
      g_.backward(class_sums_[static_cast<std::size_t>(c)]);
      Tensor t;
      t.shape = g_.shape(z_in_);
      t.v = g_.grad_of("z");
      *slots[c] = std::move(t);
    }
    return out;
  }

 private:
  void forward(const Tensor& z) {
    CSEG_CHECK(z.shape == vae_cfg_.latent_shape(), "counterfactual: latent layout mismatch");
    g_.set_input("z", z);
    g_.forward();
  }

  VaeGanConfig vae_cfg_;
  SegConfig seg_cfg_;
  MaskPatch gt_roi_;
  std::vector<std::uint8_t> ignore_;
  std::int64_t roi_count_ = 0;
  Graph g_;
  int z_in_ = -1, xhat_ = -1, probs_ = -1;
  std::array<int, 3> class_sums_{-1, -1, -1};
};

// x_ci(alpha) = decode(z + alpha * (g_cyst - g_kid - g_bg))
inline Tensor perturb_latent(const Tensor& z, const RoiGradients& grads, double alpha) {
  CSEG_CHECK(z.shape == grads.g_cyst.shape, "perturb: layout mismatch");
  Tensor out = z;
  const Tensor dir = grads.direction();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += alpha * dir.v[i];
  return out;
}

inline Tensor perturb(VaeGanRunner& decoder, const Tensor& z, const RoiGradients& grads, double alpha) {
  return decoder.decode(perturb_latent(z, grads, alpha));
}

// ----- alpha bound search -----

struct AlphaBounds {
  double alpha_min = 0.0;
  double alpha_max = 0.0;
  bool flat = false;
  std::map<double, double> samples;  // alpha -> DSC, includes 0
};

// March outward in +/- delta steps; a direction stops when the established
// monotone trend fails twice in a row, or after max_steps. The returned bound
// is the alpha of the extremal DSC reached in that direction.
inline AlphaBounds alpha_bounds(const std::function<double(double)>& dsc_of, double delta,
                                int max_steps) {
  CSEG_CHECK(delta > 0.0, "alpha_bounds: step must be positive");
  CSEG_CHECK(max_steps >= 1, "alpha_bounds: need at least one step");
  AlphaBounds out;
  const double d0 = dsc_of(0.0);
  out.samples[0.0] = d0;

  auto march = [&](double sign) {
    double best_alpha = 0.0;
    double best_gap = 0.0;
    double prev = d0;
    int trend = 0;       // +1 rising, -1 falling
    int violations = 0;
    double extreme = d0;  // extremal DSC along the trend
    for (int step = 1; step <= max_steps; ++step) {
      const double a = sign * delta * step;
      const double d = dsc_of(a);
      out.samples[a] = d;
      const double diff = d - prev;
      if (trend == 0 && diff != 0.0) trend = diff > 0.0 ? 1 : -1;
      const bool continues = trend != 0 && diff * trend > 0.0;
      if (continues) {
        violations = 0;
      } else {
        if (++violations >= 2) break;
      }
      if (trend != 0 && (d - extreme) * trend > 0.0) {
        extreme = d;
        best_alpha = a;
        best_gap = std::abs(d - d0);
      }
      prev = d;
    }
    return std::make_pair(best_alpha, best_gap);
  };

  auto [up_alpha, up_gap] = march(+1.0);
  auto [dn_alpha, dn_gap] = march(-1.0);
  out.alpha_max = std::max(0.0, std::max(up_alpha, dn_alpha));
  out.alpha_min = std::min(0.0, std::min(up_alpha, dn_alpha));
  out.flat = up_gap == 0.0 && dn_gap == 0.0;
  return out;
}

// ----- target sweep -----

struct SweepStep {
  double target = 0.0;
  double alpha = 0.0;
  double achieved = 0.0;
  bool attained = false;
};

struct SweepPlan {
  std::vector<SweepStep> steps;  // sorted by target
  bool flat = false;
  bool grid_fallback = false;    // non-monotone samples forced a dense grid
  double base_dsc = 0.0;         // DSC at alpha = 0
};

struct SweepOptions {
  double tol = 0.02;
  int max_evals_per_target = 40;
  int fallback_grid = 21;
};

// Bisect within the sampled bracket toward each target DSC; unattainable
// targets (outside the sampled DSC range) are recorded with the nearest
// achieved value, never dropped.
inline SweepPlan counterfactual_sweep(const std::function<double(double)>& dsc_of,
                                      const AlphaBounds& bounds,
                                      const std::vector<double>& targets = {0.0, 0.1, 0.2, 0.3, 0.4,
                                                                            0.5, 0.6, 0.7, 0.8, 0.9,
                                                                            1.0},
                                      const SweepOptions& opts = {}) {
  SweepPlan plan;
  plan.flat = bounds.flat;
  std::map<double, double> samples = bounds.samples;
  if (!samples.count(0.0)) samples[0.0] = dsc_of(0.0);
  plan.base_dsc = samples.at(0.0);

  // restrict to the bracket
  std::map<double, double> inb;
  for (const auto& [a, d] : samples)
    if (a >= bounds.alpha_min - 1e-12 && a <= bounds.alpha_max + 1e-12) inb[a] = d;
  samples = std::move(inb);

  // dense fallback when the bracket samples are not monotone in alpha
  {
    int dir = 0;
    bool monotone = true;
    double prev = samples.begin()->second;
    for (auto it = std::next(samples.begin()); it != samples.end(); ++it) {
      double diff = it->second - prev;
      if (diff != 0.0) {
        int s = diff > 0.0 ? 1 : -1;
        if (dir == 0)
          dir = s;
        else if (s != dir)
          monotone = false;
      }
      prev = it->second;
    }
    if (!monotone && !plan.flat && opts.fallback_grid > 1 &&
        bounds.alpha_max > bounds.alpha_min) {
      plan.grid_fallback = true;
      for (int i = 0; i < opts.fallback_grid; ++i) {
        double a = bounds.alpha_min +
                   (bounds.alpha_max - bounds.alpha_min) * i / (opts.fallback_grid - 1.0);
        if (!samples.count(a)) samples[a] = dsc_of(a);
      }
    }
  }

  for (double target : targets) {
    SweepStep step;
    step.target = target;

    auto nearest = [&]() {
      double best_a = 0.0, best_d = samples.at(0.0), best_gap = 1e18;
      for (const auto& [a, d] : samples) {
        const double gap = std::abs(d - target);
        if (gap < best_gap - 1e-15 ||
            (std::abs(gap - best_gap) <= 1e-15 && std::abs(a) < std::abs(best_a))) {
          best_gap = gap;
          best_a = a;
          best_d = d;
        }
      }
      return std::make_pair(best_a, best_d);
    };

    double lo_d = 1e18, hi_d = -1e18;
    for (const auto& [a, d] : samples) {
      lo_d = std::min(lo_d, d);
      hi_d = std::max(hi_d, d);
    }
    const bool reachable = target >= lo_d - opts.tol && target <= hi_d + opts.tol;

    int evals = 0;
    if (reachable) {
      auto [na, nd] = nearest();
      while (std::abs(nd - target) > opts.tol && evals < opts.max_evals_per_target) {
        // adjacent straddling pair closest to alpha = 0
        std::optional<std::pair<double, double>> pick;
        auto prev = samples.begin();
        for (auto it = std::next(samples.begin()); it != samples.end(); ++it, ++prev) {
          const double d1 = prev->second, d2 = it->second;
          if ((d1 - target) * (d2 - target) <= 0.0 && it->first - prev->first > 1e-12) {
            const double mid_abs = std::abs(0.5 * (prev->first + it->first));
            if (!pick || mid_abs < std::abs(0.5 * (pick->first + pick->second)))
              pick = std::make_pair(prev->first, it->first);
          }
        }
        if (!pick) break;
        const double mid = 0.5 * (pick->first + pick->second);
        samples[mid] = dsc_of(mid);
        ++evals;
        std::tie(na, nd) = nearest();
      }
      step.alpha = na;
      step.achieved = nd;
      step.attained = std::abs(nd - target) <= opts.tol;
    } else {
      auto [na, nd] = nearest();
      step.alpha = na;
      step.achieved = nd;
      step.attained = false;
    }
    plan.steps.push_back(step);
  }
  std::sort(plan.steps.begin(), plan.steps.end(),
            [](const SweepStep& a, const SweepStep& b) { return a.target < b.target; });
  return plan;
}

// ----- counterfactual reliability index -----

struct CriReport {
  double dsc_orig = 0.0;
  double dsc_recon = 0.0;
  double sens_orig = 0.0;
  double sens_recon = 0.0;
  double cri = 0.0;
};

// (1 - |dDSC|/DSC_orig) * (1 - |dSens|/Sens_orig), clamped at 0 from below.
inline CriReport cri(double dsc_orig, double dsc_recon, double sens_orig, double sens_recon) {
  CSEG_CHECK(dsc_orig > 0.0, "cri: zero DSC denominator");
  CSEG_CHECK(sens_orig > 0.0, "cri: zero sensitivity denominator");
  CriReport r;
  r.dsc_orig = dsc_orig;
  r.dsc_recon = dsc_recon;
  r.sens_orig = sens_orig;
  r.sens_recon = sens_recon;
  const double a = 1.0 - std::abs(dsc_orig - dsc_recon) / dsc_orig;
  const double b = 1.0 - std::abs(sens_orig - sens_recon) / sens_orig;
  r.cri = std::max(0.0, a * b);
  return r;
}

}  // namespace counterseg

#endif
