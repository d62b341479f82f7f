#ifndef COUNTERSEG_CONFIG_HPP
#define COUNTERSEG_CONFIG_HPP

#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "counterseg/qc.hpp"
#include "counterseg/schedule.hpp"
#include "counterseg/seg.hpp"
#include "counterseg/vaegan.hpp"

namespace counterseg {

// Whole-run configuration. Parsed strictly: unknown keys anywhere are errors,
// every section is validated before any work starts.

struct PhantomSection {
  int count = 200;
  std::array<double, 3> split{0.6, 0.2, 0.2};
  std::array<int, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.6, 1.6, 1.6};
  std::array<double, 3> kidney_axes_min{20.0, 18.0, 16.0};
  std::array<double, 3> kidney_axes_max{24.0, 22.0, 19.0};
  double kidney_center_jitter = 3.0;
  double kidney_mean = 120.0;
  double kidney_texture_amp = 40.0;
  int cysts_min = 1;
  int cysts_max = 2;
  double p_second_cyst = 0.35;      // chance the volume gets a second cyst
  double p_small = 0.45;            // size-class mix for clear cysts
  double p_medium = 0.40;           // remainder is large
  double radius_small_min = 4.0;    // mm
  double p_ambiguous = 0.22;        // low-contrast volumes (small cysts only)
  std::array<double, 2> ambiguous_cyst_mean{65.0, 105.0};
  std::array<double, 2> clear_cyst_mean{0.0, 30.0};
  double cyst_texture_amp = 10.0;
  double cyst_deform_amp = 0.08;
  double noise_sigma = 7.0;
  double boundary_smooth_sigma = 0.6;

  void validate() const {
    CSEG_CHECK(count >= 1, "phantom.count must be >= 1");
    CSEG_CHECK(split[0] > 0 && split[1] >= 0 && split[2] >= 0 &&
                   std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9,
               "phantom.split must sum to 1");
    CSEG_CHECK(p_small >= 0 && p_medium >= 0 && p_small + p_medium <= 1.0, "phantom size mix invalid");
    CSEG_CHECK(p_ambiguous >= 0 && p_ambiguous <= 1, "phantom.p_ambiguous must be in [0,1]");
  }
};

struct LowresSection {
  int factor = 4;
  SegConfig net = [] {
    SegConfig c;
    c.patch = {16, 16, 16};
    c.depth = 3;
    c.widths = {4, 8, 16};
    c.ds_weights = {1.0};
    return c;
  }();
  int epochs = 24;
  int iters_per_epoch = 12;
  double lr = 0.01;
  int cv_folds = 5;
};

struct SegSection {
  SegConfig net = [] {
    SegConfig c;
    c.patch = {32, 32, 16};
    c.depth = 4;
    c.widths = {8, 16, 32, 64};
    c.ds_weights = {1.0, 0.5, 0.25, 0.125};
    return c;
  }();
  SegTrainOptions train;
  LowresSection lowres;
  AugmentConfig augment;
};

struct VaeSection {
  VaeGanConfig net;
  VaeTrainOptions train;
};

struct CounterfactSection {
  double tol = 0.02;
  int max_evals_per_target = 40;
  double march_step_frac = 0.05;  // latent-norm-relative step
  int max_march_steps = 30;
  std::string direction_mode = "fixed";  // or "relinearized"
  int sweep_member = -1;                 // index into ensemble members; -1 = last

  void validate() const {
    CSEG_CHECK(tol > 0 && max_evals_per_target >= 1 && march_step_frac > 0 && max_march_steps >= 1,
               "counterfactual section invalid");
    CSEG_CHECK(direction_mode == "fixed" || direction_mode == "relinearized",
               "counterfactual.direction_mode must be fixed or relinearized");
  }
};

struct QcSection {
  double poor_threshold = 0.75;
  double report_flag_fraction = 0.2;
  std::string uncertainty_policy = "uncertain_volume_ratio";
  double uncertain_std_threshold = 0.15;
};

struct IoSection {
  int gif_delay_cs = 40;
};

struct RunConfig {
  std::uint64_t seed = 20240101;
  std::string out = "runs/default";
  PhantomSection phantom;
  NormalizeConfig preprocess;
  SegSection segmenter;
  ScheduleConfig schedule = ScheduleConfig::desk();
  VaeSection vaegan;
  CounterfactSection counterfactual;
  double radiomics_bin_width = 25.0;
  QcSection qc;
  IoSection io;
  std::vector<std::string> eval_splits{"test"};

  void validate() const {
    phantom.validate();
    CSEG_CHECK(preprocess.stddev > 0 && preprocess.lo_hu < preprocess.hi_hu, "preprocess invalid");
    segmenter.net.validate();
    segmenter.lowres.net.validate();
    segmenter.augment.validate();
    schedule.validate();
    vaegan.net.validate();
    counterfactual.validate();
    CSEG_CHECK(radiomics_bin_width > 0, "radiomics.bin_width must be positive");
    CSEG_CHECK(qc.poor_threshold > 0 && qc.poor_threshold < 1, "qc.poor_threshold must be in (0,1)");
    uncertainty_policy_from(qc.uncertainty_policy);  // throws on unknown names
    CSEG_CHECK(!eval_splits.empty(), "eval.splits must be nonempty");
  }
};

// ----- strict JSON parsing -----

namespace cfgdetail {

inline void expect_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                        const std::string& where) {
  CSEG_CHECK(j.is_object(), "config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    CSEG_CHECK(allowed.count(it.key()) != 0, "config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

template <typename T, std::size_t N>
void get_arr(const nlohmann::json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  auto v = j.at(key).get<std::vector<T>>();
  CSEG_CHECK(v.size() == N, std::string("config: ") + key + " needs " + std::to_string(N) + " values");
  std::copy(v.begin(), v.end(), out.begin());
}

inline void parse_segnet(const nlohmann::json& j, SegConfig& net, const std::string& where) {
  expect_keys(j, {"patch", "depth", "widths", "ds_weights", "num_classes", "dice_smooth",
                  "lrelu_alpha", "instnorm_eps"},
              where);
  get_arr(j, "patch", net.patch);
  get_to(j, "depth", net.depth);
  get_to(j, "widths", net.widths);
  get_to(j, "ds_weights", net.ds_weights);
  get_to(j, "num_classes", net.num_classes);
  get_to(j, "dice_smooth", net.dice_smooth);
  get_to(j, "lrelu_alpha", net.lrelu_alpha);
  get_to(j, "instnorm_eps", net.instnorm_eps);
}

}  // namespace cfgdetail

inline RunConfig parse_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  RunConfig cfg;
  expect_keys(j, {"seed", "out", "phantom", "preprocess", "segmenter", "schedule", "vaegan",
                  "counterfactual", "radiomics", "qc", "io", "eval"},
              "top level");
  get_to(j, "seed", cfg.seed);
  get_to(j, "out", cfg.out);

  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    expect_keys(p,
                {"count", "split", "dims", "spacing", "kidney_axes_min", "kidney_axes_max",
                 "kidney_center_jitter", "kidney_mean", "kidney_texture_amp", "cysts_min",
                 "cysts_max", "p_second_cyst", "p_small", "p_medium", "radius_small_min",
                 "p_ambiguous", "ambiguous_cyst_mean", "clear_cyst_mean", "cyst_texture_amp",
                 "cyst_deform_amp", "noise_sigma", "boundary_smooth_sigma"},
                "phantom");
    auto& s = cfg.phantom;
    get_to(p, "count", s.count);
    get_arr(p, "split", s.split);
    get_arr(p, "dims", s.dims);
    get_arr(p, "spacing", s.spacing);
    get_arr(p, "kidney_axes_min", s.kidney_axes_min);
    get_arr(p, "kidney_axes_max", s.kidney_axes_max);
    get_to(p, "kidney_center_jitter", s.kidney_center_jitter);
    get_to(p, "kidney_mean", s.kidney_mean);
    get_to(p, "kidney_texture_amp", s.kidney_texture_amp);
    get_to(p, "cysts_min", s.cysts_min);
    get_to(p, "cysts_max", s.cysts_max);
    get_to(p, "p_second_cyst", s.p_second_cyst);
    get_to(p, "p_small", s.p_small);
    get_to(p, "p_medium", s.p_medium);
    get_to(p, "radius_small_min", s.radius_small_min);
    get_to(p, "p_ambiguous", s.p_ambiguous);
    get_arr(p, "ambiguous_cyst_mean", s.ambiguous_cyst_mean);
    get_arr(p, "clear_cyst_mean", s.clear_cyst_mean);
    get_to(p, "cyst_texture_amp", s.cyst_texture_amp);
    get_to(p, "cyst_deform_amp", s.cyst_deform_amp);
    get_to(p, "noise_sigma", s.noise_sigma);
    get_to(p, "boundary_smooth_sigma", s.boundary_smooth_sigma);
  }

  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    expect_keys(p, {"lo_hu", "hi_hu", "mean", "std"}, "preprocess");
    get_to(p, "lo_hu", cfg.preprocess.lo_hu);
    get_to(p, "hi_hu", cfg.preprocess.hi_hu);
    get_to(p, "mean", cfg.preprocess.mean);
    get_to(p, "std", cfg.preprocess.stddev);
  }

  if (j.contains("segmenter")) {
    const auto& p = j.at("segmenter");
    expect_keys(p, {"net", "iters_per_epoch", "cyst_patch_fraction", "box_margin", "momentum",
                    "grad_clip", "lowres", "augment"},
                "segmenter");
    if (p.contains("net")) parse_segnet(p.at("net"), cfg.segmenter.net, "segmenter.net");
    get_to(p, "iters_per_epoch", cfg.segmenter.train.iters_per_epoch);
    get_to(p, "cyst_patch_fraction", cfg.segmenter.train.cyst_patch_fraction);
    get_to(p, "box_margin", cfg.segmenter.train.box_margin);
    get_to(p, "momentum", cfg.segmenter.train.momentum);
    get_to(p, "grad_clip", cfg.segmenter.train.grad_clip);
    if (p.contains("lowres")) {
      const auto& q = p.at("lowres");
      expect_keys(q, {"factor", "net", "epochs", "iters_per_epoch", "lr", "cv_folds"},
                  "segmenter.lowres");
      get_to(q, "factor", cfg.segmenter.lowres.factor);
      if (q.contains("net")) parse_segnet(q.at("net"), cfg.segmenter.lowres.net, "segmenter.lowres.net");
      get_to(q, "epochs", cfg.segmenter.lowres.epochs);
      get_to(q, "iters_per_epoch", cfg.segmenter.lowres.iters_per_epoch);
      get_to(q, "lr", cfg.segmenter.lowres.lr);
      get_to(q, "cv_folds", cfg.segmenter.lowres.cv_folds);
    }
    if (p.contains("augment")) {
      const auto& q = p.at("augment");
      expect_keys(q, {"zoom_lo", "zoom_hi", "p_zoom", "noise_sigma", "p_noise", "smooth_lo",
                      "smooth_hi", "p_smooth", "intensity_scale", "p_intensity", "p_flip"},
                  "segmenter.augment");
      auto& a = cfg.segmenter.augment;
      get_to(q, "zoom_lo", a.zoom_lo);
      get_to(q, "zoom_hi", a.zoom_hi);
      get_to(q, "p_zoom", a.p_zoom);
      get_to(q, "noise_sigma", a.noise_sigma);
      get_to(q, "p_noise", a.p_noise);
      get_to(q, "smooth_lo", a.smooth_lo);
      get_to(q, "smooth_hi", a.smooth_hi);
      get_to(q, "p_smooth", a.p_smooth);
      get_to(q, "intensity_scale", a.intensity_scale);
      get_to(q, "p_intensity", a.p_intensity);
      get_to(q, "p_flip", a.p_flip);
    }
  }

  if (j.contains("schedule")) {
    const auto& p = j.at("schedule");
    expect_keys(p, {"t_max", "t_cycle", "plateau_fraction", "base_lr", "restart_lr", "exponent",
                    "snapshots_per_cycle"},
                "schedule");
    get_to(p, "t_max", cfg.schedule.t_max);
    get_to(p, "t_cycle", cfg.schedule.t_cycle);
    get_to(p, "plateau_fraction", cfg.schedule.plateau_fraction);
    get_to(p, "base_lr", cfg.schedule.base_lr);
    get_to(p, "restart_lr", cfg.schedule.restart_lr);
    get_to(p, "exponent", cfg.schedule.exponent);
    get_to(p, "snapshots_per_cycle", cfg.schedule.snapshots_per_cycle);
  }

  if (j.contains("vaegan")) {
    const auto& p = j.at("vaegan");
    expect_keys(p, {"patch", "enc_widths", "latent_channels", "disc_widths", "lambda_kl",
                    "lambda_perc", "lambda_adv", "warmup_epochs", "logvar_bias_init", "epochs",
                    "iters_per_epoch", "lr", "lr_disc", "momentum", "grad_clip"},
                "vaegan");
    auto& v = cfg.vaegan;
    get_arr(p, "patch", v.net.patch);
    get_to(p, "enc_widths", v.net.enc_widths);
    get_to(p, "latent_channels", v.net.latent_channels);
    get_to(p, "disc_widths", v.net.disc_widths);
    get_to(p, "lambda_kl", v.net.lambda_kl);
    get_to(p, "lambda_perc", v.net.lambda_perc);
    get_to(p, "lambda_adv", v.net.lambda_adv);
    get_to(p, "warmup_epochs", v.net.warmup_epochs);
    get_to(p, "logvar_bias_init", v.net.logvar_bias_init);
    get_to(p, "epochs", v.train.epochs);
    get_to(p, "iters_per_epoch", v.train.iters_per_epoch);
    get_to(p, "lr", v.train.lr);
    get_to(p, "lr_disc", v.train.lr_disc);
    get_to(p, "momentum", v.train.momentum);
    get_to(p, "grad_clip", v.train.grad_clip);
  }

  if (j.contains("counterfactual")) {
    const auto& p = j.at("counterfactual");
    expect_keys(p, {"tol", "max_evals_per_target", "march_step_frac", "max_march_steps",
                    "direction_mode", "sweep_member"},
                "counterfactual");
    get_to(p, "tol", cfg.counterfactual.tol);
    get_to(p, "max_evals_per_target", cfg.counterfactual.max_evals_per_target);
    get_to(p, "march_step_frac", cfg.counterfactual.march_step_frac);
    get_to(p, "max_march_steps", cfg.counterfactual.max_march_steps);
    get_to(p, "direction_mode", cfg.counterfactual.direction_mode);
    get_to(p, "sweep_member", cfg.counterfactual.sweep_member);
  }

  if (j.contains("radiomics")) {
    expect_keys(j.at("radiomics"), {"bin_width"}, "radiomics");
    get_to(j.at("radiomics"), "bin_width", cfg.radiomics_bin_width);
  }

  if (j.contains("qc")) {
    const auto& p = j.at("qc");
    expect_keys(p, {"poor_threshold", "report_flag_fraction", "uncertainty_policy",
                    "uncertain_std_threshold"},
                "qc");
    get_to(p, "poor_threshold", cfg.qc.poor_threshold);
    get_to(p, "report_flag_fraction", cfg.qc.report_flag_fraction);
    get_to(p, "uncertainty_policy", cfg.qc.uncertainty_policy);
    get_to(p, "uncertain_std_threshold", cfg.qc.uncertain_std_threshold);
  }

  if (j.contains("io")) {
    expect_keys(j.at("io"), {"gif_delay_cs"}, "io");
    get_to(j.at("io"), "gif_delay_cs", cfg.io.gif_delay_cs);
  }

  if (j.contains("eval")) {
    expect_keys(j.at("eval"), {"splits"}, "eval");
    get_to(j.at("eval"), "splits", cfg.eval_splits);
  }

  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  CSEG_CHECK(f.good(), "cannot read config: " + path.string());
  nlohmann::json j = nlohmann::json::parse(f, nullptr, true, true);  // allow comments
  return parse_config(j);
}

// Effective config echoed into every output directory for reproducibility.
inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["phantom"] = {{"count", c.phantom.count},
                  {"split", c.phantom.split},
                  {"dims", c.phantom.dims},
                  {"spacing", c.phantom.spacing},
                  {"kidney_axes_min", c.phantom.kidney_axes_min},
                  {"kidney_axes_max", c.phantom.kidney_axes_max},
                  {"kidney_center_jitter", c.phantom.kidney_center_jitter},
                  {"kidney_mean", c.phantom.kidney_mean},
                  {"kidney_texture_amp", c.phantom.kidney_texture_amp},
                  {"cysts_min", c.phantom.cysts_min},
                  {"cysts_max", c.phantom.cysts_max},
                  {"p_second_cyst", c.phantom.p_second_cyst},
                  {"p_small", c.phantom.p_small},
                  {"p_medium", c.phantom.p_medium},
                  {"radius_small_min", c.phantom.radius_small_min},
                  {"p_ambiguous", c.phantom.p_ambiguous},
                  {"ambiguous_cyst_mean", c.phantom.ambiguous_cyst_mean},
                  {"clear_cyst_mean", c.phantom.clear_cyst_mean},
                  {"cyst_texture_amp", c.phantom.cyst_texture_amp},
                  {"cyst_deform_amp", c.phantom.cyst_deform_amp},
                  {"noise_sigma", c.phantom.noise_sigma},
                  {"boundary_smooth_sigma", c.phantom.boundary_smooth_sigma}};
  j["preprocess"] = {{"lo_hu", c.preprocess.lo_hu},
                     {"hi_hu", c.preprocess.hi_hu},
                     {"mean", c.preprocess.mean},
                     {"std", c.preprocess.stddev}};
  auto segnet = [](const SegConfig& n) {
    return nlohmann::json{{"patch", n.patch},       {"depth", n.depth},
                          {"widths", n.widths},     {"ds_weights", n.ds_weights},
                          {"num_classes", n.num_classes}, {"dice_smooth", n.dice_smooth},
                          {"lrelu_alpha", n.lrelu_alpha}, {"instnorm_eps", n.instnorm_eps}};
  };
  j["segmenter"] = {{"net", segnet(c.segmenter.net)},
                    {"iters_per_epoch", c.segmenter.train.iters_per_epoch},
                    {"cyst_patch_fraction", c.segmenter.train.cyst_patch_fraction},
                    {"box_margin", c.segmenter.train.box_margin},
                    {"momentum", c.segmenter.train.momentum},
                    {"grad_clip", c.segmenter.train.grad_clip},
                    {"lowres",
                     {{"factor", c.segmenter.lowres.factor},
                      {"net", segnet(c.segmenter.lowres.net)},
                      {"epochs", c.segmenter.lowres.epochs},
                      {"iters_per_epoch", c.segmenter.lowres.iters_per_epoch},
                      {"lr", c.segmenter.lowres.lr},
                      {"cv_folds", c.segmenter.lowres.cv_folds}}},
                    {"augment",
                     {{"zoom_lo", c.segmenter.augment.zoom_lo},
                      {"zoom_hi", c.segmenter.augment.zoom_hi},
                      {"p_zoom", c.segmenter.augment.p_zoom},
                      {"noise_sigma", c.segmenter.augment.noise_sigma},
                      {"p_noise", c.segmenter.augment.p_noise},
                      {"smooth_lo", c.segmenter.augment.smooth_lo},
                      {"smooth_hi", c.segmenter.augment.smooth_hi},
                      {"p_smooth", c.segmenter.augment.p_smooth},
                      {"intensity_scale", c.segmenter.augment.intensity_scale},
                      {"p_intensity", c.segmenter.augment.p_intensity},
                      {"p_flip", c.segmenter.augment.p_flip}}}};
  j["schedule"] = {{"t_max", c.schedule.t_max},
                   {"t_cycle", c.schedule.t_cycle},
                   {"plateau_fraction", c.schedule.plateau_fraction},
                   {"base_lr", c.schedule.base_lr},
                   {"restart_lr", c.schedule.restart_lr},
                   {"exponent", c.schedule.exponent},
                   {"snapshots_per_cycle", c.schedule.snapshots_per_cycle}};
  j["vaegan"] = {{"patch", c.vaegan.net.patch},
                 {"enc_widths", c.vaegan.net.enc_widths},
                 {"latent_channels", c.vaegan.net.latent_channels},
                 {"disc_widths", c.vaegan.net.disc_widths},
                 {"lambda_kl", c.vaegan.net.lambda_kl},
                 {"lambda_perc", c.vaegan.net.lambda_perc},
                 {"lambda_adv", c.vaegan.net.lambda_adv},
                 {"warmup_epochs", c.vaegan.net.warmup_epochs},
                 {"logvar_bias_init", c.vaegan.net.logvar_bias_init},
                 {"epochs", c.vaegan.train.epochs},
                 {"iters_per_epoch", c.vaegan.train.iters_per_epoch},
                 {"lr", c.vaegan.train.lr},
                 {"lr_disc", c.vaegan.train.lr_disc},
                 {"momentum", c.vaegan.train.momentum},
                 {"grad_clip", c.vaegan.train.grad_clip}};
  j["counterfactual"] = {{"tol", c.counterfactual.tol},
                         {"max_evals_per_target", c.counterfactual.max_evals_per_target},
                         {"march_step_frac", c.counterfactual.march_step_frac},
                         {"max_march_steps", c.counterfactual.max_march_steps},
                         {"direction_mode", c.counterfactual.direction_mode},
                         {"sweep_member", c.counterfactual.sweep_member}};
  j["radiomics"] = {{"bin_width", c.radiomics_bin_width}};
  j["qc"] = {{"poor_threshold", c.qc.poor_threshold},
             {"report_flag_fraction", c.qc.report_flag_fraction},
             {"uncertainty_policy", c.qc.uncertainty_policy},
             {"uncertain_std_threshold", c.qc.uncertain_std_threshold}};
  j["io"] = {{"gif_delay_cs", c.io.gif_delay_cs}};
  j["eval"] = {{"splits", c.eval_splits}};
  return j;
}

}  // namespace counterseg

#endif
