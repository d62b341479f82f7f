#ifndef COUNTERSEG_PIPELINE_HPP
#define COUNTERSEG_PIPELINE_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "counterseg/config.hpp"
#include "counterseg/counterfact.hpp"
#include "counterseg/metrics.hpp"
#include "counterseg/phantom.hpp"
#include "counterseg/qc.hpp"
#include "counterseg/radiomics.hpp"
#include "counterseg/render.hpp"

namespace counterseg {

namespace fs = std::filesystem;

// ----- shared plumbing -----

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

// Refuse to write into an existing non-empty directory unless forced; with
// force the whole subtree is replaced so reruns are byte-identical.
inline void prepare_out(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    CSEG_CHECK(force, "output dir exists and is not empty (use --force): " + dir.string());
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

inline void echo_config(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream f(dir / "config.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot write config echo in " + dir.string());
  f << config_json(cfg).dump(2) << "\n";
}

struct DatasetCase {
  std::string id;
  std::string split;
};

struct DatasetIndex {
  fs::path dir;
  std::vector<DatasetCase> cases;

  std::vector<DatasetCase> in_split(const std::string& split) const {
    std::vector<DatasetCase> out;
    for (const auto& c : cases)
      if (c.split == split) out.push_back(c);
    return out;
  }
};

inline DatasetIndex load_dataset_index(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  CSEG_CHECK(f.good(), "dataset manifest not found in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(f);
  DatasetIndex idx;
  idx.dir = dir;
  for (const auto& c : j.at("cases"))
    idx.cases.push_back({c.at("id").get<std::string>(), c.at("split").get<std::string>()});
  return idx;
}

inline Volume load_case_volume(const DatasetIndex& idx, const std::string& id,
                               const NormalizeConfig& pre) {
  return clip_and_normalize(load_volume(idx.dir, id), pre);
}

inline LabelMask load_case_mask(const DatasetIndex& idx, const std::string& id) {
  return load_mask(idx.dir, id);
}

// ----- phantom generation command -----

inline PhantomSpec sample_phantom_spec(const PhantomSection& p, Rng& rng) {
  PhantomSpec s;
  s.nx = p.dims[0];
  s.ny = p.dims[1];
  s.nz = p.dims[2];
  s.spacing = p.spacing;
  for (int a = 0; a < 3; ++a)
    s.kidney_axes_mm[a] = rng.uniform(p.kidney_axes_min[a], p.kidney_axes_max[a]);
  for (int a = 0; a < 3; ++a)
    s.kidney_center_mm[a] = rng.uniform(-p.kidney_center_jitter, p.kidney_center_jitter);
  s.kidney_mean = p.kidney_mean;
  s.kidney_texture_amp = p.kidney_texture_amp;

  int count = p.cysts_min;
  for (int extra = p.cysts_min; extra < p.cysts_max; ++extra)
    if (rng.bernoulli(p.p_second_cyst)) ++count;

  const bool ambiguous = rng.bernoulli(p.p_ambiguous);
  // physical size-class radii: 1.8 ml and 11.5 ml sphere-equivalent radii
  const double r_small_hi = 7.54;
  const double r_medium_hi = 14.04;
  const double min_axis = std::min({s.kidney_axes_mm[0], s.kidney_axes_mm[1], s.kidney_axes_mm[2]});
  const double fit_hi = 0.80 * min_axis;

  double r_lo = p.radius_small_min, r_hi = r_small_hi;
  const double u = rng.uniform01();
  if (!ambiguous) {
    if (u < p.p_small) {
      // keep the small range
    } else if (u < p.p_small + p.p_medium) {
      r_lo = r_small_hi + 0.02;
      r_hi = std::min(r_medium_hi, fit_hi);
    } else if (fit_hi > r_medium_hi + 0.2) {
      r_lo = r_medium_hi + 0.02;
      r_hi = fit_hi;
    } else {  // kidney too small for a large cyst: demote to medium
      r_lo = r_small_hi + 0.02;
      r_hi = std::min(r_medium_hi, fit_hi);
    }
    if (r_hi <= r_lo) {  // kidney too small for the drawn class: demote to small
      r_lo = p.radius_small_min;
      r_hi = r_small_hi;
    }
  }
  if (r_hi > r_small_hi) count = 1;  // only small cysts share a kidney
  s.cyst_count_min = s.cyst_count_max = count;
  s.cyst_radius_mm_min = r_lo;
  s.cyst_radius_mm_max = r_hi;
  s.cyst_mean = ambiguous ? rng.uniform(p.ambiguous_cyst_mean[0], p.ambiguous_cyst_mean[1])
                          : rng.uniform(p.clear_cyst_mean[0], p.clear_cyst_mean[1]);
  s.cyst_texture_amp = p.cyst_texture_amp;
  s.cyst_deform_amp = p.cyst_deform_amp;
  s.noise_sigma = p.noise_sigma;
  s.boundary_smooth_sigma = p.boundary_smooth_sigma;
  s.seed = rng.next_u64();
  return s;
}

inline void run_phantom(const RunConfig& cfg, const fs::path& out_root, bool force) {
  const fs::path dir = out_root / "dataset";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  Rng rng = named_stream(cfg.seed, "phantom");

  const int n = cfg.phantom.count;
  const int n_train = static_cast<int>(cfg.phantom.split[0] * n);
  const int n_val = static_cast<int>(cfg.phantom.split[1] * n);

  nlohmann::json manifest;
  manifest["seed"] = cfg.seed;
  manifest["count"] = n;
  manifest["cases"] = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case%04d", i);
    const std::string split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    PhantomSpec spec = sample_phantom_spec(cfg.phantom, rng);
    auto [vol, mask] = generate_phantom(spec);
    save_volume(vol, dir, id);
    save_mask(mask, dir, id);

    // per-cyst physical sizes for the manifest
    auto comps = connected_components_26(binarize(mask, kCyst));
    nlohmann::json sizes = nlohmann::json::array();
    for (const auto& comp : comps) {
      double ml = static_cast<double>(comp.size()) * vol.voxel_volume_mm3() / 1000.0;
      sizes.push_back({{"ml", ml}, {"class", size_class_name(classify_volume_ml(ml))}});
    }
    auto vol_sidecar = nlohmann::json::parse(std::ifstream(dir / (std::string(id) + ".vol.json")));
    auto msk_sidecar = nlohmann::json::parse(std::ifstream(dir / (std::string(id) + ".msk.json")));
    manifest["cases"].push_back({{"id", id},
                                 {"split", split},
                                 {"volume", std::string(id) + ".vol.raw"},
                                 {"mask", std::string(id) + ".msk.raw"},
                                 {"volume_checksum", vol_sidecar.at("checksum")},
                                 {"mask_checksum", msk_sidecar.at("checksum")},
                                 {"cysts", sizes},
                                 {"cyst_mean", spec.cyst_mean}});
  }
  std::ofstream f(dir / "manifest.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot write dataset manifest");
  f << manifest.dump(2) << "\n";
}

// ----- segmentation training command -----

struct CaseData {
  std::string id;
  Volume vol;
  LabelMask mask;
};

inline std::vector<CaseData> load_split(const DatasetIndex& idx, const std::string& split,
                                        const NormalizeConfig& pre) {
  std::vector<CaseData> out;
  for (const auto& c : idx.in_split(split))
    out.push_back({c.id, load_case_volume(idx, c.id, pre), load_case_mask(idx, c.id)});
  CSEG_CHECK(!out.empty(), "dataset split is empty: " + split);
  return out;
}

inline ScheduleConfig lowres_schedule(const LowresSection& lr) {
  ScheduleConfig s;
  s.t_max = lr.epochs;
  s.t_cycle = lr.epochs;
  s.plateau_fraction = 0.8;
  s.base_lr = lr.lr;
  s.restart_lr = 0.1;
  s.snapshots_per_cycle = 1;
  return s;
}

inline ParameterSet train_lowres_model(const std::vector<CaseData>& cases,
                                       const std::vector<int>& use, const LowresSection& lr,
                                       const AugmentConfig& aug, Rng rng) {
  std::vector<Volume> lvols;
  std::vector<LabelMask> lmasks;
  lvols.reserve(use.size());
  for (int i : use) {
    const auto& c = cases[static_cast<std::size_t>(i)];
    lvols.push_back(resample(c.vol, {c.vol.spacing[0] * lr.factor, c.vol.spacing[1] * lr.factor,
                                     c.vol.spacing[2] * lr.factor}));
    lmasks.push_back(resample_mask(c.mask, lvols.back().spacing));
  }
  std::vector<TrainItem> items;
  for (std::size_t i = 0; i < lvols.size(); ++i)
    items.push_back({&lvols[i], &lmasks[i],
                     BoundingBox{{0, 0, 0}, {lvols[i].nx, lvols[i].ny, lvols[i].nz}}});
  SegTrainOptions opts;
  opts.iters_per_epoch = lr.iters_per_epoch;
  opts.aug = aug;
  SnapshotEnsemble ens = train_segmenter(items, lowres_schedule(lr), lr.net, rng, opts, nullptr);
  return ens.members.back().params;
}

inline void run_train_seg(const RunConfig& cfg, const fs::path& dataset_dir, const fs::path& out_root,
                          bool force) {
  const fs::path dir = out_root / "seg";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  DatasetIndex idx = load_dataset_index(dataset_dir);
  std::vector<CaseData> cases = load_split(idx, "train", cfg.preprocess);
  const LowresSection& lr = cfg.segmenter.lowres;

  // five-fold cross-validated low-resolution boxes over the training set
  const int folds = std::min<int>(lr.cv_folds, static_cast<int>(cases.size()));
  std::vector<std::optional<BoundingBox>> raw_box(cases.size());
  for (int f = 0; f < folds; ++f) {
    std::vector<int> fit, hold;
    for (int i = 0; i < static_cast<int>(cases.size()); ++i)
      (i % folds == f ? hold : fit).push_back(i);
    if (fit.empty()) fit = hold;  // degenerate single-fold corpus
    ParameterSet fold_params = train_lowres_model(
        cases, fit, lr, cfg.segmenter.augment, named_stream(cfg.seed, "lowres-cv-" + std::to_string(f)));
    SegPredictor fold_model(lr.net, fold_params);
    for (int i : hold) {
      const auto& c = cases[static_cast<std::size_t>(i)];
      Volume lv = resample(c.vol, {c.vol.spacing[0] * lr.factor, c.vol.spacing[1] * lr.factor,
                                   c.vol.spacing[2] * lr.factor});
      PredictResult pr = predict(lv, fold_model, BoundingBox{{0, 0, 0}, {lv.nx, lv.ny, lv.nz}});
      auto fg = bbox_of_foreground(pr.labels);
      if (!fg) continue;
      const double sx = static_cast<double>(c.vol.nx) / lv.nx;
      const double sy = static_cast<double>(c.vol.ny) / lv.ny;
      const double sz = static_cast<double>(c.vol.nz) / lv.nz;
      BoundingBox up;
      up.start = {static_cast<int>(std::floor(fg->start[0] * sx)),
                  static_cast<int>(std::floor(fg->start[1] * sy)),
                  static_cast<int>(std::floor(fg->start[2] * sz))};
      std::array<int, 3> end{static_cast<int>(std::ceil(fg->end(0) * sx)),
                             static_cast<int>(std::ceil(fg->end(1) * sy)),
                             static_cast<int>(std::ceil(fg->end(2) * sz))};
      const std::array<int, 3> dims{c.vol.nx, c.vol.ny, c.vol.nz};
      for (int a = 0; a < 3; ++a) {
        up.start[a] = std::min(std::max(up.start[a], 0), dims[a] - 1);
        end[a] = std::min(std::max(end[a], up.start[a] + 1), dims[a]);
        up.extent[a] = end[a] - up.start[a];
      }
      raw_box[static_cast<std::size_t>(i)] = up;
    }
  }

  std::vector<BoundingBox> predicted;
  for (const auto& b : raw_box)
    if (b) predicted.push_back(*b);
  CSEG_RUNTIME_CHECK(!predicted.empty(), "cross-validated low-res stage predicted no boxes");
  const std::array<int, 3> min_box = compute_min_box(predicted);

  // final low-resolution model on the whole training set
  std::vector<int> all_idx(cases.size());
  for (int i = 0; i < static_cast<int>(cases.size()); ++i) all_idx[static_cast<std::size_t>(i)] = i;
  ParameterSet lowres_params =
      train_lowres_model(cases, all_idx, lr, cfg.segmenter.augment, named_stream(cfg.seed, "lowres-final"));
  save_params(lowres_params, dir / "lowres");
  {
    nlohmann::json j;
    j["factor"] = lr.factor;
    j["net"] = detail::segconfig_json(lr.net);
    j["min_box"] = min_box;
    std::ofstream f(dir / "lowres.json");
    f << j.dump(2) << "\n";
  }

  // per-case training boxes: expanded CV boxes, centered fallback when missing
  std::vector<TrainItem> items;
  nlohmann::json boxes = nlohmann::json::array();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::array<int, 3> dims{cases[i].vol.nx, cases[i].vol.ny, cases[i].vol.nz};
    BoundingBox box = raw_box[i] ? expand_box(*raw_box[i], min_box, dims)
                                 : centered_box(min_box, dims);
    items.push_back({&cases[i].vol, &cases[i].mask, box});
    boxes.push_back({{"id", cases[i].id},
                     {"start", box.start},
                     {"extent", box.extent},
                     {"fallback", !raw_box[i].has_value()}});
  }
  {
    std::ofstream f(dir / "boxes.json");
    f << boxes.dump(2) << "\n";
  }

  std::vector<TrainLogRow> log;
  Rng train_rng = named_stream(cfg.seed, "train");
  SnapshotEnsemble ens = train_segmenter(items, cfg.schedule, cfg.segmenter.net, train_rng,
                                         cfg.segmenter.train, &log);
  save_ensemble(ens, dir / "snapshots");
  {
    std::ofstream f(dir / "train_log.csv");
    f << "epoch,lr,total_loss,dice_term,ce_term\n";
    for (const auto& r : log)
      f << r.epoch << "," << fmt(r.lr) << "," << fmt(r.total) << "," << fmt(r.dice_term) << ","
        << fmt(r.ce_term) << "\n";
  }
}

// ----- VAE-GAN training command -----

inline void run_train_vaegan(const RunConfig& cfg, const fs::path& dataset_dir,
                             const fs::path& out_root, bool force) {
  const fs::path dir = out_root / "vae";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  DatasetIndex idx = load_dataset_index(dataset_dir);
  std::vector<CaseData> cases = load_split(idx, "train", cfg.preprocess);

  Rng data_rng = named_stream(cfg.seed, "vaegan-data");
  const auto patch = cfg.vaegan.net.patch;
  std::vector<VaeTrainItem> items;
  for (const auto& c : cases) {
    auto fg = bbox_of_foreground(c.mask);
    const std::array<int, 3> dims{c.vol.nx, c.vol.ny, c.vol.nz};
    BoundingBox box = fg ? *fg : centered_box(patch, dims);
    for (int rep = 0; rep < 2; ++rep) {
      std::array<int, 3> start{};
      for (int a = 0; a < 3; ++a) {
        int center = box.start[a] + box.extent[a] / 2 +
                     data_rng.uniform_int(-box.extent[a] / 4, box.extent[a] / 4);
        start[a] = std::min(std::max(center - patch[a] / 2, 0), dims[a] - patch[a]);
      }
      VaeTrainItem item;
      item.x = extract_patch(c.vol, start, patch);
      MaskPatch mp = extract_mask_patch(c.mask, start, patch);
      item.combined = mp;
      items.push_back(std::move(item));
    }
  }

  std::vector<VaeLogRow> log;
  Rng rng = named_stream(cfg.seed, "vaegan");
  VaeGanModel model = train_vaegan(items, cfg.vaegan.net, rng, cfg.vaegan.train, &log);
  save_vaegan(model, dir / "vaegan");
  {
    std::ofstream f(dir / "vae_log.csv");
    f << "epoch,recon,recon_kid,kl,perc,adv,adv_weight,total\n";
    for (const auto& r : log)
      f << r.epoch << "," << fmt(r.mean.recon) << "," << fmt(r.mean.recon_kid) << ","
        << fmt(r.mean.kl) << "," << fmt(r.mean.perc) << "," << fmt(r.mean.adv) << ","
        << fmt(r.mean.adv_weight) << "," << fmt(r.mean.total) << "\n";
  }
}

// ----- evaluation command -----

struct LowresArtifacts {
  SegConfig net;
  int factor = 4;
  std::array<int, 3> min_box{};
  ParameterSet params;
};

inline LowresArtifacts load_lowres(const fs::path& seg_dir) {
  std::ifstream f(seg_dir / "lowres.json");
  CSEG_CHECK(f.good(), "lowres manifest not found in " + seg_dir.string());
  nlohmann::json j = nlohmann::json::parse(f);
  LowresArtifacts lr;
  lr.net = detail::segconfig_from_json(j.at("net"));
  lr.factor = j.at("factor").get<int>();
  auto mb = j.at("min_box").get<std::vector<int>>();
  CSEG_RUNTIME_CHECK(mb.size() == 3, "bad min_box");
  lr.min_box = {mb[0], mb[1], mb[2]};
  lr.params = load_params(seg_dir / "lowres");
  return lr;
}

struct CaseEval {
  std::string id;
  std::string split;
  bool fallback_box = false;
  double scan_dice = 0.0;
  double uncertainty = 0.0;
  ScanDetections det;
};

inline CaseEval evaluate_case(const std::string& id, const std::string& split, const Volume& vol,
                              const LabelMask& gt, SegPredictor& lowres_model,
                              const LowresArtifacts& lr, const SnapshotEnsemble& ens,
                              const QcSection& qc) {
  CaseEval ce;
  ce.id = id;
  ce.split = split;
  RoiResult roi = locate_roi(vol, lowres_model, lr.factor, lr.min_box);
  ce.fallback_box = roi.fallback;
  EnsembleResult er = ensemble_predict(vol, ens, roi.box);
  ce.det = match_detections(er.labels, gt);
  ce.scan_dice = dice(binarize(er.labels, kCyst), binarize(gt, kCyst));
  ce.uncertainty = case_uncertainty(er.uncertainty, er.labels, roi.box,
                                    uncertainty_policy_from(qc.uncertainty_policy),
                                    qc.uncertain_std_threshold);
  return ce;
}

inline void write_metrics_csv(const std::vector<CaseEval>& rows, const fs::path& path) {
  std::ofstream f(path);
  CSEG_RUNTIME_CHECK(f.good(), "cannot write metrics csv: " + path.string());
  f << "case_id,split,cyst_id,size_class,dsc,matched,uncertainty_scalar\n";
  for (const auto& r : rows) {
    f << r.id << "," << r.split << ",scan,," << fmt(r.scan_dice) << ",," << fmt(r.uncertainty)
      << "\n";
    for (std::size_t g = 0; g < r.det.gt_components.size(); ++g)
      f << r.id << "," << r.split << "," << g << "," << size_class_name(r.det.gt_size_class[g])
        << "," << fmt(r.det.gt_dsc[g]) << "," << (r.det.gt_dsc[g] > 0.1 ? 1 : 0) << ","
        << fmt(r.uncertainty) << "\n";
  }
}

inline void append_summary_row(std::ofstream& f, const std::string& split,
                               const std::string& variant, const SummaryRow& row, double cri_value,
                               double ranksum_p, bool has_cri) {
  auto opt = [](double v) { return std::isnan(v) ? std::string() : fmt(v); };
  f << split << "," << variant << "," << row.scans << "," << row.cysts << "," << fmt(row.dsc) << ","
    << opt(row.dsc_small) << "," << opt(row.dsc_medium) << "," << opt(row.dsc_large) << ","
    << fmt(row.sensitivity) << "," << opt(row.sens_small) << "," << opt(row.sens_medium) << ","
    << opt(row.sens_large) << "," << fmt(row.fppi) << ","
    << (has_cri ? fmt(cri_value) : std::string()) << ","
    << (has_cri ? fmt(ranksum_p) : std::string()) << "\n";
}

inline void run_eval(const RunConfig& cfg, const fs::path& dataset_dir, const fs::path& seg_dir,
                     const fs::path& vae_dir, const fs::path& out_root, bool force) {
  const fs::path dir = out_root / "eval";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  DatasetIndex idx = load_dataset_index(dataset_dir);
  LowresArtifacts lr = load_lowres(seg_dir);
  SnapshotEnsemble ens = load_ensemble(seg_dir / "snapshots");
  VaeGanModel vae = load_vaegan(vae_dir / "vaegan");
  VaeGanRunner vae_runner(vae);
  SegPredictor lowres_model(lr.net, lr.params);

  std::vector<CaseEval> orig_rows, recon_rows;
  std::ofstream summary(dir / "summary.csv");
  CSEG_RUNTIME_CHECK(summary.good(), "cannot write summary.csv");
  summary << "split,variant,scans,cysts,dsc,dsc_small,dsc_medium,dsc_large,sensitivity,"
             "sens_small,sens_medium,sens_large,fppi,cri,ranksum_p\n";

  for (const std::string& split : cfg.eval_splits) {
    auto cases = idx.in_split(split);
    CSEG_CHECK(!cases.empty(), "eval: dataset split is empty: " + split);
    std::vector<CaseEval> split_orig, split_recon;
    for (const auto& c : cases) {
      Volume vol = load_case_volume(idx, c.id, cfg.preprocess);
      LabelMask gt = load_case_mask(idx, c.id);
      CaseEval eo = evaluate_case(c.id, split, vol, gt, lowres_model, lr, ens, cfg.qc);

      RoiResult roi = locate_roi(vol, lowres_model, lr.factor, lr.min_box);
      Volume recon = reconstruct(vol, vae_runner, roi.box);
      CaseEval er = evaluate_case(c.id, split, recon, gt, lowres_model, lr, ens, cfg.qc);

      split_orig.push_back(eo);
      split_recon.push_back(er);
    }

    std::vector<ScanDetections> dets_o, dets_r;
    std::vector<double> dsc_o, dsc_r;
    for (const auto& r : split_orig) {
      dets_o.push_back(r.det);
      for (double d : r.det.gt_dsc) dsc_o.push_back(d);
    }
    for (const auto& r : split_recon) {
      dets_r.push_back(r.det);
      for (double d : r.det.gt_dsc) dsc_r.push_back(d);
    }
    SummaryRow row_o = summarize(split, dets_o);
    SummaryRow row_r = summarize(split, dets_r);
    double cri_v = 0.0, p = 1.0;
    if (row_o.dsc > 0.0 && row_o.sensitivity > 0.0) {
      cri_v = cri(row_o.dsc, row_r.dsc, row_o.sensitivity, row_r.sensitivity).cri;
      p = rank_sum_test(dsc_o, dsc_r).p;
    }
    append_summary_row(summary, split, "original", row_o, 0.0, 0.0, false);
    append_summary_row(summary, split, "reconstructed", row_r, cri_v, p, true);

    orig_rows.insert(orig_rows.end(), split_orig.begin(), split_orig.end());
    recon_rows.insert(recon_rows.end(), split_recon.begin(), split_recon.end());
  }
  write_metrics_csv(orig_rows, dir / "metrics_original.csv");
  write_metrics_csv(recon_rows, dir / "metrics_reconstructed.csv");
}

// ----- QC command -----

struct MetricsRows {
  // scan-level rows per split
  std::map<std::string, std::vector<QcCase>> by_split;
};

inline MetricsRows read_metrics_csv(const fs::path& path) {
  std::ifstream f(path);
  CSEG_CHECK(f.good(), "cannot read metrics csv: " + path.string());
  std::string header;
  std::getline(f, header);
  CSEG_CHECK(header == "case_id,split,cyst_id,size_class,dsc,matched,uncertainty_scalar",
             "metrics csv missing expected columns: " + path.string());
  MetricsRows out;
  std::string line;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 7) continue;
    if (fields[2] != "scan") continue;
    out.by_split[fields[1]].push_back({std::stod(fields[6]), std::stod(fields[4])});
  }
  CSEG_CHECK(!out.by_split.empty(), "metrics csv has no scan rows: " + path.string());
  return out;
}

// simple line plot of the QC curves as a palette-indexed image
inline IndexedImage render_qc_plot(const QcCurve& curve) {
  const int w = 320, h = 240, m = 24;
  IndexedImage img;
  img.width = w;
  img.height = h;
  img.idx.assign(static_cast<std::size_t>(w) * h, kGrayLevels - 1);  // white
  auto px = [&](double fx) { return m + static_cast<int>(fx * (w - 2 * m)); };
  auto py = [&](double fy) { return h - m - static_cast<int>(fy * (h - 2 * m)); };
  for (int x = m; x <= w - m; ++x) img.at(x, py(0.0)) = 0;
  for (int y = m; y <= h - m; ++y) img.at(px(0.0), y) = 0;
  const double top = std::max(1e-9, curve.baseline_poor_fraction);
  auto draw = [&](double f0, double v0, double f1, double v1, std::uint8_t color) {
    int x0 = px(f0), y0 = py(std::min(1.0, v0 / top));
    int x1 = px(f1), y1 = py(std::min(1.0, v1 / top));
    int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int s = 0; s <= steps; ++s) {
      int x = x0 + (x1 - x0) * s / steps;
      int y = y0 + (y1 - y0) * s / steps;
      if (x >= 0 && y >= 0 && x < w && y < h) img.at(x, y) = color;
    }
  };
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    draw(a.flagged_fraction, a.random_expectation, b.flagged_fraction, b.random_expectation, 150);
    draw(a.flagged_fraction, a.ideal, b.flagged_fraction, b.ideal, 200);
    draw(a.flagged_fraction, a.remaining_poor_fraction, b.flagged_fraction,
         b.remaining_poor_fraction, kColorCyst);
  }
  return img;
}

inline void run_qc(const RunConfig& cfg, const fs::path& metrics_csv, const fs::path& out_root,
                   bool force) {
  const fs::path dir = out_root / "qc";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  MetricsRows rows = read_metrics_csv(metrics_csv);
  nlohmann::json report;
  for (const auto& [split, qcases] : rows.by_split) {
    QcCurve curve = qc_curve(qcases, cfg.qc.poor_threshold);
    write_qc_csv(curve, dir / ("qc_" + split + ".csv"));
    write_pgm(render_qc_plot(curve), dir / ("qc_" + split + ".pgm"));
    const double remaining = curve.remaining_at(cfg.qc.report_flag_fraction);
    report[split] = {{"baseline_poor_fraction", curve.baseline_poor_fraction},
                     {"flagged_fraction", cfg.qc.report_flag_fraction},
                     {"remaining_poor_fraction", remaining},
                     {"reduction",
                      curve.baseline_poor_fraction > 0.0
                          ? 1.0 - remaining / curve.baseline_poor_fraction
                          : 0.0}};
  }
  std::ofstream f(dir / "report.json");
  f << report.dump(2) << "\n";
}

// ----- counterfactual command -----

struct CounterfactCaseResult {
  std::string id;
  int cyst = 0;
  std::string status = "ok";  // ok | false_negative | flat
  double base_dsc = 0.0;
  int attained = 0;
  double span_lo = 1.0, span_hi = 0.0;
};

// Relinearized latent path: z advances in march-step increments, recomputing
// the gradient direction at each cached node; fractional alphas interpolate
// along the last segment.
class LatentPath {
 public:
  LatentPath(CounterfactualEngine& engine, const Tensor& z0, const Tensor& dir0, double step)
      : engine_(engine), step_(step) {
    fwd_.push_back(z0);
    bwd_.push_back(z0);
    dir_fwd_ = dir0;
    dir_bwd_ = dir0;
  }

  Tensor at(double alpha) {
    const double steps = alpha / step_;
    const int whole = static_cast<int>(std::floor(std::abs(steps)));
    const double frac = std::abs(steps) - whole;
    auto& nodes = alpha >= 0 ? fwd_ : bwd_;
    auto& dir = alpha >= 0 ? dir_fwd_ : dir_bwd_;
    const double sign = alpha >= 0 ? 1.0 : -1.0;
    while (static_cast<int>(nodes.size()) <= whole) {
      Tensor next = nodes.back();
      for (std::size_t i = 0; i < next.v.size(); ++i) next.v[i] += sign * step_ * dir.v[i];
      nodes.push_back(next);
      dir = engine_.roi_class_gradients(next).direction();
    }
    Tensor out = nodes[static_cast<std::size_t>(whole)];
    if (frac > 0.0)
      for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += sign * frac * step_ * dir.v[i];
    return out;
  }

 private:
  CounterfactualEngine& engine_;
  double step_;
  std::vector<Tensor> fwd_, bwd_;
  Tensor dir_fwd_, dir_bwd_;
};

inline CounterfactCaseResult run_counterfact_case(
    const RunConfig& cfg, const fs::path& dir, const std::string& case_id, int cyst_index,
    const Volume& vol, const LabelMask& gt, const std::vector<std::int64_t>& component,
    const SnapshotEnsemble& ens, const ParameterSet& sweep_params, const VaeGanModel& vae) {
  CounterfactCaseResult res;
  res.id = case_id;
  res.cyst = cyst_index;

  const auto patch = vae.cfg.patch;
  const std::array<int, 3> dims{vol.nx, vol.ny, vol.nz};

  // patch centered on the cyst component
  std::array<double, 3> centroid{0, 0, 0};
  for (std::int64_t idx : component) {
    int z = static_cast<int>(idx / (static_cast<std::int64_t>(vol.nx) * vol.ny));
    int rem = static_cast<int>(idx % (static_cast<std::int64_t>(vol.nx) * vol.ny));
    centroid[0] += rem % vol.nx;
    centroid[1] += rem / vol.nx;
    centroid[2] += z;
  }
  std::array<int, 3> start{};
  for (int a = 0; a < 3; ++a) {
    int c = static_cast<int>(centroid[a] / static_cast<double>(component.size()));
    start[a] = std::min(std::max(c - patch[a] / 2, 0), dims[a] - patch[a]);
  }

  Patch x_patch = extract_patch(vol, start, patch);
  MaskPatch gt_patch = extract_mask_patch(gt, start, patch);
  // ROI = this component only; other cysts in the patch are excluded from DSC
  MaskPatch roi;
  roi.dims = patch;
  roi.lab.assign(gt_patch.lab.size(), 0);
  MaskPatch ignore;
  ignore.dims = patch;
  ignore.lab.assign(gt_patch.lab.size(), 0);
  {
    std::set<std::int64_t> comp_set(component.begin(), component.end());
    std::size_t q = 0;
    for (int z = 0; z < patch[2]; ++z)
      for (int y = 0; y < patch[1]; ++y)
        for (int x = 0; x < patch[0]; ++x, ++q) {
          std::int64_t vidx = vol.index(start[0] + x, start[1] + y, start[2] + z);
          if (comp_set.count(vidx))
            roi.lab[q] = kCyst;
          else if (gt_patch.lab[q] == kCyst)
            ignore.lab[q] = 1;
        }
  }

  CounterfactualEngine engine(vae, ens.net, sweep_params, roi);
  engine.set_ignore(ignore);
  VaeGanRunner vae_runner(vae);
  Tensor x_tensor({1, patch[2], patch[1], patch[0]}, x_patch.vox);
  LatentCode code = vae_runner.encode(x_tensor, true);
  Tensor z0 = code.mu;

  RoiGradients grads = engine.roi_class_gradients(z0);
  Tensor dir0 = grads.direction();
  double dn = 0.0, zn = 0.0;
  for (double v : dir0.v) dn += v * v;
  for (double v : z0.v) zn += v * v;
  dn = std::sqrt(dn);
  zn = std::sqrt(zn);
  if (dn < 1e-12) {
    res.status = "flat";
    return res;
  }
  const double delta = cfg.counterfactual.march_step_frac * std::max(zn, 1.0) / dn;

  const bool relinearize = cfg.counterfactual.direction_mode == "relinearized";
  LatentPath path(engine, z0, dir0, delta * dn);  // path step in latent units

  auto z_at = [&](double alpha) -> Tensor {
    if (!relinearize) {
      Tensor z = z0;
      for (std::size_t i = 0; i < z.v.size(); ++i) z.v[i] += alpha * dir0.v[i];
      return z;
    }
    return path.at(alpha * dn);  // convert to latent distance along the path
  };
  auto dsc_of = [&](double alpha) { return engine.evaluate(z_at(alpha)).dsc; };

  AlphaBounds bounds = alpha_bounds(dsc_of, delta, cfg.counterfactual.max_march_steps);
  SweepOptions sopts;
  sopts.tol = cfg.counterfactual.tol;
  sopts.max_evals_per_target = cfg.counterfactual.max_evals_per_target;
  SweepPlan plan = counterfactual_sweep(dsc_of, bounds, {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
                                                         0.8, 0.9, 1.0},
                                        sopts);
  res.base_dsc = plan.base_dsc;
  if (bounds.flat) {
    res.status = "flat";
    return res;
  }

  fs::create_directories(dir);

  // ensemble predictors for per-step uncertainty maps
  SegPredictor member_model(ens.net, ens.members.front().params);

  // slice index through the ROI centroid
  double zc = 0.0;
  std::int64_t roi_n = 0;
  {
    std::size_t q = 0;
    for (int z = 0; z < patch[2]; ++z)
      for (int y = 0; y < patch[1]; ++y)
        for (int x = 0; x < patch[0]; ++x, ++q)
          if (roi.lab[q] == kCyst) {
            zc += z;
            ++roi_n;
          }
  }
  const int slice_z = static_cast<int>(zc / static_cast<double>(roi_n));

  std::ofstream feat(dir / "features.csv");
  feat << "case_id,target_dsc,achieved_dsc";
  for (const auto& n : RadiomicsVector::names()) feat << "," << n;
  feat << "\n";

  nlohmann::json manifest;
  manifest["case"] = case_id;
  manifest["cyst"] = cyst_index;
  manifest["base_dsc"] = plan.base_dsc;
  manifest["flat"] = plan.flat;
  manifest["grid_fallback"] = plan.grid_fallback;
  manifest["steps"] = nlohmann::json::array();

  std::vector<IndexedImage> frames;
  const std::int64_t pn = static_cast<std::int64_t>(patch[0]) * patch[1] * patch[2];
  int step_no = 0;
  for (const auto& st : plan.steps) {
    auto ev = engine.evaluate(z_at(st.alpha));

    // per-step ensemble uncertainty on the counterfactual patch
    std::vector<double> mean(static_cast<std::size_t>(pn), 0.0), sq(static_cast<std::size_t>(pn), 0.0);
    for (const auto& member : ens.members) {
      member_model.load(member.params);
      const auto& probs = member_model.run(ev.xhat.v);
      for (std::int64_t i = 0; i < pn; ++i) {
        const double p = probs[static_cast<std::size_t>(kCyst * pn + i)];
        mean[static_cast<std::size_t>(i)] += p;
        sq[static_cast<std::size_t>(i)] += p * p;
      }
    }
    std::vector<double> unc(static_cast<std::size_t>(pn), 0.0);
    const double inv_m = 1.0 / static_cast<double>(ens.members.size());
    for (std::int64_t i = 0; i < pn; ++i) {
      const double m = mean[static_cast<std::size_t>(i)] * inv_m;
      const double var = sq[static_cast<std::size_t>(i)] * inv_m - m * m;
      unc[static_cast<std::size_t>(i)] = var > 0.0 ? std::sqrt(var) : 0.0;
    }

    // de-normalized synthetic volume for storage and radiomics
    Patch synth;
    synth.dims = patch;
    synth.vox.resize(static_cast<std::size_t>(pn));
    for (std::int64_t i = 0; i < pn; ++i)
      synth.vox[static_cast<std::size_t>(i)] =
          denormalize_value(ev.xhat.v[static_cast<std::size_t>(i)], cfg.preprocess);

    char stem[64];
    std::snprintf(stem, sizeof stem, "step%02d", step_no);
    {
      Volume sv(patch[0], patch[1], patch[2], vol.spacing, IntensityUnit::kHuLike);
      sv.data = synth.vox;
      for (double& v : sv.data)
        v = std::min(std::max(v, cfg.preprocess.lo_hu), cfg.preprocess.hi_hu);
      save_volume(sv, dir, stem);
      LabelMask sm(patch[0], patch[1], patch[2], vol.spacing);
      sm.data = ev.predicted.lab;
      save_mask(sm, dir, stem);
      std::vector<float> uraw(unc.begin(), unc.end());
      detail::write_raw(dir / (std::string(stem) + ".unc.raw"), uraw);
      detail::write_sidecar(dir / (std::string(stem) + ".unc.json"),
                            {{"dims", {patch[0], patch[1], patch[2]}},
                             {"spacing", {vol.spacing[0], vol.spacing[1], vol.spacing[2]}},
                             {"unit", "std"},
                             {"checksum", checksum_hex(uraw.data(), uraw.size() * sizeof(float))}});
    }

    RoiVoxels rv = extract_roi(synth.vox, patch, roi.lab, kCyst, vol.voxel_volume_mm3());
    RadiomicsVector rad = extract_all(rv, cfg.radiomics_bin_width);
    feat << case_id << "," << fmt(st.target) << "," << fmt(st.achieved);
    for (double v : rad.values) feat << "," << fmt(v);
    feat << "\n";

    frames.push_back(render_frame(synth, ev.predicted, unc, slice_z, cfg.preprocess.lo_hu,
                                  cfg.preprocess.hi_hu));
    write_pgm(frames.back(), dir / (std::string(stem) + ".pgm"));

    manifest["steps"].push_back({{"target", st.target},
                                 {"alpha", st.alpha},
                                 {"achieved_dsc", st.achieved},
                                 {"attained", st.attained},
                                 {"volume", std::string(stem) + ".vol.raw"},
                                 {"mask", std::string(stem) + ".msk.raw"},
                                 {"uncertainty", std::string(stem) + ".unc.raw"},
                                 {"frame", std::string(stem) + ".pgm"}});
    if (st.attained) {
      ++res.attained;
      res.span_lo = std::min(res.span_lo, st.target);
      res.span_hi = std::max(res.span_hi, st.target);
    }
    ++step_no;
  }
  write_gif89a(frames, dir / "anim.gif", cfg.io.gif_delay_cs);
  {
    std::ofstream mf(dir / "series.json");
    mf << manifest.dump(2) << "\n";
  }
  return res;
}

inline std::vector<CounterfactCaseResult> run_counterfact(const RunConfig& cfg,
                                                          const fs::path& dataset_dir,
                                                          const fs::path& seg_dir,
                                                          const fs::path& vae_dir,
                                                          const fs::path& out_root,
                                                          const std::string& only_case,
                                                          const std::string& split, bool force) {
  const fs::path dir = out_root / "counterfact";
  prepare_out(dir, force);
  echo_config(cfg, dir);
  DatasetIndex idx = load_dataset_index(dataset_dir);
  LowresArtifacts lr = load_lowres(seg_dir);
  SnapshotEnsemble ens = load_ensemble(seg_dir / "snapshots");
  VaeGanModel vae = load_vaegan(vae_dir / "vaegan");
  SegPredictor lowres_model(lr.net, lr.params);

  const int member_idx = cfg.counterfactual.sweep_member < 0
                             ? static_cast<int>(ens.members.size()) - 1
                             : cfg.counterfactual.sweep_member;
  CSEG_CHECK(member_idx >= 0 && member_idx < static_cast<int>(ens.members.size()),
             "counterfactual.sweep_member out of range");
  const ParameterSet& sweep_params = ens.members[static_cast<std::size_t>(member_idx)].params;

  std::vector<DatasetCase> cases;
  if (!only_case.empty()) {
    for (const auto& c : idx.cases)
      if (c.id == only_case) cases.push_back(c);
    CSEG_CHECK(!cases.empty(), "unknown case id: " + only_case);
  } else {
    cases = idx.in_split(split);
    CSEG_CHECK(!cases.empty(), "counterfact: dataset split is empty: " + split);
  }

  std::vector<CounterfactCaseResult> results;
  for (const auto& c : cases) {
    Volume vol = load_case_volume(idx, c.id, cfg.preprocess);
    LabelMask gt = load_case_mask(idx, c.id);
    RoiResult roi = locate_roi(vol, lowres_model, lr.factor, lr.min_box);
    EnsembleResult er = ensemble_predict(vol, ens, roi.box);
    ScanDetections det = match_detections(er.labels, gt);

    bool any_detected = false;
    for (std::size_t g = 0; g < det.gt_components.size(); ++g) {
      if (det.gt_dsc[g] <= 0.1) {
        // false negative: the latent gradient over an undetected region is too
        // small to drive the sweep
        CounterfactCaseResult miss;
        miss.id = c.id;
        miss.cyst = static_cast<int>(g);
        miss.status = "false_negative";
        results.push_back(miss);
        if (!only_case.empty() && det.gt_components.size() == 1)
          throw std::runtime_error("counterfact: gradient too small for undetected cyst in case " +
                                   c.id);
        continue;
      }
      any_detected = true;
      fs::path cdir = dir / c.id / ("cyst" + std::to_string(g));
      results.push_back(run_counterfact_case(cfg, cdir, c.id, static_cast<int>(g), vol, gt,
                                             det.gt_components[g], ens, sweep_params, vae));
    }
    if (!any_detected && !only_case.empty())
      throw std::runtime_error("counterfact: gradient too small, no detected cyst in case " + c.id);
  }

  std::ofstream f(dir / "counterfact_summary.csv");
  f << "case_id,cyst,status,base_dsc,attained_targets,span_lo,span_hi\n";
  for (const auto& r : results)
    f << r.id << "," << r.cyst << "," << r.status << "," << fmt(r.base_dsc) << "," << r.attained
      << "," << fmt(r.span_lo) << "," << fmt(r.span_hi) << "\n";
  return results;
}

// ----- slope command -----

inline void run_slopes(const RunConfig& cfg, const fs::path& counterfact_dir,
                       const fs::path& out_root, bool force) {
  const fs::path dir = out_root / "slopes";
  prepare_out(dir, force);
  echo_config(cfg, dir);

  std::vector<std::vector<SweepSample>> cases;
  std::vector<fs::path> feature_files;
  for (const auto& entry : fs::recursive_directory_iterator(counterfact_dir))
    if (entry.is_regular_file() && entry.path().filename() == "features.csv")
      feature_files.push_back(entry.path());
  std::sort(feature_files.begin(), feature_files.end());
  CSEG_CHECK(!feature_files.empty(), "slopes: no feature tables under " + counterfact_dir.string());

  for (const auto& path : feature_files) {
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    std::vector<SweepSample> samples;
    std::string line;
    while (std::getline(f, line)) {
      std::stringstream ss(line);
      std::string field;
      std::vector<std::string> fields;
      while (std::getline(ss, field, ',')) fields.push_back(field);
      if (fields.size() != 3 + RadiomicsVector::names().size()) continue;
      SweepSample s;
      s.dsc = std::stod(fields[2]);
      for (std::size_t i = 0; i < RadiomicsVector::names().size(); ++i)
        s.features.values.push_back(std::stod(fields[3 + i]));
      samples.push_back(std::move(s));
    }
    if (samples.size() >= 2) cases.push_back(std::move(samples));
  }
  CSEG_CHECK(!cases.empty(), "slopes: no usable sweeps (each case needs >= 2 steps)");

  SlopeReport report = slope_analysis(cases);
  {
    std::ofstream f(dir / "slopes.csv");
    f << "feature,slope";
    for (int g = 0; g <= 10; ++g) f << ",median_dsc_" << fmt(0.1 * g);
    f << "\n";
    for (const auto& e : report.features) {
      f << e.feature << "," << fmt(e.slope);
      for (double v : e.median_line) f << "," << fmt(v);
      f << "\n";
    }
  }
  nlohmann::json rank;
  rank["top_positive"] = report.top_positive;
  rank["top_negative"] = report.top_negative;
  rank["cases"] = cases.size();
  std::ofstream f(dir / "rankings.json");
  f << rank.dump(2) << "\n";
}

}  // namespace counterseg

#endif
