#ifndef COUNTERSEG_VAEGAN_HPP
#define COUNTERSEG_VAEGAN_HPP

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "counterseg/seg.hpp"

namespace counterseg {

// Encoder/decoder/discriminator triple. enc_widths[0] is the full-resolution
// stem; every later width adds one stride-2 stage, so the latent sits at
// spatial stride 2^(enc_widths.size()-1). Making that stride reach the whole
// patch collapses the latent to 1x1x1, which is the flat-vector mode.
struct VaeGanConfig {
  std::array<int, 3> patch{32, 32, 16};
  std::vector<int> enc_widths{8, 16, 32, 32};  // stride-8 latent
  int latent_channels = 8;
  std::vector<int> disc_widths{8, 16, 16};
  double lambda_kl = 1e-6;
  double lambda_perc = 0.001;
  double lambda_adv = 0.01;
  int warmup_epochs = 10;
  double lrelu_alpha = 0.01;
  double instnorm_eps = 1e-5;
  double logvar_bias_init = -6.0;  // start near-deterministic; KL widens it as needed

  int latent_stride() const { return 1 << (static_cast<int>(enc_widths.size()) - 1); }

  Shape latent_shape() const {
    const int s = latent_stride();
    return {latent_channels, patch[2] / s, patch[1] / s, patch[0] / s};
  }

  void validate() const {
    CSEG_CHECK(enc_widths.size() >= 2, "vaegan: need at least one downsampling stage");
    CSEG_CHECK(!disc_widths.empty(), "vaegan: discriminator needs stages");
    CSEG_CHECK(latent_channels >= 1, "vaegan: latent channels must be positive");
    const int s = latent_stride();
    for (int p : patch) CSEG_CHECK(p % s == 0 && p >= s, "vaegan: patch dims must divide the latent stride");
    const int ds = 1 << static_cast<int>(disc_widths.size());
    for (int p : patch) CSEG_CHECK(p % ds == 0, "vaegan: patch dims must divide discriminator strides");
    CSEG_CHECK(lambda_kl >= 0 && lambda_perc >= 0 && lambda_adv >= 0, "vaegan: lambdas must be >= 0");
    CSEG_CHECK(warmup_epochs >= 0, "vaegan: warm-up must be >= 0");
  }
};

struct VaeGanModel {
  VaeGanConfig cfg;
  ParameterSet params;  // names prefixed vae.enc / vae.dec / vae.disc
};

// z with its Gaussian posterior parameters.
struct LatentCode {
  Tensor mu;
  Tensor logvar;
  Tensor z;

  Tensor sigma() const {
    Tensor s = logvar;
    for (double& v : s.v) v = std::exp(0.5 * v);
    return s;
  }
};

// ----- graph builders (composable: callers may pass existing input nodes) -----

struct VaeEncoderNodes {
  int input = -1;
  int mu = -1;
  int logvar = -1;
};

inline VaeEncoderNodes build_vae_encoder(Graph& g, const VaeGanConfig& cfg, const ParamSource& src,
                                         bool trainable, int existing_input = -1) {
  const std::string pre = "vae.enc.";
  VaeEncoderNodes out;
  out.input = existing_input >= 0
                  ? existing_input
                  : g.input(pre + "x", {1, cfg.patch[2], cfg.patch[1], cfg.patch[0]});
  auto block = [&](int x, int in_ch, int out_ch, int stride, const std::string& name) {
    int w = g.param(pre + name + ".w",
                    src.conv_weight(pre + name + ".w", {out_ch, in_ch, 3, 3, 3}, cfg.lrelu_alpha),
                    trainable);
    int c = g.conv3(x, w, -1, stride, 1);
    int sc = g.param(pre + name + ".g", src.ones(pre + name + ".g", {out_ch}), trainable);
    int sh = g.param(pre + name + ".b", src.zeros(pre + name + ".b", {out_ch}), trainable);
    return g.lrelu(g.instnorm(c, sc, sh, cfg.instnorm_eps), cfg.lrelu_alpha);
  };
  int cur = block(out.input, 1, cfg.enc_widths[0], 1, "stem");
  for (std::size_t i = 1; i < cfg.enc_widths.size(); ++i)
    cur = block(cur, cfg.enc_widths[i - 1], cfg.enc_widths[i], 2, "down" + std::to_string(i));
  const int last = cfg.enc_widths.back();
  int wm = g.param(pre + "mu.w",
                   src.conv_weight(pre + "mu.w", {cfg.latent_channels, last, 1, 1, 1}, cfg.lrelu_alpha),
                   trainable);
  int bm = g.param(pre + "mu.b", src.zeros(pre + "mu.b", {cfg.latent_channels}), trainable);
  out.mu = g.conv3(cur, wm, bm, 1, 0);
  int wv = g.param(pre + "logvar.w",
                   src.conv_weight(pre + "logvar.w", {cfg.latent_channels, last, 1, 1, 1},
                                   cfg.lrelu_alpha),
                   trainable);
  int bv = g.param(pre + "logvar.b",
                   src.constant(pre + "logvar.b", {cfg.latent_channels}, cfg.logvar_bias_init),
                   trainable);
  out.logvar = g.conv3(cur, wv, bv, 1, 0);
  return out;
}

inline int build_vae_decoder(Graph& g, const VaeGanConfig& cfg, const ParamSource& src,
                             bool trainable, int z_node) {
  const std::string pre = "vae.dec.";
  CSEG_CHECK(g.shape(z_node) == cfg.latent_shape(), "decoder: latent layout mismatch");
  auto block = [&](int x, int in_ch, int out_ch, const std::string& name) {
    int w = g.param(pre + name + ".w",
                    src.conv_weight(pre + name + ".w", {out_ch, in_ch, 3, 3, 3}, cfg.lrelu_alpha),
                    trainable);
    int c = g.conv3(x, w, -1, 1, 1);
    int sc = g.param(pre + name + ".g", src.ones(pre + name + ".g", {out_ch}), trainable);
    int sh = g.param(pre + name + ".b", src.zeros(pre + name + ".b", {out_ch}), trainable);
    return g.lrelu(g.instnorm(c, sc, sh, cfg.instnorm_eps), cfg.lrelu_alpha);
  };
  int cur = block(z_node, cfg.latent_channels, cfg.enc_widths.back(), "stem");
  for (std::size_t i = cfg.enc_widths.size() - 1; i >= 1; --i) {
    const std::string name = "up" + std::to_string(i);
    int wt = g.param(pre + name + ".w",
                     src.conv_weight(pre + name + ".w",
                                     {cfg.enc_widths[i - 1], cfg.enc_widths[i], 2, 2, 2},
                                     cfg.lrelu_alpha),
                     trainable);
    cur = g.tconv3(cur, wt, -1);
    cur = block(cur, cfg.enc_widths[i - 1], cfg.enc_widths[i - 1], "post" + std::to_string(i));
  }
  int wo = g.param(pre + "out.w",
                   src.conv_weight(pre + "out.w", {1, cfg.enc_widths[0], 3, 3, 3}, cfg.lrelu_alpha),
                   trainable);
  int bo = g.param(pre + "out.b", src.zeros(pre + "out.b", {1}), trainable);
  return g.conv3(cur, wo, bo, 1, 1);
}

struct DiscNodes {
  int input = -1;
  int logit = -1;  // scalar
  int prob = -1;   // sigmoid(logit)
  std::vector<int> features;  // intermediate activations for the perceptual loss
};

inline DiscNodes build_discriminator(Graph& g, const VaeGanConfig& cfg, const ParamSource& src,
                                     bool trainable, int existing_input, const std::string& tag) {
  const std::string pre = "vae.disc.";
  DiscNodes out;
  out.input = existing_input >= 0
                  ? existing_input
                  : g.input(pre + tag + ".x", {1, cfg.patch[2], cfg.patch[1], cfg.patch[0]});
  int cur = out.input;
  int in_ch = 1;
  for (std::size_t i = 0; i < cfg.disc_widths.size(); ++i) {
    const std::string name = "s" + std::to_string(i);
    int w = g.param(pre + name + ".w",
                    src.conv_weight(pre + name + ".w", {cfg.disc_widths[i], in_ch, 3, 3, 3},
                                    cfg.lrelu_alpha),
                    trainable);
    int c = g.conv3(cur, w, -1, 2, 1);
    if (i > 0) {  // first stage runs without normalization
      int sc = g.param(pre + name + ".g", src.ones(pre + name + ".g", {cfg.disc_widths[i]}), trainable);
      int sh = g.param(pre + name + ".b", src.zeros(pre + name + ".b", {cfg.disc_widths[i]}), trainable);
      c = g.instnorm(c, sc, sh, cfg.instnorm_eps);
    }
    cur = g.lrelu(c, cfg.lrelu_alpha);
    out.features.push_back(cur);
    in_ch = cfg.disc_widths[i];
  }
  int wh = g.param(pre + "head.w",
                   src.conv_weight(pre + "head.w", {1, in_ch, 1, 1, 1}, cfg.lrelu_alpha), trainable);
  int bh = g.param(pre + "head.b", src.zeros(pre + "head.b", {1}), trainable);
  out.logit = g.mean(g.conv3(cur, wh, bh, 1, 0));
  out.prob = g.sigmoid(out.logit);
  return out;
}

// ----- loss -----

// total = ((((recon + recon_kid) + kl_w*kl) + perc_w*perc) + adv_w*adv); the
// breakdown records the weights actually applied so the identity is exact.
struct LossBreakdown {
  double recon = 0.0;
  double recon_kid = 0.0;
  double kl = 0.0;
  double perc = 0.0;
  double adv = 0.0;
  double kl_weight = 0.0;
  double perc_weight = 0.0;
  double adv_weight = 0.0;  // zero during warm-up
  double total = 0.0;

  double reassemble() const {
    return (((recon + recon_kid) + kl_weight * kl) + perc_weight * perc) + adv_weight * adv;
  }
};

struct DiscOutput {
  double prob = 0.5;
  std::vector<Tensor> features;
};

// Standalone loss evaluation from precomputed pieces (the training graph
// computes the same expressions internally).
inline LossBreakdown vaegan_loss(const Tensor& x, const Tensor& xhat, const LatentCode& code,
                                 const Tensor& combined_mask, const DiscOutput& disc_real,
                                 const DiscOutput& disc_fake, int epoch, const VaeGanConfig& cfg) {
  CSEG_CHECK(x.shape == xhat.shape, "vaegan_loss: x and xhat must share shape");
  CSEG_CHECK(combined_mask.shape == x.shape, "vaegan_loss: mask must match x");
  CSEG_CHECK(code.mu.shape == code.logvar.shape, "vaegan_loss: bad latent code");
  CSEG_CHECK(epoch >= 0, "vaegan_loss: epoch must be >= 0");
  LossBreakdown lb;
  lb.kl_weight = cfg.lambda_kl;
  lb.perc_weight = cfg.lambda_perc;
  lb.adv_weight = epoch >= cfg.warmup_epochs ? cfg.lambda_adv : 0.0;

  double abs_sum = 0.0, mask_sum = 0.0, masked_abs = 0.0;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double d = std::abs(x.v[i] - xhat.v[i]);
    abs_sum += d;
    mask_sum += combined_mask.v[i];
    masked_abs += d * combined_mask.v[i];
  }
  lb.recon = abs_sum / static_cast<double>(x.v.size());
  lb.recon_kid = mask_sum > 0.0 ? masked_abs / mask_sum : 0.0;

  double kl = 0.0;
  for (std::size_t i = 0; i < code.mu.v.size(); ++i) {
    const double mu = code.mu.v[i];
    const double lv = code.logvar.v[i];
    kl += mu * mu + std::exp(lv) - 1.0 - lv;
  }
  lb.kl = 0.5 * kl;

  CSEG_CHECK(disc_real.features.size() == disc_fake.features.size(),
             "vaegan_loss: feature layer mismatch");
  double perc = 0.0;
  for (std::size_t l = 0; l < disc_real.features.size(); ++l) {
    const Tensor& fr = disc_real.features[l];
    const Tensor& ff = disc_fake.features[l];
    CSEG_CHECK(fr.shape == ff.shape, "vaegan_loss: feature shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < fr.v.size(); ++i) {
      const double d = fr.v[i] - ff.v[i];
      s += d * d;
    }
    perc += s / static_cast<double>(fr.v.size());
  }
  lb.perc = perc;

  lb.adv = std::log(disc_real.prob) + std::log(1.0 - disc_fake.prob);
  lb.total = lb.reassemble();

  auto finite = [](double v, const char* term) {
    CSEG_RUNTIME_CHECK(std::isfinite(v), std::string("vaegan_loss: non-finite term ") + term);
  };
  finite(lb.recon, "recon");
  finite(lb.recon_kid, "recon_kid");
  finite(lb.kl, "kl");
  finite(lb.perc, "perc");
  finite(lb.adv, "adv");
  return lb;
}

// ----- cached-graph runner for encode/decode/discriminate -----

class VaeGanRunner {
 public:
  explicit VaeGanRunner(const VaeGanModel& model) : cfg_(model.cfg) {
    cfg_.validate();
    enc_ = build_vae_encoder(enc_graph_, cfg_, ParamSource::from(model.params), false);
    zin_ = dec_graph_.input("z", cfg_.latent_shape());
    xhat_ = build_vae_decoder(dec_graph_, cfg_, ParamSource::from(model.params), false, zin_);
    disc_ = build_discriminator(disc_graph_, cfg_, ParamSource::from(model.params), false, -1, "in");
  }

  const VaeGanConfig& config() const { return cfg_; }

  LatentCode encode(const Tensor& x, bool deterministic, Rng* rng = nullptr) {
    enc_graph_.set_input("vae.enc.x", x);
    enc_graph_.forward();
    LatentCode code;
    code.mu = enc_graph_.tensor(enc_.mu);
    code.logvar = enc_graph_.tensor(enc_.logvar);
    code.z = code.mu;
    if (!deterministic) {
      CSEG_CHECK(rng != nullptr, "encode: sampling requires an rng");
      for (std::size_t i = 0; i < code.z.v.size(); ++i)
        code.z.v[i] = code.mu.v[i] + std::exp(0.5 * code.logvar.v[i]) * rng->normal();
    }
    return code;
  }

  Tensor decode(const Tensor& z) {
    dec_graph_.set_input("z", z);
    dec_graph_.forward();
    return dec_graph_.tensor(xhat_);
  }

  DiscOutput discriminate(const Tensor& x) {
    disc_graph_.set_input("vae.disc.in.x", x);
    disc_graph_.forward();
    DiscOutput out;
    out.prob = disc_graph_.scalar_value(disc_.prob);
    for (int f : disc_.features) out.features.push_back(disc_graph_.tensor(f));
    return out;
  }

 private:
  VaeGanConfig cfg_;
  Graph enc_graph_, dec_graph_, disc_graph_;
  VaeEncoderNodes enc_;
  int zin_ = -1, xhat_ = -1;
  DiscNodes disc_;
};

// ----- training -----

struct VaeTrainItem {
  Patch x;
  MaskPatch combined;  // kidney+cyst region for the masked reconstruction term
};

struct VaeTrainOptions {
  int epochs = 120;
  int iters_per_epoch = 8;
  double lr = 0.02;
  double lr_disc = 0.005;
  double momentum = 0.9;
  double grad_clip = 12.0;
};

struct VaeLogRow {
  int epoch = 0;
  LossBreakdown mean;
};

namespace detail {
struct MomentumState {
  std::vector<std::pair<int, std::vector<double>>> v;
  void init(Graph& g) {
    for (int id : g.param_ids())
      if (g.node_ref(id).requires_grad)
        v.emplace_back(id, std::vector<double>(g.node_ref(id).val.size(), 0.0));
  }
  void step(Graph& g, double lr, double mom, double clip) {
    if (clip > 0.0) {
      const double norm = g.grad_norm();
      if (norm > clip) g.scale_grads(clip / norm);
    }
    for (auto& [id, vel] : v) {
      auto& node = g.node_mut(id);
      for (std::size_t i = 0; i < vel.size(); ++i) {
        vel[i] = mom * vel[i] + node.grad[i];
        node.val[i] -= lr * vel[i];
      }
    }
  }
};
}  // namespace detail

// Alternating updates: encoder+decoder minimize the five-term total (the
// adversarial term joins after warm-up); the discriminator maximizes the
// adversarial term from the start.
inline VaeGanModel train_vaegan(const std::vector<VaeTrainItem>& items, const VaeGanConfig& cfg,
                                Rng& rng, const VaeTrainOptions& opts,
                                std::vector<VaeLogRow>* log = nullptr) {
  CSEG_CHECK(!items.empty(), "train_vaegan: empty dataset");
  cfg.validate();
  const std::int64_t pn = static_cast<std::int64_t>(cfg.patch[0]) * cfg.patch[1] * cfg.patch[2];
  for (const auto& it : items)
    CSEG_CHECK(static_cast<std::int64_t>(it.x.vox.size()) == pn && it.combined.dims == it.x.dims,
               "train_vaegan: item does not match the patch dims");

  const Shape patch_shape{1, cfg.patch[2], cfg.patch[1], cfg.patch[0]};

  // generator-phase graph: disc params frozen
  Graph gg;
  ParamSource init = ParamSource::he(rng.next_u64());
  int x_in = gg.input("x", patch_shape);
  int eps_in = gg.input("eps", cfg.latent_shape());
  int mask_in = gg.input("mask_scaled", patch_shape);  // combined mask / voxel count
  int advw_in = gg.input("adv_w", {1});
  VaeEncoderNodes enc = build_vae_encoder(gg, cfg, init, true, x_in);
  int half = gg.constant(Tensor::full(cfg.latent_shape(), 0.5));
  int sigma = gg.exp(gg.mul(half, enc.logvar));
  int z = gg.add(enc.mu, gg.mul(sigma, eps_in));
  int xhat = build_vae_decoder(gg, cfg, init, true, z);
  DiscNodes disc_real = build_discriminator(gg, cfg, init, false, x_in, "real");
  DiscNodes disc_fake = build_discriminator(gg, cfg, init, false, xhat, "fake");

  int absdiff = gg.absval(gg.sub(x_in, xhat));
  int recon = gg.mean(absdiff);
  int recon_kid = gg.sum(gg.mul(absdiff, mask_in));
  Shape lat = cfg.latent_shape();
  int kl = gg.mul(gg.constant_scalar(0.5),
                  gg.sum(gg.sub(gg.sub(gg.add(gg.square(enc.mu), gg.exp(enc.logvar)),
                                       gg.constant(Tensor::full(lat, 1.0))),
                                enc.logvar)));
  int perc = -1;
  for (std::size_t l = 0; l < disc_real.features.size(); ++l) {
    int diff = gg.sub(disc_real.features[static_cast<std::size_t>(l)],
                      disc_fake.features[static_cast<std::size_t>(l)]);
    int term = gg.mean(gg.square(diff));
    perc = perc < 0 ? term : gg.add(perc, term);
  }
  // log(D(x)) + log(1 - D(xhat)) via sigmoid symmetry: 1 - s(t) = s(-t)
  int adv = gg.add(gg.log(gg.sigmoid(disc_real.logit)),
                   gg.log(gg.sigmoid(gg.mul(gg.constant_scalar(-1.0), disc_fake.logit))));
  int total = gg.add(
      gg.add(gg.add(gg.add(recon, recon_kid), gg.mul(gg.constant_scalar(cfg.lambda_kl), kl)),
             gg.mul(gg.constant_scalar(cfg.lambda_perc), perc)),
      gg.mul(advw_in, adv));

  // discriminator-phase graph: fresh params by name, loaded each step
  Graph dg;
  int dx = dg.input("x", patch_shape);
  int dxh = dg.input("xhat", patch_shape);
  ParamSource dinit = ParamSource::he(rng.next_u64());  // placeholder, overwritten by sync below
  DiscNodes d_real = build_discriminator(dg, cfg, dinit, true, dx, "real");
  DiscNodes d_fake = build_discriminator(dg, cfg, dinit, true, dxh, "fake");
  int d_loss = dg.mul(dg.constant_scalar(-1.0),
                      dg.add(dg.log(dg.sigmoid(d_real.logit)),
                             dg.log(dg.sigmoid(dg.mul(dg.constant_scalar(-1.0), d_fake.logit)))));

  // keep one authoritative copy of disc weights: generator graph holds them
  for (int id : dg.param_ids()) {
    auto& n = dg.node_mut(id);
    n.val = gg.param_values(n.name);
  }

  detail::MomentumState gen_m, disc_m;
  gen_m.init(gg);
  disc_m.init(dg);

  Tensor eps = Tensor::zeros(cfg.latent_shape());
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    LossBreakdown acc;
    const double adv_w = epoch >= cfg.warmup_epochs ? cfg.lambda_adv : 0.0;
    for (int iter = 0; iter < opts.iters_per_epoch; ++iter) {
      const auto& item = items[static_cast<std::size_t>(rng.below(items.size()))];
      for (double& e : eps.v) e = rng.normal();

      double mask_count = 0.0;
      for (auto l : item.combined.lab) mask_count += l != kBackground ? 1.0 : 0.0;
      Tensor mask_scaled = Tensor::zeros(patch_shape);
      if (mask_count > 0.0)
        for (std::size_t i = 0; i < mask_scaled.v.size(); ++i)
          mask_scaled.v[i] = item.combined.lab[i] != kBackground ? 1.0 / mask_count : 0.0;

      gg.set_input("x", Tensor(patch_shape, item.x.vox));
      gg.set_input("eps", eps);
      gg.set_input("mask_scaled", mask_scaled);
      gg.set_input("adv_w", std::vector<double>{adv_w});
      gg.forward();

      LossBreakdown lb;
      lb.recon = gg.scalar_value(recon);
      lb.recon_kid = gg.scalar_value(recon_kid);
      lb.kl = gg.scalar_value(kl);
      lb.perc = gg.scalar_value(perc);
      lb.adv = gg.scalar_value(adv);
      lb.kl_weight = cfg.lambda_kl;
      lb.perc_weight = cfg.lambda_perc;
      lb.adv_weight = adv_w;
      lb.total = gg.scalar_value(total);
      const std::pair<double, const char*> terms[] = {{lb.recon, "recon"},
                                                      {lb.recon_kid, "recon_kid"},
                                                      {lb.kl, "kl"},
                                                      {lb.perc, "perc"},
                                                      {lb.adv, "adv"}};
      for (const auto& [v, name] : terms)
        CSEG_RUNTIME_CHECK(std::isfinite(v), std::string("train_vaegan: non-finite ") + name +
                                                 " at epoch " + std::to_string(epoch));

      gg.backward(total);
      gen_m.step(gg, opts.lr, opts.momentum, opts.grad_clip);

      // discriminator step on the same pair, weights synced from the gen graph
      dg.set_input("x", Tensor(patch_shape, item.x.vox));
      dg.set_input("xhat", gg.tensor(xhat));
      for (int id : dg.param_ids()) {
        auto& n = dg.node_mut(id);
        n.val = gg.param_values(n.name);
      }
      dg.forward();
      CSEG_RUNTIME_CHECK(std::isfinite(dg.scalar_value(d_loss)),
                         "train_vaegan: non-finite adv at epoch " + std::to_string(epoch));
      dg.backward(d_loss);
      disc_m.step(dg, opts.lr_disc, opts.momentum, opts.grad_clip);
      for (int id : dg.param_ids()) {
        const auto& n = dg.node_ref(id);
        gg.param_values(n.name) = n.val;
      }

      acc.recon += lb.recon;
      acc.recon_kid += lb.recon_kid;
      acc.kl += lb.kl;
      acc.perc += lb.perc;
      acc.adv += lb.adv;
      acc.total += lb.total;
    }
    if (log) {
      const double inv = 1.0 / opts.iters_per_epoch;
      LossBreakdown mean;
      mean.recon = acc.recon * inv;
      mean.recon_kid = acc.recon_kid * inv;
      mean.kl = acc.kl * inv;
      mean.perc = acc.perc * inv;
      mean.adv = acc.adv * inv;
      mean.kl_weight = cfg.lambda_kl;
      mean.perc_weight = cfg.lambda_perc;
      mean.adv_weight = adv_w;
      mean.total = acc.total * inv;
      log->push_back({epoch, mean});
    }
  }

  VaeGanModel model;
  model.cfg = cfg;
  model.params = ParameterSet::from_graph(gg);
  return model;
}

// ----- reconstruction -----

// Deterministic (z = mu) reconstruction of the box contents with 50%-overlap
// Gaussian blending; intensities outside the box pass through unchanged.
inline Volume reconstruct(const Volume& vol, VaeGanRunner& runner, const BoundingBox& box) {
  const VaeGanConfig& cfg = runner.config();
  box.validate({vol.nx, vol.ny, vol.nz});
  const std::array<int, 3> patch = cfg.patch;

  std::array<int, 3> roi_dims, roi_off;
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

  std::vector<double> acc(static_cast<std::size_t>(roi_n), 0.0), wsum(static_cast<std::size_t>(roi_n), 0.0);
  const std::vector<double> bw = detail::blend_weights(patch);
  Tensor pv = Tensor::zeros({1, patch[2], patch[1], patch[0]});
  for (int sz : detail::window_starts(roi_dims[2], patch[2]))
    for (int sy : detail::window_starts(roi_dims[1], patch[1]))
      for (int sx : detail::window_starts(roi_dims[0], patch[0])) {
        std::size_t q = 0;
        for (int z = 0; z < patch[2]; ++z)
          for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[0]; ++x) pv.v[q++] = roi[roi_idx(sx + x, sy + y, sz + z)];
        LatentCode code = runner.encode(pv, true);
        Tensor xhat = runner.decode(code.z);
        q = 0;
        for (int z = 0; z < patch[2]; ++z)
          for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[0]; ++x, ++q) {
              const std::size_t r = roi_idx(sx + x, sy + y, sz + z);
              acc[r] += bw[q] * xhat.v[q];
              wsum[r] += bw[q];
            }
      }

  Volume out = vol;
  for (int z = box.start[2]; z < box.end(2); ++z)
    for (int y = box.start[1]; y < box.end(1); ++y)
      for (int x = box.start[0]; x < box.end(0); ++x) {
        const std::size_t r = roi_idx(x - roi_off[0], y - roi_off[1], z - roi_off[2]);
        out.at(x, y, z) = acc[r] / wsum[r];
      }
  return out;
}

// ----- model directory -----

inline void save_vaegan(const VaeGanModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_params(model.params, dir / "weights");
  nlohmann::json j{{"patch", {model.cfg.patch[0], model.cfg.patch[1], model.cfg.patch[2]}},
                   {"enc_widths", model.cfg.enc_widths},
                   {"latent_channels", model.cfg.latent_channels},
                   {"disc_widths", model.cfg.disc_widths},
                   {"lambda_kl", model.cfg.lambda_kl},
                   {"lambda_perc", model.cfg.lambda_perc},
                   {"lambda_adv", model.cfg.lambda_adv},
                   {"warmup_epochs", model.cfg.warmup_epochs},
                   {"lrelu_alpha", model.cfg.lrelu_alpha},
                   {"instnorm_eps", model.cfg.instnorm_eps},
                   {"logvar_bias_init", model.cfg.logvar_bias_init}};
  std::ofstream f(dir / "vaegan.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot write vaegan manifest in " + dir.string());
  f << j.dump(2) << "\n";
}

inline VaeGanModel load_vaegan(const std::filesystem::path& dir) {
  std::ifstream f(dir / "vaegan.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot read vaegan manifest in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(f);
  VaeGanModel model;
  auto p = j.at("patch").get<std::vector<int>>();
  CSEG_RUNTIME_CHECK(p.size() == 3, "bad vaegan patch");
  model.cfg.patch = {p[0], p[1], p[2]};
  model.cfg.enc_widths = j.at("enc_widths").get<std::vector<int>>();
  model.cfg.latent_channels = j.at("latent_channels").get<int>();
  model.cfg.disc_widths = j.at("disc_widths").get<std::vector<int>>();
  model.cfg.lambda_kl = j.at("lambda_kl").get<double>();
  model.cfg.lambda_perc = j.at("lambda_perc").get<double>();
  model.cfg.lambda_adv = j.at("lambda_adv").get<double>();
  model.cfg.warmup_epochs = j.at("warmup_epochs").get<int>();
  model.cfg.lrelu_alpha = j.at("lrelu_alpha").get<double>();
  model.cfg.instnorm_eps = j.at("instnorm_eps").get<double>();
  model.cfg.logvar_bias_init = j.at("logvar_bias_init").get<double>();
  model.params = load_params(dir / "weights");
  return model;
}

}  // namespace counterseg

#endif
