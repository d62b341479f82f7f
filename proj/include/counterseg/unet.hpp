#ifndef COUNTERSEG_UNET_HPP
#define COUNTERSEG_UNET_HPP

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "counterseg/graph.hpp"
#include "counterseg/params.hpp"
#include "counterseg/rng.hpp"

namespace counterseg {

// Segmentation network configuration. Patch dims are (x, y, z) voxels; graph
// tensors are laid out [C, z, y, x] to match the x-fastest volume order.
struct SegConfig {
  std::array<int, 3> patch{64, 64, 32};
  int depth = 5;
  std::vector<int> widths{16, 32, 64, 128, 256};
  std::vector<double> ds_weights{1.0, 0.5, 0.25, 0.125, 0.0625};
  int num_classes = 3;
  double dice_smooth = 1e-5;
  double lrelu_alpha = 0.01;
  double instnorm_eps = 1e-5;

  void validate() const {
    CSEG_CHECK(depth >= 2, "segconfig: depth must be >= 2");
    CSEG_CHECK(static_cast<int>(widths.size()) == depth, "segconfig: one width per level");
    for (int w : widths) CSEG_CHECK(w >= 1, "segconfig: widths must be positive");
    CSEG_CHECK(!ds_weights.empty() && ds_weights[0] == 1.0,
               "segconfig: first supervision weight must be 1.0");
    for (std::size_t i = 1; i < ds_weights.size(); ++i)
      CSEG_CHECK(ds_weights[i] < ds_weights[i - 1], "segconfig: weights must be strictly decreasing");
    CSEG_CHECK(static_cast<int>(ds_weights.size()) <= depth,
               "segconfig: more supervision levels than resolutions");
    const int div = 1 << (depth - 1);
    for (int p : patch)
      CSEG_CHECK(p % div == 0 && p >= div, "segconfig: patch dims must divide by 2^(depth-1)");
    CSEG_CHECK(num_classes >= 2, "segconfig: need at least 2 classes");
  }

  int levels() const { return static_cast<int>(ds_weights.size()); }

  static SegConfig clinical() {
    SegConfig c;
    c.patch = {128, 128, 48};
    return c;
  }
  static SegConfig desk() { return SegConfig{}; }
};

// Parameter initialization source: fresh He init or values from a snapshot.
class ParamSource {
 public:
  static ParamSource he(std::uint64_t seed) {
    ParamSource s;
    s.rng_ = std::make_shared<Rng>(seed);
    return s;
  }
  static ParamSource from(const ParameterSet& ps) {
    ParamSource s;
    s.ps_ = &ps;
    return s;
  }

  Tensor conv_weight(const std::string& name, Shape shape, double lrelu_alpha) const {
    if (ps_) return ps_->at(name);
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double gain = std::sqrt(2.0 / (1.0 + lrelu_alpha * lrelu_alpha));
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.v) v = rng_->normal(0.0, stddev);
    return t;
  }
  Tensor zeros(const std::string& name, Shape shape) const {
    if (ps_) return ps_->at(name);
    return Tensor::zeros(shape);
  }
  Tensor ones(const std::string& name, Shape shape) const {
    if (ps_) return ps_->at(name);
    return Tensor::full(shape, 1.0);
  }
  Tensor constant(const std::string& name, Shape shape, double value) const {
    if (ps_) return ps_->at(name);
    return Tensor::full(shape, value);
  }

 private:
  std::shared_ptr<Rng> rng_;
  const ParameterSet* ps_ = nullptr;
};

struct UnetGraph {
  int input = -1;                 // [1, z, y, x]
  std::vector<int> logits;        // per supervision level, full resolution first
  std::vector<int> probs;         // softmax of each logits level
};

namespace detail {
struct BlockBuilder {
  Graph& g;
  const SegConfig& cfg;
  const ParamSource& src;
  std::string prefix;
  bool trainable;

  int conv_in_lrelu(int x, int in_ch, int out_ch, int stride, const std::string& name) {
    int w = g.param(prefix + name + ".w",
                    src.conv_weight(prefix + name + ".w", {out_ch, in_ch, 3, 3, 3}, cfg.lrelu_alpha),
                    trainable);
    int c = g.conv3(x, w, -1, stride, 1);
    int sc = g.param(prefix + name + ".g", src.ones(prefix + name + ".g", {out_ch}), trainable);
    int sh = g.param(prefix + name + ".b", src.zeros(prefix + name + ".b", {out_ch}), trainable);
    return g.lrelu(g.instnorm(c, sc, sh, cfg.instnorm_eps), cfg.lrelu_alpha);
  }
};
}  // namespace detail

// Encoder-decoder with skip connections, strided-conv downsampling, transposed
// convolution upsampling and 1x1x1 heads at cfg.levels() resolutions (the
// deepest head sits on the bottleneck when levels == depth).
inline UnetGraph build_unet(Graph& g, const SegConfig& cfg, const ParamSource& src,
                            const std::string& prefix, bool trainable,
                            int existing_input = -1) {
  cfg.validate();
  UnetGraph net;
  net.input = existing_input >= 0
                  ? existing_input
                  : g.input(prefix + "x", {1, cfg.patch[2], cfg.patch[1], cfg.patch[0]});
  detail::BlockBuilder bb{g, cfg, src, prefix, trainable};

  std::vector<int> skip(static_cast<std::size_t>(cfg.depth));
  int cur = net.input;
  int in_ch = 1;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string lv = "enc" + std::to_string(l);
    cur = bb.conv_in_lrelu(cur, in_ch, cfg.widths[l], l == 0 ? 1 : 2, lv + ".c1");
    cur = bb.conv_in_lrelu(cur, cfg.widths[l], cfg.widths[l], 1, lv + ".c2");
    skip[static_cast<std::size_t>(l)] = cur;
    in_ch = cfg.widths[l];
  }

  std::vector<int> dec(static_cast<std::size_t>(cfg.depth), -1);
  dec[static_cast<std::size_t>(cfg.depth - 1)] = cur;  // bottleneck
  for (int l = cfg.depth - 2; l >= 0; --l) {
    const std::string lv = "dec" + std::to_string(l);
    int wt = g.param(prefix + lv + ".up.w",
                     src.conv_weight(prefix + lv + ".up.w",
                                     {cfg.widths[l], cfg.widths[l + 1], 2, 2, 2}, cfg.lrelu_alpha),
                     trainable);
    int up = g.tconv3(dec[static_cast<std::size_t>(l + 1)], wt, -1);
    int cat = g.concat_ch(up, skip[static_cast<std::size_t>(l)]);
    int c1 = bb.conv_in_lrelu(cat, 2 * cfg.widths[l], cfg.widths[l], 1, lv + ".c1");
    dec[static_cast<std::size_t>(l)] = bb.conv_in_lrelu(c1, cfg.widths[l], cfg.widths[l], 1, lv + ".c2");
  }

  for (int s = 0; s < cfg.levels(); ++s) {
    const std::string hd = "head" + std::to_string(s);
    int feat = dec[static_cast<std::size_t>(s)];
    int w = g.param(prefix + hd + ".w",
                    src.conv_weight(prefix + hd + ".w",
                                    {cfg.num_classes, cfg.widths[s], 1, 1, 1}, cfg.lrelu_alpha),
                    trainable);
    int b = g.param(prefix + hd + ".b", src.zeros(prefix + hd + ".b", {cfg.num_classes}), trainable);
    int lg = g.conv3(feat, w, b, 1, 0);
    net.logits.push_back(lg);
    net.probs.push_back(g.softmax_ch(lg));
  }
  return net;
}

}  // namespace counterseg

#endif
