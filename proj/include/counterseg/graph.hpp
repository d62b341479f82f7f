#ifndef COUNTERSEG_GRAPH_HPP
#define COUNTERSEG_GRAPH_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "counterseg/common.hpp"
#include "counterseg/tensor.hpp"

namespace counterseg {

enum class Op {
  kInput,
  kParam,
  kConst,
  kConv3,
  kTconv3,
  kDense,
  kRelu,
  kLrelu,
  kSigmoid,
  kSoftmaxCh,
  kAdd,
  kSub,
  kMul,
  kSum,
  kMean,
  kLog,
  kExp,
  kSquare,
  kAbs,
  kConcatCh,
  kUpsampleNn,
  kDownsampleNn,
  kInstNorm,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kConv3: return "conv3";
    case Op::kTconv3: return "tconv3";
    case Op::kDense: return "dense";
    case Op::kRelu: return "relu";
    case Op::kLrelu: return "leaky_relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmaxCh: return "softmax_channels";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSquare: return "square";
    case Op::kAbs: return "abs";
    case Op::kConcatCh: return "concat_channels";
    case Op::kUpsampleNn: return "upsample_nearest";
    case Op::kDownsampleNn: return "downsample_nearest";
    case Op::kInstNorm: return "instance_norm";
  }
  return "?";
}

// Reverse-mode computation graph over dense double tensors. Nodes are stored
// in construction order, which is already topological; forward() evaluates the
// whole tape and backward() sweeps it in reverse. Buffers are allocated once
// and reused across iterations, so a training step does no heap churn.
class Graph {
 public:
  struct Node {
    Op op = Op::kInput;
    std::vector<int> in;
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    // op attributes
    int stride = 1;
    int pad = 0;
    int factor = 1;
    double alpha = 0.0;
    double eps = 0.0;
    std::string name;        // inputs/params
    bool requires_grad = false;  // leaves only
    bool on_grad_path = false;
    bool is_set = false;         // inputs only
    std::vector<double> aux;     // instnorm: per-channel mean/inv_std
  };

  // ----- leaves -----

  int input(const std::string& name, Shape shape, bool requires_grad = false) {
    CSEG_CHECK(!name.empty(), "input needs a name");
    CSEG_CHECK(name_to_id_.find(name) == name_to_id_.end(), "duplicate leaf name: " + name);
    Node n;
    n.op = Op::kInput;
    n.shape = std::move(shape);
    n.val.assign(static_cast<size_t>(shape_numel(n.shape)), 0.0);
    n.name = name;
    n.requires_grad = requires_grad;
    n.on_grad_path = requires_grad;
    int id = push(std::move(n));
    name_to_id_[name] = id;
    input_ids_.push_back(id);
    return id;
  }

  // Re-registering an existing parameter name returns the same node, so one
  // weight tensor can feed several applications (e.g. a discriminator run on
  // both a real and a generated image).
  int param(const std::string& name, const Tensor& init, bool requires_grad = true) {
    auto it = name_to_id_.find(name);
    if (it != name_to_id_.end()) {
      CSEG_CHECK(nodes_[it->second].op == Op::kParam, "leaf name already used by non-param: " + name);
      CSEG_CHECK(nodes_[it->second].shape == init.shape, "param re-registration shape mismatch: " + name);
      return it->second;
    }
    Node n;
    n.op = Op::kParam;
    n.shape = init.shape;
    n.val = init.v;
    n.name = name;
    n.requires_grad = requires_grad;
    n.on_grad_path = requires_grad;
    n.is_set = true;
    int id = push(std::move(n));
    name_to_id_[name] = id;
    param_ids_.push_back(id);
    return id;
  }

  int constant(const Tensor& value) {
    Node n;
    n.op = Op::kConst;
    n.shape = value.shape;
    n.val = value.v;
    n.is_set = true;
    return push(std::move(n));
  }

  int constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // ----- ops -----

  int conv3(int x, int w, int b, int stride, int pad) {
    const Node& xn = node(x);
    const Node& wn = node(w);
    CSEG_CHECK(xn.shape.size() == 4, "conv3: input must be [C,D,H,W]");
    CSEG_CHECK(wn.shape.size() == 5, "conv3: kernels must be [OC,IC,kd,kh,kw]");
    CSEG_CHECK(stride >= 1 && pad >= 0, "conv3: bad stride/pad");
    int ic = xn.shape[0], d = xn.shape[1], h = xn.shape[2], wd = xn.shape[3];
    int oc = wn.shape[0];
    CSEG_CHECK(wn.shape[1] == ic, "conv3: kernel input channels mismatch");
    int kd = wn.shape[2], kh = wn.shape[3], kw = wn.shape[4];
    CSEG_CHECK(kd % 2 == 1 && kh % 2 == 1 && kw % 2 == 1, "conv3: kernel extents must be odd");
    CSEG_CHECK(kd <= d + 2 * pad && kh <= h + 2 * pad && kw <= wd + 2 * pad,
               "conv3: kernel larger than padded input");
    if (b >= 0) {
      CSEG_CHECK(node(b).shape == Shape{oc}, "conv3: bias must be [OC]");
    }
    Node n;
    n.op = Op::kConv3;
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.stride = stride;
    n.pad = pad;
    n.shape = {oc, (d + 2 * pad - kd) / stride + 1, (h + 2 * pad - kh) / stride + 1,
               (wd + 2 * pad - kw) / stride + 1};
    return push_op(std::move(n));
  }

  // kernel 2, stride 2; exact x2 upsampling
  int tconv3(int x, int w, int b) {
    const Node& xn = node(x);
    const Node& wn = node(w);
    CSEG_CHECK(xn.shape.size() == 4, "tconv3: input must be [C,D,H,W]");
    CSEG_CHECK(wn.shape.size() == 5 && wn.shape[2] == 2 && wn.shape[3] == 2 && wn.shape[4] == 2,
               "tconv3: kernels must be [OC,IC,2,2,2]");
    CSEG_CHECK(wn.shape[1] == xn.shape[0], "tconv3: kernel input channels mismatch");
    if (b >= 0) CSEG_CHECK(node(b).shape == Shape{wn.shape[0]}, "tconv3: bias must be [OC]");
    Node n;
    n.op = Op::kTconv3;
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.shape = {wn.shape[0], xn.shape[1] * 2, xn.shape[2] * 2, xn.shape[3] * 2};
    return push_op(std::move(n));
  }

  int dense(int x, int w, int b) {
    const Node& xn = node(x);
    const Node& wn = node(w);
    CSEG_CHECK(xn.shape.size() == 1, "dense: input must be rank-1");
    CSEG_CHECK(wn.shape.size() == 2 && wn.shape[1] == xn.shape[0], "dense: weight must be [M,N]");
    if (b >= 0) CSEG_CHECK(node(b).shape == Shape{wn.shape[0]}, "dense: bias must be [M]");
    Node n;
    n.op = Op::kDense;
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.shape = {wn.shape[0]};
    return push_op(std::move(n));
  }

  int relu(int x) { return unary(Op::kRelu, x); }
  int lrelu(int x, double alpha = 0.01) {
    int id = unary(Op::kLrelu, x);
    nodes_[id].alpha = alpha;
    return id;
  }
  int sigmoid(int x) { return unary(Op::kSigmoid, x); }
  int log(int x) { return unary(Op::kLog, x); }
  int exp(int x) { return unary(Op::kExp, x); }
  int square(int x) { return unary(Op::kSquare, x); }
  int absval(int x) { return unary(Op::kAbs, x); }

  int softmax_ch(int x) {
    const Node& xn = node(x);
    CSEG_CHECK(xn.shape.size() >= 2, "softmax_channels: need [K,spatial...]");
    CSEG_CHECK(xn.shape[0] >= 2, "softmax_channels: K must be >= 2");
    return unary(Op::kSoftmaxCh, x);
  }

  int add(int a, int b) { return binary(Op::kAdd, a, b); }
  int sub(int a, int b) { return binary(Op::kSub, a, b); }
  int mul(int a, int b) { return binary(Op::kMul, a, b); }

  int sum(int x) { return reduce(Op::kSum, x); }
  int mean(int x) { return reduce(Op::kMean, x); }

  int concat_ch(int a, int b) {
    const Node& an = node(a);
    const Node& bn = node(b);
    CSEG_CHECK(an.shape.size() == bn.shape.size() && an.shape.size() >= 1,
               "concat_channels: rank mismatch");
    for (std::size_t i = 1; i < an.shape.size(); ++i)
      CSEG_CHECK(an.shape[i] == bn.shape[i], "concat_channels: trailing extents differ");
    Node n;
    n.op = Op::kConcatCh;
    n.in = {a, b};
    n.shape = an.shape;
    n.shape[0] += bn.shape[0];
    return push_op(std::move(n));
  }

  int upsample_nn(int x, int factor) {
    const Node& xn = node(x);
    CSEG_CHECK(xn.shape.size() == 4, "upsample_nearest: input must be [C,D,H,W]");
    CSEG_CHECK(factor >= 1, "upsample_nearest: factor must be >= 1");
    Node n;
    n.op = Op::kUpsampleNn;
    n.in = {x};
    n.factor = factor;
    n.shape = {xn.shape[0], xn.shape[1] * factor, xn.shape[2] * factor, xn.shape[3] * factor};
    return push_op(std::move(n));
  }

  int downsample_nn(int x, int factor) {
    const Node& xn = node(x);
    CSEG_CHECK(xn.shape.size() == 4, "downsample_nearest: input must be [C,D,H,W]");
    CSEG_CHECK(factor >= 1, "downsample_nearest: factor must be >= 1");
    CSEG_CHECK(xn.shape[1] % factor == 0 && xn.shape[2] % factor == 0 && xn.shape[3] % factor == 0,
               "downsample_nearest: extents not divisible by factor");
    Node n;
    n.op = Op::kDownsampleNn;
    n.in = {x};
    n.factor = factor;
    n.shape = {xn.shape[0], xn.shape[1] / factor, xn.shape[2] / factor, xn.shape[3] / factor};
    return push_op(std::move(n));
  }

  int instnorm(int x, int scale, int shift, double eps = 1e-5) {
    const Node& xn = node(x);
    CSEG_CHECK(xn.shape.size() == 4, "instance_norm: input must be [C,D,H,W]");
    CSEG_CHECK(node(scale).shape == Shape{xn.shape[0]} && node(shift).shape == Shape{xn.shape[0]},
               "instance_norm: scale/shift must be [C]");
    Node n;
    n.op = Op::kInstNorm;
    n.in = {x, scale, shift};
    n.eps = eps;
    n.shape = xn.shape;
    return push_op(std::move(n));
  }

  // ----- execution -----

  void set_input(const std::string& name, const std::vector<double>& values) {
    Node& n = nodes_[lookup(name)];
    CSEG_CHECK(n.op == Op::kInput, "set_input: not an input: " + name);
    CSEG_CHECK(values.size() == n.val.size(),
               "set_input: value count mismatch for " + name + ", expected " + shape_str(n.shape));
    n.val = values;
    n.is_set = true;
    evaluated_ = false;
  }

  void set_input(const std::string& name, const Tensor& t) {
    const Node& n = nodes_[lookup(name)];
    CSEG_CHECK(t.shape == n.shape, "set_input: shape mismatch for " + name + ", expected " +
                                       shape_str(n.shape) + " got " + shape_str(t.shape));
    set_input(name, t.v);
  }

  void forward() {
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) {
      if (nodes_[i].op == Op::kInput)
        CSEG_CHECK(nodes_[i].is_set, "forward: input not set: " + nodes_[i].name);
    }
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) eval(i);
    evaluated_ = true;
  }

  bool evaluated() const { return evaluated_; }

  const std::vector<double>& value(int id) const { return node(id).val; }
  double scalar_value(int id) const {
    CSEG_CHECK(node(id).val.size() == 1, "scalar_value: node is not scalar");
    return node(id).val[0];
  }
  Tensor tensor(int id) const { return Tensor(node(id).shape, node(id).val); }
  const Shape& shape(int id) const { return node(id).shape; }

  // Gradients of a scalar node with respect to every grad-requiring leaf.
  // With accumulate=true, leaf gradients add onto the previous call (used for
  // mini-batch accumulation); activation gradients are always reset.
  void backward(int output, bool accumulate = false) {
    CSEG_CHECK(evaluated_, "backward: graph has not been evaluated");
    CSEG_CHECK(node(output).val.size() == 1, "backward: output must be scalar");
    ensure_grad_buffers();
    for (Node& n : nodes_) {
      if (!n.on_grad_path) continue;
      bool leaf = n.op == Op::kParam || n.op == Op::kInput;
      if (!leaf || !accumulate) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
    if (!nodes_[output].on_grad_path) return;  // output independent of leaves
    nodes_[output].grad[0] = 1.0;
    for (int i = output; i >= 0; --i) {
      if (nodes_[i].on_grad_path && nodes_[i].op != Op::kParam && nodes_[i].op != Op::kInput)
        backprop(i);
    }
  }

  std::map<std::string, Tensor> grad_map() const {
    std::map<std::string, Tensor> out;
    for (int id : param_ids_)
      if (nodes_[id].requires_grad) out.emplace(nodes_[id].name, grad_tensor(id));
    for (int id : input_ids_)
      if (nodes_[id].requires_grad) out.emplace(nodes_[id].name, grad_tensor(id));
    return out;
  }

  const std::vector<double>& grad_of(const std::string& name) const {
    const Node& n = node(lookup(name));
    CSEG_CHECK(n.requires_grad && !n.grad.empty(), "grad_of: no gradient for " + name);
    return n.grad;
  }

  std::vector<double>& param_values(const std::string& name) {
    Node& n = nodes_[lookup(name)];
    CSEG_CHECK(n.op == Op::kParam, "param_values: not a param: " + name);
    evaluated_ = false;
    return n.val;
  }

  const std::vector<int>& param_ids() const { return param_ids_; }
  const std::vector<int>& input_ids() const { return input_ids_; }
  const Node& node_ref(int id) const { return node(id); }
  Node& node_mut(int id) { return nodes_[id]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // p <- p - lr * g over every grad-requiring parameter, in place.
  void sgd_update(double lr, double grad_scale = 1.0) {
    for (int id : param_ids_) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      const double k = lr * grad_scale;
      for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] -= k * n.grad[i];
    }
    evaluated_ = false;
  }

  // global L2 norm of all parameter gradients
  double grad_norm() const {
    double s = 0.0;
    for (int id : param_ids_) {
      const Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      for (double g : n.grad) s += g * g;
    }
    return std::sqrt(s);
  }

  void scale_grads(double k) {
    for (int id : param_ids_) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      for (double& g : n.grad) g *= k;
    }
  }

 private:
  int unary(Op op, int x) {
    Node n;
    n.op = op;
    n.in = {x};
    n.shape = node(x).shape;
    return push_op(std::move(n));
  }

  int binary(Op op, int a, int b) {
    CSEG_CHECK(node(a).shape == node(b).shape,
               std::string(op_name(op)) + ": shape mismatch " + shape_str(node(a).shape) + " vs " +
                   shape_str(node(b).shape));
    Node n;
    n.op = op;
    n.in = {a, b};
    n.shape = node(a).shape;
    return push_op(std::move(n));
  }

  int reduce(Op op, int x) {
    Node n;
    n.op = op;
    n.in = {x};
    n.shape = {1};
    return push_op(std::move(n));
  }

  int push(Node n) {
    n.val.resize(static_cast<size_t>(shape_numel(n.shape)));
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_op(Node n) {
    for (int i : n.in)
      if (node(i).on_grad_path) n.on_grad_path = true;
    return push(std::move(n));
  }

  const Node& node(int id) const {
    CSEG_CHECK(id >= 0 && id < static_cast<int>(nodes_.size()), "bad node id");
    return nodes_[id];
  }

  int lookup(const std::string& name) const {
    auto it = name_to_id_.find(name);
    CSEG_CHECK(it != name_to_id_.end(), "unknown leaf: " + name);
    return it->second;
  }

  Tensor grad_tensor(int id) const {
    const Node& n = node(id);
    Tensor t;
    t.shape = n.shape;
    t.v = n.grad.empty() ? std::vector<double>(n.val.size(), 0.0) : n.grad;
    return t;
  }

  void ensure_grad_buffers() {
    for (Node& n : nodes_)
      if (n.on_grad_path && n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
  }

  // ---------- forward kernels ----------

  void eval(int id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
      case Op::kConst:
        return;
      case Op::kConv3:
        conv3_fwd(n);
        return;
      case Op::kTconv3:
        tconv3_fwd(n);
        return;
      case Op::kDense: {
        const auto& x = nodes_[n.in[0]].val;
        const auto& w = nodes_[n.in[1]].val;
        int m = n.shape[0], nn = static_cast<int>(x.size());
        const double* bias = n.in.size() > 2 ? nodes_[n.in[2]].val.data() : nullptr;
        for (int i = 0; i < m; ++i) {
          double acc = bias ? bias[i] : 0.0;
          const double* row = &w[static_cast<size_t>(i) * nn];
          for (int j = 0; j < nn; ++j) acc += row[j] * x[j];
          n.val[i] = acc;
        }
        return;
      }
      case Op::kRelu: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] > 0.0 ? x[i] : 0.0;
        return;
      }
      case Op::kLrelu: {
        const auto& x = nodes_[n.in[0]].val;
        const double a = n.alpha;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] > 0.0 ? x[i] : a * x[i];
        return;
      }
      case Op::kSigmoid: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = 1.0 / (1.0 + std::exp(-x[i]));
        return;
      }
      case Op::kSoftmaxCh: {
        const auto& x = nodes_[n.in[0]].val;
        const int k = n.shape[0];
        const std::int64_t sp = static_cast<std::int64_t>(x.size()) / k;
        for (std::int64_t v = 0; v < sp; ++v) {
          double mx = x[v];
          for (int c = 1; c < k; ++c) mx = std::max(mx, x[c * sp + v]);
          double z = 0.0;
          for (int c = 0; c < k; ++c) {
            double e = std::exp(x[c * sp + v] - mx);
            n.val[c * sp + v] = e;
            z += e;
          }
          double inv = 1.0 / z;
          for (int c = 0; c < k; ++c) n.val[c * sp + v] *= inv;
        }
        return;
      }
      case Op::kAdd: {
        const auto& a = nodes_[n.in[0]].val;
        const auto& b = nodes_[n.in[1]].val;
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] + b[i];
        return;
      }
      case Op::kSub: {
        const auto& a = nodes_[n.in[0]].val;
        const auto& b = nodes_[n.in[1]].val;
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] - b[i];
        return;
      }
      case Op::kMul: {
        const auto& a = nodes_[n.in[0]].val;
        const auto& b = nodes_[n.in[1]].val;
        for (std::size_t i = 0; i < a.size(); ++i) n.val[i] = a[i] * b[i];
        return;
      }
      case Op::kSum:
      case Op::kMean: {
        const auto& x = nodes_[n.in[0]].val;
        double acc = 0.0;
        for (double xv : x) acc += xv;
        n.val[0] = n.op == Op::kSum ? acc : acc / static_cast<double>(x.size());
        return;
      }
      case Op::kLog: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = std::log(x[i]);
        return;
      }
      case Op::kExp: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = std::exp(x[i]);
        return;
      }
      case Op::kSquare: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = x[i] * x[i];
        return;
      }
      case Op::kAbs: {
        const auto& x = nodes_[n.in[0]].val;
        for (std::size_t i = 0; i < x.size(); ++i) n.val[i] = std::abs(x[i]);
        return;
      }
      case Op::kConcatCh: {
        const auto& a = nodes_[n.in[0]].val;
        const auto& b = nodes_[n.in[1]].val;
        std::copy(a.begin(), a.end(), n.val.begin());
        std::copy(b.begin(), b.end(), n.val.begin() + a.size());
        return;
      }
      case Op::kUpsampleNn: {
        const Node& xn = nodes_[n.in[0]];
        const int f = n.factor;
        const int c = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
        const int idh = xn.shape[2], idw = xn.shape[3], idd = xn.shape[1];
        for (int ch = 0; ch < c; ++ch)
          for (int d = 0; d < od; ++d)
            for (int h = 0; h < oh; ++h) {
              const double* src =
                  &xn.val[((static_cast<size_t>(ch) * idd + d / f) * idh + h / f) * idw];
              double* dst = &n.val[((static_cast<size_t>(ch) * od + d) * oh + h) * ow];
              for (int w = 0; w < ow; ++w) dst[w] = src[w / f];
            }
        return;
      }
      case Op::kDownsampleNn: {
        const Node& xn = nodes_[n.in[0]];
        const int f = n.factor;
        const int c = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
        const int idh = xn.shape[2], idw = xn.shape[3], idd = xn.shape[1];
        for (int ch = 0; ch < c; ++ch)
          for (int d = 0; d < od; ++d)
            for (int h = 0; h < oh; ++h) {
              const double* src =
                  &xn.val[((static_cast<size_t>(ch) * idd + d * f) * idh + h * f) * idw];
              double* dst = &n.val[((static_cast<size_t>(ch) * od + d) * oh + h) * ow];
              for (int w = 0; w < ow; ++w) dst[w] = src[static_cast<size_t>(w) * f];
            }
        return;
      }
      case Op::kInstNorm:
        instnorm_fwd(n);
        return;
    }
  }

  void conv3_fwd(Node& n) {
    const Node& xn = nodes_[n.in[0]];
    const Node& wn = nodes_[n.in[1]];
    const double* bias = n.in.size() > 2 ? nodes_[n.in[2]].val.data() : nullptr;
    const int ic = xn.shape[0], d = xn.shape[1], h = xn.shape[2], w = xn.shape[3];
    const int oc = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
    const int kd = wn.shape[2], kh = wn.shape[3], kw = wn.shape[4];
    const int s = n.stride, p = n.pad;
    const std::int64_t in_ch = static_cast<std::int64_t>(d) * h * w;
    const std::int64_t out_ch = static_cast<std::int64_t>(od) * oh * ow;
    const double* x = xn.val.data();
    const double* wt = wn.val.data();
    double* out = n.val.data();

    const std::int64_t work = static_cast<std::int64_t>(oc) * ic * out_ch * kd * kh * kw;
    parallel_for(oc, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t o = lo; o < hi; ++o) {
        double* slab = out + o * out_ch;
        const double b0 = bias ? bias[o] : 0.0;
        for (std::int64_t i = 0; i < out_ch; ++i) slab[i] = b0;
        for (int i = 0; i < ic; ++i) {
          const double* xin = x + static_cast<std::int64_t>(i) * in_ch;
          const double* wrow = wt + ((o * ic + i) * kd) * kh * kw;
          for (int zd = 0; zd < kd; ++zd)
            for (int zh = 0; zh < kh; ++zh)
              for (int zw = 0; zw < kw; ++zw) {
                const double wv = wrow[(zd * kh + zh) * kw + zw];
                if (wv == 0.0) continue;
                int od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                range(zd, d, od, s, p, od_lo, od_hi);
                range(zh, h, oh, s, p, oh_lo, oh_hi);
                range(zw, w, ow, s, p, ow_lo, ow_hi);
                for (int a = od_lo; a < od_hi; ++a) {
                  const int idd = a * s + zd - p;
                  for (int bq = oh_lo; bq < oh_hi; ++bq) {
                    const int ihh = bq * s + zh - p;
                    const double* src = xin + (static_cast<std::int64_t>(idd) * h + ihh) * w;
                    double* dst = slab + (static_cast<std::int64_t>(a) * oh + bq) * ow;
                    if (s == 1) {
                      const int off = zw - p;
                      for (int c = ow_lo; c < ow_hi; ++c) dst[c] += wv * src[c + off];
                    } else {
                      for (int c = ow_lo; c < ow_hi; ++c) dst[c] += wv * src[c * s + zw - p];
                    }
                  }
                }
              }
        }
      }
    }, 1, work);
  }

  // output index range for which the input index a*s + k - p stays in [0, extent)
  static void range(int k, int in_extent, int out_extent, int s, int p, int& lo, int& hi) {
    int first = p - k;  // need a*s >= first
    lo = first <= 0 ? 0 : (first + s - 1) / s;
    int last = in_extent - 1 + p - k;  // need a*s <= last
    hi = last < 0 ? 0 : std::min(out_extent, last / s + 1);
    if (hi < lo) hi = lo;
  }

  void tconv3_fwd(Node& n) {
    const Node& xn = nodes_[n.in[0]];
    const Node& wn = nodes_[n.in[1]];
    const double* bias = n.in.size() > 2 ? nodes_[n.in[2]].val.data() : nullptr;
    const int ic = xn.shape[0], d = xn.shape[1], h = xn.shape[2], w = xn.shape[3];
    const int oc = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
    const std::int64_t in_ch = static_cast<std::int64_t>(d) * h * w;
    const std::int64_t out_ch = static_cast<std::int64_t>(od) * oh * ow;
    const double* x = xn.val.data();
    const double* wt = wn.val.data();
    double* out = n.val.data();
    const std::int64_t work = static_cast<std::int64_t>(oc) * ic * in_ch * 8;
    parallel_for(oc, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t o = lo; o < hi; ++o) {
        double* slab = out + o * out_ch;
        const double b0 = bias ? bias[o] : 0.0;
        for (std::int64_t i = 0; i < out_ch; ++i) slab[i] = b0;
        for (int i = 0; i < ic; ++i) {
          const double* xin = x + static_cast<std::int64_t>(i) * in_ch;
          const double* wrow = wt + (o * ic + i) * 8;
          for (int zd = 0; zd < 2; ++zd)
            for (int zh = 0; zh < 2; ++zh)
              for (int zw = 0; zw < 2; ++zw) {
                const double wv = wrow[(zd * 2 + zh) * 2 + zw];
                for (int a = 0; a < d; ++a) {
                  double* dst = slab + ((static_cast<std::int64_t>(2 * a + zd)) * oh) * ow;
                  const double* src = xin + static_cast<std::int64_t>(a) * h * w;
                  for (int bq = 0; bq < h; ++bq) {
                    double* drow = dst + static_cast<std::int64_t>(2 * bq + zh) * ow + zw;
                    const double* srow = src + static_cast<std::int64_t>(bq) * w;
                    for (int c = 0; c < w; ++c) drow[2 * c] += wv * srow[c];
                  }
                }
              }
        }
      }
    }, 1, work);
  }

  void instnorm_fwd(Node& n) {
    const Node& xn = nodes_[n.in[0]];
    const double* scale = nodes_[n.in[1]].val.data();
    const double* shift = nodes_[n.in[2]].val.data();
    const int c = n.shape[0];
    const std::int64_t sp = static_cast<std::int64_t>(n.shape[1]) * n.shape[2] * n.shape[3];
    n.aux.assign(static_cast<size_t>(c) * 2, 0.0);
    const double* x = xn.val.data();
    double* out = n.val.data();
    for (int ch = 0; ch < c; ++ch) {
      const double* xc = x + ch * sp;
      double m = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) m += xc[i];
      m /= static_cast<double>(sp);
      double var = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) {
        double dlt = xc[i] - m;
        var += dlt * dlt;
      }
      var /= static_cast<double>(sp);
      const double inv = 1.0 / std::sqrt(var + n.eps);
      n.aux[2 * ch] = m;
      n.aux[2 * ch + 1] = inv;
      double* o = out + ch * sp;
      const double g = scale[ch], b = shift[ch];
      for (std::int64_t i = 0; i < sp; ++i) o[i] = g * (xc[i] - m) * inv + b;
    }
  }

  // ---------- backward kernels ----------

  void backprop(int id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
      case Op::kConst:
        return;
      case Op::kConv3:
        conv3_bwd(n);
        return;
      case Op::kTconv3:
        tconv3_bwd(n);
        return;
      case Op::kDense: {
        Node& xn = nodes_[n.in[0]];
        Node& wn = nodes_[n.in[1]];
        const int m = n.shape[0], nn = static_cast<int>(xn.val.size());
        if (xn.on_grad_path)
          for (int j = 0; j < nn; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += wn.val[static_cast<size_t>(i) * nn + j] * n.grad[i];
            xn.grad[j] += acc;
          }
        if (wn.on_grad_path)
          for (int i = 0; i < m; ++i) {
            const double g = n.grad[i];
            double* row = &wn.grad[static_cast<size_t>(i) * nn];
            for (int j = 0; j < nn; ++j) row[j] += g * xn.val[j];
          }
        if (n.in.size() > 2 && nodes_[n.in[2]].on_grad_path)
          for (int i = 0; i < m; ++i) nodes_[n.in[2]].grad[i] += n.grad[i];
        return;
      }
      case Op::kRelu: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          if (xn.val[i] > 0.0) xn.grad[i] += n.grad[i];
        return;
      }
      case Op::kLrelu: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const double a = n.alpha;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          xn.grad[i] += xn.val[i] > 0.0 ? n.grad[i] : a * n.grad[i];
        return;
      }
      case Op::kSigmoid: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          xn.grad[i] += n.grad[i] * n.val[i] * (1.0 - n.val[i]);
        return;
      }
      case Op::kSoftmaxCh: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const int k = n.shape[0];
        const std::int64_t sp = static_cast<std::int64_t>(n.val.size()) / k;
        for (std::int64_t v = 0; v < sp; ++v) {
          double dot = 0.0;
          for (int c = 0; c < k; ++c) dot += n.grad[c * sp + v] * n.val[c * sp + v];
          for (int c = 0; c < k; ++c)
            xn.grad[c * sp + v] += n.val[c * sp + v] * (n.grad[c * sp + v] - dot);
        }
        return;
      }
      case Op::kAdd: {
        for (int side = 0; side < 2; ++side) {
          Node& an = nodes_[n.in[side]];
          if (!an.on_grad_path) continue;
          for (std::size_t i = 0; i < n.val.size(); ++i) an.grad[i] += n.grad[i];
        }
        return;
      }
      case Op::kSub: {
        if (nodes_[n.in[0]].on_grad_path) {
          Node& an = nodes_[n.in[0]];
          for (std::size_t i = 0; i < n.val.size(); ++i) an.grad[i] += n.grad[i];
        }
        if (nodes_[n.in[1]].on_grad_path) {
          Node& bn = nodes_[n.in[1]];
          for (std::size_t i = 0; i < n.val.size(); ++i) bn.grad[i] -= n.grad[i];
        }
        return;
      }
      case Op::kMul: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.on_grad_path)
          for (std::size_t i = 0; i < n.val.size(); ++i) an.grad[i] += n.grad[i] * bn.val[i];
        if (bn.on_grad_path)
          for (std::size_t i = 0; i < n.val.size(); ++i) bn.grad[i] += n.grad[i] * an.val[i];
        return;
      }
      case Op::kSum: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const double g = n.grad[0];
        for (std::size_t i = 0; i < xn.val.size(); ++i) xn.grad[i] += g;
        return;
      }
      case Op::kMean: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const double g = n.grad[0] / static_cast<double>(xn.val.size());
        for (std::size_t i = 0; i < xn.val.size(); ++i) xn.grad[i] += g;
        return;
      }
      case Op::kLog: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) xn.grad[i] += n.grad[i] / xn.val[i];
        return;
      }
      case Op::kExp: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) xn.grad[i] += n.grad[i] * n.val[i];
        return;
      }
      case Op::kSquare: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i)
          xn.grad[i] += n.grad[i] * 2.0 * xn.val[i];
        return;
      }
      case Op::kAbs: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const double x = xn.val[i];
          xn.grad[i] += x > 0.0 ? n.grad[i] : (x < 0.0 ? -n.grad[i] : 0.0);
        }
        return;
      }
      case Op::kConcatCh: {
        Node& an = nodes_[n.in[0]];
        Node& bn = nodes_[n.in[1]];
        if (an.on_grad_path)
          for (std::size_t i = 0; i < an.val.size(); ++i) an.grad[i] += n.grad[i];
        if (bn.on_grad_path)
          for (std::size_t i = 0; i < bn.val.size(); ++i) bn.grad[i] += n.grad[an.val.size() + i];
        return;
      }
      case Op::kUpsampleNn: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const int f = n.factor;
        const int c = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
        const int idd = xn.shape[1], idh = xn.shape[2], idw = xn.shape[3];
        for (int ch = 0; ch < c; ++ch)
          for (int d = 0; d < od; ++d)
            for (int h = 0; h < oh; ++h) {
              double* dst = &xn.grad[((static_cast<size_t>(ch) * idd + d / f) * idh + h / f) * idw];
              const double* src = &n.grad[((static_cast<size_t>(ch) * od + d) * oh + h) * ow];
              for (int w = 0; w < ow; ++w) dst[w / f] += src[w];
            }
        return;
      }
      case Op::kDownsampleNn: {
        Node& xn = nodes_[n.in[0]];
        if (!xn.on_grad_path) return;
        const int f = n.factor;
        const int c = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
        const int idd = xn.shape[1], idh = xn.shape[2], idw = xn.shape[3];
        for (int ch = 0; ch < c; ++ch)
          for (int d = 0; d < od; ++d)
            for (int h = 0; h < oh; ++h) {
              double* dst = &xn.grad[((static_cast<size_t>(ch) * idd + d * f) * idh + h * f) * idw];
              const double* src = &n.grad[((static_cast<size_t>(ch) * od + d) * oh + h) * ow];
              for (int w = 0; w < ow; ++w) dst[static_cast<size_t>(w) * f] += src[w];
            }
        return;
      }
      case Op::kInstNorm:
        instnorm_bwd(n);
        return;
    }
  }

  void conv3_bwd(Node& n) {
    Node& xn = nodes_[n.in[0]];
    Node& wn = nodes_[n.in[1]];
    const int ic = xn.shape[0], d = xn.shape[1], h = xn.shape[2], w = xn.shape[3];
    const int oc = n.shape[0], od = n.shape[1], oh = n.shape[2], ow = n.shape[3];
    const int kd = wn.shape[2], kh = wn.shape[3], kw = wn.shape[4];
    const int s = n.stride, p = n.pad;
    const std::int64_t in_ch = static_cast<std::int64_t>(d) * h * w;
    const std::int64_t out_ch = static_cast<std::int64_t>(od) * oh * ow;

    const std::int64_t work =
        static_cast<std::int64_t>(oc) * ic * out_ch * kd * kh * kw;
    if (xn.on_grad_path) {
      const double* wt = wn.val.data();
      const double* go = n.grad.data();
      double* gx = xn.grad.data();
      parallel_for(ic, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
          double* gslab = gx + i * in_ch;
          for (int o = 0; o < oc; ++o) {
            const double* gout = go + static_cast<std::int64_t>(o) * out_ch;
            const double* wrow = wt + ((static_cast<std::int64_t>(o) * ic + i) * kd) * kh * kw;
            for (int zd = 0; zd < kd; ++zd)
              for (int zh = 0; zh < kh; ++zh)
                for (int zw = 0; zw < kw; ++zw) {
                  const double wv = wrow[(zd * kh + zh) * kw + zw];
                  if (wv == 0.0) continue;
                  int od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                  range(zd, d, od, s, p, od_lo, od_hi);
                  range(zh, h, oh, s, p, oh_lo, oh_hi);
                  range(zw, w, ow, s, p, ow_lo, ow_hi);
                  for (int a = od_lo; a < od_hi; ++a) {
                    const int idd = a * s + zd - p;
                    for (int bq = oh_lo; bq < oh_hi; ++bq) {
                      const int ihh = bq * s + zh - p;
                      double* drow = gslab + (static_cast<std::int64_t>(idd) * h + ihh) * w;
                      const double* grow = gout + (static_cast<std::int64_t>(a) * oh + bq) * ow;
                      if (s == 1) {
                        const int off = zw - p;
                        for (int c = ow_lo; c < ow_hi; ++c) drow[c + off] += wv * grow[c];
                      } else {
                        for (int c = ow_lo; c < ow_hi; ++c) drow[c * s + zw - p] += wv * grow[c];
                      }
                    }
                  }
                }
          }
        }
      }, 1, work);
    }

    if (wn.on_grad_path) {
      const double* x = xn.val.data();
      const double* go = n.grad.data();
      double* gw = wn.grad.data();
      parallel_for(oc, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t o = lo; o < hi; ++o) {
          const double* gout = go + o * out_ch;
          for (int i = 0; i < ic; ++i) {
            const double* xin = x + static_cast<std::int64_t>(i) * in_ch;
            double* wrow = gw + ((o * ic + i) * kd) * kh * kw;
            for (int zd = 0; zd < kd; ++zd)
              for (int zh = 0; zh < kh; ++zh)
                for (int zw = 0; zw < kw; ++zw) {
                  int od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi;
                  range(zd, d, od, s, p, od_lo, od_hi);
                  range(zh, h, oh, s, p, oh_lo, oh_hi);
                  range(zw, w, ow, s, p, ow_lo, ow_hi);
                  double acc = 0.0;
                  for (int a = od_lo; a < od_hi; ++a) {
                    const int idd = a * s + zd - p;
                    for (int bq = oh_lo; bq < oh_hi; ++bq) {
                      const int ihh = bq * s + zh - p;
                      const double* src = xin + (static_cast<std::int64_t>(idd) * h + ihh) * w;
                      const double* grow = gout + (static_cast<std::int64_t>(a) * oh + bq) * ow;
                      if (s == 1) {
                        const int off = zw - p;
                        for (int c = ow_lo; c < ow_hi; ++c) acc += src[c + off] * grow[c];
                      } else {
                        for (int c = ow_lo; c < ow_hi; ++c) acc += src[c * s + zw - p] * grow[c];
                      }
                    }
                  }
                  wrow[(zd * kh + zh) * kw + zw] += acc;
                }
          }
        }
      }, 1, work);
    }

    if (n.in.size() > 2 && nodes_[n.in[2]].on_grad_path) {
      Node& bn = nodes_[n.in[2]];
      for (int o = 0; o < oc; ++o) {
        double acc = 0.0;
        const double* gout = n.grad.data() + static_cast<std::int64_t>(o) * out_ch;
        for (std::int64_t i = 0; i < out_ch; ++i) acc += gout[i];
        bn.grad[o] += acc;
      }
    }
  }

  void tconv3_bwd(Node& n) {
    Node& xn = nodes_[n.in[0]];
    Node& wn = nodes_[n.in[1]];
    const int ic = xn.shape[0], d = xn.shape[1], h = xn.shape[2], w = xn.shape[3];
    const int oc = n.shape[0], oh = n.shape[2], ow = n.shape[3];
    const std::int64_t in_ch = static_cast<std::int64_t>(d) * h * w;
    const std::int64_t out_ch = static_cast<std::int64_t>(n.shape[1]) * oh * ow;

    const std::int64_t work = static_cast<std::int64_t>(oc) * ic * in_ch * 8;
    if (xn.on_grad_path) {
      double* gx = xn.grad.data();
      const double* wt = wn.val.data();
      const double* go = n.grad.data();
      parallel_for(ic, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
          double* gslab = gx + i * in_ch;
          for (int o = 0; o < oc; ++o) {
            const double* gout = go + static_cast<std::int64_t>(o) * out_ch;
            const double* wrow = wt + (static_cast<std::int64_t>(o) * ic + i) * 8;
            for (int zd = 0; zd < 2; ++zd)
              for (int zh = 0; zh < 2; ++zh)
                for (int zw = 0; zw < 2; ++zw) {
                  const double wv = wrow[(zd * 2 + zh) * 2 + zw];
                  for (int a = 0; a < d; ++a)
                    for (int bq = 0; bq < h; ++bq) {
                      double* drow = gslab + (static_cast<std::int64_t>(a) * h + bq) * w;
                      const double* grow =
                          gout + ((static_cast<std::int64_t>(2 * a + zd)) * oh + 2 * bq + zh) * ow +
                          zw;
                      for (int c = 0; c < w; ++c) drow[c] += wv * grow[2 * c];
                    }
                }
          }
        }
      }, 1, work);
    }
    if (wn.on_grad_path) {
      const double* x = xn.val.data();
      const double* go = n.grad.data();
      double* gw = wn.grad.data();
      parallel_for(oc, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t o = lo; o < hi; ++o) {
          const double* gout = go + o * out_ch;
          for (int i = 0; i < ic; ++i) {
            const double* xin = x + static_cast<std::int64_t>(i) * in_ch;
            double* wrow = gw + (o * ic + i) * 8;
            for (int zd = 0; zd < 2; ++zd)
              for (int zh = 0; zh < 2; ++zh)
                for (int zw = 0; zw < 2; ++zw) {
                  double acc = 0.0;
                  for (int a = 0; a < d; ++a)
                    for (int bq = 0; bq < h; ++bq) {
                      const double* srow = xin + (static_cast<std::int64_t>(a) * h + bq) * w;
                      const double* grow =
                          gout + ((static_cast<std::int64_t>(2 * a + zd)) * oh + 2 * bq + zh) * ow +
                          zw;
                      for (int c = 0; c < w; ++c) acc += srow[c] * grow[2 * c];
                    }
                  wrow[(zd * 2 + zh) * 2 + zw] += acc;
                }
          }
        }
      }, 1, work);
    }
    if (n.in.size() > 2 && nodes_[n.in[2]].on_grad_path) {
      Node& bn = nodes_[n.in[2]];
      for (int o = 0; o < oc; ++o) {
        double acc = 0.0;
        const double* gout = n.grad.data() + static_cast<std::int64_t>(o) * out_ch;
        for (std::int64_t i = 0; i < out_ch; ++i) acc += gout[i];
        bn.grad[o] += acc;
      }
    }
  }

  void instnorm_bwd(Node& n) {
    Node& xn = nodes_[n.in[0]];
    Node& sn = nodes_[n.in[1]];
    Node& bn = nodes_[n.in[2]];
    const int c = n.shape[0];
    const std::int64_t sp = static_cast<std::int64_t>(n.shape[1]) * n.shape[2] * n.shape[3];
    for (int ch = 0; ch < c; ++ch) {
      const double m = n.aux[2 * ch];
      const double inv = n.aux[2 * ch + 1];
      const double g = sn.val[ch];
      const double* x = xn.val.data() + ch * sp;
      const double* gy = n.grad.data() + ch * sp;
      double sum_gy = 0.0, sum_gyx = 0.0;
      for (std::int64_t i = 0; i < sp; ++i) {
        const double xhat = (x[i] - m) * inv;
        sum_gy += gy[i];
        sum_gyx += gy[i] * xhat;
      }
      if (sn.on_grad_path) sn.grad[ch] += sum_gyx;
      if (bn.on_grad_path) bn.grad[ch] += sum_gy;
      if (xn.on_grad_path) {
        double* gx = xn.grad.data() + ch * sp;
        const double mean_gy = sum_gy / static_cast<double>(sp);
        const double mean_gyx = sum_gyx / static_cast<double>(sp);
        const double k = g * inv;
        for (std::int64_t i = 0; i < sp; ++i) {
          const double xhat = (x[i] - m) * inv;
          gx[i] += k * (gy[i] - mean_gy - xhat * mean_gyx);
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> name_to_id_;
  std::vector<int> param_ids_;
  std::vector<int> input_ids_;
  bool evaluated_ = false;
};

// a / b for strictly positive scalars, built from the closed op set
inline int positive_ratio(Graph& g, int num, int den) {
  return g.exp(g.sub(g.log(num), g.log(den)));
}

}  // namespace counterseg

#endif
