#ifndef COUNTERSEG_PARAMS_HPP
#define COUNTERSEG_PARAMS_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "counterseg/graph.hpp"
#include "counterseg/tensor.hpp"

namespace counterseg {

// Named model parameters. Shapes are fixed at insertion time.
class ParameterSet {
 public:
  void insert(const std::string& name, Tensor t) {
    CSEG_CHECK(values_.find(name) == values_.end(), "duplicate parameter: " + name);
    values_.emplace(name, std::move(t));
  }

  const Tensor& at(const std::string& name) const {
    auto it = values_.find(name);
    CSEG_CHECK(it != values_.end(), "unknown parameter: " + name);
    return it->second;
  }

  void assign(const std::string& name, const Tensor& t) {
    auto it = values_.find(name);
    CSEG_CHECK(it != values_.end(), "unknown parameter: " + name);
    CSEG_CHECK(it->second.shape == t.shape, "parameter shape is immutable: " + name);
    it->second.v = t.v;
  }

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  std::size_t size() const { return values_.size(); }
  const std::map<std::string, Tensor>& items() const { return values_; }
  std::map<std::string, Tensor>& items_mut() { return values_; }

  static ParameterSet from_graph(const Graph& g) {
    ParameterSet ps;
    for (int id : g.param_ids()) {
      const auto& n = g.node_ref(id);
      ps.insert(n.name, Tensor(n.shape, n.val));
    }
    return ps;
  }

  void load_into(Graph& g) const {
    for (int id : g.param_ids()) {
      auto& n = g.node_mut(id);
      const Tensor& t = at(n.name);
      CSEG_CHECK(t.shape == n.shape, "load_into: shape mismatch for " + n.name);
      n.val = t.v;
    }
  }

 private:
  std::map<std::string, Tensor> values_;
};

// p <- p - lr * g, elementwise; every parameter must have a gradient entry.
inline ParameterSet sgd_step(const ParameterSet& params, const std::map<std::string, Tensor>& grads,
                             double lr) {
  CSEG_CHECK(lr >= 0.0, "sgd_step: learning rate must be non-negative");
  ParameterSet out;
  for (const auto& [name, p] : params.items()) {
    auto it = grads.find(name);
    CSEG_CHECK(it != grads.end(), "sgd_step: missing gradient for " + name);
    CSEG_CHECK(it->second.shape == p.shape, "sgd_step: gradient shape mismatch for " + name);
    Tensor q = p;
    for (std::size_t i = 0; i < q.v.size(); ++i) q.v[i] -= lr * it->second.v[i];
    out.insert(name, std::move(q));
  }
  return out;
}

// ----- spec-level graph entry points -----

inline std::map<std::string, Tensor> forward(Graph& g,
                                             const std::map<std::string, Tensor>& inputs,
                                             const std::map<std::string, int>& outputs) {
  for (const auto& [name, t] : inputs) g.set_input(name, t);
  g.forward();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs) out.emplace(name, g.tensor(id));
  return out;
}

inline std::map<std::string, Tensor> backward(Graph& g, int scalar_output) {
  g.backward(scalar_output);
  return g.grad_map();
}

// ----- serialization: one little-endian f64 raw file per parameter + manifest -----

namespace detail {
inline void write_raw_f64(const std::filesystem::path& path, const std::vector<double>& v) {
  std::ofstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot open for write: " + path.string());
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  CSEG_RUNTIME_CHECK(f.good(), "write failed: " + path.string());
}

inline std::vector<double> read_raw_f64(const std::filesystem::path& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot open for read: " + path.string());
  std::vector<double> v(count);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
  CSEG_RUNTIME_CHECK(f.gcount() == static_cast<std::streamsize>(count * sizeof(double)),
                     "short read: " + path.string());
  return v;
}

inline std::string sanitize_filename(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == ':') c = '_';
  return out;
}
}  // namespace detail

inline void save_params(const ParameterSet& ps, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  for (const auto& [name, t] : ps.items()) {
    std::string file = detail::sanitize_filename(name) + ".f64";
    detail::write_raw_f64(dir / file, t.v);
    manifest[name] = {
        {"shape", t.shape},
        {"file", file},
        {"checksum", checksum_hex(t.v.data(), t.v.size() * sizeof(double))},
    };
  }
  std::ofstream f(dir / "manifest.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

inline ParameterSet load_params(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  CSEG_RUNTIME_CHECK(f.good(), "cannot read manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  ParameterSet ps;
  for (auto it = manifest.begin(); it != manifest.end(); ++it) {
    Shape shape = it.value().at("shape").get<Shape>();
    std::string file = it.value().at("file").get<std::string>();
    auto v = detail::read_raw_f64(dir / file, static_cast<std::size_t>(shape_numel(shape)));
    std::string sum = checksum_hex(v.data(), v.size() * sizeof(double));
    CSEG_RUNTIME_CHECK(sum == it.value().at("checksum").get<std::string>(),
                       "checksum mismatch for parameter " + it.key());
    ps.insert(it.key(), Tensor(std::move(shape), std::move(v)));
  }
  return ps;
}

}  // namespace counterseg

#endif
