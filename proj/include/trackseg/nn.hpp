#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "trackseg/rng.hpp"
#include "trackseg/tape.hpp"
#include "trackseg/tensor.hpp"

namespace trackseg {

// Named trainable tensors plus their gradients and first-order optimizer
// state. std::map keeps iteration order (and therefore every update and
// serialization) deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    auto [it, fresh] = params_.emplace(name, std::move(init));
    if (!fresh) throw std::invalid_argument("param already registered: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown param: " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown param: " + name);
    return it->second;
  }

  // Bind a parameter as a tape leaf; bindings are remembered so that
  // collect_grads can route adjoint values back by name.
  Var use(Tape& t, const std::string& name) {
    Var v = t.leaf(get(name));
    bound_.emplace_back(name, v);
    return v;
  }
  void bind_begin() { bound_.clear(); }

  void zero_grads() {
    for (auto& [name, p] : params_) grads_[name] = Tensor(p.rows, p.cols);
  }

  void collect_grads(const Tape& t) {
    for (const auto& [name, var] : bound_) {
      const Tensor& g = t.grad(var);
      if (g.empty()) continue;
      Tensor& acc = grads_[name];
      if (acc.empty()) acc = Tensor(g.rows, g.cols);
      for (std::size_t k = 0; k < g.size(); ++k) acc.data[k] += g.data[k];
    }
  }

  Tensor& grad(const std::string& name) {
    Tensor& g = grads_[name];
    if (g.empty()) {
      const Tensor& p = get(name);
      g = Tensor(p.rows, p.cols);
    }
    return g;
  }

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& adam_m() { return m_; }
  std::map<std::string, Tensor>& adam_v() { return v_; }
  const std::map<std::string, Tensor>& adam_m() const { return m_; }
  const std::map<std::string, Tensor>& adam_v() const { return v_; }
  long& step_count() { return step_; }
  long step_count() const { return step_; }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> grads_;
  std::map<std::string, Tensor> m_, v_;
  long step_ = 0;
  std::vector<std::pair<std::string, Var>> bound_;
};

inline Tensor uniform_init(Rng& rng, int rows, int cols, int fan_in) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(rows, cols);
  for (double& v : t.data) v = rng.uniform(-b, b);
  return t;
}

// Registers a multilayer perceptron <prefix>.w0/.b0/... with rectifier
// hidden activations and a linear output layer.
inline void register_mlp(ParamStore& ps, const std::string& prefix, const std::vector<int>& dims,
                         Rng& rng) {
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::string idx = std::to_string(l);
    ps.add(prefix + ".w" + idx, uniform_init(rng, dims[l + 1], dims[l], dims[l]));
    ps.add(prefix + ".b" + idx, uniform_init(rng, 1, dims[l + 1], dims[l]));
  }
}

inline int mlp_layer_count(const ParamStore& ps, const std::string& prefix) {
  int n = 0;
  while (ps.has(prefix + ".w" + std::to_string(n))) ++n;
  return n;
}

inline Var mlp_forward(Tape& t, ParamStore& ps, const std::string& prefix, Var x) {
  const int layers = mlp_layer_count(ps, prefix);
  if (layers == 0) throw std::out_of_range("unknown mlp: " + prefix);
  Var h = x;
  for (int l = 0; l < layers; ++l) {
    const std::string idx = std::to_string(l);
    Var w = ps.use(t, prefix + ".w" + idx);
    Var b = ps.use(t, prefix + ".b" + idx);
    h = t.add_bcast(t.matmul_nt(h, w), b);
    if (l + 1 < layers) h = t.relu(h);
  }
  return h;
}

// Standalone MLP value type for small self-contained uses and tests; the
// pipeline itself routes everything through a ParamStore.
struct Mlp {
  std::vector<Tensor> w;  // per layer, (out x in)
  std::vector<Tensor> b;  // per layer, (1 x out)

  static Mlp make(const std::vector<int>& dims, Rng& rng) {
    Mlp m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      m.w.push_back(uniform_init(rng, dims[l + 1], dims[l], dims[l]));
      m.b.push_back(uniform_init(rng, 1, dims[l + 1], dims[l]));
    }
    return m;
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t l = 0; l < w.size(); ++l) {
      if (h.cols != w[l].cols) throw std::invalid_argument("mlp_forward: shape mismatch");
      Tensor z = matmul_nt(h, w[l]);
      for (int i = 0; i < z.rows; ++i)
        for (int j = 0; j < z.cols; ++j) z.at(i, j) += b[l].at(0, j);
      if (l + 1 < w.size())
        for (double& v : z.data) v = v > 0.0 ? v : 0.0;
      h = std::move(z);
    }
    return h;
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment update with decoupled weight decay. Throws on non-finite
// gradients so a training loop can roll back to its last good state.
inline void optimizer_step(ParamStore& ps, const AdamConfig& cfg) {
  const long t = ++ps.step_count();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, p] : ps.params()) {
    const Tensor& g = ps.grad(name);
    if (!g.all_finite()) throw std::runtime_error("diverged: non-finite gradient in " + name);
    Tensor& m = ps.adam_m()[name];
    Tensor& v = ps.adam_v()[name];
    if (m.empty()) m = Tensor(p.rows, p.cols);
    if (v.empty()) v = Tensor(p.rows, p.cols);
    for (std::size_t k = 0; k < p.size(); ++k) {
      m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * g.data[k];
      v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * g.data[k] * g.data[k];
      const double mhat = m.data[k] / bc1;
      const double vhat = v.data[k] / bc2;
      p.data[k] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.data[k]);
    }
  }
}

// Compares analytic gradients against central finite differences over every
// registered parameter. `eval(ps, want_grads)` must return the loss and, when
// asked, leave gradients in the store. Returns the worst relative error.
inline double grad_check(const std::function<double(ParamStore&, bool)>& eval, ParamStore& ps,
                         double eps = 1e-5) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
  ps.zero_grads();
  const double f0 = eval(ps, true);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite loss");
  std::map<std::string, Tensor> analytic;
  for (auto& [name, p] : ps.params()) analytic[name] = ps.grad(name);

  double worst = 0.0;
  for (auto& [name, p] : ps.params()) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double orig = p.data[k];
      p.data[k] = orig + eps;
      const double fp = eval(ps, false);
      p.data[k] = orig - eps;
      const double fm = eval(ps, false);
      p.data[k] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite loss at perturbed point");
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[name].data[k];
      const double rel = std::fabs(num - ana) / std::max({1.0, std::fabs(num), std::fabs(ana)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace trackseg
