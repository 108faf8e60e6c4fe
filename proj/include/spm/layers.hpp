#pragma once

// Parameter factory and the small parameterized layers shared by every block.

#include <cmath>
#include <random>
#include <string>
#include <utility>

#include "spm/ops.hpp"

namespace spm {

/// Creates parameters under a dotted name prefix, drawing from a shared RNG.
class ParamFactory {
 public:
  ParamFactory(ParamStore& store, std::mt19937_64& rng, std::string prefix = {})
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamFactory sub(const std::string& name) const { return ParamFactory(*store_, *rng_, full(name)); }

  std::string full(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  Var uniform(const std::string& name, Shape shape, double bound) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.storage()) v = dist(*rng_);
    return store_->add(full(name), std::move(t));
  }

  Var filled(const std::string& name, Shape shape, double value) {
    return store_->add(full(name), Tensor(std::move(shape), value));
  }

  Var from(const std::string& name, Tensor t) { return store_->add(full(name), std::move(t)); }

  std::mt19937_64& rng() { return *rng_; }
  ParamStore& store() { return *store_; }

 private:
  ParamStore* store_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

struct LinearParams {
  Var weight;  // [in,out]
  Var bias;    // [out] or undefined

  static LinearParams make(ParamFactory f, std::size_t in, std::size_t out, bool with_bias = true) {
    LinearParams p;
    p.weight = f.uniform("weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    if (with_bias) p.bias = f.filled("bias", {out}, 0.0);
    return p;
  }

  Var operator()(const Var& x) const { return linear(x, weight, bias); }
};

struct NormParams {
  Var gamma;
  Var beta;
  double eps = 1e-5;

  static NormParams make(ParamFactory f, std::size_t channels) {
    return {f.filled("gamma", {channels}, 1.0), f.filled("beta", {channels}, 0.0)};
  }

  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta, eps); }
};

}  // namespace spm
