#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scd/rng.hpp"
#include "scd/tensor.hpp"

namespace scd {

// A named learnable tensor plus its SGD momentum buffer.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> momentum;

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
    momentum.assign(static_cast<std::size_t>(tensor.size()), 0.0);
  }
};

// Owns all parameters of a model, keyed by hierarchical name. std::map keeps
// iteration in canonical (lexicographic) order, which the checkpoint format
// and deterministic updates rely on.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (params_.count(name))
      throw StateError("duplicate parameter name: " + name);
    auto [it, ok] = params_.emplace(name, Parameter(name, std::move(t)));
    (void)ok;
    return it->second.tensor;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Parameter>& all() { return params_; }
  const std::map<std::string, Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& [name, p] : params_) p.tensor.zero_grad();
  }

  std::int64_t total_values() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.tensor.size();
    return n;
  }

 private:
  std::map<std::string, Parameter> params_;
};

// Fan-in-scaled normal initialization (std = sqrt(2/fan_in)).
inline void init_normal_fan_in(Tensor& t, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
}

}  // namespace scd
