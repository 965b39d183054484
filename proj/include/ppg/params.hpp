#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ppg/gradcheck.hpp"
#include "ppg/rng.hpp"
#include "ppg/tensor.hpp"

namespace ppg {

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Flat registry of every named parameter tensor in a model. Registration
// order is stable and defines checkpoint order.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor tensor, bool trainable);

  const std::vector<Param>& all() const { return params_; }
  std::vector<Param> trainable() const;
  std::vector<Param> frozen() const;
  const Param* find(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t numel(bool trainable) const;

  // Flips the trainable flag (and requires_grad) of every parameter whose
  // name satisfies `pred`. Returns how many were changed.
  std::size_t set_trainable(const std::function<bool(const std::string&)>& pred, bool on);

  std::vector<NamedTensor> named_tensors() const;
  void zero_grad();

 private:
  std::vector<Param> params_;
};

// Creates and registers initialized tensors under a dotted name prefix.
class ParamBuilder {
 public:
  ParamBuilder(ParamStore& store, Rng& rng, std::string prefix = {}, bool trainable = true)
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)), trainable_(trainable) {}

  ParamBuilder scope(const std::string& name) const;
  ParamBuilder frozen() const;
  ParamBuilder trainable() const;
  bool is_trainable() const { return trainable_; }
  const std::string& prefix() const { return prefix_; }
  Rng& rng() const { return *rng_; }

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor kaiming_uniform(const std::string& name, Shape shape, std::size_t fan_in) const;
  Tensor uniform(const std::string& name, Shape shape, double lo, double hi) const;
  Tensor normal(const std::string& name, Shape shape, double stddev) const;
  Tensor zeros(const std::string& name, Shape shape) const;
  Tensor ones(const std::string& name, Shape shape) const;
  Tensor constant(const std::string& name, Shape shape, double value) const;
  Tensor adopt(const std::string& name, Tensor t) const;

 private:
  std::string full(const std::string& name) const;

  ParamStore* store_;
  Rng* rng_;
  std::string prefix_;
  bool trainable_;
};

}  // namespace ppg
