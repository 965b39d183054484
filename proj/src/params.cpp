#include "ppg/params.hpp"

#include <cmath>

#include "ppg/errors.hpp"

namespace ppg {

Tensor ParamStore::add(std::string name, Tensor tensor, bool trainable) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(trainable);
  params_.push_back({std::move(name), tensor, trainable});
  return tensor;
}

std::vector<Param> ParamStore::trainable() const {
  std::vector<Param> out;
  for (const auto& p : params_)
    if (p.trainable) out.push_back(p);
  return out;
}

std::vector<Param> ParamStore::frozen() const {
  std::vector<Param> out;
  for (const auto& p : params_)
    if (!p.trainable) out.push_back(p);
  return out;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParamStore::numel(bool trainable) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable == trainable) n += p.tensor.numel();
  return n;
}

std::size_t ParamStore::set_trainable(const std::function<bool(const std::string&)>& pred, bool on) {
  std::size_t changed = 0;
  for (auto& p : params_) {
    if (!pred(p.name) || p.trainable == on) continue;
    p.trainable = on;
    p.tensor.set_requires_grad(on);
    ++changed;
  }
  return changed;
}

std::vector<NamedTensor> ParamStore::named_tensors() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p.name, p.tensor});
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

ParamBuilder ParamBuilder::scope(const std::string& name) const {
  ParamBuilder b = *this;
  b.prefix_ = full(name);
  return b;
}

ParamBuilder ParamBuilder::frozen() const {
  ParamBuilder b = *this;
  b.trainable_ = false;
  return b;
}

ParamBuilder ParamBuilder::trainable() const {
  ParamBuilder b = *this;
  b.trainable_ = true;
  return b;
}

std::string ParamBuilder::full(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

Tensor ParamBuilder::kaiming_uniform(const std::string& name, Shape shape, std::size_t fan_in) const {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform(name, std::move(shape), -bound, bound);
}

Tensor ParamBuilder::uniform(const std::string& name, Shape shape, double lo, double hi) const {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng_->uniform(lo, hi);
  return adopt(name, t);
}

Tensor ParamBuilder::normal(const std::string& name, Shape shape, double stddev) const {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng_->normal(0.0, stddev);
  return adopt(name, t);
}

Tensor ParamBuilder::zeros(const std::string& name, Shape shape) const { return adopt(name, Tensor::zeros(std::move(shape))); }

Tensor ParamBuilder::ones(const std::string& name, Shape shape) const { return constant(name, std::move(shape), 1.0); }

Tensor ParamBuilder::constant(const std::string& name, Shape shape, double value) const {
  return adopt(name, Tensor::full(std::move(shape), value));
}

Tensor ParamBuilder::adopt(const std::string& name, Tensor t) const { return store_->add(full(name), t, trainable_); }

}  // namespace ppg
