#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "spcm/autograd.hpp"
#include "spcm/rng.hpp"

namespace spcm {

// Owns Parameter storage. deque keeps addresses stable, which matters because
// tapes and optimizers hold Parameter pointers.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& zeros(const std::string& name, const std::vector<std::size_t>& shape) {
    return constant(name, shape, 0.0);
  }

  Parameter& constant(const std::string& name, const std::vector<std::size_t>& shape, double v) {
    Parameter& p = emplace(name, shape);
    std::fill(p.value.data.begin(), p.value.data.end(), v);
    return p;
  }

  // Glorot uniform; fan counts from conv [Cout,Cin,kh,kw] or matrix [M,N] shape
  Parameter& glorot(const std::string& name, const std::vector<std::size_t>& shape, Rng& rng) {
    Parameter& p = emplace(name, shape);
    double fan_in = 0, fan_out = 0;
    if (shape.size() == 4) {
      const double rf = double(shape[2] * shape[3]);
      fan_in = double(shape[1]) * rf;
      fan_out = double(shape[0]) * rf;
    } else if (shape.size() == 2) {
      fan_in = double(shape[1]);
      fan_out = double(shape[0]);
    } else {
      throw ShapeError(strf("glorot init on rank-%zu parameter '%s'", shape.size(),
                            name.c_str()));
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : p.value.data) v = rng.uniform(-limit, limit);
    return p;
  }

  Parameter* find(const std::string& name) {
    for (Parameter& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (Parameter& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) n += p.value.numel();
    return n;
  }

 private:
  Parameter& emplace(const std::string& name, const std::vector<std::size_t>& shape) {
    if (find(name)) throw Error(strf("parameter '%s' already exists", name.c_str()));
    Parameter p;
    p.name = name;
    p.value = Tensor(shape);
    p.grad = Tensor(shape);
    params_.push_back(std::move(p));
    return params_.back();
  }

  std::deque<Parameter> params_;
};

}  // namespace spcm
