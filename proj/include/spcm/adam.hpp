#pragma once

#include <cmath>
#include <vector>

#include "spcm/autograd.hpp"
#include "spcm/common.hpp"

namespace spcm {

// Adam with mini-batch gradient accumulation. Callers accumulate per-batch
// mean gradients into Parameter::grad, announce each batch via add_batch(),
// and step() averages over the accumulated batches so the effective learning
// rate does not depend on the accumulation count.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr = 1e-3, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8, std::size_t accumulation = 4)
      : params_(std::move(params)),
        lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        accumulation_(accumulation) {
    if (accumulation_ == 0) throw Error("adam: accumulation must be >= 1");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
      m_.push_back(Tensor::zeros(p->value.shape));
      v_.push_back(Tensor::zeros(p->value.shape));
    }
  }

  std::size_t accumulation() const { return accumulation_; }
  std::size_t pending_batches() const { return batches_; }
  std::size_t steps_taken() const { return t_; }

  void add_batch() { ++batches_; }
  bool ready() const { return batches_ >= accumulation_; }

  void step() {
    if (batches_ == 0) throw Error("adam: step with zero accumulated batches");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    const double inv_batches = 1.0 / double(batches_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter* p = params_[i];
      if (!p->active()) continue;
      for (std::size_t j = 0; j < p->value.numel(); ++j) {
        const double g = p->grad[j] * inv_batches;
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        p->value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      p->zero_grad();
    }
    batches_ = 0;
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t accumulation_;
  std::size_t batches_ = 0;
  std::size_t t_ = 0;
};

}  // namespace spcm
