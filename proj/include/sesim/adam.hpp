#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "sesim/tensor.hpp"

namespace sesim {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment state, keyed by parameter name. The step counter is
// shared: call begin_step() once per optimization step, then update() for
// each parameter tensor.
template <class Scalar>
struct AdamState {
  AdamParams params;
  std::map<std::string, Tensor<Scalar>> m, v;
  long step = 0;

  explicit AdamState(AdamParams p = {}) : params(p) {}

  void begin_step() { ++step; }

  void update(const std::string& name, Tensor<Scalar>& value,
              const Tensor<Scalar>& grad) {
    if (!value.same_shape(grad))
      throw std::invalid_argument("AdamState: gradient shape mismatch for '" + name + "'");
    if (step < 1) throw std::logic_error("AdamState: begin_step() before update()");
    auto [mi, inserted_m] = m.try_emplace(name, value.batch(), value.channels(),
                                          value.height(), value.width());
    if (inserted_m) mi->second.array().setZero();
    auto [vi, inserted_v] = v.try_emplace(name, value.batch(), value.channels(),
                                          value.height(), value.width());
    if (inserted_v) vi->second.array().setZero();
    if (!mi->second.same_shape(value))
      throw std::invalid_argument("AdamState: parameter '" + name + "' changed shape");

    const Scalar b1 = static_cast<Scalar>(params.beta1);
    const Scalar b2 = static_cast<Scalar>(params.beta2);
    auto& ma = mi->second.array();
    auto& va = vi->second.array();
    ma = b1 * ma + (Scalar(1) - b1) * grad.array();
    va = b2 * va + (Scalar(1) - b2) * grad.array().square();

    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(params.beta1, step));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(params.beta2, step));
    value.array() -= static_cast<Scalar>(params.lr) * (ma / c1) /
                     ((va / c2).sqrt() + static_cast<Scalar>(params.eps));
  }

  // Vector parameters (biases) ride along as 1x1x1xN tensors.
  void update(const std::string& name, VectorX<Scalar>& value,
              const VectorX<Scalar>& grad) {
    if (value.size() != grad.size())
      throw std::invalid_argument("AdamState: gradient shape mismatch for '" + name + "'");
    Tensor<Scalar> vt(1, 1, 1, value.size());
    vt.array() = value.array();
    Tensor<Scalar> gt(1, 1, 1, grad.size());
    gt.array() = grad.array();
    update(name, vt, gt);
    value.array() = vt.array();
  }
};

}  // namespace sesim
