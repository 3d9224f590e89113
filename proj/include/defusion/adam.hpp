#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "defusion/common.hpp"
#include "defusion/params.hpp"

namespace defusion {

template <class Real>
struct AdamConfig {
  Real lr = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
};

/// Per-parameter Adam moments. `t` counts completed steps for this parameter.
template <class Real>
struct AdamState {
  std::vector<Real> m, v;
  std::int64_t t = 0;
};

/// Adam with bias correction over one or more parameter groups, each with its
/// own learning rate. All groups advance together on step().
template <class Real>
class Adam {
 public:
  struct Group {
    AdamConfig<Real> cfg;
    ParamList<Real> params;
    std::vector<AdamState<Real>> states;
  };

  void add_group(AdamConfig<Real> cfg, ParamList<Real> params) {
    Group g;
    g.cfg = cfg;
    g.states.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      g.states[i].m.assign(params[i].tensor.data().size(), Real(0));
      g.states[i].v.assign(params[i].tensor.data().size(), Real(0));
    }
    g.params = std::move(params);
    groups_.push_back(std::move(g));
  }

  void step() {
    for (auto& group : groups_) {
      const auto& cfg = group.cfg;
      for (size_t pi = 0; pi < group.params.size(); ++pi) {
        auto& param = group.params[pi];
        auto& state = group.states[pi];
        auto& data = param.tensor.data();
        const auto& grad = param.tensor.grad();
        for (Real g : grad) {
          if (!std::isfinite(g))
            throw ValueError(strcat_msg("adam: non-finite gradient for '",
                                        param.name, "'"));
        }
        state.t += 1;
        const Real bc1 =
            Real(1) - std::pow(cfg.beta1, static_cast<Real>(state.t));
        const Real bc2 =
            Real(1) - std::pow(cfg.beta2, static_cast<Real>(state.t));
        for (size_t i = 0; i < data.size(); ++i) {
          const Real g = grad[i];
          state.m[i] = cfg.beta1 * state.m[i] + (Real(1) - cfg.beta1) * g;
          state.v[i] = cfg.beta2 * state.v[i] + (Real(1) - cfg.beta2) * g * g;
          const Real m_hat = state.m[i] / bc1;
          const Real v_hat = state.v[i] / bc2;
          data[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& group : groups_) zero_grads(group.params);
  }

  const std::vector<Group>& groups() const { return groups_; }

 private:
  std::vector<Group> groups_;
};

}  // namespace defusion
