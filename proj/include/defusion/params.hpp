#pragma once

#include <string>
#include <vector>

#include "defusion/tensor.hpp"

namespace defusion {

/// One trainable leaf tensor with its fully-qualified checkpoint name.
template <class Real>
struct NamedParam {
  std::string name;
  Tensor<Real> tensor;
};

template <class Real>
using ParamList = std::vector<NamedParam<Real>>;

template <class Real>
void zero_grads(ParamList<Real>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class Real>
std::int64_t param_count(const ParamList<Real>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

}  // namespace defusion
