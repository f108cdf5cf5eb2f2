#pragma once

#include <vector>

#include "lpa/errors.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

// SGD with momentum and decoupled-into-gradient weight decay:
//   v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
// Velocity buffers are owned by the caller, aligned with the parameter list.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, std::vector<std::vector<T>>& velocity, T lr,
              T momentum, T weight_decay) {
  if (velocity.size() != params.size()) {
    throw UsageError("sgd_step: velocity buffer count does not match parameter count");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& t = params[p];
    std::vector<T>& v = velocity[p];
    if (v.size() != t.value().size()) v.assign(t.value().size(), T(0));
    const auto& g = t.grad();
    auto& data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T gi = (g.empty() ? T(0) : g[i]) + weight_decay * data[i];
      v[i] = momentum * v[i] + gi;
      data[i] -= lr * v[i];
    }
  }
}

}  // namespace lpa
