#pragma once

// Central finite-difference gradient oracle. Independent of the reverse-mode
// path it checks: numeric derivatives come from re-running the forward build
// at perturbed leaf values.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lpa/tensor.hpp"

namespace gradcheck {

struct Result {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  bool ok = true;
  std::string worst;
};

// build() must construct a fresh graph from the given leaves and return a
// scalar. Leaves are created with requires_grad for the analytic pass and
// without for the numeric evaluations.
template <typename Build>
Result check(std::vector<lpa::Shape> shapes, std::vector<std::vector<double>> values, Build build,
             double eps = 1e-5, double rtol = 1e-4, double afloor = 1e-7,
             int coords_per_leaf = -1) {
  using lpa::Tensor;

  std::vector<Tensor<double>> leaves;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    leaves.push_back(Tensor<double>::from(shapes[i], values[i]).set_requires_grad(true));
  }
  Tensor<double> root = build(leaves);
  lpa::backward(root);

  Result r;
  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    std::vector<Tensor<double>> plain;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      plain.push_back(Tensor<double>::from(shapes[i], vals[i]));
    }
    return build(plain).item();
  };

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const std::size_t n = values[l].size();
    const std::size_t step =
        coords_per_leaf > 0 && n > static_cast<std::size_t>(coords_per_leaf)
            ? n / static_cast<std::size_t>(coords_per_leaf)
            : 1;
    for (std::size_t i = 0; i < n; i += step) {
      std::vector<std::vector<double>> vals = values;
      const double orig = vals[l][i];
      vals[l][i] = orig + eps;
      const double fp = eval(vals);
      vals[l][i] = orig - eps;
      const double fm = eval(vals);
      vals[l][i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = leaves[l].grad()[i];
      const double diff = std::abs(analytic - numeric);
      const double denom = std::max({afloor, std::abs(numeric), std::abs(analytic)});
      const double rel = diff / denom;
      ++r.checked;
      if (diff > afloor && rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst = "leaf " + std::to_string(l) + " coord " + std::to_string(i) + ": analytic " +
                  std::to_string(analytic) + " numeric " + std::to_string(numeric);
      }
      if (diff > afloor && rel > rtol) r.ok = false;
    }
  }
  return r;
}

}  // namespace gradcheck
