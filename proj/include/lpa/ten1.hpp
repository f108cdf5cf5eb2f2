#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

// Text tensor format "TEN1": header line `TEN1 <ndim> <d0> <d1> ...`, then
// whitespace-separated decimal floats in row-major order, 9 significant
// digits. Nine digits round-trip float32 exactly.

inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <typename T>
void write_ten1(std::ostream& os, const Tensor<T>& t) {
  os << "TEN1 " << t.shape().size();
  for (int d : t.shape()) os << ' ' << d;
  os << '\n';
  const auto& v = t.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << format_g9(static_cast<double>(v[i]));
    os << ((i + 1) % 8 == 0 || i + 1 == v.size() ? '\n' : ' ');
  }
}

template <typename T>
void save_ten1(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_ten1(os, t);
  if (!os) throw IoError("write failed: " + path);
}

template <typename T>
Tensor<T> read_ten1(std::istream& is, const std::string& origin = "<stream>") {
  std::string magic;
  if (!(is >> magic) || magic != "TEN1") {
    throw FormatError(origin + ": missing TEN1 header");
  }
  int ndim = 0;
  if (!(is >> ndim) || ndim < 0 || ndim > 8) {
    throw FormatError(origin + ": bad rank");
  }
  Shape shape(static_cast<std::size_t>(ndim));
  for (int i = 0; i < ndim; ++i) {
    if (!(is >> shape[static_cast<std::size_t>(i)]) || shape[static_cast<std::size_t>(i)] < 0) {
      throw FormatError(origin + ": bad extent");
    }
  }
  const std::int64_t n = numel(shape);
  std::vector<T> data(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double v;
    if (!(is >> v)) {
      throw FormatError(origin + ": expected " + std::to_string(n) + " values, got " +
                        std::to_string(i));
    }
    data[static_cast<std::size_t>(i)] = static_cast<T>(v);
  }
  return Tensor<T>::from(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> load_ten1(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  return read_ten1<T>(is, path);
}

}  // namespace lpa
