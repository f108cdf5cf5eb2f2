#pragma once

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/rng.hpp"
#include "lpa/ten1.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

struct CategoryDescription {
  std::string name;
  std::string text;  // may be empty (name-only mode)
};

// Per-category text embedding matrix. Row order defines the category-channel
// order used by every similarity map and mask set downstream.
template <typename T>
struct SemanticEmbeddings {
  std::vector<std::string> categories;
  Tensor<T> matrix;  // [n, D]

  int count() const { return static_cast<int>(categories.size()); }
  int dim() const { return matrix.dim(1); }
};

// Embeddings CSV: one row per category, `name,v0,v1,...,v{D-1}`.
template <typename T>
SemanticEmbeddings<T> load_embeddings(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open embeddings file: " + path);

  std::vector<std::string> names;
  std::vector<T> values;
  std::set<std::string> seen;
  int dim = -1;
  int lineno = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name;
    if (!std::getline(ss, name, ',') || name.empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": missing category name");
    }
    if (!seen.insert(name).second) {
      throw ValidationError(path + ": duplicate category name '" + name + "'");
    }
    int count = 0;
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(static_cast<T>(std::stod(cell)));
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": bad float '" + cell + "'");
      }
      ++count;
    }
    if (dim < 0) {
      dim = count;
      if (dim == 0) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": row has no values");
      }
    } else if (count != dim) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": row has " +
                        std::to_string(count) + " values, expected " + std::to_string(dim));
    }
    names.push_back(name);
  }
  if (names.empty()) throw FormatError(path + ": no rows");
  const int n = static_cast<int>(names.size());
  return SemanticEmbeddings<T>{std::move(names), Tensor<T>::from({n, dim}, std::move(values))};
}

template <typename T>
void save_embeddings(const std::string& path, const SemanticEmbeddings<T>& emb) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  const int n = emb.count(), d = emb.dim();
  for (int i = 0; i < n; ++i) {
    os << emb.categories[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) {
      os << ',' << format_g9(static_cast<double>(emb.matrix.at({i, j})));
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path);
}

// Deterministic orthonormal stand-in for real text embeddings: Gram-Schmidt
// over seeded Gaussian rows.
template <typename T>
SemanticEmbeddings<T> make_test_embeddings(int n, int dim, std::uint64_t seed) {
  if (n <= 0 || dim <= 0 || n > dim) {
    throw ConfigError("make_test_embeddings: need 0 < n <= D, got n=" + std::to_string(n) +
                      " D=" + std::to_string(dim));
  }
  Rng rng(seed, fnv1a64("test-embeddings"));
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(rows.size()) < n) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = rng.normal();
    for (const auto& prev : rows) {
      double dot = 0;
      for (int j = 0; j < dim; ++j) dot += v[static_cast<std::size_t>(j)] * prev[static_cast<std::size_t>(j)];
      for (int j = 0; j < dim; ++j) v[static_cast<std::size_t>(j)] -= dot * prev[static_cast<std::size_t>(j)];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;  // redraw a degenerate direction
    for (auto& x : v) x /= norm;
    rows.push_back(std::move(v));
  }
  std::vector<T> flat;
  flat.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(dim));
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) {
    names.push_back("cat" + std::to_string(i));
    for (int j = 0; j < dim; ++j) {
      flat.push_back(static_cast<T>(rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
    }
  }
  return SemanticEmbeddings<T>{std::move(names), Tensor<T>::from({n, dim}, std::move(flat))};
}

// Descriptions asset: `name<TAB>description` lines.
inline std::vector<CategoryDescription> load_descriptions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open descriptions file: " + path);
  std::vector<CategoryDescription> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected name<TAB>description");
    }
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

}  // namespace lpa
