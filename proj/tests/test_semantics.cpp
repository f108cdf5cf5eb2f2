#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lpa/semantics.hpp"

using namespace lpa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "lpa_semantics_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("load_embeddings shape contract") {
  auto path = (temp_dir() / "emb.csv").string();
  {
    std::ofstream os(path);
    for (int i = 0; i < 5; ++i) {
      os << "name" << i;
      for (int j = 0; j < 768; ++j) os << ',' << (i * 768 + j) * 1e-3;
      os << '\n';
    }
  }
  auto emb = load_embeddings<float>(path);
  CHECK(emb.count() == 5);
  CHECK(emb.dim() == 768);
  CHECK(emb.matrix.shape() == Shape{5, 768});
  CHECK(emb.categories[3] == "name3");
  CHECK(emb.matrix.at({1, 2}) == doctest::Approx((768 + 2) * 1e-3));
}

TEST_CASE("load_embeddings ragged row reports the line") {
  auto path = (temp_dir() / "ragged.csv").string();
  {
    std::ofstream os(path);
    os << "a,1,2,3\n";
    os << "b,4,5\n";
  }
  CHECK_THROWS_WITH_AS(load_embeddings<float>(path), doctest::Contains(":2"), FormatError);
}

TEST_CASE("load_embeddings duplicate names rejected") {
  auto path = (temp_dir() / "dup.csv").string();
  {
    std::ofstream os(path);
    os << "a,1,2\n";
    os << "a,3,4\n";
  }
  CHECK_THROWS_AS(load_embeddings<float>(path), ValidationError);
}

TEST_CASE("embeddings save/load round-trip") {
  auto emb = make_test_embeddings<float>(4, 16, 9);
  auto path = (temp_dir() / "rt.csv").string();
  save_embeddings(path, emb);
  auto back = load_embeddings<float>(path);
  REQUIRE(back.count() == emb.count());
  REQUIRE(back.dim() == emb.dim());
  CHECK(back.categories == emb.categories);
  // 9 significant digits round-trip float32 exactly
  for (std::size_t i = 0; i < emb.matrix.value().size(); ++i) {
    CHECK(back.matrix.value()[i] == emb.matrix.value()[i]);
  }
}

TEST_CASE("make_test_embeddings orthonormality and determinism") {
  auto emb = make_test_embeddings<double>(5, 16, 42);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      double dot = 0;
      for (int k = 0; k < 16; ++k) dot += emb.matrix.at({i, k}) * emb.matrix.at({j, k});
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-6);
    }
  }
  auto again = make_test_embeddings<double>(5, 16, 42);
  CHECK(again.matrix.value() == emb.matrix.value());

  auto other = make_test_embeddings<double>(5, 16, 43);
  double dist = 0;
  for (std::size_t i = 0; i < emb.matrix.value().size(); ++i) {
    const double d = other.matrix.value()[i] - emb.matrix.value()[i];
    dist += d * d;
  }
  CHECK(dist > 0.0);

  CHECK_THROWS_AS(make_test_embeddings<float>(17, 16, 1), ConfigError);
}

TEST_CASE("descriptions asset parses") {
  auto path = (temp_dir() / "desc.tsv").string();
  {
    std::ofstream os(path);
    os << "car\tsmall vehicle\n";
    os << "bus\tlong vehicle\n";
  }
  auto desc = load_descriptions(path);
  REQUIRE(desc.size() == 2);
  CHECK(desc[0].name == "car");
  CHECK(desc[1].text == "long vehicle");
}
