#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "quickdrop/data.hpp"
#include "quickdrop/federated.hpp"
#include "quickdrop/model.hpp"

namespace qdtest {

using namespace quickdrop;

inline ArchSpec small_mlp(std::size_t classes, ImageDims dims = {1, 4, 4},
                          std::vector<std::size_t> hidden = {8},
                          Activation act = Activation::tanh) {
  ArchSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input = dims;
  spec.classes = classes;
  spec.hidden = std::move(hidden);
  spec.activation = act;
  return spec;
}

inline BlobSpec blob_spec(std::size_t classes, std::size_t per_class,
                          ImageDims dims = {1, 4, 4}, double separation = 8.0) {
  BlobSpec b;
  b.classes = classes;
  b.per_class = per_class;
  b.dims = dims;
  b.separation = separation;
  b.noise = 0.1;
  return b;
}

/// Fresh scratch directory, unique per process so parallel ctest runs do not
/// collide.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("quickdrop_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class T>
std::vector<T> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(g(rng));
  return out;
}

}  // namespace qdtest
