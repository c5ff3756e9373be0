#pragma once

#include <cstddef>
#include <string>

namespace quickdrop {

/// Per-sample layout (channels, height, width).
struct ImageDims {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageDims&) const = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

}  // namespace quickdrop
