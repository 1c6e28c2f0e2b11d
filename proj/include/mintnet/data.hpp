#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mintnet/tensor.hpp"

namespace mintnet::data {

// Integer pixel images in [0, 255] with provenance.
struct Dataset {
  Tensor4 images;
  std::vector<std::uint8_t> labels;  // empty when not loaded
  std::string split = "train";
  std::string source;

  std::size_t size() const { return images.shape().n; }
  // Items at the given indices, in that order.
  Tensor4 take(const std::vector<std::size_t>& indices) const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kTruncated, kDimMismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Reads MNIST-style IDX files (big-endian, magic-prefixed) into (n, 1, h, w).
Dataset load_idx(const std::string& images_path, const std::optional<std::string>& labels_path = {});
void write_idx(const Dataset& ds, const std::string& images_path,
               const std::optional<std::string>& labels_path = {});

// Block-average pooling by `factor`, rounded half-up to integers.
Dataset downsample(const Dataset& ds, std::size_t factor);

// 1-3 random full-length bright horizontal or vertical bars on a dark
// background with mild pixel noise; size x size single-channel images.
Dataset synth_bars(std::size_t n, std::size_t size, std::mt19937_64& rng);

// Independent uniform pixels in [0, 255].
Dataset synth_noise(std::size_t n, std::size_t size, std::mt19937_64& rng);

}  // namespace mintnet::data
