#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csmx/rng.h"
#include "csmx/tensor.h"

namespace csmx::data {

/// Malformed or inconsistent input data. `offset` is the byte position of
/// the problem when reading a file.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, std::optional<std::uint64_t> offset = std::nullopt)
      : std::runtime_error(offset ? what + " (byte offset " + std::to_string(*offset) + ")" : what),
        offset_(offset) {}
  std::optional<std::uint64_t> offset() const { return offset_; }

 private:
  std::optional<std::uint64_t> offset_;
};

/// H x W x 3 interleaved bytes plus a class label.
struct LabeledImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
  int label = 0;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<LabeledImage> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  /// Throws DataError when any item breaks the label / pixel invariants.
  void validate() const;
  /// Items [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
};

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarClasses = 10;

/// Parses CIFAR-10 binary records (label byte, then R, G, B planes of 32x32).
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);
Dataset load_cifar10(const std::filesystem::path& file);
/// Loads every file in order and concatenates them.
Dataset load_cifar10(const std::vector<std::filesystem::path>& files);
/// Serializes back to the binary record layout.
std::vector<std::uint8_t> encode_cifar10(const Dataset& dataset);

/// Class-conditional synthetic images: each class has its own base colour
/// and stripe orientation/frequency; per-pixel noise is drawn from `seed`.
Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t height, std::size_t width, std::uint64_t seed);

struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

enum class Interpolation { Nearest, Bilinear };

/// Resamples to out_h x out_w (pixel-centre aligned).
LabeledImage resize(const LabeledImage& image, std::size_t out_h, std::size_t out_w,
                    Interpolation mode = Interpolation::Bilinear);

/// Centre window of floor(side * fraction) pixels per axis.
LabeledImage center_crop(const LabeledImage& image, double fraction);

/// (pixel / 255 - mean) / std per channel, as a [H, W, 3] tensor.
Tensor normalize(const LabeledImage& image, const Normalization& norm);

/// Evaluation preprocessing: centre crop to `crop_fraction`, resize back to
/// the original size, then normalize. A fraction of 1 skips the crop.
Tensor eval_transform(const LabeledImage& image, const Normalization& norm, double crop_fraction);

/// Training augmentation: random horizontal flip, then zero-pad by `pad`
/// and take a random crop of the original size.
LabeledImage augment(const LabeledImage& image, Rng& rng, bool flip, std::size_t pad);

/// Stacks preprocessed images [H, W, 3] into a batch [B, H, W, 3].
Tensor stack(std::span<const Tensor> images);

}  // namespace csmx::data
