#include "csmx/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace csmx::data {

void Dataset::validate() const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.height != height || it.width != width || it.pixels.size() != height * width * 3) {
      throw DataError("image " + std::to_string(i) + " does not have size " + std::to_string(height) + "x" +
                      std::to_string(width) + "x3");
    }
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= num_classes) {
      throw DataError("image " + std::to_string(i) + " has label " + std::to_string(it.label) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  end = std::min(end, items.size());
  begin = std::min(begin, end);
  Dataset out{height, width, num_classes, {}};
  out.items.assign(items.begin() + static_cast<std::ptrdiff_t>(begin), items.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::uint64_t complete = bytes.size() / kCifarRecordBytes;
    throw DataError("CIFAR-10 data is " + std::to_string(bytes.size()) + " bytes, not a multiple of " +
                        std::to_string(kCifarRecordBytes) + "; truncated record",
                    complete * kCifarRecordBytes);
  }
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  Dataset ds{kCifarSide, kCifarSide, kCifarClasses, {}};
  ds.items.reserve(bytes.size() / kCifarRecordBytes);
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
    const std::uint8_t label = bytes[off];
    if (label >= kCifarClasses) {
      throw DataError("CIFAR-10 label byte " + std::to_string(label) + " is not below 10", off);
    }
    LabeledImage img{kCifarSide, kCifarSide, std::vector<std::uint8_t>(plane * 3), label};
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t* src = bytes.data() + off + 1 + c * plane;
      for (std::size_t p = 0; p < plane; ++p) img.pixels[p * 3 + c] = src[p];
    }
    ds.items.push_back(std::move(img));
  }
  return ds;
}

Dataset load_cifar10(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_cifar10(bytes);
  } catch (const DataError& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& files) {
  Dataset all{kCifarSide, kCifarSide, kCifarClasses, {}};
  for (const auto& f : files) {
    Dataset part = load_cifar10(f);
    std::move(part.items.begin(), part.items.end(), std::back_inserter(all.items));
  }
  return all;
}

std::vector<std::uint8_t> encode_cifar10(const Dataset& dataset) {
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  std::vector<std::uint8_t> out;
  out.reserve(dataset.size() * kCifarRecordBytes);
  for (const auto& img : dataset.items) {
    if (img.height != kCifarSide || img.width != kCifarSide || img.label < 0 || img.label >= 256) {
      throw DataError("image is not encodable as a CIFAR-10 record");
    }
    out.push_back(static_cast<std::uint8_t>(img.label));
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) out.push_back(img.pixels[p * 3 + c]);
    }
  }
  return out;
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t height, std::size_t width, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("synth_dataset: n must be > 0");
  if (classes == 0) throw std::invalid_argument("synth_dataset: classes must be > 0");
  Rng rng(seed);
  Dataset ds{height, width, classes, {}};
  ds.items.reserve(n);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    const double hue = two_pi * static_cast<double>(k) / static_cast<double>(classes);
    std::array<double, 3> base{};
    for (std::size_t c = 0; c < 3; ++c) base[c] = 128.0 + 70.0 * std::cos(hue + two_pi * static_cast<double>(c) / 3.0);
    // Stripe direction and frequency depend on the class; phase is per image.
    const double angle = std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    const double freq = two_pi * (2.0 + static_cast<double>(k % 3)) / static_cast<double>(std::max(height, width));
    const double phase = two_pi * rng.uniform();
    LabeledImage img{height, width, std::vector<std::uint8_t>(height * width * 3), static_cast<int>(k)};
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double t = freq * (std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y));
        const double stripe = 40.0 * std::sin(t + phase);
        for (std::size_t c = 0; c < 3; ++c) {
          img.pixels[(y * width + x) * 3 + c] = to_byte(base[c] + stripe + 25.0 * rng.normal());
        }
      }
    }
    ds.items.push_back(std::move(img));
  }
  return ds;
}

LabeledImage resize(const LabeledImage& image, std::size_t out_h, std::size_t out_w, Interpolation mode) {
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize: output extents must be positive");
  LabeledImage out{out_h, out_w, std::vector<std::uint8_t>(out_h * out_w * 3), image.label};
  const double sy = static_cast<double>(image.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(image.width) / static_cast<double>(out_w);
  const auto max_y = static_cast<double>(image.height - 1), max_x = static_cast<double>(image.width - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (mode == Interpolation::Nearest) {
          v = image.at(static_cast<std::size_t>(std::lround(fy)), static_cast<std::size_t>(std::lround(fx)), c);
        } else {
          const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
          const std::size_t y1 = std::min(y0 + 1, image.height - 1), x1 = std::min(x0 + 1, image.width - 1);
          const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
          const double top = image.at(y0, x0, c) * (1 - tx) + image.at(y0, x1, c) * tx;
          const double bottom = image.at(y1, x0, c) * (1 - tx) + image.at(y1, x1, c) * tx;
          v = top * (1 - ty) + bottom * ty;
        }
        out.pixels[(y * out_w + x) * 3 + c] = to_byte(v);
      }
    }
  }
  return out;
}

LabeledImage center_crop(const LabeledImage& image, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("center_crop: fraction must be in (0, 1]");
  const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(image.height) * fraction)));
  const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(image.width) * fraction)));
  const std::size_t top = (image.height - ch) / 2, left = (image.width - cw) / 2;
  LabeledImage out{ch, cw, std::vector<std::uint8_t>(ch * cw * 3), image.label};
  for (std::size_t y = 0; y < ch; ++y) {
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>(((top + y) * image.width + left) * 3), cw * 3,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y * cw * 3));
  }
  return out;
}

Tensor normalize(const LabeledImage& image, const Normalization& norm) {
  for (double s : norm.std) {
    if (!(s > 0.0)) throw std::invalid_argument("normalize: std components must be > 0");
  }
  Tensor out({image.height, image.width, 3});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const std::size_t c = i % 3;
    d[i] = (static_cast<double>(image.pixels[i]) / 255.0 - norm.mean[c]) / norm.std[c];
  }
  return out;
}

Tensor eval_transform(const LabeledImage& image, const Normalization& norm, double crop_fraction) {
  if (crop_fraction >= 1.0) return normalize(image, norm);
  return normalize(resize(center_crop(image, crop_fraction), image.height, image.width), norm);
}

LabeledImage augment(const LabeledImage& image, Rng& rng, bool flip, std::size_t pad) {
  const bool mirror = flip && rng.bernoulli(0.5);
  const std::size_t dy = pad ? static_cast<std::size_t>(rng.below(2 * pad + 1)) : 0;
  const std::size_t dx = pad ? static_cast<std::size_t>(rng.below(2 * pad + 1)) : 0;
  LabeledImage out{image.height, image.width, std::vector<std::uint8_t>(image.pixels.size(), 0), image.label};
  for (std::size_t y = 0; y < image.height; ++y) {
    const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
    if (sy < 0 || sy >= static_cast<long>(image.height)) continue;
    for (std::size_t x = 0; x < image.width; ++x) {
      long sx = static_cast<long>(x + dx) - static_cast<long>(pad);
      if (sx < 0 || sx >= static_cast<long>(image.width)) continue;
      if (mirror) sx = static_cast<long>(image.width) - 1 - sx;
      for (std::size_t c = 0; c < 3; ++c) {
        out.pixels[(y * image.width + x) * 3 + c] =
            image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
      }
    }
  }
  return out;
}

Tensor stack(std::span<const Tensor> images) {
  if (images.empty()) throw std::invalid_argument("stack: no images");
  const Shape& s = images.front().shape();
  Shape out_shape{images.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  auto d = out.mutable_data();
  const std::size_t n = images.front().numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw ShapeError("stack: image " + std::to_string(i) + " has a different shape");
    std::copy(images[i].data().begin(), images[i].data().end(), d.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

}  // namespace csmx::data
