#include "csmx/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace csmx::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

ConstMat view(std::span<const double> s, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return ConstMat(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMat view(std::span<double> s, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MutMat(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename... Ts>
bool should_record(const Ts&... inputs) {
  if (!active_tape()) return false;
  return ((inputs.defined() && inputs.requires_grad()) || ...);
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch(op, a, b);
}

std::size_t last(const Tensor& t) { return t.shape().back(); }

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || last(a) != b.extent(0)) mismatch("matmul", a, b);
  const std::size_t q = b.extent(0), r = b.extent(1), rows = a.numel() / q;
  Shape out_shape = a.shape();
  out_shape.back() = r;
  Tensor out(out_shape);
  view(out.mutable_data(), rows, r).noalias() = view(a.data(), rows, q) * view(b.data(), q, r);
  if (should_record(a, b)) {
    active_tape()->record(out, [a, b, out, rows, q, r]() mutable {
      auto dout = view(out.grad(), rows, r);
      if (wants_grad(a)) view(a.grad_buffer(), rows, q).noalias() += dout * view(b.data(), q, r).transpose();
      if (wants_grad(b)) view(b.grad_buffer(), q, r).noalias() += view(a.data(), rows, q).transpose() * dout;
    });
  }
  return out;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1)) {
    mismatch("batched_matmul", a, b);
  }
  const std::size_t n = a.extent(0), p = a.extent(1), q = a.extent(2), r = b.extent(2);
  Tensor out({n, p, r});
  for (std::size_t s = 0; s < n; ++s) {
    view(out.mutable_data(), p, r, s * p * r).noalias() =
        view(a.data(), p, q, s * p * q) * view(b.data(), q, r, s * q * r);
  }
  if (should_record(a, b)) {
    active_tape()->record(out, [a, b, out, n, p, q, r]() mutable {
      for (std::size_t s = 0; s < n; ++s) {
        auto dout = view(out.grad(), p, r, s * p * r);
        if (wants_grad(a)) {
          view(a.grad_buffer(), p, q, s * p * q).noalias() += dout * view(b.data(), q, r, s * q * r).transpose();
        }
        if (wants_grad(b)) {
          view(b.grad_buffer(), q, r, s * q * r).noalias() += view(a.data(), p, q, s * p * q).transpose() * dout;
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || last(x) != weight.extent(0)) mismatch("linear", x, weight);
  if (bias.rank() != 1 || bias.extent(0) != weight.extent(1)) mismatch("linear(bias)", weight, bias);
  const std::size_t q = weight.extent(0), r = weight.extent(1), rows = x.numel() / q;
  Shape out_shape = x.shape();
  out_shape.back() = r;
  Tensor out(out_shape);
  auto y = view(out.mutable_data(), rows, r);
  y.noalias() = view(x.data(), rows, q) * view(weight.data(), q, r);
  y.rowwise() += view(bias.data(), 1, r).row(0);
  if (should_record(x, weight, bias)) {
    active_tape()->record(out, [x, weight, bias, out, rows, q, r]() mutable {
      auto dout = view(out.grad(), rows, r);
      if (wants_grad(x)) view(x.grad_buffer(), rows, q).noalias() += dout * view(weight.data(), q, r).transpose();
      if (wants_grad(weight)) {
        view(weight.grad_buffer(), q, r).noalias() += view(x.data(), rows, q).transpose() * dout;
      }
      if (wants_grad(bias)) view(bias.grad_buffer(), 1, r).row(0) += dout.colwise().sum();
    });
  }
  return out;
}

Tensor batched_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3 || weight.rank() != 3 || x.extent(0) != weight.extent(0) ||
      x.extent(2) != weight.extent(1)) {
    mismatch("batched_linear", x, weight);
  }
  if (bias.rank() != 2 || bias.extent(0) != weight.extent(0) || bias.extent(1) != weight.extent(2)) {
    mismatch("batched_linear(bias)", weight, bias);
  }
  const std::size_t n = x.extent(0), p = x.extent(1), q = x.extent(2), r = weight.extent(2);
  Tensor out({n, p, r});
  for (std::size_t s = 0; s < n; ++s) {
    auto y = view(out.mutable_data(), p, r, s * p * r);
    y.noalias() = view(x.data(), p, q, s * p * q) * view(weight.data(), q, r, s * q * r);
    y.rowwise() += view(bias.data(), 1, r, s * r).row(0);
  }
  if (should_record(x, weight, bias)) {
    active_tape()->record(out, [x, weight, bias, out, n, p, q, r]() mutable {
      for (std::size_t s = 0; s < n; ++s) {
        auto dout = view(out.grad(), p, r, s * p * r);
        if (wants_grad(x)) {
          view(x.grad_buffer(), p, q, s * p * q).noalias() +=
              dout * view(weight.data(), q, r, s * q * r).transpose();
        }
        if (wants_grad(weight)) {
          view(weight.grad_buffer(), q, r, s * q * r).noalias() +=
              view(x.data(), p, q, s * p * q).transpose() * dout;
        }
        if (wants_grad(bias)) view(bias.grad_buffer(), 1, r, s * r).row(0) += dout.colwise().sum();
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.extent(0) != last(x)) mismatch("add_bias", x, bias);
  const std::size_t c = last(x), rows = x.numel() / c;
  Tensor out = x.clone();
  view(out.mutable_data(), rows, c).rowwise() += view(bias.data(), 1, c).row(0);
  if (should_record(x, bias)) {
    active_tape()->record(out, [x, bias, out, rows, c]() mutable {
      if (wants_grad(x)) accumulate(x.grad_buffer(), out.grad());
      if (wants_grad(bias)) view(bias.grad_buffer(), 1, c).row(0) += view(out.grad(), rows, c).colwise().sum();
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  require_same_shape(name, a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i], y[i]);
  if (should_record(a, b)) {
    active_tape()->record(out, [a, b, out, da, db]() mutable {
      auto g = out.grad();
      auto x = a.data(), y = b.data();
      if (wants_grad(a)) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da(x[i], y[i]) * g[i];
      }
      if (wants_grad(b)) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db(x[i], y[i]) * g[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a.clone();
  for (auto& v : out.mutable_data()) v *= factor;
  if (should_record(a)) {
    active_tape()->record(out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double value) {
  Tensor out = a.clone();
  for (auto& v : out.mutable_data()) v += value;
  if (should_record(a)) {
    active_tape()->record(out, [a, out]() mutable { accumulate(a.grad_buffer(), out.grad()); });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * std::numbers::sqrt2 / 2.0));
  }
  if (should_record(x)) {
    active_tape()->record(out, [x, out]() mutable {
      const double fault = testing::corrupt_gelu_backward() ? 1.0 + 1e-3 : 1.0;
      auto g = out.grad();
      auto in = x.data();
      auto gx = x.grad_buffer();
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(in[i] * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * in[i] * in[i]);
        gx[i] += fault * (cdf + in[i] * pdf) * g[i];
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const std::size_t c = last(x), rows = x.numel() / c;
  if (gain.rank() != 1 || gain.extent(0) != c) mismatch("layer_norm(gain)", x, gain);
  if (bias.rank() != 1 || bias.extent(0) != c) mismatch("layer_norm(bias)", x, bias);
  Tensor out(x.shape());
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  auto in = x.data();
  auto o = out.mutable_data();
  auto gn = gain.data(), bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mu) * is;
      normalized[r * c + j] = xh;
      o[r * c + j] = xh * gn[j] + bs[j];
    }
  }
  if (should_record(x, gain, bias)) {
    active_tape()->record(out, [x, gain, bias, out, normalized = std::move(normalized),
                                inv_std = std::move(inv_std), rows, c]() mutable {
      auto g = out.grad();
      auto gn = gain.data();
      if (wants_grad(gain) || wants_grad(bias)) {
        std::span<double> dg = wants_grad(gain) ? gain.grad_buffer() : std::span<double>{};
        std::span<double> db = wants_grad(bias) ? bias.grad_buffer() : std::span<double>{};
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) {
            if (!dg.empty()) dg[j] += g[r * c + j] * normalized[r * c + j];
            if (!db.empty()) db[j] += g[r * c + j];
          }
        }
      }
      if (wants_grad(x)) {
        auto dx = x.grad_buffer();
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = g[r * c + j] * gn[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * normalized[r * c + j];
          }
          mean_dxh *= inv_c;
          mean_dxh_xh *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = g[r * c + j] * gn[j];
            dx[r * c + j] += inv_std[r] * (dxh - mean_dxh - normalized[r * c + j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (should_record(x)) {
    active_tape()->record(out, [x, out]() mutable { accumulate(x.grad_buffer(), out.grad()); });
  }
  return out;
}

Tensor sum_leading(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("sum_leading needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.extent(0), inner = x.numel() / n;
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < inner; ++i) o[i] += in[s * inner + i];
  }
  if (should_record(x)) {
    active_tape()->record(out, [x, out, n, inner]() mutable {
      auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < inner; ++i) dx[s * inner + i] += g[i];
      }
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean_axis: axis out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t n = s[axis];
  const std::size_t outer = std::accumulate(s.begin(), s.begin() + axis, std::size_t{1}, std::multiplies<>());
  const std::size_t inner = x.numel() / (outer * n);
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) o[a * inner + i] += in[(a * n + k) * inner + i] * inv;
    }
  }
  if (should_record(x)) {
    active_tape()->record(out, [x, out, outer, n, inner, inv]() mutable {
      auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t i = 0; i < inner; ++i) dx[(a * n + k) * inner + i] += g[a * inner + i] * inv;
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  auto in = x.data();
  Tensor out = Tensor::scalar(std::accumulate(in.begin(), in.end(), 0.0));
  if (should_record(x)) {
    active_tape()->record(out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (auto& d : x.grad_buffer()) d += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor scale_leading(const Tensor& x, std::span<const double> factors) {
  if (factors.size() != x.extent(0)) {
    throw ShapeError("scale_leading: " + std::to_string(factors.size()) + " factors for shape " +
                     shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / x.extent(0);
  std::vector<double> f(factors.begin(), factors.end());
  Tensor out = x.clone();
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < f.size(); ++s) {
    for (std::size_t i = 0; i < inner; ++i) o[s * inner + i] *= f[s];
  }
  if (should_record(x)) {
    active_tape()->record(out, [x, out, f = std::move(f), inner]() mutable {
      auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t s = 0; s < f.size(); ++s) {
        for (std::size_t i = 0; i < inner; ++i) dx[s * inner + i] += f[s] * g[s * inner + i];
      }
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape& first = parts.front().shape();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      mismatch("concat_last", parts.front(), p);
    }
    widths.push_back(last(p));
    total += last(p);
  }
  const std::size_t rows = parts.front().numel() / widths.front();
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor out(out_shape);
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(in.data() + r * widths[k], widths[k], o.data() + r * total + offset);
    }
    offset += widths[k];
  }
  bool record = false;
  for (const auto& p : parts) record = record || should_record(p);
  if (record) {
    active_tape()->record(out, [parts, out, widths, rows, total]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (wants_grad(parts[k])) {
          auto d = parts[k].grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < widths[k]; ++j) d[r * widths[k] + j] += g[r * total + offset + j];
          }
        }
        offset += widths[k];
      }
    });
  }
  return out;
}

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (in + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, h, w, cin, k, cout, stride, pad, ho, wo;
  std::size_t patch() const { return k * k * cin; }
  std::size_t positions() const { return ho * wo; }
};

// Gathers receptive fields of one image into rows of `cols` (positions x k*k*cin).
void im2col(const ConvGeometry& g, const double* img, double* cols) {
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      double* row = cols + (oy * g.wo + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          double* dst = row + (ky * g.k + kx) * g.cin;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
            std::fill_n(dst, g.cin, 0.0);
          } else {
            std::copy_n(img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin, g.cin, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* img) {
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      const double* row = cols + (oy * g.wo + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
          const double* src = row + (ky * g.k + kx) * g.cin;
          double* dst = img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3) throw ShapeError("conv2d: input must be [h,w,c] or [b,h,w,c], got " + shape_str(input.shape()));
  if (kernel.rank() != 4 || kernel.extent(0) != kernel.extent(1)) {
    throw ShapeError("conv2d: kernel must be [k,k,cin,cout], got " + shape_str(kernel.shape()));
  }
  ConvGeometry g{};
  g.batch = batched ? input.extent(0) : 1;
  g.h = input.extent(batched ? 1 : 0);
  g.w = input.extent(batched ? 2 : 1);
  g.cin = input.extent(batched ? 3 : 2);
  g.k = kernel.extent(0);
  g.cout = kernel.extent(3);
  g.stride = stride;
  g.pad = pad;
  if (kernel.extent(2) != g.cin) mismatch("conv2d", input, kernel);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != g.cout)) mismatch("conv2d(bias)", kernel, bias);
  g.ho = conv_output_extent(g.h, g.k, stride, pad);
  g.wo = conv_output_extent(g.w, g.k, stride, pad);

  Shape out_shape = batched ? Shape{g.batch, g.ho, g.wo, g.cout} : Shape{g.ho, g.wo, g.cout};
  Tensor out(out_shape);
  std::vector<double> cols(g.positions() * g.patch());
  const std::size_t in_img = g.h * g.w * g.cin, out_img = g.positions() * g.cout;
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, input.data().data() + b * in_img, cols.data());
    auto y = view(out.mutable_data(), g.positions(), g.cout, b * out_img);
    y.noalias() = view(std::span<const double>(cols), g.positions(), g.patch()) *
                  view(kernel.data(), g.patch(), g.cout);
    if (bias.defined()) y.rowwise() += view(bias.data(), 1, g.cout).row(0);
  }
  if (should_record(input, kernel, bias)) {
    active_tape()->record(out, [input, kernel, bias, out, g, in_img, out_img]() mutable {
      std::vector<double> cols(g.positions() * g.patch());
      std::vector<double> dcols(cols.size());
      for (std::size_t b = 0; b < g.batch; ++b) {
        auto dout = view(out.grad(), g.positions(), g.cout, b * out_img);
        if (wants_grad(kernel)) {
          im2col(g, input.data().data() + b * in_img, cols.data());
          view(kernel.grad_buffer(), g.patch(), g.cout).noalias() +=
              view(std::span<const double>(cols), g.positions(), g.patch()).transpose() * dout;
        }
        if (wants_grad(bias)) view(bias.grad_buffer(), 1, g.cout).row(0) += dout.colwise().sum();
        if (wants_grad(input)) {
          view(std::span<double>(dcols), g.positions(), g.patch()).noalias() =
              dout * view(kernel.data(), g.patch(), g.cout).transpose();
          col2im_add(g, dcols.data(), input.grad_buffer().data() + b * in_img);
        }
      }
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const Shape& factored, const std::vector<std::size_t>& perm,
               const Shape& out_shape) {
  if (shape_numel(factored) != x.numel() || shape_numel(out_shape) != x.numel() ||
      perm.size() != factored.size()) {
    throw ShapeError("permute: " + shape_str(x.shape()) + " cannot be viewed as " + shape_str(factored) +
                     " -> " + shape_str(out_shape));
  }
  const std::size_t rank = factored.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * factored[i];
  std::vector<std::size_t> out_ext(rank), src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_ext[i] = factored[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // gather[o] is the input offset of output element o.
  std::vector<std::size_t> gather(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < gather.size(); ++o) {
    gather[o] = src;
    for (std::size_t a = rank; a-- > 0;) {
      ++idx[a];
      src += src_stride[a];
      if (idx[a] < out_ext[a]) break;
      src -= src_stride[a] * out_ext[a];
      idx[a] = 0;
    }
  }
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < gather.size(); ++i) o[i] = in[gather[i]];
  if (should_record(x)) {
    active_tape()->record(out, [x, out, gather = std::move(gather)]() mutable {
      auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < gather.size(); ++i) dx[gather[i]] += g[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  const std::size_t k = last(logits), rows = logits.numel() / k;
  Tensor out(logits.shape());
  auto in = logits.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = in.data() + r * k;
    const double m = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += (o[r * k + j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) o[r * k + j] /= total;
  }
  if (should_record(logits)) {
    active_tape()->record(out, [logits, out, rows, k]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto dz = logits.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
        for (std::size_t j = 0; j < k; ++j) dz[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
      }
    });
  }
  return out;
}

}  // namespace csmx::ops
