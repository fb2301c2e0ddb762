#include "dermgan/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace dermgan::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

void require_rank4(const Shape& s, const char* op) {
  if (s.rank() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + s.str());
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return i < self.inputs.size() && self.inputs[i]->requires_grad;
}

template <typename T>
Var<T> unary_map(const Var<T>& x, auto forward, auto derivative_from_in_out) {
  Tensor<T> out(x.shape());
  const T* in = x.value().data();
  T* o = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] = forward(in[i]);
  return make_op<T>(std::move(out), {x}, [derivative_from_in_out](Node<T>& self) {
    Node<T>& src = *self.inputs[0];
    auto& g = src.grad_buffer();
    const T* in = src.value.data();
    const T* out = self.value.data();
    const T* dy = self.grad.data();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * derivative_from_in_out(in[i], out[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.inputs[k]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary_map<T>(a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary_map<T>(
      x, [slope](T v) { return v > T(0) ? v : v * slope; }, [slope](T in, T) { return in > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary_map<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary_map<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  const int64_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1], h = a.shape()[2], w = a.shape()[3];
  if (b.shape()[0] != n || b.shape()[2] != h || b.shape()[3] != w) {
    throw ShapeError("concat_channels: incompatible " + a.shape().str() + " and " + b.shape().str());
  }
  const int64_t plane = h * w;
  Tensor<T> out(Shape{n, ca + cb, h, w});
  for (int64_t s = 0; s < n; ++s) {
    std::copy_n(a.value().data() + s * ca * plane, ca * plane, out.data() + s * (ca + cb) * plane);
    std::copy_n(b.value().data() + s * cb * plane, cb * plane, out.data() + (s * (ca + cb) + ca) * plane);
  }
  return make_op<T>(std::move(out), {a, b}, [n, ca, cb, plane](Node<T>& self) {
    const T* dy = self.grad.data();
    if (wants_grad(self, 0)) {
      T* g = self.inputs[0]->grad_buffer().data();
      for (int64_t s = 0; s < n; ++s)
        for (int64_t i = 0; i < ca * plane; ++i) g[s * ca * plane + i] += dy[s * (ca + cb) * plane + i];
    }
    if (wants_grad(self, 1)) {
      T* g = self.inputs[1]->grad_buffer().data();
      for (int64_t s = 0; s < n; ++s)
        for (int64_t i = 0; i < cb * plane; ++i) g[s * cb * plane + i] += dy[(s * (ca + cb) + ca) * plane + i];
    }
  });
}

namespace kernels {

namespace {

// Output columns ow with 0 <= ow*stride - pad + kw < width.
inline std::pair<int, int> valid_columns(int out_w, int width, int kw, ConvGeometry g) {
  const int off = kw - g.padding;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = width - off <= 0 ? 0 : (width - off + g.stride - 1) / g.stride;
  lo = std::min(lo, out_w);
  hi = std::clamp(hi, lo, out_w);
  return {lo, hi};
}

}  // namespace

template <typename T>
void im2col(const T* src, int channels, int height, int width, int kernel, ConvGeometry g, int out_h, int out_w,
            T* col) {
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        T* row = col + static_cast<int64_t>((c * kernel + kh) * kernel + kw) * cols;
        const auto [lo, hi] = valid_columns(out_w, width, kw, g);
        const int off = kw - g.padding;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + kh;
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill_n(dst, out_w, T(0));
            continue;
          }
          const T* line = src + (static_cast<int64_t>(c) * height + ih) * width;
          std::fill_n(dst, lo, T(0));
          if (g.stride == 1) {
            std::copy_n(line + lo + off, hi - lo, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = line[ow * g.stride + off];
          }
          std::fill(dst + hi, dst + out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int kernel, ConvGeometry g, int out_h, int out_w,
            T* dst) {
  const int cols = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        const T* row = col + static_cast<int64_t>((c * kernel + kh) * kernel + kw) * cols;
        const auto [lo, hi] = valid_columns(out_w, width, kw, g);
        const int off = kw - g.padding;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= height) continue;
          T* line = dst + (static_cast<int64_t>(c) * height + ih) * width;
          const T* srcrow = row + oh * out_w;
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) line[ow + off] += srcrow[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) line[ow * g.stride + off] += srcrow[ow];
          }
        }
      }
    }
  }
}

template void im2col<float>(const float*, int, int, int, int, ConvGeometry, int, int, float*);
template void im2col<double>(const double*, int, int, int, int, ConvGeometry, int, int, double*);
template void col2im<float>(const float*, int, int, int, int, ConvGeometry, int, int, float*);
template void col2im<double>(const double*, int, int, int, int, ConvGeometry, int, int, double*);

}  // namespace kernels

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, ConvGeometry g) {
  require_rank4(x.shape(), "conv2d");
  require_rank4(weight.shape(), "conv2d weight");
  const int n = static_cast<int>(x.shape()[0]), cin = static_cast<int>(x.shape()[1]);
  const int h = static_cast<int>(x.shape()[2]), w = static_cast<int>(x.shape()[3]);
  const int cout = static_cast<int>(weight.shape()[0]), k = static_cast<int>(weight.shape()[2]);
  if (weight.shape()[1] != cin || weight.shape()[3] != k) {
    throw ShapeError("conv2d: weight " + weight.shape().str() + " incompatible with input " + x.shape().str());
  }
  const int oh = kernels::conv_out_size(h, k, g), ow = kernels::conv_out_size(w, k, g);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + x.shape().str());
  const int rows = cin * k * k, cols = oh * ow;

  Tensor<T> out(Shape{n, cout, oh, ow});
  AlignedVector<T> col(static_cast<std::size_t>(rows) * cols);
  ConstMapMat<T> wm(weight.value().data(), cout, rows);
  for (int s = 0; s < n; ++s) {
    kernels::im2col(x.value().data() + static_cast<int64_t>(s) * cin * h * w, cin, h, w, k, g, oh, ow, col.data());
    MapMat<T> ym(out.data() + static_cast<int64_t>(s) * cout * cols, cout, cols);
    ym.noalias() = wm * ConstMapMat<T>(col.data(), rows, cols);
    if (bias) {
      for (int c = 0; c < cout; ++c) ym.row(c).array() += bias->value()[c];
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_op<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = has_bias && wants_grad(self, 2);
    const T* xin = self.inputs[0]->value.data();
    ConstMapMat<T> wmat(self.inputs[1]->value.data(), cout, rows);
    AlignedVector<T> colbuf(static_cast<std::size_t>(rows) * cols);
    for (int s = 0; s < n; ++s) {
      ConstMapMat<T> dy(self.grad.data() + static_cast<int64_t>(s) * cout * cols, cout, cols);
      if (gw) {
        kernels::im2col(xin + static_cast<int64_t>(s) * cin * h * w, cin, h, w, k, g, oh, ow, colbuf.data());
        MapMat<T> dw(self.inputs[1]->grad_buffer().data(), cout, rows);
        dw.noalias() += dy * ConstMapMat<T>(colbuf.data(), rows, cols).transpose();
      }
      if (gx) {
        MapMat<T> dcol(colbuf.data(), rows, cols);
        dcol.noalias() = wmat.transpose() * dy;
        kernels::col2im(colbuf.data(), cin, h, w, k, g, oh, ow,
                        self.inputs[0]->grad_buffer().data() + static_cast<int64_t>(s) * cin * h * w);
      }
      if (gb) {
        auto& db = self.inputs[2]->grad_buffer();
        for (int c = 0; c < cout; ++c) db[c] += dy.row(c).sum();
      }
    }
  });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, ConvGeometry g) {
  require_rank4(x.shape(), "conv_transpose2d");
  require_rank4(weight.shape(), "conv_transpose2d weight");
  const int n = static_cast<int>(x.shape()[0]), cin = static_cast<int>(x.shape()[1]);
  const int h = static_cast<int>(x.shape()[2]), w = static_cast<int>(x.shape()[3]);
  const int cout = static_cast<int>(weight.shape()[1]), k = static_cast<int>(weight.shape()[2]);
  if (weight.shape()[0] != cin || weight.shape()[3] != k) {
    throw ShapeError("conv_transpose2d: weight " + weight.shape().str() + " incompatible with " + x.shape().str());
  }
  const int oh = kernels::conv_transpose_out_size(h, k, g), ow = kernels::conv_transpose_out_size(w, k, g);
  const int rows = cout * k * k, cols = h * w;

  Tensor<T> out(Shape{n, cout, oh, ow});
  AlignedVector<T> col(static_cast<std::size_t>(rows) * cols);
  ConstMapMat<T> wm(weight.value().data(), cin, rows);
  for (int s = 0; s < n; ++s) {
    MapMat<T> cm(col.data(), rows, cols);
    cm.noalias() = wm.transpose() * ConstMapMat<T>(x.value().data() + static_cast<int64_t>(s) * cin * cols, cin, cols);
    T* dst = out.data() + static_cast<int64_t>(s) * cout * oh * ow;
    kernels::col2im(col.data(), cout, oh, ow, k, g, h, w, dst);
    if (bias) {
      for (int c = 0; c < cout; ++c)
        for (int i = 0; i < oh * ow; ++i) dst[c * oh * ow + i] += bias->value()[c];
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_op<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = has_bias && wants_grad(self, 2);
    ConstMapMat<T> wmat(self.inputs[1]->value.data(), cin, rows);
    AlignedVector<T> colbuf(static_cast<std::size_t>(rows) * cols);
    for (int s = 0; s < n; ++s) {
      const T* dy = self.grad.data() + static_cast<int64_t>(s) * cout * oh * ow;
      kernels::im2col(dy, cout, oh, ow, k, g, h, w, colbuf.data());
      ConstMapMat<T> dcol(colbuf.data(), rows, cols);
      if (gx) {
        MapMat<T> dx(self.inputs[0]->grad_buffer().data() + static_cast<int64_t>(s) * cin * cols, cin, cols);
        dx.noalias() += wmat * dcol;
      }
      if (gw) {
        MapMat<T> dw(self.inputs[1]->grad_buffer().data(), cin, rows);
        dw.noalias() +=
            ConstMapMat<T>(self.inputs[0]->value.data() + static_cast<int64_t>(s) * cin * cols, cin, cols) *
            dcol.transpose();
      }
      if (gb) {
        auto& db = self.inputs[2]->grad_buffer();
        for (int c = 0; c < cout; ++c) {
          T acc = 0;
          for (int i = 0; i < oh * ow; ++i) acc += dy[c * oh * ow + i];
          db[c] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank4(x.shape(), "upsample_nearest2x");
  const int64_t nc = x.shape()[0] * x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor<T> out(Shape{x.shape()[0], x.shape()[1], 2 * h, 2 * w});
  const T* in = x.value().data();
  T* o = out.data();
  for (int64_t p = 0; p < nc; ++p)
    for (int64_t i = 0; i < 2 * h; ++i)
      for (int64_t j = 0; j < 2 * w; ++j) o[(p * 2 * h + i) * 2 * w + j] = in[(p * h + i / 2) * w + j / 2];
  return make_op<T>(std::move(out), {x}, [nc, h, w](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    const T* dy = self.grad.data();
    for (int64_t p = 0; p < nc; ++p)
      for (int64_t i = 0; i < 2 * h; ++i)
        for (int64_t j = 0; j < 2 * w; ++j) g[(p * h + i / 2) * w + j / 2] += dy[(p * 2 * h + i) * 2 * w + j];
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
  require_rank4(x.shape(), "instance_norm");
  const int64_t nc = x.shape()[0] * x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(nc));
  const T* in = x.value().data();
  for (int64_t p = 0; p < nc; ++p) {
    const T* src = in + p * plane;
    T mu = 0;
    for (int64_t i = 0; i < plane; ++i) mu += src[i];
    mu /= static_cast<T>(plane);
    T var = 0;
    for (int64_t i = 0; i < plane; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(plane);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[p] = inv;
    T* dst = out.data() + p * plane;
    for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu) * inv;
  }
  return make_op<T>(std::move(out), {x}, [nc, plane, inv_std = std::move(inv_std)](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (int64_t p = 0; p < nc; ++p) {
      const T* dy = self.grad.data() + p * plane;
      const T* y = self.value.data() + p * plane;
      T mean_dy = 0, mean_dy_y = 0;
      for (int64_t i = 0; i < plane; ++i) {
        mean_dy += dy[i];
        mean_dy_y += dy[i] * y[i];
      }
      mean_dy /= static_cast<T>(plane);
      mean_dy_y /= static_cast<T>(plane);
      for (int64_t i = 0; i < plane; ++i) g[p * plane + i] += inv_std[p] * (dy[i] - mean_dy - y[i] * mean_dy_y);
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank4(x.shape(), "global_avg_pool");
  const int64_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  Tensor<T> out(Shape{n, c});
  for (int64_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (int64_t i = 0; i < plane; ++i) acc += x.value()[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  return make_op<T>(std::move(out), {x}, [n, c, plane](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    for (int64_t p = 0; p < n * c; ++p) {
      const T d = self.grad[p] / static_cast<T>(plane);
      for (int64_t i = 0; i < plane; ++i) g[p * plane + i] += d;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.shape().rank() != 2 || weight.shape().rank() != 2 || weight.shape()[1] != x.shape()[1] ||
      bias.shape().numel() != weight.shape()[0]) {
    throw ShapeError("linear: incompatible " + x.shape().str() + " x " + weight.shape().str());
  }
  const int64_t n = x.shape()[0], f = x.shape()[1], o = weight.shape()[0];
  Tensor<T> out(Shape{n, o});
  MapMat<T> y(out.data(), n, o);
  y.noalias() = ConstMapMat<T>(x.value().data(), n, f) * ConstMapMat<T>(weight.value().data(), o, f).transpose();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < o; ++c) y(r, c) += bias.value()[c];
  return make_op<T>(std::move(out), {x, weight, bias}, [n, f, o](Node<T>& self) {
    ConstMapMat<T> dy(self.grad.data(), n, o);
    if (wants_grad(self, 0)) {
      MapMat<T>(self.inputs[0]->grad_buffer().data(), n, f).noalias() +=
          dy * ConstMapMat<T>(self.inputs[1]->value.data(), o, f);
    }
    if (wants_grad(self, 1)) {
      MapMat<T>(self.inputs[1]->grad_buffer().data(), o, f).noalias() +=
          dy.transpose() * ConstMapMat<T>(self.inputs[0]->value.data(), n, f);
    }
    if (wants_grad(self, 2)) {
      auto& db = self.inputs[2]->grad_buffer();
      for (int64_t c = 0; c < o; ++c) db[c] += dy.col(c).sum();
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  const auto count = static_cast<T>(x.value().numel());
  return make_op<T>(Tensor<T>(Shape{1}, acc / count), {x}, [count](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T d = self.grad[0] / count;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
  });
}

template <typename T>
Var<T> l1_loss(const Var<T>& x, const Var<T>& y) {
  require_same_shape(x.shape(), y.shape(), "l1_loss");
  T acc = 0;
  for (int64_t i = 0; i < x.value().numel(); ++i) acc += std::abs(x.value()[i] - y.value()[i]);
  const auto count = static_cast<T>(x.value().numel());
  return make_op<T>(Tensor<T>(Shape{1}, acc / count), {x, y}, [count](Node<T>& self) {
    const T d = self.grad[0] / count;
    const auto& a = self.inputs[0]->value;
    const auto& b = self.inputs[1]->value;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.inputs[k]->grad_buffer();
      const T sign_flip = k == 0 ? T(1) : T(-1);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const T diff = a[i] - b[i];
        const T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
        g[i] += sign_flip * s * d;
      }
    }
  });
}

template <typename T>
Var<T> masked_l1_loss(const Var<T>& x, const Var<T>& y, const Tensor<T>& mask) {
  require_same_shape(x.shape(), y.shape(), "masked_l1_loss");
  require_rank4(x.shape(), "masked_l1_loss");
  const int64_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  if (mask.shape() != Shape{n, 1, x.shape()[2], x.shape()[3]}) {
    throw ShapeError("masked_l1_loss: mask " + mask.shape().str() + " not aligned with " + x.shape().str());
  }
  int64_t active = 0;
  for (T m : mask.values()) active += m != T(0) ? 1 : 0;
  if (active == 0) throw std::invalid_argument("masked_l1_loss: empty mask");
  T acc = 0;
  for (int64_t s = 0; s < n; ++s)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < plane; ++i) {
        if (mask[s * plane + i] == T(0)) continue;
        const int64_t idx = (s * c + ch) * plane + i;
        acc += std::abs(x.value()[idx] - y.value()[idx]);
      }
  const auto count = static_cast<T>(active * c);
  return make_op<T>(Tensor<T>(Shape{1}, acc / count), {x, y}, [mask, n, c, plane, count](Node<T>& self) {
    const T d = self.grad[0] / count;
    const auto& a = self.inputs[0]->value;
    const auto& b = self.inputs[1]->value;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto& g = self.inputs[k]->grad_buffer();
      const T sign_flip = k == 0 ? T(1) : T(-1);
      for (int64_t s = 0; s < n; ++s)
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < plane; ++i) {
            if (mask[s * plane + i] == T(0)) continue;
            const int64_t idx = (s * c + ch) * plane + i;
            const T diff = a[idx] - b[idx];
            const T sg = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
            g[idx] += sign_flip * sg * d;
          }
    }
  });
}

template <typename T>
Var<T> mse_loss(const Var<T>& x, const Var<T>& y) {
  require_same_shape(x.shape(), y.shape(), "mse_loss");
  T acc = 0;
  for (int64_t i = 0; i < x.value().numel(); ++i) {
    const T d = x.value()[i] - y.value()[i];
    acc += d * d;
  }
  const auto count = static_cast<T>(x.value().numel());
  return make_op<T>(Tensor<T>(Shape{1}, acc / count), {x, y}, [count](Node<T>& self) {
    const T d = T(2) * self.grad[0] / count;
    const auto& a = self.inputs[0]->value;
    const auto& b = self.inputs[1]->value;
    if (wants_grad(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += d * (a[i] - b[i]);
    }
    if (wants_grad(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= d * (a[i] - b[i]);
    }
  });
}

template <typename T>
Var<T> batch_mean(const Var<T>& x) {
  if (x.shape().rank() < 1) throw ShapeError("batch_mean: scalar input");
  const int64_t n = x.shape()[0], inner = x.value().numel() / std::max<int64_t>(n, 1);
  std::vector<int64_t> dims = x.shape().dims();
  dims[0] = 1;
  Tensor<T> out{Shape(dims)};
  for (int64_t s = 0; s < n; ++s)
    for (int64_t i = 0; i < inner; ++i) out[i] += x.value()[s * inner + i];
  for (int64_t i = 0; i < inner; ++i) out[i] /= static_cast<T>(n);
  return make_op<T>(std::move(out), {x}, [n, inner](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t s = 0; s < n; ++s)
      for (int64_t i = 0; i < inner; ++i) g[s * inner + i] += self.grad[i] / static_cast<T>(n);
  });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, T target) {
  T acc = 0;
  for (T z : logits.value().values()) {
    // max(z,0) - z*t + log(1 + exp(-|z|))
    acc += std::max(z, T(0)) - z * target + std::log1p(std::exp(-std::abs(z)));
  }
  const auto count = static_cast<T>(logits.value().numel());
  return make_op<T>(Tensor<T>(Shape{1}, acc / count), {logits}, [count, target](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& z = self.inputs[0]->value;
    const T d = self.grad[0] / count;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T sig = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i])) : std::exp(z[i]) / (T(1) + std::exp(z[i]));
      g[i] += d * (sig - target);
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().rank() != 2 || logits.shape()[0] != static_cast<int64_t>(labels.size())) {
    throw ShapeError("softmax_cross_entropy: logits " + logits.shape().str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const int64_t n = logits.shape()[0], c = logits.shape()[1];
  Tensor<T> probs(logits.shape());
  T acc = 0;
  for (int64_t r = 0; r < n; ++r) {
    const T* z = logits.value().data() + r * c;
    const T zmax = *std::max_element(z, z + c);
    T denom = 0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(z[j] - zmax);
    for (int64_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(z[j] - zmax) / denom;
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= c) throw std::out_of_range("softmax_cross_entropy: label out of range");
    acc += -(z[label] - zmax - std::log(denom));
  }
  return make_op<T>(Tensor<T>(Shape{1}, acc / static_cast<T>(n)), {logits},
                    [probs = std::move(probs), labels, n, c](Node<T>& self) {
                      auto& g = self.inputs[0]->grad_buffer();
                      const T d = self.grad[0] / static_cast<T>(n);
                      for (int64_t r = 0; r < n; ++r)
                        for (int64_t j = 0; j < c; ++j) {
                          const T onehot = j == labels[static_cast<std::size_t>(r)] ? T(1) : T(0);
                          g[r * c + j] += d * (probs[r * c + j] - onehot);
                        }
                    });
}

template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  T acc = 0;
  std::vector<Var<T>> inputs;
  std::vector<T> weights;
  for (const auto& [w, v] : terms) {
    if (v.value().numel() != 1) throw ShapeError("weighted_sum: non-scalar term " + v.shape().str());
    acc += w * v.item();
    inputs.push_back(v);
    weights.push_back(w);
  }
  return make_op<T>(Tensor<T>(Shape{1}, acc), std::move(inputs), [weights](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (wants_grad(self, k)) self.inputs[k]->grad_buffer()[0] += weights[k] * self.grad[0];
    }
  });
}

#define DERMGAN_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                               \
  template Var<T> scale(const Var<T>&, T);                                                         \
  template Var<T> leaky_relu(const Var<T>&, T);                                                    \
  template Var<T> relu(const Var<T>&);                                                             \
  template Var<T> tanh(const Var<T>&);                                                             \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                   \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, ConvGeometry);               \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>*, ConvGeometry);     \
  template Var<T> upsample_nearest2x(const Var<T>&);                                               \
  template Var<T> instance_norm(const Var<T>&, T);                                                 \
  template Var<T> global_avg_pool(const Var<T>&);                                                  \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> mean(const Var<T>&);                                                             \
  template Var<T> l1_loss(const Var<T>&, const Var<T>&);                                           \
  template Var<T> masked_l1_loss(const Var<T>&, const Var<T>&, const Tensor<T>&);                  \
  template Var<T> mse_loss(const Var<T>&, const Var<T>&);                                          \
  template Var<T> batch_mean(const Var<T>&);                                                       \
  template Var<T> bce_with_logits(const Var<T>&, T);                                               \
  template Var<T> softmax_cross_entropy(const Var<T>&, const std::vector<int>&);                   \
  template Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>&);

DERMGAN_INSTANTIATE_OPS(float)
DERMGAN_INSTANTIATE_OPS(double)

#undef DERMGAN_INSTANTIATE_OPS

}  // namespace dermgan::nn
