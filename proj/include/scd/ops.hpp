#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

namespace scd {

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t padding, std::int64_t dilation) {
  const std::int64_t span = in + 2 * padding - dilation * (k - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace detail {

// Output-index range [lo, hi) for which in-index = out*stride + off stays
// inside [0, in_extent).
struct ConvRange {
  std::int64_t lo, hi;
};

inline ConvRange conv_range(std::int64_t out_extent, std::int64_t in_extent,
                            std::int64_t stride, std::int64_t off) {
  std::int64_t lo = 0;
  if (off < 0) lo = (-off + stride - 1) / stride;
  std::int64_t hi = in_extent - off - 1;
  hi = hi < 0 ? 0 : hi / stride + 1;
  if (hi > out_extent) hi = out_extent;
  if (lo > hi) lo = hi;
  return {lo, hi};
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape plumbing
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& in) {
  Tensor out = Tensor::zeros(in.shape());
  const double* x = in.ptr();
  double* y = out.ptr();
  const std::int64_t n = in.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (detail::track(in)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    detail::attach(out, {in}, [ow, in_d, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      in_d->ensure_grad();
      const double* g = od->grad.data();
      const double* x = in_d->values.data();
      double* gi = in_d->grad.data();
      for (std::int64_t i = 0; i < n; ++i)
        if (x[i] > 0.0) gi[i] += g[i];
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* py = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  const bool na = detail::track(a), nb = detail::track(b);
  if (na || nb) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    auto bd = b.data();
    detail::attach(out, {a, b}, [ow, ad, bd, na, nb, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      if (na) {
        ad->ensure_grad();
        double* gi = ad->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gi[i] += g[i];
      }
      if (nb) {
        bd->ensure_grad();
        double* gi = bd->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gi[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* py = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
  const bool na = detail::track(a), nb = detail::track(b);
  if (na || nb) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    auto bd = b.data();
    detail::attach(out, {a, b}, [ow, ad, bd, na, nb, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      if (na) {
        ad->ensure_grad();
        double* gi = ad->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gi[i] += g[i];
      }
      if (nb) {
        bd->ensure_grad();
        double* gi = bd->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gi[i] -= g[i];
      }
    });
  }
  return out;
}

// Multiply by a plain constant (no gradient for the constant).
inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  const double* pa = a.ptr();
  double* py = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) py[i] = c * pa[i];
  if (detail::track(a)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    detail::attach(out, {a}, [ow, ad, c, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      ad->ensure_grad();
      const double* g = od->grad.data();
      double* gi = ad->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gi[i] += c * g[i];
    });
  }
  return out;
}

// Multiply by a learned single-element tensor; gradient flows to both sides.
inline Tensor tensor_scale(const Tensor& a, const Tensor& s) {
  detail::require(s.size() == 1, "tensor_scale: scale must hold a single element");
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  const double c = s.values()[0];
  const double* pa = a.ptr();
  double* py = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) py[i] = c * pa[i];
  const bool na = detail::track(a), ns = detail::track(s);
  if (na || ns) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    auto sd = s.data();
    detail::attach(out, {a, s}, [ow, ad, sd, na, ns, c, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      if (na) {
        ad->ensure_grad();
        double* gi = ad->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gi[i] += c * g[i];
      }
      if (ns) {
        sd->ensure_grad();
        const double* x = ad->values.data();
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += x[i] * g[i];
        sd->grad[0] += acc;
      }
    });
  }
  return out;
}

// Per-channel scaling of an NCHW tensor by a vector of length C.
inline Tensor channel_scale(const Tensor& a, const Tensor& v) {
  detail::require(a.ndim() == 4, "channel_scale: input must be NCHW");
  detail::require(v.ndim() == 1 && v.dim(0) == a.dim(1),
                  "channel_scale: vector length must equal channel count");
  const std::int64_t N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.ptr();
  const double* pv = v.ptr();
  double* py = out.ptr();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double c = pv[nc % C];
    const double* src = pa + nc * HW;
    double* dst = py + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) dst[i] = c * src[i];
  }
  const bool na = detail::track(a), nv = detail::track(v);
  if (na || nv) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    auto vd = v.data();
    detail::attach(out, {a, v}, [ow, ad, vd, na, nv, N, C, HW]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      const double* pv = vd->values.data();
      const double* pa = ad->values.data();
      if (na) ad->ensure_grad();
      if (nv) vd->ensure_grad();
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const std::int64_t c = nc % C;
        const double* gr = g + nc * HW;
        if (na) {
          double* gi = ad->grad.data() + nc * HW;
          const double cv = pv[c];
          for (std::int64_t i = 0; i < HW; ++i) gi[i] += cv * gr[i];
        }
        if (nv) {
          const double* src = pa + nc * HW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < HW; ++i) acc += src[i] * gr[i];
          vd->grad[c] += acc;
        }
      }
    });
  }
  return out;
}

// Contiguous slice of the flattened tensor, as a 1-D tensor.
inline Tensor select(const Tensor& a, std::int64_t offset, std::int64_t length) {
  detail::require(offset >= 0 && length >= 1 && offset + length <= a.size(),
                  "select: range out of bounds");
  std::vector<double> vals(a.ptr() + offset, a.ptr() + offset + length);
  Tensor out = Tensor::from_values({length}, std::move(vals));
  if (detail::track(a)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    detail::attach(out, {a}, [ow, ad, offset, length]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      ad->ensure_grad();
      const double* g = od->grad.data();
      double* gi = ad->grad.data() + offset;
      for (std::int64_t i = 0; i < length; ++i) gi[i] += g[i];
    });
  }
  return out;
}

// Same data, new shape; gradient passes straight through.
inline Tensor reshape(const Tensor& a, const Shape& shape) {
  detail::require(numel(shape) == a.size(),
                  "reshape: element count mismatch for " + shape_str(shape));
  Tensor out = Tensor::from_values(shape, a.values());
  if (detail::track(a)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    const std::int64_t n = a.size();
    detail::attach(out, {a}, [ow, ad, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      ad->ensure_grad();
      const double* g = od->grad.data();
      double* gi = ad->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gi[i] += g[i];
    });
  }
  return out;
}

inline Tensor reduce_sum(const Tensor& a) {
  double acc = 0.0;
  const double* pa = a.ptr();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::track(a)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    detail::attach(out, {a}, [ow, ad, n]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      ad->ensure_grad();
      const double g = od->grad[0];
      double* gi = ad->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gi[i] += g;
    });
  }
  return out;
}

// Reverse the last (width) axis.
inline Tensor flip_horizontal(const Tensor& a) {
  detail::require(a.ndim() >= 1, "flip_horizontal: needs at least one axis");
  const std::int64_t W = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.size() / W;
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.ptr();
  double* py = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t w = 0; w < W; ++w) py[r * W + w] = pa[r * W + (W - 1 - w)];
  if (detail::track(a)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto ad = a.data();
    detail::attach(out, {a}, [ow, ad, rows, W]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      ad->ensure_grad();
      const double* g = od->grad.data();
      double* gi = ad->grad.data();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t w = 0; w < W; ++w) gi[r * W + (W - 1 - w)] += g[r * W + w];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  detail::require(!parts.empty(), "concat: empty tensor list");
  const int nd = parts[0].ndim();
  detail::require(axis >= 0 && axis < nd, "concat: axis out of range");
  Shape out_shape = parts[0].shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    detail::require(parts[i].ndim() == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis)
        detail::require(parts[i].dim(d) == parts[0].dim(d),
                        "concat: non-axis extent mismatch");
    out_shape[static_cast<std::size_t>(axis)] += parts[i].dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  Tensor out = Tensor::zeros(out_shape);
  double* py = out.ptr();
  const std::int64_t out_block = out_shape[static_cast<std::size_t>(axis)] * inner;
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      offsets[i] = off;
      const std::int64_t block = parts[i].dim(axis) * inner;
      const double* src = parts[i].ptr();
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy(src + o * block, src + (o + 1) * block, py + o * out_block + off);
      off += block;
    }
  }
  bool any = false;
  std::vector<bool> need(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    need[i] = detail::track(parts[i]);
    any = any || need[i];
  }
  if (any) {
    std::weak_ptr<TensorData> ow = out.data();
    std::vector<std::shared_ptr<TensorData>> datas;
    std::vector<std::int64_t> blocks;
    for (auto& p : parts) {
      datas.push_back(p.data());
      blocks.push_back(p.dim(axis) * inner);
    }
    detail::attach(out, parts, [ow, datas, blocks, offsets, need, outer, out_block]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      for (std::size_t i = 0; i < datas.size(); ++i) {
        if (!need[i]) continue;
        datas[i]->ensure_grad();
        double* gi = datas[i]->grad.data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = g + o * out_block + offsets[i];
          double* dst = gi + o * blocks[i];
          for (std::int64_t j = 0; j < blocks[i]; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& in, const Tensor& kernel, const Tensor& bias,
                     int stride = 1, int padding = 0, int dilation = 1) {
  detail::require(in.ndim() == 4, "conv2d: input must be NCHW");
  detail::require(kernel.ndim() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw]");
  detail::require(bias.ndim() == 1 && bias.dim(0) == kernel.dim(0),
                  "conv2d: bias length must equal Cout");
  if (stride < 1 || dilation < 1 || padding < 0)
    throw ConfigError("conv2d: stride/dilation must be >= 1 and padding >= 0");
  if (in.dim(1) != kernel.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(in.dim(1)) +
                     " != kernel channels " + std::to_string(kernel.dim(1)));

  const std::int64_t N = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::int64_t Cout = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  const std::int64_t OH = conv_out_extent(H, KH, stride, padding, dilation);
  const std::int64_t OW = conv_out_extent(W, KW, stride, padding, dilation);
  if (OH < 1 || OW < 1)
    throw GeometryError("conv2d: empty output for input " + shape_str(in.shape()) +
                        " with kernel " + shape_str(kernel.shape()));

  Tensor out = Tensor::zeros({N, Cout, OH, OW});
  {
    const double* pin = in.ptr();
    const double* pk = kernel.ptr();
    const double* pb = bias.ptr();
    double* po = out.ptr();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t co = 0; co < Cout; ++co) {
        double* oplane = po + (n * Cout + co) * OH * OW;
        std::fill(oplane, oplane + OH * OW, pb[co]);
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
          const double* iplane = pin + (n * Cin + ci) * H * W;
          const double* kpatch = pk + (co * Cin + ci) * KH * KW;
          for (std::int64_t kh = 0; kh < KH; ++kh) {
            const std::int64_t offh = kh * dilation - padding;
            const auto rows = detail::conv_range(OH, H, stride, offh);
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const double wv = kpatch[kh * KW + kw];
              const std::int64_t offw = kw * dilation - padding;
              const auto cols = detail::conv_range(OW, W, stride, offw);
              for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                const double* irow = iplane + (oh * stride + offh) * W + offw;
                double* orow = oplane + oh * OW;
                if (stride == 1) {
                  for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow)
                    orow[ow] += wv * irow[ow];
                } else {
                  for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow)
                    orow[ow] += wv * irow[ow * stride];
                }
              }
            }
          }
        }
      }
    }
  }

  const bool ni = detail::track(in), nk = detail::track(kernel), nb = detail::track(bias);
  if (ni || nk || nb) {
    std::weak_ptr<TensorData> ow_ = out.data();
    auto in_d = in.data();
    auto k_d = kernel.data();
    auto b_d = bias.data();
    detail::attach(out, {in, kernel, bias},
                   [ow_, in_d, k_d, b_d, ni, nk, nb, N, Cin, H, W, Cout, KH, KW, OH, OW,
                    stride, padding, dilation]() {
      auto od = ow_.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      const double* pin = in_d->values.data();
      const double* pk = k_d->values.data();
      if (ni) in_d->ensure_grad();
      if (nk) k_d->ensure_grad();
      if (nb) b_d->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t co = 0; co < Cout; ++co) {
          const double* gplane = g + (n * Cout + co) * OH * OW;
          if (nb) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
            b_d->grad[co] += acc;
          }
          for (std::int64_t ci = 0; ci < Cin; ++ci) {
            const double* iplane = pin + (n * Cin + ci) * H * W;
            double* giplane = ni ? in_d->grad.data() + (n * Cin + ci) * H * W : nullptr;
            const double* kpatch = pk + (co * Cin + ci) * KH * KW;
            double* gkpatch = nk ? k_d->grad.data() + (co * Cin + ci) * KH * KW : nullptr;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
              const std::int64_t offh = kh * dilation - padding;
              const auto rows = detail::conv_range(OH, H, stride, offh);
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                const std::int64_t offw = kw * dilation - padding;
                const auto cols = detail::conv_range(OW, W, stride, offw);
                const double wv = kpatch[kh * KW + kw];
                double wacc = 0.0;
                for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                  const double* grow = gplane + oh * OW;
                  const std::int64_t ibase = (oh * stride + offh) * W + offw;
                  if (stride == 1) {
                    if (nk) {
                      const double* irow = iplane + ibase;
                      for (std::int64_t owi = cols.lo; owi < cols.hi; ++owi)
                        wacc += irow[owi] * grow[owi];
                    }
                    if (ni) {
                      double* girow = giplane + ibase;
                      for (std::int64_t owi = cols.lo; owi < cols.hi; ++owi)
                        girow[owi] += wv * grow[owi];
                    }
                  } else {
                    if (nk) {
                      const double* irow = iplane + ibase;
                      for (std::int64_t owi = cols.lo; owi < cols.hi; ++owi)
                        wacc += irow[owi * stride] * grow[owi];
                    }
                    if (ni) {
                      double* girow = giplane + ibase;
                      for (std::int64_t owi = cols.lo; owi < cols.hi; ++owi)
                        girow[owi * stride] += wv * grow[owi];
                    }
                  }
                }
                if (nk) gkpatch[kh * KW + kw] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Group-style feature normalization over (channels-in-group, H, W) with a
// per-channel affine transform.
inline Tensor normalize_features(const Tensor& in, int groups, const Tensor& scale_t,
                                 const Tensor& shift_t, double eps = 1e-5) {
  detail::require(in.ndim() == 4, "normalize_features: input must be NCHW");
  const std::int64_t N = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
  if (groups < 1 || C % groups != 0)
    throw ConfigError("normalize_features: groups " + std::to_string(groups) +
                      " must divide channel count " + std::to_string(C));
  detail::require(scale_t.ndim() == 1 && scale_t.dim(0) == C &&
                      shift_t.ndim() == 1 && shift_t.dim(0) == C,
                  "normalize_features: scale/shift must have length C");

  const std::int64_t cpg = C / groups;
  const std::int64_t m = cpg * HW;  // elements per (sample, group)
  Tensor out = Tensor::zeros(in.shape());
  std::vector<double> mean(static_cast<std::size_t>(N * groups));
  std::vector<double> inv_std(static_cast<std::size_t>(N * groups));
  {
    const double* x = in.ptr();
    const double* sc = scale_t.ptr();
    const double* sh = shift_t.ptr();
    double* y = out.ptr();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
        const std::int64_t base = (n * C + gidx * cpg) * HW;
        double s = 0.0, s2 = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          const double v = x[base + i];
          s += v;
          s2 += v * v;
        }
        const double mu = s / static_cast<double>(m);
        double var = s2 / static_cast<double>(m) - mu * mu;
        if (var < 0.0) var = 0.0;
        const double is = 1.0 / std::sqrt(var + eps);
        mean[static_cast<std::size_t>(n * groups + gidx)] = mu;
        inv_std[static_cast<std::size_t>(n * groups + gidx)] = is;
        for (std::int64_t cc = 0; cc < cpg; ++cc) {
          const std::int64_t c = gidx * cpg + cc;
          const double a = sc[c] * is;
          const double b = sh[c] - sc[c] * is * mu;
          const double* xr = x + (n * C + c) * HW;
          double* yr = y + (n * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) yr[i] = a * xr[i] + b;
        }
      }
    }
  }

  const bool ni = detail::track(in), ns = detail::track(scale_t), nh = detail::track(shift_t);
  if (ni || ns || nh) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    auto sc_d = scale_t.data();
    auto sh_d = shift_t.data();
    detail::attach(out, {in, scale_t, shift_t},
                   [ow, in_d, sc_d, sh_d, ni, ns, nh, mean, inv_std, N, C, HW, groups,
                    cpg, m]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      const double* x = in_d->values.data();
      const double* sc = sc_d->values.data();
      if (ni) in_d->ensure_grad();
      if (ns) sc_d->ensure_grad();
      if (nh) sh_d->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
          const double mu = mean[static_cast<std::size_t>(n * groups + gidx)];
          const double is = inv_std[static_cast<std::size_t>(n * groups + gidx)];
          // First pass: per-channel reductions and the two group sums of
          // gz = dy*scale (dL/d xhat).
          double sum_gz = 0.0, sum_gz_xhat = 0.0;
          for (std::int64_t cc = 0; cc < cpg; ++cc) {
            const std::int64_t c = gidx * cpg + cc;
            const double* gr = g + (n * C + c) * HW;
            const double* xr = x + (n * C + c) * HW;
            double dsc = 0.0, dsh = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) {
              const double xhat = (xr[i] - mu) * is;
              dsc += gr[i] * xhat;
              dsh += gr[i];
            }
            if (ns) sc_d->grad[c] += dsc;
            if (nh) sh_d->grad[c] += dsh;
            sum_gz += sc[c] * dsh;
            sum_gz_xhat += sc[c] * dsc;
          }
          if (!ni) continue;
          const double mg = sum_gz / static_cast<double>(m);
          const double mgx = sum_gz_xhat / static_cast<double>(m);
          for (std::int64_t cc = 0; cc < cpg; ++cc) {
            const std::int64_t c = gidx * cpg + cc;
            const double* gr = g + (n * C + c) * HW;
            const double* xr = x + (n * C + c) * HW;
            double* gi = in_d->grad.data() + (n * C + c) * HW;
            const double s = sc[c];
            for (std::int64_t i = 0; i < HW; ++i) {
              const double xhat = (xr[i] - mu) * is;
              gi[i] += is * (s * gr[i] - mg - xhat * mgx);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling, linear, softmax
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(const Tensor& in) {
  detail::require(in.ndim() == 4, "global_avg_pool: input must be NCHW");
  const std::int64_t N = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
  Tensor out = Tensor::zeros({N, C, 1, 1});
  const double* x = in.ptr();
  double* y = out.ptr();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const double* row = x + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) acc += row[i];
    y[nc] = acc / static_cast<double>(HW);
  }
  if (detail::track(in)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    detail::attach(out, {in}, [ow, in_d, N, C, HW]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      in_d->ensure_grad();
      const double* g = od->grad.data();
      const double inv = 1.0 / static_cast<double>(HW);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        double* gi = in_d->grad.data() + nc * HW;
        const double gv = g[nc] * inv;
        for (std::int64_t i = 0; i < HW; ++i) gi[i] += gv;
      }
    });
  }
  return out;
}

inline Tensor linear(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  detail::require(in.ndim() == 2, "linear: input must be [N,Din]");
  detail::require(weight.ndim() == 2, "linear: weight must be [Dout,Din]");
  if (in.dim(1) != weight.dim(1))
    throw ShapeError("linear: inner dimensions disagree: " + shape_str(in.shape()) +
                     " vs " + shape_str(weight.shape()));
  detail::require(bias.ndim() == 1 && bias.dim(0) == weight.dim(0),
                  "linear: bias length must equal Dout");
  const std::int64_t N = in.dim(0), Din = in.dim(1), Dout = weight.dim(0);
  Tensor out = Tensor::zeros({N, Dout});
  {
    const double* x = in.ptr();
    const double* w = weight.ptr();
    const double* b = bias.ptr();
    double* y = out.ptr();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t o = 0; o < Dout; ++o) {
        double acc = b[o];
        const double* xr = x + n * Din;
        const double* wr = w + o * Din;
        for (std::int64_t i = 0; i < Din; ++i) acc += xr[i] * wr[i];
        y[n * Dout + o] = acc;
      }
    }
  }
  const bool ni = detail::track(in), nw = detail::track(weight), nb = detail::track(bias);
  if (ni || nw || nb) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    auto w_d = weight.data();
    auto b_d = bias.data();
    detail::attach(out, {in, weight, bias}, [ow, in_d, w_d, b_d, ni, nw, nb, N, Din, Dout]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      const double* g = od->grad.data();
      const double* x = in_d->values.data();
      const double* w = w_d->values.data();
      if (ni) in_d->ensure_grad();
      if (nw) w_d->ensure_grad();
      if (nb) b_d->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n) {
        const double* gr = g + n * Dout;
        for (std::int64_t o = 0; o < Dout; ++o) {
          const double gv = gr[o];
          if (gv == 0.0) continue;
          if (nb) b_d->grad[o] += gv;
          const double* wr = w + o * Din;
          const double* xr = x + n * Din;
          if (ni) {
            double* gi = in_d->grad.data() + n * Din;
            for (std::int64_t i = 0; i < Din; ++i) gi[i] += gv * wr[i];
          }
          if (nw) {
            double* gw = w_d->grad.data() + o * Din;
            for (std::int64_t i = 0; i < Din; ++i) gw[i] += gv * xr[i];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor softmax(const Tensor& in, int axis) {
  const int nd = in.ndim();
  if (axis < 0) axis += nd;
  detail::require(axis >= 0 && axis < nd, "softmax: axis out of range");
  const std::int64_t K = in.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= in.dim(d);
  for (int d = axis + 1; d < nd; ++d) inner *= in.dim(d);

  Tensor out = Tensor::zeros(in.shape());
  {
    const double* x = in.ptr();
    double* y = out.ptr();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * K * inner + i;
        double mx = x[base];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, x[base + k * inner]);
        double sum = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
          const double e = std::exp(x[base + k * inner] - mx);
          y[base + k * inner] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t k = 0; k < K; ++k) y[base + k * inner] *= inv;
      }
    }
  }
  if (detail::track(in)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    detail::attach(out, {in}, [ow, in_d, outer, inner, K]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      in_d->ensure_grad();
      const double* g = od->grad.data();
      const double* y = od->values.data();
      double* gi = in_d->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * K * inner + i;
          double dot = 0.0;
          for (std::int64_t k = 0; k < K; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::int64_t k = 0; k < K; ++k) {
            const std::int64_t idx = base + k * inner;
            gi[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

// Mean weighted negative log-likelihood over non-ignored pixels, computed
// from logits in log-sum-exp form. `targets` is laid out [N,H,W] row-major
// (or [N] for 2-D logits). The normalizer is the count of non-ignored
// pixels, so class weights rescale each pixel's contribution.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& class_weights = {},
                            int ignore_label = -1) {
  detail::require(logits.ndim() == 4 || logits.ndim() == 2,
                  "cross_entropy: logits must be [N,K,H,W] or [N,K]");
  const std::int64_t N = logits.dim(0);
  const std::int64_t K = logits.dim(1);
  const std::int64_t HW = logits.ndim() == 4 ? logits.dim(2) * logits.dim(3) : 1;
  detail::require(static_cast<std::int64_t>(targets.size()) == N * HW,
                  "cross_entropy: target map size mismatch");
  if (!class_weights.empty())
    detail::require(static_cast<std::int64_t>(class_weights.size()) == K,
                    "cross_entropy: class_weights length must equal K");

  auto weight_of = [&](int t) {
    return class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(t)];
  };

  double total = 0.0;
  std::int64_t count = 0;
  {
    const double* x = logits.ptr();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t p = 0; p < HW; ++p) {
        const int t = targets[static_cast<std::size_t>(n * HW + p)];
        if (t == ignore_label) continue;
        if (t < 0 || t >= K)
          throw ValueError("cross_entropy: target " + std::to_string(t) +
                           " out of range [0," + std::to_string(K) + ")");
        const std::int64_t base = n * K * HW + p;
        double mx = x[base];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, x[base + k * HW]);
        double sum = 0.0;
        for (std::int64_t k = 0; k < K; ++k) sum += std::exp(x[base + k * HW] - mx);
        const double lse = mx + std::log(sum);
        total += weight_of(t) * (lse - x[base + t * HW]);
        ++count;
      }
    }
  }
  Tensor out = Tensor::scalar(count > 0 ? total / static_cast<double>(count) : 0.0);
  if (detail::track(logits) && count > 0) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = logits.data();
    detail::attach(out, {logits},
                   [ow, in_d, targets, class_weights, ignore_label, N, K, HW, count]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      in_d->ensure_grad();
      const double coef = od->grad[0] / static_cast<double>(count);
      const double* x = in_d->values.data();
      double* gi = in_d->grad.data();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t p = 0; p < HW; ++p) {
          const int t = targets[static_cast<std::size_t>(n * HW + p)];
          if (t == ignore_label) continue;
          const double wt =
              class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(t)];
          const std::int64_t base = n * K * HW + p;
          double mx = x[base];
          for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, x[base + k * HW]);
          double sum = 0.0;
          for (std::int64_t k = 0; k < K; ++k) sum += std::exp(x[base + k * HW] - mx);
          const double inv = 1.0 / sum;
          for (std::int64_t k = 0; k < K; ++k) {
            const double pk = std::exp(x[base + k * HW] - mx) * inv;
            const double ind = (k == t) ? 1.0 : 0.0;
            gi[base + k * HW] += wt * (pk - ind) * coef;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

// Bilinear interpolation, align-corners-false. Exact identity when the
// output extent equals the input extent.
inline Tensor bilinear_resize(const Tensor& in, std::int64_t out_h, std::int64_t out_w) {
  detail::require(in.ndim() == 4, "bilinear_resize: input must be NCHW");
  if (out_h < 1 || out_w < 1) throw GeometryError("bilinear_resize: empty output");
  const std::int64_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);

  struct Tap {
    std::int64_t i0, i1;
    double w0, w1;
  };
  auto make_taps = [](std::int64_t out_e, std::int64_t in_e) {
    std::vector<Tap> taps(static_cast<std::size_t>(out_e));
    const double scale = static_cast<double>(in_e) / static_cast<double>(out_e);
    for (std::int64_t o = 0; o < out_e; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      const double f = std::floor(src);
      std::int64_t i0 = static_cast<std::int64_t>(f);
      double frac = src - f;
      std::int64_t i1 = i0 + 1;
      if (i0 < 0) i0 = 0;
      if (i0 > in_e - 1) i0 = in_e - 1;
      if (i1 < 0) i1 = 0;
      if (i1 > in_e - 1) i1 = in_e - 1;
      taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
  };
  const auto ty = make_taps(out_h, H);
  const auto tx = make_taps(out_w, W);

  Tensor out = Tensor::zeros({N, C, out_h, out_w});
  {
    const double* x = in.ptr();
    double* y = out.ptr();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double* plane = x + nc * H * W;
      double* oplane = y + nc * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& rt = ty[static_cast<std::size_t>(oy)];
        const double* r0 = plane + rt.i0 * W;
        const double* r1 = plane + rt.i1 * W;
        double* orow = oplane + oy * out_w;
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& ct = tx[static_cast<std::size_t>(ox)];
          orow[ox] = rt.w0 * (ct.w0 * r0[ct.i0] + ct.w1 * r0[ct.i1]) +
                     rt.w1 * (ct.w0 * r1[ct.i0] + ct.w1 * r1[ct.i1]);
        }
      }
    }
  }
  if (detail::track(in)) {
    std::weak_ptr<TensorData> ow = out.data();
    auto in_d = in.data();
    detail::attach(out, {in}, [ow, in_d, ty, tx, N, C, H, W, out_h, out_w]() {
      auto od = ow.lock();
      if (!od || od->grad.empty()) return;
      in_d->ensure_grad();
      const double* g = od->grad.data();
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        double* gplane = in_d->grad.data() + nc * H * W;
        const double* grow_base = g + nc * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const auto& rt = ty[static_cast<std::size_t>(oy)];
          const double* grow = grow_base + oy * out_w;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const auto& ct = tx[static_cast<std::size_t>(ox)];
            const double gv = grow[ox];
            gplane[rt.i0 * W + ct.i0] += rt.w0 * ct.w0 * gv;
            gplane[rt.i0 * W + ct.i1] += rt.w0 * ct.w1 * gv;
            gplane[rt.i1 * W + ct.i0] += rt.w1 * ct.w0 * gv;
            gplane[rt.i1 * W + ct.i1] += rt.w1 * ct.w1 * gv;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace scd
