#pragma once

// Fixed-point executor for the optimized (folded, fused, quantized)
// graph. Emulates the core datapath numerics: 16-bit operands, exact
// 64-bit MAC accumulation, bias at accumulator precision, round-half-to-
// even requantization, free-layer tails in the 16-bit domain.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "yuvnet/graph.hpp"
#include "yuvnet/image.hpp"
#include "yuvnet/parallel.hpp"
#include "yuvnet/passes.hpp"
#include "yuvnet/tensor.hpp"

namespace yuvnet {

class QFormatMismatch : public GraphError {
public:
  using GraphError::GraphError;
};

struct QExecPlan {
  NetworkGraph graph;  // quantized: q16 weights, per-node formats/shifts
  std::vector<MacroOp> macros;
};

inline QExecPlan build_plan(const NetworkGraph &quantized) {
  QExecPlan plan;
  plan.graph = quantized;
  FusionResult fused = fuse_sequences(quantized);
  for (const auto &d : fused.diagnostics)
    if (d.level == Diagnostic::Level::Error) throw NonConvLedLayer(d.node, d.message);
  plan.macros = std::move(fused.macros);
  for (const auto &n : plan.graph.nodes) {
    if (n.attrs.out_frac < 0)
      throw GraphError(n.name, "node has no QFormat annotation; run quantize_graph first");
    if (is_convlike(n.kind) && n.attrs.requant_shift < 0)
      throw GraphError(n.name, "negative requantization shift");
  }
  return plan;
}

namespace qdetail {

inline std::int64_t quantize_exact(float v, int frac_bits) {
  return std::llround(double(v) * std::ldexp(1.0, frac_bits));
}

inline QTensor pad_codes(const QTensor &x, int amount, const std::vector<std::int16_t> &pad) {
  if (amount == 0) return x;
  const auto &d = x.shape.dims;
  const std::uint32_t p = std::uint32_t(amount);
  QTensor out(Shape{d[0], d[1], d[2] + 2 * p, d[3] + 2 * p}, x.qformat);
  for (std::uint32_t n = 0; n < d[0]; ++n)
    for (std::uint32_t c = 0; c < d[1]; ++c)
      for (std::uint32_t h = 0; h < d[2] + 2 * p; ++h)
        for (std::uint32_t w = 0; w < d[3] + 2 * p; ++w) {
          bool inside = h >= p && h < d[2] + p && w >= p && w < d[3] + p;
          out.data[((std::size_t(n) * d[1] + c) * (d[2] + 2 * p) + h) * (d[3] + 2 * p) + w] =
              inside
                  ? x.data[((std::size_t(n) * d[1] + c) * d[2] + (h - p)) * d[3] + (w - p)]
                  : pad[c];
        }
  return out;
}

inline std::vector<std::int16_t> pad_value_codes(const NetworkGraph &g, const Node &n,
                                                 std::uint32_t cin, int in_frac) {
  std::vector<std::int16_t> codes(cin, 0);
  if (n.attrs.pad_mode == PadMode::Constant) {
    if (g.has_blob(n.name + ".pad_values")) {
      const auto &pv = g.float_blob(n.name + ".pad_values").data;
      for (std::uint32_t c = 0; c < cin; ++c) codes[c] = quantize_value(pv[c], in_frac);
    } else {
      std::fill(codes.begin(), codes.end(), quantize_value(n.attrs.pad_value, in_frac));
    }
  }
  return codes;
}

inline QTensor conv_fixed(const QTensor &x, const QTensor &w, const std::vector<float> &bias,
                          const Node &n) {
  const auto &wd = w.shape.dims;
  const std::uint32_t cout = wd[0], cin = wd[1], kh = wd[2], kw = wd[3];
  const int stride = n.attrs.stride;
  const int acc_frac = x.qformat.frac_bits + w.qformat.frac_bits;
  const int shift = n.attrs.requant_shift;

  const auto &xd = x.shape.dims;
  const std::uint32_t ho = (xd[2] - kh) / stride + 1;
  const std::uint32_t wo = (xd[3] - kw) / stride + 1;
  QTensor out(Shape{xd[0], cout, ho, wo}, QFormat(n.attrs.out_frac));

  parallel_for(cout, [&](std::size_t co) {
    const std::int64_t b = quantize_exact(bias.empty() ? 0.0f : bias[co], acc_frac);
    for (std::uint32_t bn = 0; bn < xd[0]; ++bn)
      for (std::uint32_t oh = 0; oh < ho; ++oh)
        for (std::uint32_t ow = 0; ow < wo; ++ow) {
          std::int64_t acc = 0;
          for (std::uint32_t ci = 0; ci < cin; ++ci)
            for (std::uint32_t r = 0; r < kh; ++r) {
              const std::int16_t *xrow =
                  &x.data[((std::size_t(bn) * cin + ci) * xd[2] + oh * stride + r) * xd[3] +
                          ow * stride];
              const std::int16_t *wrow =
                  &w.data[((std::size_t(co) * cin + ci) * kh + r) * kw];
              for (std::uint32_t c = 0; c < kw; ++c)
                acc = qmac_accumulate(acc, xrow[c], wrow[c]);
            }
          out.data[((std::size_t(bn) * cout + std::uint32_t(co)) * ho + oh) * wo + ow] =
              saturate16(rounding_rshift(acc + b, shift));
        }
  });
  return out;
}

inline QTensor tconv_fixed(const QTensor &x, const QTensor &w, const std::vector<float> &bias,
                           const Node &n) {
  const auto &wd = w.shape.dims;
  const std::uint32_t cout = wd[0], cin = wd[1];
  const int acc_frac = x.qformat.frac_bits + w.qformat.frac_bits;
  const int shift = n.attrs.requant_shift;
  const auto &xd = x.shape.dims;
  const std::uint32_t ho = xd[2] * 2, wo = xd[3] * 2;
  QTensor out(Shape{xd[0], cout, ho, wo}, QFormat(n.attrs.out_frac));

  parallel_for(cout, [&](std::size_t co) {
    const std::int64_t b = quantize_exact(bias.empty() ? 0.0f : bias[co], acc_frac);
    for (std::uint32_t bn = 0; bn < xd[0]; ++bn)
      for (std::uint32_t oh = 0; oh < ho; ++oh)
        for (std::uint32_t ow = 0; ow < wo; ++ow) {
          std::int64_t acc = 0;
          for (std::uint32_t ci = 0; ci < cin; ++ci)
            for (int a = 0; a < 5; ++a) {
              int ih2 = int(oh) - a + 2;
              if (ih2 < 0 || ih2 % 2 || ih2 / 2 >= int(xd[2])) continue;
              for (int c = 0; c < 5; ++c) {
                int iw2 = int(ow) - c + 2;
                if (iw2 < 0 || iw2 % 2 || iw2 / 2 >= int(xd[3])) continue;
                acc = qmac_accumulate(
                    acc,
                    x.data[((std::size_t(bn) * cin + ci) * xd[2] + ih2 / 2) * xd[3] + iw2 / 2],
                    w.data[((std::size_t(co) * cin + ci) * 5 + a) * 5 + c]);
              }
            }
          out.data[((std::size_t(bn) * cout + std::uint32_t(co)) * ho + oh) * wo + ow] =
              saturate16(rounding_rshift(acc + b, shift));
        }
  });
  return out;
}

// 8-bit pixel -> code by left shift, saturating (a frame brighter than
// the calibration set must clip, not wrap).
inline std::int16_t pixel_code(std::uint8_t p, int frac) {
  return saturate16(std::int64_t(p) << frac);
}

inline QTensor plane_codes(const std::vector<std::uint8_t> &p, std::uint32_t h,
                           std::uint32_t w, int frac) {
  QTensor t(Shape{1, 1, h, w}, QFormat(frac));
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = pixel_code(p[i], frac);
  return t;
}

}  // namespace qdetail

inline std::map<std::string, QTensor> run_fixed(const QExecPlan &plan, const Frame &frame) {
  const NetworkGraph &g = plan.graph;
  if (frame.width != g.input_spec.width || frame.height != g.input_spec.height)
    throw ShapeMismatch("frame resolution does not match the model input spec");

  std::map<std::string, QTensor> acts;
  auto in = [&](const Node &n, std::size_t i) -> const QTensor & {
    return acts.at(n.inputs.at(i));
  };

  for (const auto &n : g.nodes) {
    QTensor out;
    switch (n.kind) {
      case OpKind::InputYUV420: {
        const int f = n.attrs.out_frac;
        if (n.attrs.plane == "y") {
          out = qdetail::plane_codes(frame.y, frame.height, frame.width, f);
        } else {
          QTensor u = qdetail::plane_codes(frame.u, frame.height / 2, frame.width / 2, f);
          out = QTensor(Shape{1, 2, frame.height / 2, frame.width / 2}, QFormat(f));
          std::copy(u.data.begin(), u.data.end(), out.data.begin());
          for (std::size_t i = 0; i < frame.v.size(); ++i)
            out.data[u.data.size() + i] = qdetail::pixel_code(frame.v[i], f);
        }
        break;
      }
      case OpKind::InputBGR: {
        // The YUV->BGR conversion runs off-core; quantize its result as
        // the DMA into the accelerator would.
        FloatTensor y = detail::plane_to_tensor(frame.y, frame.height, frame.width);
        FloatTensor u = detail::plane_to_tensor(frame.u, frame.height / 2, frame.width / 2);
        FloatTensor v = detail::plane_to_tensor(frame.v, frame.height / 2, frame.width / 2);
        out = quantize(yuv420_to_bgr(y, u, v), QFormat(n.attrs.out_frac)).tensor;
        break;
      }
      case OpKind::Conv:
      case OpKind::YoloHead:
      case OpKind::SegHead: {
        const QTensor &x = in(n, 0);
        QTensor xp = qdetail::pad_codes(
            x, n.attrs.pad,
            qdetail::pad_value_codes(g, n, x.shape.dims[1], x.qformat.frac_bits));
        out = qdetail::conv_fixed(xp, g.q_blob(n.name + ".weight"),
                                  g.float_blob(n.name + ".bias").data, n);
        break;
      }
      case OpKind::TransposedConv:
        out = qdetail::tconv_fixed(in(n, 0), g.q_blob(n.name + ".weight"),
                                   g.float_blob(n.name + ".bias").data, n);
        break;
      case OpKind::BatchNorm:
        throw GraphError(n.name, "batchnorm must be folded before fixed-point execution");
      case OpKind::ReLU: {
        const QTensor &x = in(n, 0);
        out = QTensor(x.shape, x.qformat);
        for (std::size_t i = 0; i < x.data.size(); ++i)
          out.data[i] = std::max<std::int16_t>(0, x.data[i]);
        break;
      }
      case OpKind::MaxPool: {
        const QTensor &x = in(n, 0);
        const auto &d = x.shape.dims;
        out = QTensor(Shape{d[0], d[1], d[2] / 2, d[3] / 2}, x.qformat);
        for (std::uint32_t bn = 0; bn < d[0]; ++bn)
          for (std::uint32_t c = 0; c < d[1]; ++c)
            for (std::uint32_t h = 0; h < d[2] / 2; ++h)
              for (std::uint32_t w = 0; w < d[3] / 2; ++w) {
                auto v = [&](std::uint32_t dh, std::uint32_t dw) {
                  return x.data[((std::size_t(bn) * d[1] + c) * d[2] + 2 * h + dh) * d[3] +
                                2 * w + dw];
                };
                out.data[((std::size_t(bn) * d[1] + c) * (d[2] / 2) + h) * (d[3] / 2) + w] =
                    std::max(std::max(v(0, 0), v(0, 1)), std::max(v(1, 0), v(1, 1)));
              }
        break;
      }
      case OpKind::Concat: {
        const QTensor &x0 = in(n, 0);
        std::uint32_t ctotal = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const QTensor &x = in(n, i);
          if (x.qformat != x0.qformat)
            throw QFormatMismatch(n.name, "concat inputs have differing QFormats");
          ctotal += x.shape.dims[1];
        }
        const auto &d = x0.shape.dims;
        out = QTensor(Shape{d[0], ctotal, d[2], d[3]}, x0.qformat);
        const std::size_t plane = std::size_t(d[2]) * d[3];
        for (std::uint32_t bn = 0; bn < d[0]; ++bn) {
          std::uint32_t co = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const QTensor &x = in(n, i);
            for (std::uint32_t c = 0; c < x.shape.dims[1]; ++c, ++co)
              std::copy_n(&x.data[(std::size_t(bn) * x.shape.dims[1] + c) * plane], plane,
                          &out.data[(std::size_t(bn) * ctotal + co) * plane]);
          }
        }
        break;
      }
      case OpKind::Add: {
        const QTensor &x0 = in(n, 0);
        out = x0;
        for (std::size_t i = 1; i < n.inputs.size(); ++i) {
          const QTensor &x = in(n, i);
          if (x.qformat != x0.qformat)
            throw QFormatMismatch(n.name, "add inputs have differing QFormats");
          if (x.shape != x0.shape) throw ShapeMismatch(n.name + ": add shape mismatch");
          for (std::size_t j = 0; j < out.data.size(); ++j)
            out.data[j] = saturate16(std::int64_t(out.data[j]) + x.data[j]);
        }
        break;
      }
      case OpKind::ConstantPad:
      case OpKind::ZeroPad: {
        const QTensor &x = in(n, 0);
        out = qdetail::pad_codes(
            x, n.attrs.pad,
            qdetail::pad_value_codes(g, n, x.shape.dims[1], x.qformat.frac_bits));
        break;
      }
    }
    acts[n.name] = std::move(out);
  }
  return acts;
}

// Signal-to-noise of a fixed-point output against its float reference.
struct SnrReport {
  bool exact = false;      // zero error
  bool undefined = false;  // zero-power reference
  double snr_db = 0.0;
  double max_abs_err = 0.0;
};

inline SnrReport snr_report(const FloatTensor &ref, const QTensor &fixed) {
  if (ref.shape != fixed.shape) throw ShapeMismatch("snr_report shape mismatch");
  double sig = 0.0, noise = 0.0;
  SnrReport r;
  const double s = std::ldexp(1.0, -fixed.qformat.frac_bits);
  for (std::size_t i = 0; i < ref.data.size(); ++i) {
    const double f = ref.data[i];
    const double e = f - fixed.data[i] * s;
    sig += f * f;
    noise += e * e;
    r.max_abs_err = std::max(r.max_abs_err, std::fabs(e));
  }
  if (noise == 0.0) {
    r.exact = true;
    return r;
  }
  if (sig == 0.0) {
    r.undefined = true;
    return r;
  }
  r.snr_db = 10.0 * std::log10(sig / noise);
  return r;
}

}  // namespace yuvnet
