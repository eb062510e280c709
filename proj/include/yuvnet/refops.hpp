#pragma once

// Floating-point reference implementations of every operator. These are
// the numerical oracle the fixed-point executor is judged against, so
// reduction order is fixed and everything is deterministic.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "yuvnet/graph.hpp"
#include "yuvnet/image.hpp"
#include "yuvnet/parallel.hpp"
#include "yuvnet/tensor.hpp"

namespace yuvnet {

struct PadSpec {
  PadMode mode = PadMode::Zero;
  int amount = 0;
  float value = 0.0f;
  // Optional per-input-channel pad values (overrides `value` when set).
  std::vector<float> channel_values;

  static PadSpec zero(int amount) { return {PadMode::Zero, amount, 0.0f, {}}; }
  static PadSpec constant(int amount, float v) { return {PadMode::Constant, amount, v, {}}; }

  float value_for(std::uint32_t channel) const {
    if (mode == PadMode::Zero) return 0.0f;
    if (!channel_values.empty()) return channel_values[channel];
    return value;
  }
};

struct BNParams {
  std::vector<float> gamma, beta, mean, var;
  float epsilon = 1e-5f;
};

namespace detail {

// Materializes the padded input plane once; convolution then slides over
// it without boundary branches.
inline FloatTensor pad_input(const FloatTensor &x, const PadSpec &pad) {
  if (pad.amount == 0) return x;
  const auto &d = x.shape.dims;
  const int p = pad.amount;
  FloatTensor out(Shape{d[0], d[1], d[2] + 2 * p, d[3] + 2 * p});
  for (std::uint32_t n = 0; n < d[0]; ++n)
    for (std::uint32_t c = 0; c < d[1]; ++c) {
      const float pv = pad.value_for(c);
      for (std::uint32_t h = 0; h < d[2] + 2 * p; ++h)
        for (std::uint32_t w = 0; w < d[3] + 2 * p; ++w) {
          bool inside = h >= std::uint32_t(p) && h < d[2] + p && w >= std::uint32_t(p) &&
                        w < d[3] + p;
          out.at(n, c, h, w) = inside ? x.at(n, c, h - p, w - p) : pv;
        }
    }
  return out;
}

}  // namespace detail

// Cross-correlation (no kernel flip), bias added after accumulation.
// w is (Cout, Cin, Kh, Kw).
inline FloatTensor conv2d(const FloatTensor &x, const FloatTensor &w,
                          const std::vector<float> &bias, int stride, const PadSpec &pad) {
  if (x.shape.rank() != 4 || w.shape.rank() != 4)
    throw ShapeMismatch("conv2d expects rank-4 tensors");
  const auto &wd = w.shape.dims;
  const std::uint32_t cout = wd[0], cin = wd[1], kh = wd[2], kw = wd[3];
  if (x.shape.dims[1] != cin)
    throw ShapeMismatch("conv2d channel mismatch: input " + x.shape.str() + " weight " +
                        w.shape.str());
  if (!bias.empty() && bias.size() != cout)
    throw ShapeMismatch("conv2d bias length mismatch");

  FloatTensor xp = detail::pad_input(x, pad);
  const auto &xd = xp.shape.dims;
  if (xd[2] < kh || xd[3] < kw) throw ShapeMismatch("conv2d kernel larger than input");
  const std::uint32_t ho = (xd[2] - kh) / stride + 1;
  const std::uint32_t wo = (xd[3] - kw) / stride + 1;
  const std::uint32_t n = xd[0];

  FloatTensor out(Shape{n, cout, ho, wo});
  parallel_for(cout, [&](std::size_t co) {
    for (std::uint32_t b = 0; b < n; ++b)
      for (std::uint32_t oh = 0; oh < ho; ++oh)
        for (std::uint32_t ow = 0; ow < wo; ++ow) {
          float acc = 0.0f;
          for (std::uint32_t ci = 0; ci < cin; ++ci)
            for (std::uint32_t r = 0; r < kh; ++r) {
              const float *xrow = &xp.at(b, ci, oh * stride + r, ow * stride);
              const float *wrow = &w.data[((std::size_t(co) * cin + ci) * kh + r) * kw];
              for (std::uint32_t c = 0; c < kw; ++c) acc += xrow[c] * wrow[c];
            }
          out.at(b, std::uint32_t(co), oh, ow) = acc + (bias.empty() ? 0.0f : bias[co]);
        }
  });
  return out;
}

// Transposed convolution, 5x5 kernel, stride 2, output exactly doubled.
// Output pixel (2i,2j) receives the center tap of input (i,j); equivalent
// to zero-insertion at even positions followed by a flipped-kernel conv
// with padding 2. w is (Cout, Cin, 5, 5).
inline FloatTensor transposed_conv2d_x2(const FloatTensor &x, const FloatTensor &w,
                                        const std::vector<float> &bias) {
  if (x.shape.rank() != 4 || w.shape.rank() != 4 || w.shape.dims[2] != 5 ||
      w.shape.dims[3] != 5)
    throw ShapeMismatch("transposed_conv2d_x2 expects rank-4 input and a 5x5 kernel");
  const auto &wd = w.shape.dims;
  const std::uint32_t cout = wd[0], cin = wd[1];
  if (x.shape.dims[1] != cin) throw ShapeMismatch("transposed conv channel mismatch");
  const auto &xd = x.shape.dims;
  const std::uint32_t ho = xd[2] * 2, wo = xd[3] * 2;

  FloatTensor out(Shape{xd[0], cout, ho, wo});
  parallel_for(cout, [&](std::size_t co) {
    const float b = bias.empty() ? 0.0f : bias[co];
    for (std::uint32_t bn = 0; bn < xd[0]; ++bn) {
      for (std::uint32_t oh = 0; oh < ho; ++oh)
        for (std::uint32_t ow = 0; ow < wo; ++ow) {
          // Gather form of the scatter y[2i+a-2, 2j+b-2] += w[a,b] x[i,j].
          float acc = 0.0f;
          for (std::uint32_t ci = 0; ci < cin; ++ci)
            for (int a = 0; a < 5; ++a) {
              int ih2 = int(oh) - a + 2;  // 2*ih
              if (ih2 < 0 || ih2 % 2 || ih2 / 2 >= int(xd[2])) continue;
              for (int c = 0; c < 5; ++c) {
                int iw2 = int(ow) - c + 2;
                if (iw2 < 0 || iw2 % 2 || iw2 / 2 >= int(xd[3])) continue;
                acc += w.data[((std::size_t(co) * cin + ci) * 5 + a) * 5 + c] *
                       x.at(bn, ci, std::uint32_t(ih2 / 2), std::uint32_t(iw2 / 2));
              }
            }
          out.at(bn, std::uint32_t(co), oh, ow) = acc + b;
        }
    }
  });
  return out;
}

inline FloatTensor batchnorm(const FloatTensor &x, const BNParams &p) {
  const std::uint32_t c = x.shape.dims[1];
  if (p.gamma.size() != c || p.beta.size() != c || p.mean.size() != c || p.var.size() != c)
    throw ShapeMismatch("batchnorm parameter length != channel count");
  FloatTensor out(x.shape);
  const std::size_t plane = std::size_t(x.shape.dims[2]) * x.shape.dims[3];
  for (std::uint32_t n = 0; n < x.shape.dims[0]; ++n)
    for (std::uint32_t ch = 0; ch < c; ++ch) {
      const float s = p.gamma[ch] / std::sqrt(p.var[ch] + p.epsilon);
      const float t = p.beta[ch] - s * p.mean[ch];
      const std::size_t base = (std::size_t(n) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) out.data[base + i] = s * x.data[base + i] + t;
    }
  return out;
}

inline FloatTensor relu(const FloatTensor &x) {
  FloatTensor out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = std::max(0.0f, x.data[i]);
  return out;
}

inline FloatTensor maxpool2x2(const FloatTensor &x) {
  const auto &d = x.shape.dims;
  FloatTensor out(Shape{d[0], d[1], d[2] / 2, d[3] / 2});
  for (std::uint32_t n = 0; n < d[0]; ++n)
    for (std::uint32_t c = 0; c < d[1]; ++c)
      for (std::uint32_t h = 0; h < d[2] / 2; ++h)
        for (std::uint32_t w = 0; w < d[3] / 2; ++w)
          out.at(n, c, h, w) =
              std::max(std::max(x.at(n, c, 2 * h, 2 * w), x.at(n, c, 2 * h, 2 * w + 1)),
                       std::max(x.at(n, c, 2 * h + 1, 2 * w), x.at(n, c, 2 * h + 1, 2 * w + 1)));
  return out;
}

inline FloatTensor concat_channels(const std::vector<const FloatTensor *> &xs) {
  if (xs.empty()) throw ShapeMismatch("concat of nothing");
  const auto &d0 = xs[0]->shape.dims;
  std::uint32_t ctotal = 0;
  for (const auto *x : xs) {
    const auto &d = x->shape.dims;
    if (d[0] != d0[0] || d[2] != d0[2] || d[3] != d0[3])
      throw ShapeMismatch("concat spatial mismatch");
    ctotal += d[1];
  }
  FloatTensor out(Shape{d0[0], ctotal, d0[2], d0[3]});
  const std::size_t plane = std::size_t(d0[2]) * d0[3];
  for (std::uint32_t n = 0; n < d0[0]; ++n) {
    std::uint32_t co = 0;
    for (const auto *x : xs)
      for (std::uint32_t c = 0; c < x->shape.dims[1]; ++c, ++co)
        std::copy_n(&x->data[(std::size_t(n) * x->shape.dims[1] + c) * plane], plane,
                    &out.data[(std::size_t(n) * ctotal + co) * plane]);
  }
  return out;
}

inline FloatTensor add(const std::vector<const FloatTensor *> &xs) {
  if (xs.empty()) throw ShapeMismatch("add of nothing");
  FloatTensor out = *xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i]->shape != out.shape) throw ShapeMismatch("add shape mismatch");
    for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += xs[i]->data[j];
  }
  return out;
}

inline FloatTensor pad_tensor(const FloatTensor &x, const PadSpec &pad) {
  return detail::pad_input(x, pad);
}

// Full-range BT.601 with nearest-neighbor chroma upsampling: each U/V
// pixel serves its 2x2 luma block. Output channel order is B,G,R.
inline FloatTensor yuv420_to_bgr(const FloatTensor &y, const FloatTensor &u,
                                 const FloatTensor &v) {
  const std::uint32_t h = y.shape.dims[2], w = y.shape.dims[3];
  if (u.shape.dims[2] != h / 2 || u.shape.dims[3] != w / 2 || u.shape != v.shape)
    throw ShapeMismatch("U/V planes must be half the Y resolution");
  FloatTensor out(Shape{1, 3, h, w});
  for (std::uint32_t i = 0; i < h; ++i)
    for (std::uint32_t j = 0; j < w; ++j) {
      const float Y = y.at(0, 0, i, j);
      const float U = u.at(0, 0, i / 2, j / 2) - 128.0f;
      const float V = v.at(0, 0, i / 2, j / 2) - 128.0f;
      const float r = Y + 1.402f * V;
      const float g = Y - 0.344136f * U - 0.714136f * V;
      const float b = Y + 1.772f * U;
      auto clamp = [](float x) { return std::min(255.0f, std::max(0.0f, x)); };
      out.at(0, 0, i, j) = clamp(b);
      out.at(0, 1, i, j) = clamp(g);
      out.at(0, 2, i, j) = clamp(r);
    }
  return out;
}

namespace detail {

inline FloatTensor plane_to_tensor(const std::vector<std::uint8_t> &p, std::uint32_t h,
                                   std::uint32_t w) {
  FloatTensor t(Shape{1, 1, h, w});
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = float(p[i]);
  return t;
}

inline BNParams bn_params_of(const NetworkGraph &g, const Node &n) {
  BNParams p;
  p.gamma = g.float_blob(n.name + ".gamma").data;
  p.beta = g.float_blob(n.name + ".beta").data;
  p.mean = g.float_blob(n.name + ".mean").data;
  p.var = g.float_blob(n.name + ".var").data;
  p.epsilon = n.attrs.epsilon;
  return p;
}

// Weight blobs may be float or, after quantization, q16.
inline FloatTensor blob_as_float(const NetworkGraph &g, const std::string &name) {
  auto it = g.blobs.find(name);
  if (it == g.blobs.end()) throw std::runtime_error("missing blob: " + name);
  if (std::holds_alternative<FloatTensor>(it->second))
    return std::get<FloatTensor>(it->second);
  return dequantize(std::get<QTensor>(it->second));
}

inline PadSpec pad_spec_of(const NetworkGraph &g, const Node &n) {
  PadSpec pad;
  pad.mode = n.attrs.pad_mode;
  pad.amount = n.attrs.pad;
  pad.value = n.attrs.pad_value;
  if (g.has_blob(n.name + ".pad_values"))
    pad.channel_values = blob_as_float(g, n.name + ".pad_values").data;
  return pad;
}

}  // namespace detail

// Evaluates one node given the activations of its inputs. Exposed so
// callers can drive execution in other (e.g. macro-op) orders.
inline FloatTensor eval_node(const NetworkGraph &g, const Node &n,
                             const std::map<std::string, FloatTensor> &acts,
                             const Frame &frame) {
  auto in = [&](const Node &node, std::size_t i) -> const FloatTensor & {
    return acts.at(node.inputs.at(i));
  };
  FloatTensor out;
  {
    switch (n.kind) {
      case OpKind::InputYUV420:
        if (n.attrs.plane == "y") {
          out = detail::plane_to_tensor(frame.y, frame.height, frame.width);
        } else {
          FloatTensor u = detail::plane_to_tensor(frame.u, frame.height / 2, frame.width / 2);
          FloatTensor v = detail::plane_to_tensor(frame.v, frame.height / 2, frame.width / 2);
          out = concat_channels({&u, &v});
        }
        break;
      case OpKind::InputBGR: {
        FloatTensor y = detail::plane_to_tensor(frame.y, frame.height, frame.width);
        FloatTensor u = detail::plane_to_tensor(frame.u, frame.height / 2, frame.width / 2);
        FloatTensor v = detail::plane_to_tensor(frame.v, frame.height / 2, frame.width / 2);
        out = yuv420_to_bgr(y, u, v);
        break;
      }
      case OpKind::Conv:
      case OpKind::YoloHead:
      case OpKind::SegHead:
        out = conv2d(in(n, 0), detail::blob_as_float(g, n.name + ".weight"),
                     detail::blob_as_float(g, n.name + ".bias").data, n.attrs.stride,
                     detail::pad_spec_of(g, n));
        break;
      case OpKind::TransposedConv:
        out = transposed_conv2d_x2(in(n, 0), detail::blob_as_float(g, n.name + ".weight"),
                                   detail::blob_as_float(g, n.name + ".bias").data);
        break;
      case OpKind::BatchNorm:
        out = batchnorm(in(n, 0), detail::bn_params_of(g, n));
        break;
      case OpKind::ReLU:
        out = relu(in(n, 0));
        break;
      case OpKind::MaxPool:
        out = maxpool2x2(in(n, 0));
        break;
      case OpKind::Concat:
      case OpKind::Add: {
        std::vector<const FloatTensor *> xs;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) xs.push_back(&in(n, i));
        out = n.kind == OpKind::Concat ? concat_channels(xs) : add(xs);
        break;
      }
      case OpKind::ConstantPad:
      case OpKind::ZeroPad: {
        PadSpec pad = detail::pad_spec_of(g, n);
        if (n.kind == OpKind::ZeroPad) pad.mode = PadMode::Zero;
        out = pad_tensor(in(n, 0), pad);
        break;
      }
    }
  }
  for (float v : out.data)
    if (!std::isfinite(v))
      throw std::runtime_error(n.name + ": non-finite activation");
  return out;
}

// Whole-graph reference forward pass. Returns the output tensor of every
// node, keyed by node name.
inline std::map<std::string, FloatTensor> run_float(const NetworkGraph &g,
                                                    const Frame &frame) {
  if (frame.width != g.input_spec.width || frame.height != g.input_spec.height)
    throw ShapeMismatch("frame resolution does not match the model input spec");
  std::map<std::string, FloatTensor> acts;
  for (const auto &n : g.nodes) acts[n.name] = eval_node(g, n, acts, frame);
  return acts;
}

}  // namespace yuvnet
