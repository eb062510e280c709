#pragma once

// Core numeric containers: float tensors in NCHW layout and 16-bit
// fixed-point (Q-format) tensors, plus the scalar quantization and
// MAC primitives everything else is built on.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace yuvnet {

class ShapeMismatch : public std::runtime_error {
public:
  explicit ShapeMismatch(const std::string &what) : std::runtime_error(what) {}
};

struct Shape {
  std::vector<std::uint32_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::uint32_t> d) : dims(d) { check(); }
  explicit Shape(std::vector<std::uint32_t> d) : dims(std::move(d)) { check(); }

  void check() const {
    if (dims.size() != 1 && dims.size() != 2 && dims.size() != 4)
      throw ShapeMismatch("shape rank must be 1, 2 or 4");
    for (auto d : dims)
      if (d == 0) throw ShapeMismatch("shape dims must be >= 1");
  }

  std::size_t rank() const { return dims.size(); }

  std::uint64_t elements() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  bool operator==(const Shape &o) const { return dims == o.dims; }
  bool operator!=(const Shape &o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + ")";
  }
};

struct FloatTensor {
  Shape shape;
  std::vector<float> data;

  FloatTensor() = default;
  explicit FloatTensor(Shape s, float fill = 0.0f)
      : shape(std::move(s)), data(shape.elements(), fill) {}
  FloatTensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape.elements())
      throw ShapeMismatch("data length != shape element count");
  }

  // NCHW addressing for rank-4 tensors.
  float &at(std::uint32_t n, std::uint32_t c, std::uint32_t h, std::uint32_t w) {
    return data[((std::size_t(n) * shape.dims[1] + c) * shape.dims[2] + h) * shape.dims[3] + w];
  }
  float at(std::uint32_t n, std::uint32_t c, std::uint32_t h, std::uint32_t w) const {
    return data[((std::size_t(n) * shape.dims[1] + c) * shape.dims[2] + h) * shape.dims[3] + w];
  }
};

// 16-bit Q-format descriptor: value = code * 2^-frac_bits.
struct QFormat {
  static constexpr int kWordBits = 16;
  int frac_bits = 0;

  QFormat() = default;
  explicit QFormat(int fb) : frac_bits(fb) {
    if (fb < 0 || fb > 15) throw std::invalid_argument("frac_bits must be in [0,15]");
  }

  double scale() const { return std::ldexp(1.0, -frac_bits); }
  double range_min() const { return std::ldexp(-1.0, 15 - frac_bits); }
  double range_max() const { return std::ldexp(1.0, 15 - frac_bits) - scale(); }

  bool operator==(const QFormat &o) const { return frac_bits == o.frac_bits; }
  bool operator!=(const QFormat &o) const { return !(*this == o); }
};

struct QTensor {
  Shape shape;
  QFormat qformat;
  std::vector<std::int16_t> data;

  QTensor() = default;
  QTensor(Shape s, QFormat q) : shape(std::move(s)), qformat(q), data(shape.elements(), 0) {}

  float value(std::size_t i) const {
    return float(data[i] * std::ldexp(1.0, -qformat.frac_bits));
  }
};

// Round-to-nearest-even quantization of one value, saturating to int16.
inline std::int16_t quantize_value(float v, int frac_bits, bool *saturated = nullptr) {
  double scaled = double(v) * std::ldexp(1.0, frac_bits);
  double r = std::nearbyint(scaled);  // assumes FE_TONEAREST (ties-to-even)
  if (r > 32767.0) {
    if (saturated) *saturated = true;
    return 32767;
  }
  if (r < -32768.0) {
    if (saturated) *saturated = true;
    return -32768;
  }
  return std::int16_t(r);
}

struct QuantizeResult {
  QTensor tensor;
  std::uint64_t saturation_count = 0;
};

inline QuantizeResult quantize(const FloatTensor &t, QFormat q) {
  QuantizeResult r;
  r.tensor.shape = t.shape;
  r.tensor.qformat = q;
  r.tensor.data.resize(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    bool sat = false;
    r.tensor.data[i] = quantize_value(t.data[i], q.frac_bits, &sat);
    if (sat) ++r.saturation_count;
  }
  return r;
}

inline FloatTensor dequantize(const QTensor &t) {
  FloatTensor out(t.shape);
  const double s = std::ldexp(1.0, -t.qformat.frac_bits);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    out.data[i] = float(t.data[i] * s);
  return out;
}

// The datapath MAC primitive: exact 64-bit accumulation, no intermediate
// saturation. Accumulator frac = a.frac + w.frac.
inline std::int64_t qmac_accumulate(std::int64_t acc, std::int16_t a, std::int16_t w) {
  std::int64_t prod = std::int64_t(a) * std::int64_t(w);
  assert(!((prod > 0 && acc > std::numeric_limits<std::int64_t>::max() - prod) ||
           (prod < 0 && acc < std::numeric_limits<std::int64_t>::min() - prod)));
  return acc + prod;
}

// Round-half-to-even right shift, used for requantization.
inline std::int64_t rounding_rshift(std::int64_t v, int shift) {
  if (shift <= 0) return v << (-shift);
  const std::int64_t half = std::int64_t(1) << (shift - 1);
  const std::int64_t mask = (std::int64_t(1) << shift) - 1;
  std::int64_t q = v >> shift;
  std::int64_t rem = v & mask;
  if (rem > half || (rem == half && (q & 1)))
    ++q;
  return q;
}

inline std::int16_t saturate16(std::int64_t v) {
  if (v > 32767) return 32767;
  if (v < -32768) return -32768;
  return std::int16_t(v);
}

}  // namespace yuvnet
