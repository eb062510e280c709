#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "yuvnet/tensor.hpp"

using namespace yuvnet;

TEST_CASE("quantize exact power-of-two scaling") {
  FloatTensor t(Shape{1}, {1.0f});
  auto r = quantize(t, QFormat(14));
  CHECK(r.tensor.data[0] == 16384);
  CHECK(r.saturation_count == 0);
}

TEST_CASE("quantize zero") {
  FloatTensor t(Shape{1}, {0.0f});
  for (int fb : {0, 7, 15}) CHECK(quantize(t, QFormat(fb)).tensor.data[0] == 0);
}

TEST_CASE("quantize saturates out-of-range values") {
  FloatTensor t(Shape{1}, {3.0f});
  auto r = quantize(t, QFormat(14));  // true code would be 49152
  CHECK(r.tensor.data[0] == 32767);
  CHECK(r.saturation_count == 1);
}

TEST_CASE("quantize matches scalar brute-force oracle on a grid") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> vals(-5.0f, 5.0f);
  for (int i = 0; i < 2000; ++i) {
    const float v = vals(rng);
    const int fb = int(rng() % 16);
    FloatTensor t(Shape{1}, {v});
    CHECK(quantize(t, QFormat(fb)).tensor.data[0] == oracle::quantize_scalar(v, fb));
  }
  // Exact halves exercise the ties-to-even rule.
  for (int fb : {0, 4, 8}) {
    for (float v : {0.5f, 1.5f, 2.5f, -0.5f, -1.5f}) {
      FloatTensor t(Shape{1}, {v});
      CHECK(quantize(t, QFormat(fb)).tensor.data[0] == oracle::quantize_scalar(v, fb));
    }
  }
}

TEST_CASE("dequantize basics") {
  QTensor t(Shape{1}, QFormat(14));
  t.data[0] = 16384;
  CHECK(dequantize(t).data[0] == 1.0f);

  QTensor m(Shape{1}, QFormat(15));
  m.data[0] = -32768;
  CHECK(dequantize(m).data[0] == -1.0f);

  QTensor s(Shape{1}, QFormat(8));
  s.data[0] = 1;
  CHECK(dequantize(s).data[0] == Catch::Approx(0.00390625).epsilon(0));
}

TEST_CASE("quantize round-trip error bound when no saturation") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> vals(-1.9f, 1.9f);
  const QFormat q(14);
  FloatTensor t(Shape{1, 1, 4, 64});
  for (auto &v : t.data) v = vals(rng);
  auto r = quantize(t, q);
  REQUIRE(r.saturation_count == 0);
  FloatTensor back = dequantize(r.tensor);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    CHECK(std::fabs(back.data[i] - t.data[i]) <= std::ldexp(1.0, -15));  // 2^-(frac+1)
}

TEST_CASE("quantize preserves element ordering") {
  std::mt19937 rng(13);
  std::uniform_real_distribution<float> vals(-4.0f, 4.0f);
  FloatTensor t(Shape{1, 1, 2, 50});
  for (auto &v : t.data) v = vals(rng);
  auto q = quantize(t, QFormat(12)).tensor;
  for (std::size_t i = 0; i < t.data.size(); ++i)
    for (std::size_t j = 0; j < t.data.size(); ++j)
      if (t.data[i] <= t.data[j]) CHECK(q.data[i] <= q.data[j]);
}

TEST_CASE("saturation hits the exact range boundary") {
  for (int fb : {0, 6, 15}) {
    const float maxv = float(std::ldexp(1.0, 15 - fb));
    FloatTensor t(Shape{2}, {maxv * 2, -maxv * 2});
    auto q = quantize(t, QFormat(fb)).tensor;
    CHECK(q.data[0] == 32767);
    CHECK(q.data[1] == -32768);
  }
}

TEST_CASE("qmac_accumulate basics") {
  CHECK(qmac_accumulate(0, 16384, 16384) == 268435456);  // 1.0 at frac 28
  CHECK(qmac_accumulate(0, 0, 12345) == 0);
  CHECK(qmac_accumulate(100, -256, 512) == 100 - 131072);
}

TEST_CASE("qmac accumulation is order independent") {
  std::mt19937 rng(17);
  std::uniform_int_distribution<int> codes(-32768, 32767);
  std::vector<std::pair<std::int16_t, std::int16_t>> terms(64);
  for (auto &t : terms) t = {std::int16_t(codes(rng)), std::int16_t(codes(rng))};
  std::int64_t ref = 0;
  for (auto &[a, w] : terms) ref = qmac_accumulate(ref, a, w);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(terms.begin(), terms.end(), rng);
    std::int64_t acc = 0;
    for (auto &[a, w] : terms) acc = qmac_accumulate(acc, a, w);
    CHECK(acc == ref);
  }
}

TEST_CASE("rounding right shift is round-half-to-even") {
  CHECK(rounding_rshift(4, 2) == 1);
  CHECK(rounding_rshift(6, 2) == 2);   // 1.5 -> 2
  CHECK(rounding_rshift(2, 2) == 0);   // 0.5 -> 0
  CHECK(rounding_rshift(10, 2) == 2);  // 2.5 -> 2
  CHECK(rounding_rshift(-2, 2) == 0);  // -0.5 -> 0
  CHECK(rounding_rshift(-6, 2) == -2); // -1.5 -> -2
  CHECK(rounding_rshift(-5, 2) == -1);
}

TEST_CASE("rounding shift agrees with the scalar quantizer") {
  // Shifting right by s is quantizing v*2^-s to an integer code.
  std::mt19937 rng(19);
  std::uniform_int_distribution<std::int64_t> vals(-(1 << 18), 1 << 18);
  for (int i = 0; i < 1000; ++i) {
    const std::int64_t v = vals(rng);
    const int shift = int(rng() % 10) + 4;  // keep results inside int16
    CHECK(rounding_rshift(v, shift) ==
          oracle::quantize_scalar(double(v) / std::pow(2.0, shift), 0));
  }
}
