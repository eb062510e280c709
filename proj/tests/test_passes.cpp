#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "test_util.hpp"
#include "yuvnet/passes.hpp"
#include "yuvnet/refops.hpp"

using namespace yuvnet;

namespace {

// A conv -> bn -> relu chain with a second conv on top.
NetworkGraph conv_bn_chain(std::uint32_t seed) {
  testutil::GraphBuilder b(16, 16, seed);
  b.conv("c1", 3, 6, 3, 1, 1).batchnorm("bn1", 6).unary("r1", OpKind::ReLU);
  b.conv("c2", 6, 4, 3, 1, 1).batchnorm("bn2", 4);
  return b.done();
}

}  // namespace

TEST_CASE("backward fold is exact at every pixel") {
  std::mt19937 rng(61);
  for (std::uint32_t seed = 100; seed < 110; ++seed) {
    auto g = conv_bn_chain(seed);
    auto frame = testutil::random_frame(16, 16, rng);
    auto ref = run_float(g, frame);

    auto folded = fold_batchnorm(g);
    CHECK(folded.report.folded_backward == 2);
    CHECK(folded.report.folded_forward == 0);
    CHECK(folded.report.border_suspects.empty());
    CHECK(folded.graph.find("bn1") == nullptr);
    CHECK(folded.graph.find("bn2") == nullptr);
    CHECK(!folded.graph.has_blob("bn1.gamma"));

    auto post = run_float(folded.graph, frame);
    // The fold renames bn outputs to the conv, so compare downstream nodes.
    CHECK(testutil::scaled_diff(ref.at("bn1"), post.at("c1")) <= 1e-5);
    CHECK(testutil::scaled_diff(ref.at("bn2"), post.at("c2")) <= 1e-5);
    CHECK(testutil::scaled_diff(ref.at("r1"), post.at("r1")) <= 1e-5);
  }
}

TEST_CASE("backward fold refuses a conv with other consumers") {
  auto g = conv_bn_chain(7);
  // Add a second consumer of c1.
  Node extra;
  extra.name = "r_extra";
  extra.kind = OpKind::ReLU;
  extra.inputs = {"c1"};
  g.nodes.push_back(extra);
  CHECK_THROWS_AS(fold_batchnorm(g), OrphanBatchNorm);
}

TEST_CASE("batchnorm with no foldable neighbor is an error") {
  testutil::GraphBuilder b(16, 16);
  b.conv("c1", 3, 4, 3, 1, 1).unary("r1", OpKind::ReLU).batchnorm("bn1", 4);
  auto g = b.done();
  CHECK_THROWS_AS(fold_batchnorm(g), OrphanBatchNorm);
}

TEST_CASE("forward fold of an input batchnorm is exact in the interior only") {
  testutil::GraphBuilder b(16, 16, 9);
  b.batchnorm("bn0", 3).conv("c1", 3, 4, 3, 1, 1).unary("r1", OpKind::ReLU);
  auto g = b.done();
  std::mt19937 rng(67);
  auto frame = testutil::random_frame(16, 16, rng);
  auto ref = run_float(g, frame);

  auto folded = fold_batchnorm(g);
  CHECK(folded.report.folded_forward == 1);
  REQUIRE(folded.report.border_suspects == std::vector<std::string>{"c1"});
  auto naive = run_float(folded.graph, frame);

  // Interior pixels agree; at least one border pixel does not.
  const auto &a = ref.at("c1");
  const auto &c = naive.at("c1");
  const std::uint32_t h = a.shape.dims[2], w = a.shape.dims[3];
  double interior_err = 0.0, border_err = 0.0;
  for (std::uint32_t co = 0; co < a.shape.dims[1]; ++co)
    for (std::uint32_t i = 0; i < h; ++i)
      for (std::uint32_t j = 0; j < w; ++j) {
        const double d = std::fabs(a.at(0, co, i, j) - c.at(0, co, i, j));
        const bool border = i == 0 || j == 0 || i == h - 1 || j == w - 1;
        (border ? border_err : interior_err) = std::max(border ? border_err : interior_err, d);
      }
  CHECK(interior_err < 1e-3);
  CHECK(border_err > 1e-3);

  // Padding repair restores exactness everywhere.
  auto fixed = fix_padding(folded.graph);
  CHECK(fixed.report.rewritten == std::vector<std::string>{"c1"});
  auto post = run_float(fixed.graph, frame);
  CHECK(testutil::scaled_diff(ref.at("c1"), post.at("c1")) <= 1e-5);
  CHECK(testutil::scaled_diff(ref.at("r1"), post.at("r1")) <= 1e-5);
}

TEST_CASE("fix_padding keeps a scalar when all channels agree") {
  testutil::GraphBuilder b(16, 16, 11);
  b.batchnorm("bn0", 3, /*randomized=*/false).conv("c1", 3, 4, 3, 1, 1);
  auto g = b.done();
  // Force identical non-trivial statistics on every channel.
  for (const char *p : {".beta", ".mean"}) {
    auto &t = std::get<FloatTensor>(g.blobs["bn0" + std::string(p)]);
    for (auto &v : t.data) v = (p[1] == 'b') ? 0.25f : 0.5f;
  }
  auto fixed = fix_padding(fold_batchnorm(g).graph);
  REQUIRE(fixed.report.rewritten == std::vector<std::string>{"c1"});
  const Node *c1 = fixed.graph.find("c1");
  CHECK(c1->attrs.pad_mode == PadMode::Constant);
  CHECK(!fixed.graph.has_blob("c1.pad_values"));
  CHECK(c1->attrs.pad_value != 0.0f);
}

TEST_CASE("fix_padding stores per-channel values when they differ") {
  testutil::GraphBuilder b(16, 16, 13);
  b.batchnorm("bn0", 3).conv("c1", 3, 4, 3, 1, 1);
  auto g = b.done();
  auto fixed = fix_padding(fold_batchnorm(g).graph);
  REQUIRE(fixed.report.rewritten == std::vector<std::string>{"c1"});
  CHECK(fixed.graph.has_blob("c1.pad_values"));
  CHECK(fixed.graph.float_blob("c1.pad_values").data.size() == 3);
  CHECK(!fixed.graph.has_blob(pending_pad_blob("c1")));
}

TEST_CASE("fusion partitions the folded default model into conv-led macros") {
  auto g = fold_batchnorm(build_default_model(64, 64, 3, 2, {{1, 1}, {2, 2}})).graph;
  auto fused = fuse_sequences(g);
  CHECK(fused.diagnostics.empty());

  // Every non-input node appears in exactly one macro.
  std::multiset<std::string> covered;
  for (const auto &m : fused.macros) {
    covered.insert(m.lead);
    for (const auto &t : m.tail) covered.insert(t);
  }
  std::size_t expected = 0;
  for (const auto &n : g.nodes)
    if (!is_input(n.kind)) ++expected;
  CHECK(covered.size() == expected);
  for (const auto &n : g.nodes)
    if (!is_input(n.kind)) CHECK(covered.count(n.name) == 1);

  // Every macro is led by a convolution and its tail holds only free layers.
  for (const auto &m : fused.macros) {
    const Node *lead = g.find(m.lead);
    REQUIRE(lead != nullptr);
    CHECK(is_convlike(lead->kind));
    for (const auto &t : m.tail) CHECK(is_free_layer(g.find(t)->kind));
  }

  // Encoder stages fuse conv+relu+pool into one unit.
  bool enc1 = false;
  for (const auto &m : fused.macros)
    if (m.lead == "enc1")
      enc1 = m.tail == std::vector<std::string>{"enc1_relu", "enc1_pool"};
  CHECK(enc1);
}

TEST_CASE("concat joins the latest eligible producer's macro") {
  NetworkGraph g;
  g.input_spec = {InputFormat::BGR, 16, 16};
  Node in;
  in.name = "input";
  in.kind = OpKind::InputBGR;
  g.nodes.push_back(in);
  std::mt19937 rng(17);
  auto mkconv = [&](const std::string &name) {
    Node n;
    n.name = name;
    n.kind = OpKind::Conv;
    n.inputs = {"input"};
    n.attrs.kernel = 3;
    n.attrs.pad = 1;
    n.attrs.out_channels = 4;
    g.nodes.push_back(n);
    g.blobs[name + ".weight"] = testutil::random_tensor(Shape{4, 3, 3, 3}, rng);
    g.blobs[name + ".bias"] = testutil::random_tensor(Shape{4}, rng);
  };
  mkconv("c1");
  mkconv("c2");
  Node cat;
  cat.name = "cat";
  cat.kind = OpKind::Concat;
  cat.inputs = {"c1", "c2"};
  g.nodes.push_back(cat);
  g.outputs = {"cat"};

  auto fused = fuse_sequences(g);
  REQUIRE(fused.macros.size() == 2);
  CHECK(fused.macros[0].lead == "c1");
  CHECK(fused.macros[0].tail.empty());
  CHECK(fused.macros[1].lead == "c2");
  CHECK(fused.macros[1].tail == std::vector<std::string>{"cat"});
}

TEST_CASE("a free layer consuming a multi-consumer output starts no fusion") {
  testutil::GraphBuilder b(16, 16, 19);
  b.conv("c1", 3, 4, 3, 1, 1).unary("r1", OpKind::ReLU);
  auto g = b.done();
  Node extra;  // second consumer of c1 blocks the relu from fusing
  extra.name = "c1b";
  extra.kind = OpKind::Conv;
  extra.inputs = {"c1"};
  extra.attrs.kernel = 1;
  extra.attrs.out_channels = 2;
  g.nodes.push_back(extra);
  std::mt19937 rng(19);
  g.blobs["c1b.weight"] = testutil::random_tensor(Shape{2, 4, 1, 1}, rng);
  g.blobs["c1b.bias"] = testutil::random_tensor(Shape{2}, rng);

  auto fused = fuse_sequences(g);
  REQUIRE(!fused.diagnostics.empty());
  CHECK(fused.diagnostics[0].node == "r1");
  CHECK(fused.diagnostics[0].level == Diagnostic::Level::Error);
}

TEST_CASE("calibration takes the max over frames and fails on none") {
  auto g = build_default_model(64, 64, 2, 1, {{1, 1}});
  CHECK_THROWS_AS(calibrate(g, {}), EmptyCalibrationSet);

  std::mt19937 rng(71);
  std::vector<Frame> frames{testutil::random_frame(64, 64, rng),
                            testutil::random_frame(64, 64, rng)};
  auto s1 = calibrate(g, {frames[0]});
  auto s2 = calibrate(g, {frames[1]});
  auto both = calibrate(g, frames);
  for (const auto &[k, v] : both.act_max)
    CHECK(v == Catch::Approx(std::max(s1.act_max.at(k), s2.act_max.at(k))));
  // Y plane values are raw 8-bit pixels.
  CHECK(both.act_max.at("input_y") <= 255.0f);
  CHECK(both.act_max.at("input_y") >= 128.0f);
}

TEST_CASE("frac_bits_for picks the largest non-saturating power-of-two scale") {
  CHECK(frac_bits_for(0.0f, 1) == 15);
  CHECK(frac_bits_for(0.9f, 0) == 15);
  CHECK(frac_bits_for(1.5f, 0) == 14);
  CHECK(frac_bits_for(255.0f, 0) == 7);   // 2^8 covers it
  CHECK(frac_bits_for(255.0f, 1) == 6);
  CHECK(frac_bits_for(1e9f, 0) == 0);     // clamped at zero
  // The chosen scale never saturates the max value.
  std::mt19937 rng(73);
  std::uniform_real_distribution<float> vals(1e-3f, 3e4f);
  for (int i = 0; i < 200; ++i) {
    const float m = vals(rng);
    const int fb = frac_bits_for(m, 0);
    if (double(m) * std::ldexp(1.0, fb) > 32767.0)
      CHECK(fb == 0);  // only the clamp may saturate
    else
      CHECK(double(m) * std::ldexp(1.0, fb) <= 32768.0);
  }
}

TEST_CASE("quantize_graph annotates formats and converts weights") {
  auto g = fix_padding(fold_batchnorm(build_default_model(64, 64, 2, 1, {{1, 1}})).graph).graph;
  std::mt19937 rng(79);
  auto stats = calibrate(g, {testutil::random_frame(64, 64, rng)});
  auto q = quantize_graph(g, stats, 1);

  for (const auto &n : q.graph.nodes) {
    CHECK(n.attrs.out_frac >= 0);
    if (is_convlike(n.kind)) {
      CHECK(n.attrs.weight_frac >= 0);
      CHECK(n.attrs.requant_shift >= 0);
      const int in_frac = q.graph.find(n.inputs[0])->attrs.out_frac;
      CHECK(n.attrs.requant_shift == in_frac + n.attrs.weight_frac - n.attrs.out_frac);
      CHECK(std::holds_alternative<QTensor>(q.graph.blobs.at(n.name + ".weight")));
      CHECK(std::holds_alternative<FloatTensor>(q.graph.blobs.at(n.name + ".bias")));
    }
  }
  // The stem concat and both its producers share one output format.
  const int cat_f = q.graph.find("stem_concat")->attrs.out_frac;
  CHECK(q.graph.find("stem_y")->attrs.out_frac == cat_f);
  CHECK(q.graph.find("stem_uv")->attrs.out_frac == cat_f);
}

TEST_CASE("quantized weights round-trip close to the originals") {
  auto g = fold_batchnorm(build_default_model(64, 64, 2, 1, {{1, 1}})).graph;
  std::mt19937 rng(83);
  auto stats = calibrate(g, {testutil::random_frame(64, 64, rng)});
  auto q = quantize_graph(g, stats, 1);
  for (const auto &[name, blob] : g.blobs) {
    if (!name.ends_with(".weight")) continue;
    const auto &orig = std::get<FloatTensor>(blob);
    const auto &qt = std::get<QTensor>(q.graph.blobs.at(name));
    const double step = std::ldexp(1.0, -qt.qformat.frac_bits);
    auto back = dequantize(qt);
    for (std::size_t i = 0; i < orig.data.size(); ++i)
      CHECK(std::fabs(back.data[i] - orig.data[i]) <= step / 2 + 1e-9);
  }
  CHECK(q.report.weight_saturations == 0);
}

TEST_CASE("impossible scale combinations raise ScaleUnderflow") {
  testutil::GraphBuilder b(16, 16, 21);
  b.conv("c1", 3, 4, 3, 1, 1);
  auto g = b.done();
  CalibrationStats stats;
  stats.act_max["input"] = 3e4f;  // frac 0
  stats.act_max["c1"] = 1e-4f;   // frac 15
  stats.blob_max["c1.weight"] = 3e4f;  // frac 0 -> shift 0+0-15 < 0
  for (const auto &[name, blob] : g.blobs) stats.blob_max.emplace(name, 0.1f);
  CHECK_THROWS_AS(quantize_graph(g, stats, 0), ScaleUnderflow);
}

TEST_CASE("quantize_graph refuses graphs with non-conv-led free layers") {
  NetworkGraph g;
  g.input_spec = {InputFormat::BGR, 16, 16};
  Node in;
  in.name = "input";
  in.kind = OpKind::InputBGR;
  g.nodes.push_back(in);
  Node r;
  r.name = "r0";
  r.kind = OpKind::ReLU;
  r.inputs = {"input"};
  g.nodes.push_back(r);
  g.outputs = {"r0"};
  CalibrationStats stats;
  stats.act_max["input"] = 255.0f;
  stats.act_max["r0"] = 255.0f;
  CHECK_THROWS_AS(quantize_graph(g, stats, 1), NonConvLedLayer);
}
