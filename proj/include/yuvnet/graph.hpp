#pragma once

// Network IR: operator nodes, named parameter blobs, shape inference and
// validation. Graphs are built once (or loaded) and treated as immutable;
// optimization passes produce rewritten copies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "yuvnet/tensor.hpp"

namespace yuvnet {

enum class OpKind {
  InputYUV420,
  InputBGR,
  Conv,
  TransposedConv,
  BatchNorm,
  ReLU,
  MaxPool,
  Concat,
  Add,
  YoloHead,
  SegHead,
  ConstantPad,
  ZeroPad,
};

inline const char *op_name(OpKind k) {
  switch (k) {
    case OpKind::InputYUV420: return "input_yuv420";
    case OpKind::InputBGR: return "input_bgr";
    case OpKind::Conv: return "conv";
    case OpKind::TransposedConv: return "transposed_conv";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::ReLU: return "relu";
    case OpKind::MaxPool: return "maxpool";
    case OpKind::Concat: return "concat";
    case OpKind::Add: return "add";
    case OpKind::YoloHead: return "yolo_head";
    case OpKind::SegHead: return "seg_head";
    case OpKind::ConstantPad: return "constant_pad";
    case OpKind::ZeroPad: return "zero_pad";
  }
  return "?";
}

inline std::optional<OpKind> op_from_name(const std::string &s) {
  static const std::map<std::string, OpKind> m = {
      {"input_yuv420", OpKind::InputYUV420}, {"input_bgr", OpKind::InputBGR},
      {"conv", OpKind::Conv}, {"transposed_conv", OpKind::TransposedConv},
      {"batchnorm", OpKind::BatchNorm}, {"relu", OpKind::ReLU},
      {"maxpool", OpKind::MaxPool}, {"concat", OpKind::Concat},
      {"add", OpKind::Add}, {"yolo_head", OpKind::YoloHead},
      {"seg_head", OpKind::SegHead}, {"constant_pad", OpKind::ConstantPad},
      {"zero_pad", OpKind::ZeroPad}};
  auto it = m.find(s);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

// YoloHead and SegHead are 1x1 convolutions on the datapath; they only
// differ in how their outputs are post-processed on the host.
inline bool is_convlike(OpKind k) {
  return k == OpKind::Conv || k == OpKind::TransposedConv ||
         k == OpKind::YoloHead || k == OpKind::SegHead;
}

inline bool is_input(OpKind k) {
  return k == OpKind::InputYUV420 || k == OpKind::InputBGR;
}

// Layers the CNN core executes for free when they trail a convolution.
inline bool is_free_layer(OpKind k) {
  return k == OpKind::BatchNorm || k == OpKind::ReLU || k == OpKind::MaxPool ||
         k == OpKind::Concat || k == OpKind::Add;
}

enum class PadMode { Zero, Constant };

struct NodeAttrs {
  int kernel = 0;             // conv / transposed conv / pad-rewritten nodes
  int stride = 1;
  PadMode pad_mode = PadMode::Zero;
  int pad = 0;                // symmetric padding per side
  float pad_value = 0.0f;     // constant mode; per-channel values live in a blob
  int out_channels = 0;       // conv-like
  float epsilon = 1e-5f;      // batchnorm
  int pool = 2;               // maxpool window == stride
  int axis = 1;               // concat
  std::string plane;          // "y" or "uv" for InputYUV420
  std::vector<std::pair<float, float>> anchors;  // yolo head
  int num_classes = 0;        // yolo head

  // Quantization annotations, filled in by quantize_graph.
  int out_frac = -1;          // output activation QFormat
  int weight_frac = -1;
  int requant_shift = -1;     // acc_frac - out_frac
};

struct Node {
  std::string name;
  OpKind kind = OpKind::Conv;
  std::vector<std::string> inputs;
  NodeAttrs attrs;
};

enum class InputFormat { YUV420, BGR };

struct InputSpec {
  InputFormat format = InputFormat::YUV420;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
};

using Blob = std::variant<FloatTensor, QTensor>;

struct NetworkGraph {
  std::vector<Node> nodes;            // topological order
  std::map<std::string, Blob> blobs;  // "node.param" -> tensor
  InputSpec input_spec;
  std::vector<std::string> outputs;

  const Node *find(const std::string &name) const {
    for (const auto &n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }
  Node *find(const std::string &name) {
    for (auto &n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }

  const FloatTensor &float_blob(const std::string &name) const {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw std::runtime_error("missing blob: " + name);
    return std::get<FloatTensor>(it->second);
  }
  const QTensor &q_blob(const std::string &name) const {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw std::runtime_error("missing blob: " + name);
    return std::get<QTensor>(it->second);
  }
  bool has_blob(const std::string &name) const { return blobs.count(name) != 0; }

  std::vector<const Node *> consumers(const std::string &name) const {
    std::vector<const Node *> out;
    for (const auto &n : nodes)
      for (const auto &in : n.inputs)
        if (in == name) { out.push_back(&n); break; }
    return out;
  }
};

using ShapeMap = std::map<std::string, Shape>;

class GraphError : public std::runtime_error {
public:
  std::string node;
  GraphError(std::string node_, const std::string &what)
      : std::runtime_error(node_.empty() ? what : node_ + ": " + what),
        node(std::move(node_)) {}
};

inline Shape conv_out_shape(const Shape &in, const Node &n) {
  const int k = n.attrs.kernel, s = n.attrs.stride, p = n.attrs.pad;
  const std::int64_t h = in.dims[2], w = in.dims[3];
  std::int64_t ho = (h + 2 * p - k) / s + 1;
  std::int64_t wo = (w + 2 * p - k) / s + 1;
  if (ho < 1 || wo < 1)
    throw GraphError(n.name, "conv output would be empty for input " + in.str());
  return Shape{in.dims[0], std::uint32_t(n.attrs.out_channels), std::uint32_t(ho),
               std::uint32_t(wo)};
}

inline ShapeMap infer_shapes(const NetworkGraph &g) {
  ShapeMap shapes;
  const std::uint32_t W = g.input_spec.width, H = g.input_spec.height;
  for (const auto &n : g.nodes) {
    auto in_shape = [&](std::size_t i) -> const Shape & {
      if (i >= n.inputs.size())
        throw GraphError(n.name, "missing input operand " + std::to_string(i));
      auto it = shapes.find(n.inputs[i]);
      if (it == shapes.end())
        throw GraphError(n.name, "unknown input '" + n.inputs[i] + "'");
      return it->second;
    };
    Shape out;
    switch (n.kind) {
      case OpKind::InputYUV420:
        if (n.attrs.plane == "y")
          out = Shape{1, 1, H, W};
        else if (n.attrs.plane == "uv")
          out = Shape{1, 2, H / 2, W / 2};
        else
          throw GraphError(n.name, "yuv input plane must be 'y' or 'uv'");
        break;
      case OpKind::InputBGR:
        out = Shape{1, 3, H, W};
        break;
      case OpKind::Conv:
      case OpKind::YoloHead:
      case OpKind::SegHead:
        out = conv_out_shape(in_shape(0), n);
        break;
      case OpKind::TransposedConv: {
        const Shape &in = in_shape(0);
        out = Shape{in.dims[0], std::uint32_t(n.attrs.out_channels), in.dims[2] * 2,
                    in.dims[3] * 2};
        break;
      }
      case OpKind::BatchNorm:
      case OpKind::ReLU:
        out = in_shape(0);
        break;
      case OpKind::MaxPool: {
        const Shape &in = in_shape(0);
        out = Shape{in.dims[0], in.dims[1], in.dims[2] / 2, in.dims[3] / 2};
        break;
      }
      case OpKind::Concat: {
        Shape s = in_shape(0);
        for (std::size_t i = 1; i < n.inputs.size(); ++i) {
          const Shape &o = in_shape(i);
          if (o.dims[0] != s.dims[0] || o.dims[2] != s.dims[2] || o.dims[3] != s.dims[3])
            throw GraphError(n.name, "concat spatial mismatch: " + s.str() + " vs " + o.str());
          s.dims[1] += o.dims[1];
        }
        out = s;
        break;
      }
      case OpKind::Add: {
        Shape s = in_shape(0);
        for (std::size_t i = 1; i < n.inputs.size(); ++i)
          if (in_shape(i) != s)
            throw GraphError(n.name, "add shape mismatch");
        out = s;
        break;
      }
      case OpKind::ConstantPad:
      case OpKind::ZeroPad: {
        const Shape &in = in_shape(0);
        out = Shape{in.dims[0], in.dims[1], in.dims[2] + 2 * n.attrs.pad,
                    in.dims[3] + 2 * n.attrs.pad};
        break;
      }
    }
    shapes[n.name] = out;
  }
  return shapes;
}

struct Diagnostic {
  enum class Level { Error, Warn } level;
  std::string node;
  std::string message;
};

inline std::vector<Diagnostic> validate(const NetworkGraph &g) {
  std::vector<Diagnostic> diags;
  auto error = [&](const std::string &n, const std::string &m) {
    diags.push_back({Diagnostic::Level::Error, n, m});
  };
  auto warn = [&](const std::string &n, const std::string &m) {
    diags.push_back({Diagnostic::Level::Warn, n, m});
  };

  std::set<std::string> seen;
  for (const auto &n : g.nodes) {
    if (!seen.insert(n.name).second) error(n.name, "duplicate node name");
    for (const auto &in : n.inputs)
      if (!seen.count(in))
        error(n.name, "input '" + in + "' undefined or out of topological order");

    if (n.kind == OpKind::Conv || n.kind == OpKind::YoloHead || n.kind == OpKind::SegHead) {
      const int k = n.attrs.kernel;
      if (k != 1 && k != 3 && k != 5 && k != 7)
        error(n.name, "unsupported kernel " + std::to_string(k));
    }
    if (n.kind == OpKind::TransposedConv &&
        (n.attrs.kernel != 5 || n.attrs.stride != 2))
      error(n.name, "transposed conv must be 5x5 stride 2");

    if (n.kind == OpKind::BatchNorm && !n.inputs.empty()) {
      const Node *prev = g.find(n.inputs[0]);
      if (prev && is_input(prev->kind))
        warn(n.name, "batchnorm on the network input is not hardware-executable; "
                     "it must be fused into the first convolution");
    }
    if (is_free_layer(n.kind) && n.kind != OpKind::BatchNorm) {
      bool conv_led = false;
      for (const auto &in : n.inputs) {
        const Node *prev = g.find(in);
        if (prev && (is_convlike(prev->kind) || is_free_layer(prev->kind))) conv_led = true;
      }
      if (!conv_led)
        warn(n.name, std::string(op_name(n.kind)) +
                         " is not in a convolution-led sequence; not free on the core");
    }
  }

  for (const auto &o : g.outputs)
    if (!seen.count(o)) error(o, "declared output does not exist");

  // Shape rules + blob presence/consistency.
  ShapeMap shapes;
  try {
    shapes = infer_shapes(g);
  } catch (const GraphError &e) {
    error(e.node, e.what());
    return diags;
  }

  auto blob_shape = [&](const std::string &name) -> std::optional<Shape> {
    auto it = g.blobs.find(name);
    if (it == g.blobs.end()) return std::nullopt;
    if (std::holds_alternative<FloatTensor>(it->second))
      return std::get<FloatTensor>(it->second).shape;
    return std::get<QTensor>(it->second).shape;
  };

  for (const auto &n : g.nodes) {
    if (is_convlike(n.kind)) {
      auto ws = blob_shape(n.name + ".weight");
      if (!ws) {
        error(n.name, "missing weight blob");
        continue;
      }
      Shape in = shapes[n.inputs[0]];
      const std::uint32_t k = std::uint32_t(n.attrs.kernel);
      Shape expect{std::uint32_t(n.attrs.out_channels), in.dims[1], k, k};
      if (*ws != expect)
        error(n.name, "weight shape " + ws->str() + " != expected " + expect.str());
      auto bs = blob_shape(n.name + ".bias");
      if (!bs || bs->dims != std::vector<std::uint32_t>{std::uint32_t(n.attrs.out_channels)})
        error(n.name, "missing or mis-shaped bias blob");
    }
    if (n.kind == OpKind::BatchNorm) {
      Shape in = shapes[n.inputs[0]];
      for (const char *p : {".gamma", ".beta", ".mean", ".var"}) {
        auto s = blob_shape(n.name + p);
        if (!s || s->dims != std::vector<std::uint32_t>{in.dims[1]})
          error(n.name, std::string("missing or mis-shaped parameter blob ") + p);
      }
    }
  }
  return diags;
}

inline bool has_errors(const std::vector<Diagnostic> &diags) {
  return std::any_of(diags.begin(), diags.end(), [](const Diagnostic &d) {
    return d.level == Diagnostic::Level::Error;
  });
}

class InvalidResolution : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void init_conv_blobs(NetworkGraph &g, const std::string &name, int cout, int cin,
                            int k, std::mt19937 &rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(float(cin * k * k)));
  FloatTensor w(Shape{std::uint32_t(cout), std::uint32_t(cin), std::uint32_t(k),
                      std::uint32_t(k)});
  for (auto &v : w.data) v = dist(rng);
  g.blobs[name + ".weight"] = std::move(w);
  g.blobs[name + ".bias"] = FloatTensor(Shape{std::uint32_t(cout)}, 0.0f);
}

inline void init_bn_blobs(NetworkGraph &g, const std::string &name, int c,
                          std::mt19937 &rng) {
  std::uniform_real_distribution<float> small(-0.1f, 0.1f);
  FloatTensor gamma(Shape{std::uint32_t(c)}, 1.0f);
  FloatTensor beta(Shape{std::uint32_t(c)});
  FloatTensor mean(Shape{std::uint32_t(c)});
  FloatTensor var(Shape{std::uint32_t(c)}, 1.0f);
  for (auto &v : beta.data) v = small(rng);
  for (auto &v : mean.data) v = small(rng);
  g.blobs[name + ".gamma"] = std::move(gamma);
  g.blobs[name + ".beta"] = std::move(beta);
  g.blobs[name + ".mean"] = std::move(mean);
  g.blobs[name + ".var"] = std::move(var);
}

}  // namespace detail

// Builds the default multi-task model: dual-branch YUV4:2:0 (or single
// BGR) input stage, a 9-layer plain encoder (5x5 convs + 2x2 pools, no
// shortcuts) reaching 1/32 resolution, a 1x1-conv detection head on the
// encoder output and a segmentation branch of five x2 transposed-conv
// stages back to full resolution. Weights are randomly initialized from
// the given seed; convolutions carry batchnorm + ReLU.
inline NetworkGraph build_default_model(std::uint32_t width, std::uint32_t height,
                                        int num_seg_classes, int num_det_classes,
                                        std::vector<std::pair<float, float>> anchors,
                                        InputFormat format = InputFormat::YUV420,
                                        std::uint32_t seed = 42) {
  if (width % 32 != 0 || height % 32 != 0 || width == 0 || height == 0)
    throw InvalidResolution("width and height must be positive multiples of 32");
  if (num_seg_classes < 1 || num_det_classes < 1 || anchors.empty())
    throw std::invalid_argument("need >=1 seg class, det class and anchor");

  NetworkGraph g;
  g.input_spec = {format, width, height};
  std::mt19937 rng(seed);

  auto add_node = [&](Node n) -> std::string {
    g.nodes.push_back(std::move(n));
    return g.nodes.back().name;
  };
  int conv_idx = 0;
  // conv + batchnorm + relu block; returns the relu's name.
  auto conv_bn_relu = [&](const std::string &prefix, const std::string &in, int cin,
                          int cout, int k, int stride, OpKind kind) {
    std::string cname = prefix;
    Node c;
    c.name = cname;
    c.kind = kind;
    c.inputs = {in};
    c.attrs.kernel = k;
    c.attrs.stride = stride;
    c.attrs.pad = (kind == OpKind::TransposedConv) ? 0 : k / 2;
    c.attrs.out_channels = cout;
    add_node(c);
    detail::init_conv_blobs(g, cname, cout, cin, k, rng);
    Node bn;
    bn.name = cname + "_bn";
    bn.kind = OpKind::BatchNorm;
    bn.inputs = {cname};
    add_node(bn);
    detail::init_bn_blobs(g, bn.name, cout, rng);
    Node r;
    r.name = cname + "_relu";
    r.kind = OpKind::ReLU;
    r.inputs = {bn.name};
    return add_node(r);
  };

  std::string trunk_in;
  if (format == InputFormat::YUV420) {
    Node y;
    y.name = "input_y";
    y.kind = OpKind::InputYUV420;
    y.attrs.plane = "y";
    add_node(y);
    Node uv;
    uv.name = "input_uv";
    uv.kind = OpKind::InputYUV420;
    uv.attrs.plane = "uv";
    add_node(uv);
    std::string yf = conv_bn_relu("stem_y", "input_y", 1, 16, 5, 2, OpKind::Conv);
    std::string uvf = conv_bn_relu("stem_uv", "input_uv", 2, 16, 3, 1, OpKind::Conv);
    Node cat;
    cat.name = "stem_concat";
    cat.kind = OpKind::Concat;
    cat.inputs = {yf, uvf};
    trunk_in = add_node(cat);
  } else {
    Node in;
    in.name = "input_bgr";
    in.kind = OpKind::InputBGR;
    add_node(in);
    trunk_in = conv_bn_relu("stem_bgr", "input_bgr", 3, 32, 5, 2, OpKind::Conv);
  }

  // Encoder trunk: 9 conv-or-pool layers, 32ch @1/2 -> 256ch @1/32.
  const int widths[] = {64, 96, 128, 192, 256};
  int cin = 32;
  std::string cur = trunk_in;
  for (int stage = 0; stage < 5; ++stage) {
    cur = conv_bn_relu("enc" + std::to_string(stage + 1), cur, cin, widths[stage], 5, 1,
                       OpKind::Conv);
    cin = widths[stage];
    if (stage < 4) {
      Node p;
      p.name = "enc" + std::to_string(stage + 1) + "_pool";
      p.kind = OpKind::MaxPool;
      p.inputs = {cur};
      cur = add_node(p);
    }
  }
  (void)conv_idx;

  // Detection head: one 1x1 conv reshaping encoder features to box predictions.
  const int det_ch = int(anchors.size()) * (5 + num_det_classes);
  Node yolo;
  yolo.name = "yolo";
  yolo.kind = OpKind::YoloHead;
  yolo.inputs = {cur};
  yolo.attrs.kernel = 1;
  yolo.attrs.out_channels = det_ch;
  yolo.attrs.anchors = anchors;
  yolo.attrs.num_classes = num_det_classes;
  add_node(yolo);
  detail::init_conv_blobs(g, "yolo", det_ch, 256, 1, rng);

  // Segmentation branch: five x2 transposed-conv stages, then a 1x1 head.
  const int dec_widths[] = {128, 64, 32, 16, 8};
  cin = 256;
  std::string seg_cur = cur;
  for (int stage = 0; stage < 5; ++stage) {
    seg_cur = conv_bn_relu("dec" + std::to_string(stage + 1), seg_cur, cin,
                           dec_widths[stage], 5, 2, OpKind::TransposedConv);
    cin = dec_widths[stage];
  }
  Node seg;
  seg.name = "seg";
  seg.kind = OpKind::SegHead;
  seg.inputs = {seg_cur};
  seg.attrs.kernel = 1;
  seg.attrs.out_channels = num_seg_classes;
  add_node(seg);
  detail::init_conv_blobs(g, "seg", num_seg_classes, cin, 1, rng);

  g.outputs = {"yolo", "seg"};
  return g;
}

}  // namespace yuvnet
