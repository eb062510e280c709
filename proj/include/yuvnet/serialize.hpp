#pragma once

// Model (de)serialization. Topology is a small JSON document; weights are
// a separate little-endian binary so passes can rewrite blobs without
// touching the topology text.
//
// Weights layout: "YMNW" | u32 version | u32 blob count |
//   per blob: u16 name len | name | u8 dtype (0=f32,1=q16) | u8 frac_bits |
//             u8 rank | u32 dims[rank] | raw data |
// trailing u32 CRC32 over all preceding bytes.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "yuvnet/graph.hpp"

namespace yuvnet {

class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class BlobMissing : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ChecksumMismatch : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::uint32_t crc32(const std::uint8_t *data, std::size_t len,
                           std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t> &out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(std::uint8_t((std::uint64_t(v) >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::uint8_t *p;
  std::size_t len, pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > len)
      throw ParseError("weights truncated at offset " + std::to_string(pos));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
    pos += sizeof(T);
    return T(v);
  }
  const std::uint8_t *raw(std::size_t n) {
    if (pos + n > len)
      throw ParseError("weights truncated at offset " + std::to_string(pos));
    const std::uint8_t *r = p + pos;
    pos += n;
    return r;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> save_weights(const NetworkGraph &g) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'Y', 'M', 'N', 'W'});
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint32_t>(out, std::uint32_t(g.blobs.size()));
  for (const auto &[name, blob] : g.blobs) {
    detail::put<std::uint16_t>(out, std::uint16_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (std::holds_alternative<FloatTensor>(blob)) {
      const auto &t = std::get<FloatTensor>(blob);
      out.push_back(0);
      out.push_back(0);
      out.push_back(std::uint8_t(t.shape.rank()));
      for (auto d : t.shape.dims) detail::put<std::uint32_t>(out, d);
      for (float v : t.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put<std::uint32_t>(out, bits);
      }
    } else {
      const auto &t = std::get<QTensor>(blob);
      out.push_back(1);
      out.push_back(std::uint8_t(t.qformat.frac_bits));
      out.push_back(std::uint8_t(t.shape.rank()));
      for (auto d : t.shape.dims) detail::put<std::uint32_t>(out, d);
      for (std::int16_t v : t.data) detail::put<std::uint16_t>(out, std::uint16_t(v));
    }
  }
  detail::put<std::uint32_t>(out, crc32(out.data(), out.size()));
  return out;
}

inline std::map<std::string, Blob> load_weights(const std::vector<std::uint8_t> &bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "YMNW", 4) != 0)
    throw ChecksumMismatch("bad weights magic");
  std::uint32_t stored_crc;
  {
    detail::Reader tail{bytes.data() + bytes.size() - 4, 4};
    stored_crc = tail.get<std::uint32_t>();
  }
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw ChecksumMismatch("weights CRC32 mismatch");

  detail::Reader r{bytes.data(), bytes.size() - 4};
  r.pos = 4;
  std::uint32_t version = r.get<std::uint32_t>();
  if (version != 1) throw ParseError("unsupported weights version " + std::to_string(version));
  std::uint32_t count = r.get<std::uint32_t>();

  std::map<std::string, Blob> blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t nlen = r.get<std::uint16_t>();
    std::string name(reinterpret_cast<const char *>(r.raw(nlen)), nlen);
    std::uint8_t dtype = r.get<std::uint8_t>();
    std::uint8_t frac = r.get<std::uint8_t>();
    std::uint8_t rank = r.get<std::uint8_t>();
    std::vector<std::uint32_t> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(r.get<std::uint32_t>());
    Shape shape(dims);
    if (dtype == 0) {
      FloatTensor t(shape);
      for (auto &v : t.data) {
        std::uint32_t bits = r.get<std::uint32_t>();
        std::memcpy(&v, &bits, 4);
      }
      blobs[name] = std::move(t);
    } else if (dtype == 1) {
      QTensor t(shape, QFormat(frac));
      for (auto &v : t.data) v = std::int16_t(r.get<std::uint16_t>());
      blobs[name] = std::move(t);
    } else {
      throw ParseError("unknown blob dtype " + std::to_string(dtype));
    }
  }
  return blobs;
}

inline nlohmann::json topology_to_json(const NetworkGraph &g) {
  nlohmann::json j;
  j["version"] = 1;
  j["input"] = {{"format", g.input_spec.format == InputFormat::YUV420 ? "yuv420" : "bgr"},
                {"width", g.input_spec.width},
                {"height", g.input_spec.height}};
  j["nodes"] = nlohmann::json::array();
  for (const auto &n : g.nodes) {
    nlohmann::json jn;
    jn["name"] = n.name;
    jn["op"] = op_name(n.kind);
    jn["inputs"] = n.inputs;
    nlohmann::json a = nlohmann::json::object();
    const auto &at = n.attrs;
    if (is_convlike(n.kind) || n.kind == OpKind::ConstantPad || n.kind == OpKind::ZeroPad) {
      if (at.kernel) a["kernel"] = at.kernel;
      a["stride"] = at.stride;
      a["pad"] = at.pad;
      a["pad_mode"] = at.pad_mode == PadMode::Zero ? "zero" : "constant";
      if (at.pad_mode == PadMode::Constant) a["pad_value"] = at.pad_value;
      if (at.out_channels) a["out_channels"] = at.out_channels;
    }
    if (n.kind == OpKind::BatchNorm) a["epsilon"] = at.epsilon;
    if (n.kind == OpKind::MaxPool) a["pool"] = at.pool;
    if (n.kind == OpKind::Concat) a["axis"] = at.axis;
    if (n.kind == OpKind::InputYUV420) a["plane"] = at.plane;
    if (n.kind == OpKind::YoloHead) {
      a["num_classes"] = at.num_classes;
      auto ja = nlohmann::json::array();
      for (auto &[pw, ph] : at.anchors) ja.push_back({pw, ph});
      a["anchors"] = ja;
    }
    if (at.out_frac >= 0) a["out_frac"] = at.out_frac;
    if (at.weight_frac >= 0) a["weight_frac"] = at.weight_frac;
    if (at.requant_shift >= 0) a["requant_shift"] = at.requant_shift;
    jn["attrs"] = a;
    j["nodes"].push_back(jn);
  }
  j["outputs"] = g.outputs;
  return j;
}

inline NetworkGraph topology_from_json(const nlohmann::json &j) {
  NetworkGraph g;
  try {
    if (j.at("version").get<int>() != 1) throw ParseError("unsupported topology version");
    const auto &in = j.at("input");
    std::string fmt = in.at("format").get<std::string>();
    if (fmt == "yuv420")
      g.input_spec.format = InputFormat::YUV420;
    else if (fmt == "bgr")
      g.input_spec.format = InputFormat::BGR;
    else
      throw ParseError("unknown input format '" + fmt + "'");
    g.input_spec.width = in.at("width").get<std::uint32_t>();
    g.input_spec.height = in.at("height").get<std::uint32_t>();

    for (const auto &jn : j.at("nodes")) {
      Node n;
      n.name = jn.at("name").get<std::string>();
      auto kind = op_from_name(jn.at("op").get<std::string>());
      if (!kind) throw ParseError("unknown op '" + jn.at("op").get<std::string>() + "'");
      n.kind = *kind;
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      const auto a = jn.value("attrs", nlohmann::json::object());
      auto &at = n.attrs;
      at.kernel = a.value("kernel", 0);
      at.stride = a.value("stride", 1);
      at.pad = a.value("pad", 0);
      at.pad_mode = a.value("pad_mode", "zero") == "constant" ? PadMode::Constant
                                                              : PadMode::Zero;
      at.pad_value = a.value("pad_value", 0.0f);
      at.out_channels = a.value("out_channels", 0);
      at.epsilon = a.value("epsilon", 1e-5f);
      at.pool = a.value("pool", 2);
      at.axis = a.value("axis", 1);
      at.plane = a.value("plane", "");
      at.num_classes = a.value("num_classes", 0);
      if (a.contains("anchors"))
        for (const auto &ja : a["anchors"])
          at.anchors.emplace_back(ja.at(0).get<float>(), ja.at(1).get<float>());
      at.out_frac = a.value("out_frac", -1);
      at.weight_frac = a.value("weight_frac", -1);
      at.requant_shift = a.value("requant_shift", -1);
      g.nodes.push_back(std::move(n));
    }
    g.outputs = j.at("outputs").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(std::string("topology: ") + e.what());
  }
  return g;
}

inline void save_model(const NetworkGraph &g, const std::string &topo_path,
                       const std::string &weights_path) {
  std::ofstream tf(topo_path);
  if (!tf) throw std::runtime_error("cannot write " + topo_path);
  tf << topology_to_json(g).dump(2) << "\n";
  auto bytes = save_weights(g);
  std::ofstream wf(weights_path, std::ios::binary);
  if (!wf) throw std::runtime_error("cannot write " + weights_path);
  wf.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
}

inline NetworkGraph load_model(const std::string &topo_path,
                               const std::string &weights_path) {
  std::ifstream tf(topo_path);
  if (!tf) throw std::runtime_error("cannot read " + topo_path);
  nlohmann::json j;
  try {
    tf >> j;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(std::string("topology: ") + e.what());
  }
  NetworkGraph g = topology_from_json(j);

  std::ifstream wf(weights_path, std::ios::binary);
  if (!wf) throw std::runtime_error("cannot read " + weights_path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(wf)),
                                  std::istreambuf_iterator<char>());
  g.blobs = load_weights(bytes);

  // Every parameter a node needs must be present.
  for (const auto &n : g.nodes) {
    std::vector<std::string> need;
    if (is_convlike(n.kind)) need = {".weight", ".bias"};
    if (n.kind == OpKind::BatchNorm) need = {".gamma", ".beta", ".mean", ".var"};
    for (const auto &suffix : need)
      if (!g.has_blob(n.name + suffix))
        throw BlobMissing("blob '" + n.name + suffix + "' not present in weights file");
  }
  return g;
}

}  // namespace yuvnet
