#pragma once

// Graph-rewrite passes that turn a trained float graph into the
// hardware-executable form: batchnorm folding, padding repair, macro-op
// fusion, range calibration and 16-bit power-of-two quantization.
//
// Batchnorm folding handles two cases:
//  * conv -> BN: the standard backward fold (w' = s*w, b' = (b-mu)*s+beta),
//    exact at every pixel.
//  * input -> BN -> conv: the BN is fused forward into the consuming
//    convolutions (scale along input channels, offset pushed into the
//    bias). This is exact in the interior but wrong wherever the conv
//    zero-pads, because the padded positions should carry the pre-BN
//    value that normalizes to zero (mu - beta/s), not zero itself. The
//    fold records those convolutions; fix_padding rewrites their padding
//    to the matching constant, restoring exactness at the borders.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "yuvnet/graph.hpp"
#include "yuvnet/refops.hpp"

namespace yuvnet {

class OrphanBatchNorm : public GraphError {
public:
  using GraphError::GraphError;
};
class NonConvLedLayer : public GraphError {
public:
  using GraphError::GraphError;
};
class ScaleUnderflow : public GraphError {
public:
  using GraphError::GraphError;
};
class EmptyCalibrationSet : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Name of the blob fold_batchnorm leaves on a border-suspect convolution:
// the per-input-channel pad value that fix_padding must apply.
inline std::string pending_pad_blob(const std::string &node) {
  return node + "._pending_pad";
}

struct FoldReport {
  int folded_backward = 0;
  int folded_forward = 0;
  // Convolutions whose zero padding became inconsistent with the
  // pre-fold reference (forward folds with a nonzero offset).
  std::vector<std::string> border_suspects;
};

struct FoldResult {
  NetworkGraph graph;
  FoldReport report;
};

namespace detail {

struct BNScale {
  std::vector<float> s;  // gamma / sqrt(var + eps)
  std::vector<float> t;  // beta - s * mean
};

inline BNScale bn_scale_of(const NetworkGraph &g, const Node &bn) {
  const auto &gamma = g.float_blob(bn.name + ".gamma").data;
  const auto &beta = g.float_blob(bn.name + ".beta").data;
  const auto &mean = g.float_blob(bn.name + ".mean").data;
  const auto &var = g.float_blob(bn.name + ".var").data;
  BNScale r;
  r.s.resize(gamma.size());
  r.t.resize(gamma.size());
  for (std::size_t c = 0; c < gamma.size(); ++c) {
    r.s[c] = gamma[c] / std::sqrt(var[c] + bn.attrs.epsilon);
    r.t[c] = beta[c] - r.s[c] * mean[c];
  }
  return r;
}

}  // namespace detail

inline FoldResult fold_batchnorm(const NetworkGraph &g) {
  FoldResult res;
  res.graph = g;
  NetworkGraph &out = res.graph;

  // Resolve each BN, rewiring consumers past it.
  std::map<std::string, std::string> rename;  // bn name -> replacement producer
  std::set<std::string> removed;

  for (const auto &bn : g.nodes) {
    if (bn.kind != OpKind::BatchNorm) continue;
    const Node *prev = g.find(bn.inputs.at(0));
    detail::BNScale sc = detail::bn_scale_of(g, bn);

    if (prev && is_convlike(prev->kind)) {
      // Backward fold. The conv must feed only this BN, otherwise other
      // consumers would see rescaled values.
      if (g.consumers(prev->name).size() != 1)
        throw OrphanBatchNorm(bn.name, "preceding convolution has other consumers");
      auto &w = std::get<FloatTensor>(out.blobs.at(prev->name + ".weight"));
      auto &b = std::get<FloatTensor>(out.blobs.at(prev->name + ".bias"));
      const auto &wd = w.shape.dims;
      const std::size_t per_out = std::size_t(wd[1]) * wd[2] * wd[3];
      for (std::uint32_t co = 0; co < wd[0]; ++co) {
        for (std::size_t i = 0; i < per_out; ++i) w.data[co * per_out + i] *= sc.s[co];
        b.data[co] = b.data[co] * sc.s[co] + sc.t[co];
      }
      rename[bn.name] = prev->name;
      ++res.report.folded_backward;
    } else if (prev && is_input(prev->kind)) {
      // Forward fold into every consuming convolution.
      auto consumers = g.consumers(bn.name);
      if (consumers.empty())
        throw OrphanBatchNorm(bn.name, "batchnorm feeds nothing");
      for (const Node *cn : consumers) {
        if (cn->kind != OpKind::Conv)
          throw OrphanBatchNorm(bn.name,
                                "batchnorm on the input must feed convolutions only");
        auto &w = std::get<FloatTensor>(out.blobs.at(cn->name + ".weight"));
        auto &b = std::get<FloatTensor>(out.blobs.at(cn->name + ".bias"));
        const auto &wd = w.shape.dims;
        const std::uint32_t cin = wd[1], taps = wd[2] * wd[3];
        bool offset = false;
        for (float t : sc.t)
          if (t != 0.0f) offset = true;
        for (std::uint32_t co = 0; co < wd[0]; ++co) {
          float extra = 0.0f;
          for (std::uint32_t ci = 0; ci < cin; ++ci) {
            float *wp = &w.data[(std::size_t(co) * cin + ci) * taps];
            for (std::uint32_t k = 0; k < taps; ++k) {
              extra += wp[k] * sc.t[ci];
              wp[k] *= sc.s[ci];
            }
          }
          b.data[co] += extra;
        }
        if (offset && cn->attrs.pad > 0 && cn->attrs.pad_mode == PadMode::Zero) {
          // Pre-BN value whose normalized form is zero, per input channel.
          FloatTensor pv(Shape{cin});
          for (std::uint32_t ci = 0; ci < cin; ++ci) pv.data[ci] = -sc.t[ci] / sc.s[ci];
          out.blobs[pending_pad_blob(cn->name)] = std::move(pv);
          res.report.border_suspects.push_back(cn->name);
        }
      }
      rename[bn.name] = bn.inputs[0];
      ++res.report.folded_forward;
    } else {
      throw OrphanBatchNorm(bn.name, "no convolution to fold this batchnorm into");
    }

    removed.insert(bn.name);
    for (const char *p : {".gamma", ".beta", ".mean", ".var"})
      out.blobs.erase(bn.name + p);
  }

  std::vector<Node> kept;
  for (auto &n : out.nodes) {
    if (removed.count(n.name)) continue;
    for (auto &in : n.inputs) {
      auto it = rename.find(in);
      if (it != rename.end()) in = it->second;
    }
    kept.push_back(std::move(n));
  }
  out.nodes = std::move(kept);
  for (auto &o : out.outputs) {
    auto it = rename.find(o);
    if (it != rename.end()) o = it->second;
  }
  return res;
}

struct PadFixReport {
  std::vector<std::string> rewritten;
};

struct PadFixResult {
  NetworkGraph graph;
  PadFixReport report;
};

// Rewrites the zero padding of border-suspect convolutions to the
// constant recorded by fold_batchnorm, making the folded graph equal the
// pre-fold reference at every pixel. A single pad value is used when all
// channels agree; otherwise the per-channel vector is kept as a blob.
inline PadFixResult fix_padding(const NetworkGraph &g) {
  PadFixResult res;
  res.graph = g;
  NetworkGraph &out = res.graph;
  for (auto &n : out.nodes) {
    auto it = out.blobs.find(pending_pad_blob(n.name));
    if (it == out.blobs.end()) continue;
    FloatTensor pv = std::get<FloatTensor>(it->second);
    out.blobs.erase(it);
    if (n.attrs.pad == 0 || n.attrs.pad_mode != PadMode::Zero) continue;
    bool uniform = std::all_of(pv.data.begin(), pv.data.end(),
                               [&](float v) { return v == pv.data[0]; });
    n.attrs.pad_mode = PadMode::Constant;
    if (uniform) {
      n.attrs.pad_value = pv.data[0];
    } else {
      out.blobs[n.name + ".pad_values"] = std::move(pv);
    }
    res.report.rewritten.push_back(n.name);
  }
  return res;
}

// A fused executable unit: one convolution plus the free layers it drags
// along in the same core pass.
struct MacroOp {
  std::string lead;
  std::vector<std::string> tail;

  const std::string &output() const { return tail.empty() ? lead : tail.back(); }
};

struct FusionResult {
  std::vector<MacroOp> macros;
  std::vector<Diagnostic> diagnostics;  // non-conv-led free layers
};

// Greedy maximal grouping in topological order: a free layer joins the
// macro-op whose current end it consumes, provided it is that end's only
// consumer. Ties (concat/add with several eligible producers) go to the
// latest producer.
inline FusionResult fuse_sequences(const NetworkGraph &g) {
  FusionResult res;
  std::map<std::string, std::size_t> end_of;  // current macro end -> index

  for (const auto &n : g.nodes) {
    if (is_input(n.kind)) continue;
    if (is_convlike(n.kind)) {
      end_of[n.name] = res.macros.size();
      res.macros.push_back({n.name, {}});
      continue;
    }
    if (is_free_layer(n.kind)) {
      std::size_t chosen = SIZE_MAX;
      for (const auto &in : n.inputs) {
        auto it = end_of.find(in);
        if (it == end_of.end()) continue;
        if (g.consumers(in).size() != 1) continue;
        if (chosen == SIZE_MAX || it->second > chosen) chosen = it->second;
      }
      if (chosen == SIZE_MAX) {
        res.diagnostics.push_back(
            {Diagnostic::Level::Error, n.name,
             std::string(op_name(n.kind)) + " is not in a convolution-led sequence"});
        // Standalone unit so the partition still covers every node.
        res.macros.push_back({n.name, {}});
        continue;
      }
      end_of.erase(res.macros[chosen].output());
      res.macros[chosen].tail.push_back(n.name);
      end_of[n.name] = chosen;
      continue;
    }
    // Explicit pad nodes run as their own unit.
    res.macros.push_back({n.name, {}});
  }
  return res;
}

struct CalibrationStats {
  std::map<std::string, float> act_max;   // node -> max |activation|
  std::map<std::string, float> blob_max;  // blob -> max |value|

  void merge(const CalibrationStats &o) {
    for (const auto &[k, v] : o.act_max) {
      auto it = act_max.find(k);
      if (it == act_max.end() || v > it->second) act_max[k] = v;
    }
    for (const auto &[k, v] : o.blob_max) {
      auto it = blob_max.find(k);
      if (it == blob_max.end() || v > it->second) blob_max[k] = v;
    }
  }
};

inline CalibrationStats calibrate(const NetworkGraph &g, const std::vector<Frame> &frames) {
  if (frames.empty()) throw EmptyCalibrationSet("calibration needs at least one frame");
  CalibrationStats stats;
  for (const auto &frame : frames) {
    CalibrationStats s;
    auto acts = run_float(g, frame);
    for (const auto &[name, t] : acts) {
      float m = 0.0f;
      for (float v : t.data) m = std::max(m, std::fabs(v));
      s.act_max[name] = m;
    }
    stats.merge(s);
  }
  for (const auto &[name, blob] : g.blobs) {
    if (!std::holds_alternative<FloatTensor>(blob)) continue;
    float m = 0.0f;
    for (float v : std::get<FloatTensor>(blob).data) m = std::max(m, std::fabs(v));
    stats.blob_max[name] = m;
  }
  return stats;
}

// Power-of-two scale selection: the smallest frac_bits loss that still
// represents max_abs without saturating, minus a safety margin.
inline int frac_bits_for(float max_abs, int margin_bits) {
  if (max_abs <= 0.0f) return 15;
  int fb = 15 - int(std::ceil(std::log2(double(max_abs) + 1e-12))) - margin_bits;
  return std::clamp(fb, 0, 15);
}

struct QuantizeReport {
  std::map<std::string, int> act_frac;     // macro lead / input -> out frac
  std::map<std::string, int> weight_frac;  // blob -> frac
  std::uint64_t weight_saturations = 0;
};

struct QuantizeResultGraph {
  NetworkGraph graph;
  QuantizeReport report;
};

// Assigns per-tensor QFormats from calibration stats, re-encodes weight
// blobs as q16 and annotates every node with its output format and
// requantization shift. Activation formats are assigned per macro-op
// (free tails run at the lead's output format); macros joined by a
// concat or add share one format.
inline QuantizeResultGraph quantize_graph(const NetworkGraph &g,
                                          const CalibrationStats &stats,
                                          int margin_bits = 1) {
  QuantizeResultGraph res;
  res.graph = g;
  NetworkGraph &out = res.graph;

  FusionResult fused = fuse_sequences(g);
  for (const auto &d : fused.diagnostics)
    if (d.level == Diagnostic::Level::Error)
      throw NonConvLedLayer(d.node, d.message);

  auto stat_of = [&](const std::string &node) {
    auto it = stats.act_max.find(node);
    if (it == stats.act_max.end())
      throw GraphError(node, "no calibration statistic for node");
    return it->second;
  };

  // Union macros that must share an output format (concat/add members).
  std::map<std::string, std::size_t> macro_of;
  for (std::size_t i = 0; i < fused.macros.size(); ++i) {
    macro_of[fused.macros[i].lead] = i;
    for (const auto &t : fused.macros[i].tail) macro_of[t] = i;
  }
  std::vector<std::size_t> parent(fused.macros.size());
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  std::function<std::size_t(std::size_t)> root = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (const auto &n : g.nodes) {
    if (n.kind != OpKind::Concat && n.kind != OpKind::Add) continue;
    for (const auto &in : n.inputs) {
      auto it = macro_of.find(in);
      if (it != macro_of.end()) parent[root(it->second)] = root(macro_of[n.name]);
    }
  }
  std::map<std::size_t, float> group_max;
  for (std::size_t i = 0; i < fused.macros.size(); ++i) {
    float m = stat_of(fused.macros[i].lead);
    for (const auto &t : fused.macros[i].tail) m = std::max(m, stat_of(t));
    std::size_t r = root(i);
    auto it = group_max.find(r);
    group_max[r] = it == group_max.end() ? m : std::max(it->second, m);
  }

  std::map<std::string, int> node_frac;
  for (const auto &n : g.nodes)
    if (is_input(n.kind))
      node_frac[n.name] = frac_bits_for(stat_of(n.name), margin_bits);
  for (std::size_t i = 0; i < fused.macros.size(); ++i) {
    int fb = frac_bits_for(group_max[root(i)], margin_bits);
    node_frac[fused.macros[i].lead] = fb;
    for (const auto &t : fused.macros[i].tail) node_frac[t] = fb;
  }

  // Weights: q16 re-encode. Bias and pad values stay float; the executor
  // encodes them at accumulator / input precision.
  for (auto &[name, blob] : out.blobs) {
    if (!name.ends_with(".weight")) continue;
    if (!std::holds_alternative<FloatTensor>(blob)) continue;
    auto it = stats.blob_max.find(name);
    if (it == stats.blob_max.end()) throw GraphError(name, "no calibration statistic for blob");
    int fb = frac_bits_for(it->second, margin_bits);
    auto qr = quantize(std::get<FloatTensor>(blob), QFormat(fb));
    res.report.weight_saturations += qr.saturation_count;
    res.report.weight_frac[name] = fb;
    blob = std::move(qr.tensor);
  }

  for (auto &n : out.nodes) {
    auto it = node_frac.find(n.name);
    if (it != node_frac.end()) n.attrs.out_frac = it->second;
    if (is_convlike(n.kind)) {
      int wf = res.report.weight_frac.at(n.name + ".weight");
      int in_f = node_frac.at(n.inputs.at(0));
      int shift = in_f + wf - n.attrs.out_frac;
      if (shift < 0)
        throw ScaleUnderflow(n.name, "activation range too large for 16 bits (shift " +
                                         std::to_string(shift) + ")");
      n.attrs.weight_frac = wf;
      n.attrs.requant_shift = shift;
    }
  }
  for (const auto &[k, v] : node_frac) res.report.act_frac[k] = v;
  return res;
}

}  // namespace yuvnet
