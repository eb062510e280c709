#pragma once

// Analytical cycle / MAC / utilization / memory-traffic model of the
// dedicated CNN core: 4 input lanes x 8 output kernels x 25 multipliers
// per cycle, 16-bit operands. Free layers trailing a convolution cost no
// extra cycles.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "yuvnet/graph.hpp"
#include "yuvnet/passes.hpp"

namespace yuvnet {

class UnsupportedKernel : public std::runtime_error {
public:
  explicit UnsupportedKernel(int k)
      : std::runtime_error("unsupported kernel size " + std::to_string(k)) {}
};

struct HwConfig {
  int in_lanes = 4;        // input channels processed per cycle
  int out_lanes = 8;       // kernels applied per input channel per cycle
  int mult_grid = 25;      // multipliers per lane pair (5x5)
  double clock_hz = 500e6;
  int activation_bytes = 2;
  int weight_bytes = 2;
  int input_pixel_bytes = 1;

  double peak_macs_per_s() const {
    return double(in_lanes) * out_lanes * mult_grid * clock_hz;
  }
};

// Fraction of the multiplier grid doing useful work for a kernel size.
// 7x7 takes two passes of the 25-wide grid for its 49 taps.
inline double kernel_utilization(int k) {
  switch (k) {
    case 1:
    case 3:
    case 5:
      return double(k * k) / 25.0;
    case 7:
      return 49.0 / 50.0;
    default:
      throw UnsupportedKernel(k);
  }
}

inline std::uint64_t conv_cycles(std::uint64_t cin, std::uint64_t cout, std::uint64_t hout,
                                 std::uint64_t wout, int k) {
  if (k != 1 && k != 3 && k != 5 && k != 7) throw UnsupportedKernel(k);
  const std::uint64_t ck = (k == 7) ? 2 : 1;
  return hout * wout * ((cin + 3) / 4) * ((cout + 7) / 8) * ck;
}

inline std::uint64_t input_traffic(InputFormat format, std::uint32_t width,
                                   std::uint32_t height) {
  const std::uint64_t px = std::uint64_t(width) * height;
  return format == InputFormat::BGR ? 3 * px : px * 3 / 2;
}

struct OpCost {
  std::string name;  // macro-op lead
  std::uint64_t macs = 0;
  std::uint64_t cycles = 0;
  double utilization = 0.0;  // 0 for compute-free units
  std::uint64_t in_bytes = 0;
  std::uint64_t out_bytes = 0;
  std::uint64_t weight_bytes = 0;
};

struct CostReport {
  std::vector<OpCost> ops;
  std::uint64_t total_macs = 0;
  std::uint64_t total_cycles = 0;
  std::uint64_t total_traffic_bytes = 0;
  double fps = 0.0;
};

// Flat memory model: each macro-op reads its external input activations
// once, writes its output once and reads its weights once per frame.
inline CostReport graph_cost(const NetworkGraph &g, const HwConfig &hw = {}) {
  ShapeMap shapes = infer_shapes(g);
  FusionResult fused = fuse_sequences(g);

  std::map<std::string, std::size_t> macro_of;
  for (std::size_t i = 0; i < fused.macros.size(); ++i) {
    macro_of[fused.macros[i].lead] = i;
    for (const auto &t : fused.macros[i].tail) macro_of[t] = i;
  }

  CostReport report;
  for (std::size_t i = 0; i < fused.macros.size(); ++i) {
    const MacroOp &m = fused.macros[i];
    const Node *lead = g.find(m.lead);
    OpCost oc;
    oc.name = m.lead;

    if (is_convlike(lead->kind)) {
      const Shape &out = shapes.at(lead->name);
      const Shape &in = shapes.at(lead->inputs.at(0));
      const int k = lead->kind == OpKind::TransposedConv ? 5 : lead->attrs.kernel;
      oc.cycles = conv_cycles(in.dims[1], out.dims[1], out.dims[2], out.dims[3], k);
      oc.macs = std::uint64_t(out.dims[2]) * out.dims[3] * out.dims[1] * in.dims[1] * k * k;
      oc.utilization = kernel_utilization(k);
      std::uint64_t welems = std::uint64_t(out.dims[1]) * in.dims[1] * k * k + out.dims[1];
      oc.weight_bytes = welems * hw.weight_bytes;
    }

    // External reads: every input of a macro member produced outside the
    // macro. Raw image planes move 1 byte/pixel, activations 2.
    auto member_names = [&] {
      std::vector<std::string> v{m.lead};
      v.insert(v.end(), m.tail.begin(), m.tail.end());
      return v;
    }();
    for (const auto &mn : member_names) {
      const Node *node = g.find(mn);
      for (const auto &in_name : node->inputs) {
        auto it = macro_of.find(in_name);
        if (it != macro_of.end() && it->second == i) continue;
        const Node *producer = g.find(in_name);
        const int bpe = (producer && is_input(producer->kind)) ? hw.input_pixel_bytes
                                                               : hw.activation_bytes;
        oc.in_bytes += shapes.at(in_name).elements() * bpe;
      }
    }
    // External writes: members consumed outside the macro or listed as
    // graph outputs.
    for (const auto &mn : member_names) {
      bool external = false;
      for (const auto &o : g.outputs)
        if (o == mn) external = true;
      for (const Node *c : g.consumers(mn)) {
        auto it = macro_of.find(c->name);
        if (it == macro_of.end() || it->second != i) external = true;
      }
      if (external) oc.out_bytes += shapes.at(mn).elements() * hw.activation_bytes;
    }

    report.total_macs += oc.macs;
    report.total_cycles += oc.cycles;
    report.total_traffic_bytes += oc.in_bytes + oc.out_bytes + oc.weight_bytes;
    report.ops.push_back(std::move(oc));
  }
  report.fps = report.total_cycles ? hw.clock_hz / double(report.total_cycles) : 0.0;
  return report;
}

}  // namespace yuvnet
