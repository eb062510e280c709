// yuvnet: build / optimize / run / cost / compare pipeline driver.
//
// Exit codes: 0 success, 2 invalid arguments or malformed input files,
// 3 graph validation / pass errors, 4 QFormat mismatch in fixed mode.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "yuvnet/costmodel.hpp"
#include "yuvnet/graph.hpp"
#include "yuvnet/heads.hpp"
#include "yuvnet/image.hpp"
#include "yuvnet/passes.hpp"
#include "yuvnet/qexec.hpp"
#include "yuvnet/refops.hpp"
#include "yuvnet/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace yuvnet;

namespace {

constexpr int kExitArgs = 2;
constexpr int kExitGraph = 3;
constexpr int kExitQFormat = 4;

struct CliError {
  int code;
  std::string message;
};

void print_diags(const std::vector<Diagnostic> &diags) {
  for (const auto &d : diags)
    std::cerr << (d.level == Diagnostic::Level::Error ? "error: " : "warning: ") << d.node
              << ": " << d.message << "\n";
}

std::vector<std::pair<float, float>> load_anchors(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw CliError{kExitArgs, "cannot read anchors file " + path};
  json j;
  try {
    f >> j;
  } catch (const json::exception &e) {
    throw CliError{kExitArgs, "anchors file: " + std::string(e.what())};
  }
  std::vector<std::pair<float, float>> anchors;
  for (const auto &a : j) anchors.emplace_back(a.at(0).get<float>(), a.at(1).get<float>());
  if (anchors.empty()) throw CliError{kExitArgs, "anchors file is empty"};
  return anchors;
}

NetworkGraph load_checked(const std::string &topo, const std::string &weights) {
  try {
    return load_model(topo, weights);
  } catch (const ChecksumMismatch &e) {
    throw CliError{kExitArgs, e.what()};
  } catch (const BlobMissing &e) {
    throw CliError{kExitArgs, e.what()};
  } catch (const ParseError &e) {
    throw CliError{kExitArgs, e.what()};
  } catch (const std::exception &e) {
    throw CliError{kExitArgs, e.what()};
  }
}

std::vector<Frame> load_calib_dir(const std::string &dir, std::uint32_t w, std::uint32_t h) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw CliError{kExitArgs, dir + " is not a directory"};
  for (const auto &e : fs::directory_iterator(dir))
    if (e.path().extension() == ".i420") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw CliError{kExitArgs, "no .i420 frames in " + dir};
  std::vector<Frame> frames;
  for (const auto &p : files) frames.push_back(load_i420(p.string(), w, h));
  return frames;
}

json cost_to_json(const CostReport &r, const HwConfig &hw) {
  json j;
  j["peak_gmacs"] = hw.peak_macs_per_s() / 1e9;
  j["clock_mhz"] = hw.clock_hz / 1e6;
  j["layers"] = json::array();
  for (const auto &op : r.ops)
    j["layers"].push_back({{"name", op.name},
                           {"macs", op.macs},
                           {"cycles", op.cycles},
                           {"utilization", op.utilization},
                           {"in_bytes", op.in_bytes},
                           {"out_bytes", op.out_bytes},
                           {"weight_bytes", op.weight_bytes}});
  j["total_macs"] = r.total_macs;
  j["total_cycles"] = r.total_cycles;
  j["total_traffic_bytes"] = r.total_traffic_bytes;
  j["fps"] = r.fps;
  return j;
}

json snr_to_json(const SnrReport &r) {
  json j;
  j["max_abs_err"] = r.max_abs_err;
  if (r.exact)
    j["snr_db"] = "exact";
  else if (r.undefined)
    j["snr_db"] = "undefined";
  else
    j["snr_db"] = r.snr_db;
  return j;
}

// Fixed palette for the color-mapped segmentation preview.
const std::uint8_t kPalette[][3] = {{0, 0, 0},     {128, 64, 128}, {255, 255, 0},
                                    {220, 20, 60}, {0, 128, 255},  {0, 255, 128},
                                    {255, 0, 255}, {255, 128, 0}};

void write_seg_outputs(const SegMap &seg, const fs::path &dir) {
  save_pgm(seg.ids, seg.width, seg.height, (dir / "segmentation.pgm").string());
  std::vector<std::uint8_t> rgb(seg.ids.size() * 3);
  for (std::size_t i = 0; i < seg.ids.size(); ++i) {
    const auto &p = kPalette[seg.ids[i] % 8];
    rgb[3 * i] = p[0];
    rgb[3 * i + 1] = p[1];
    rgb[3 * i + 2] = p[2];
  }
  save_ppm(rgb, seg.width, seg.height, (dir / "segmentation.ppm").string());
}

void write_detections(const std::vector<Detection> &dets, const fs::path &path) {
  std::ofstream f(path);
  for (const auto &d : dets) {
    json j = {{"class", d.class_id}, {"score", d.score}, {"cx", d.cx},
              {"cy", d.cy},          {"w", d.w},         {"h", d.h}};
    f << j.dump() << "\n";
  }
}

void write_manifest(const fs::path &dir) {
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json m;
  m["files"] = json::array();
  for (const auto &p : files) {
    std::ifstream f(p, std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    char hex[16];
    std::snprintf(hex, sizeof hex, "%08x", crc32(bytes.data(), bytes.size()));
    m["files"].push_back(
        {{"name", p.filename().string()}, {"crc32", hex}, {"bytes", bytes.size()}});
  }
  std::ofstream out(dir / "manifest.json");
  out << m.dump(2) << "\n";
}

// Artifact directories are staged in a temp dir and renamed into place so
// a failure never leaves a partial output directory.
class StagedDir {
public:
  explicit StagedDir(fs::path final_path)
      : final_(std::move(final_path)), tmp_(final_.string() + ".tmp") {
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~StagedDir() {
    if (!committed_) fs::remove_all(tmp_);
  }
  const fs::path &path() const { return tmp_; }
  void commit() {
    fs::remove_all(final_);
    fs::rename(tmp_, final_);
    committed_ = true;
  }

private:
  fs::path final_, tmp_;
  bool committed_ = false;
};

struct RunOutputs {
  std::vector<Detection> detections;
  SegMap seg;
  std::map<std::string, FloatTensor> head_float;  // dequantized for fixed mode
};

RunOutputs run_graph(const NetworkGraph &g, const Frame &frame, const std::string &mode,
                     float conf, float nms_iou) {
  RunOutputs out;
  std::map<std::string, FloatTensor> heads;
  if (mode == "float") {
    auto acts = run_float(g, frame);
    for (const auto &o : g.outputs) heads[o] = std::move(acts.at(o));
  } else {
    QExecPlan plan = build_plan(g);
    auto acts = run_fixed(plan, frame);
    for (const auto &o : g.outputs) heads[o] = dequantize(acts.at(o));
  }
  for (const auto &n : g.nodes) {
    if (n.kind == OpKind::YoloHead && heads.count(n.name)) {
      std::vector<Anchor> anchors;
      for (auto &[pw, ph] : n.attrs.anchors) anchors.push_back({pw, ph});
      out.detections = nms(decode_yolo(heads.at(n.name), anchors, conf), nms_iou);
    }
    if (n.kind == OpKind::SegHead && heads.count(n.name))
      out.seg = seg_argmax(heads.at(n.name));
  }
  out.head_float = std::move(heads);
  return out;
}

json pass_report_json(const FoldReport &fold, const PadFixReport &padfix,
                      const FusionResult &fused, const QuantizeReport &quant) {
  json j;
  j["batchnorm"] = {{"folded_backward", fold.folded_backward},
                    {"folded_forward", fold.folded_forward},
                    {"folded", fold.folded_backward + fold.folded_forward},
                    {"border_suspects", fold.border_suspects}};
  j["padding"] = {{"rewritten", padfix.rewritten}};
  json jm = json::array();
  for (const auto &m : fused.macros) jm.push_back({{"lead", m.lead}, {"tail", m.tail}});
  j["macro_ops"] = jm;
  j["activation_frac_bits"] = quant.act_frac;
  j["weight_frac_bits"] = quant.weight_frac;
  j["weight_saturations"] = quant.weight_saturations;
  return j;
}

int dispatch(int argc, char **argv) {
  CLI::App app{"YUV4:2:0 multi-task CNN pipeline"};
  app.require_subcommand(1);

  // --- build ---
  auto *build = app.add_subcommand("build", "build the default model");
  std::uint32_t b_width = 1280, b_height = 800;
  int b_seg = 4, b_det = 2;
  std::string b_anchors_file, b_format = "yuv420";
  std::uint32_t b_seed = 42;
  std::vector<std::string> b_out;
  build->add_option("--width", b_width);
  build->add_option("--height", b_height);
  build->add_option("--seg-classes", b_seg);
  build->add_option("--det-classes", b_det);
  build->add_option("--anchors-file", b_anchors_file, "JSON [[pw,ph],...] in grid cells");
  build->add_option("--format", b_format)->check(CLI::IsMember({"yuv420", "bgr"}));
  build->add_option("--seed", b_seed);
  build->add_option("--out", b_out, "topology.json weights.bin")->expected(2)->required();

  // --- optimize ---
  auto *opt = app.add_subcommand("optimize", "fold, fix padding, fuse, quantize");
  std::string o_model, o_weights, o_calib, o_report = "pass_report.json";
  int o_margin = 1;
  std::vector<std::string> o_out;
  opt->add_option("--model", o_model)->required();
  opt->add_option("--weights", o_weights)->required();
  opt->add_option("--calib-dir", o_calib)->required();
  opt->add_option("--margin-bits", o_margin)->check(CLI::NonNegativeNumber);
  opt->add_option("--report", o_report);
  opt->add_option("--out", o_out, "topology.json weights.bin")->expected(2)->required();

  // --- run ---
  auto *run = app.add_subcommand("run", "single-frame inference");
  std::string r_model, r_weights, r_input, r_mode = "float", r_out;
  std::uint32_t r_width = 0, r_height = 0;
  float r_conf = 0.5f, r_nms = 0.45f;
  run->add_option("--model", r_model)->required();
  run->add_option("--weights", r_weights)->required();
  run->add_option("--input", r_input, "raw I420 frame")->required();
  run->add_option("--width", r_width)->required();
  run->add_option("--height", r_height)->required();
  run->add_option("--mode", r_mode)->check(CLI::IsMember({"float", "fixed"}));
  run->add_option("--conf", r_conf);
  run->add_option("--nms", r_nms);
  run->add_option("--out", r_out)->required();

  // --- cost ---
  auto *cost = app.add_subcommand("cost", "analytical cycle and traffic report");
  std::string c_model, c_format, c_json_out;
  double c_clock = 500.0;
  cost->add_option("--model", c_model)->required();
  cost->add_option("--clock-mhz", c_clock);
  cost->add_option("--format", c_format)->check(CLI::IsMember({"yuv420", "bgr"}));
  cost->add_option("--json-out", c_json_out);

  // --- compare ---
  auto *cmp = app.add_subcommand("compare", "run float + fixed, report per-head SNR");
  std::string m_model, m_weights, m_input, m_out;
  std::uint32_t m_width = 0, m_height = 0;
  float m_conf = 0.5f, m_nms = 0.45f;
  cmp->add_option("--model", m_model)->required();
  cmp->add_option("--weights", m_weights)->required();
  cmp->add_option("--input", m_input)->required();
  cmp->add_option("--width", m_width)->required();
  cmp->add_option("--height", m_height)->required();
  cmp->add_option("--conf", m_conf);
  cmp->add_option("--nms", m_nms);
  cmp->add_option("--out", m_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kExitArgs;
  }

  if (build->parsed()) {
    std::vector<std::pair<float, float>> anchors = {
        {1.0f, 1.2f}, {2.0f, 2.5f}, {4.0f, 4.0f}, {6.5f, 4.5f}, {9.0f, 8.0f}};
    if (!b_anchors_file.empty()) anchors = load_anchors(b_anchors_file);
    NetworkGraph g;
    try {
      g = build_default_model(b_width, b_height, b_seg, b_det, anchors,
                              b_format == "bgr" ? InputFormat::BGR : InputFormat::YUV420,
                              b_seed);
    } catch (const InvalidResolution &e) {
      throw CliError{kExitArgs, e.what()};
    }
    auto diags = validate(g);
    print_diags(diags);
    if (has_errors(diags)) return kExitGraph;
    save_model(g, b_out[0], b_out[1]);
    std::cout << "wrote " << b_out[0] << " and " << b_out[1] << "\n";
    return 0;
  }

  if (opt->parsed()) {
    NetworkGraph g = load_checked(o_model, o_weights);
    auto diags = validate(g);
    print_diags(diags);
    if (has_errors(diags)) return kExitGraph;
    std::vector<Frame> frames =
        load_calib_dir(o_calib, g.input_spec.width, g.input_spec.height);

    FoldResult folded = fold_batchnorm(g);
    PadFixResult fixed = fix_padding(folded.graph);
    FusionResult fused = fuse_sequences(fixed.graph);
    for (const auto &d : fused.diagnostics)
      if (d.level == Diagnostic::Level::Error)
        throw NonConvLedLayer(d.node, d.message);
    CalibrationStats stats = calibrate(fixed.graph, frames);
    QuantizeResultGraph quant = quantize_graph(fixed.graph, stats, o_margin);

    save_model(quant.graph, o_out[0], o_out[1]);
    std::ofstream rep(o_report);
    rep << pass_report_json(folded.report, fixed.report, fused, quant.report).dump(2)
        << "\n";
    std::cout << "optimized model written to " << o_out[0] << " (folded "
              << folded.report.folded_backward + folded.report.folded_forward
              << " batchnorm layers, " << fused.macros.size() << " macro-ops)\n";
    return 0;
  }

  if (run->parsed() || cmp->parsed()) {
    const bool is_cmp = cmp->parsed();
    const std::string model = is_cmp ? m_model : r_model;
    const std::string weights = is_cmp ? m_weights : r_weights;
    const std::string input = is_cmp ? m_input : r_input;
    const std::uint32_t width = is_cmp ? m_width : r_width;
    const std::uint32_t height = is_cmp ? m_height : r_height;
    const float conf = is_cmp ? m_conf : r_conf;
    const float nms_iou = is_cmp ? m_nms : r_nms;
    const std::string out_dir = is_cmp ? m_out : r_out;

    NetworkGraph g = load_checked(model, weights);
    if (width != g.input_spec.width || height != g.input_spec.height)
      throw CliError{kExitArgs, "frame resolution does not match the model input spec"};
    Frame frame;
    try {
      frame = load_i420(input, width, height);
    } catch (const std::exception &e) {
      throw CliError{kExitArgs, e.what()};
    }

    StagedDir staged(out_dir);
    if (is_cmp) {
      RunOutputs f = run_graph(g, frame, "float", conf, nms_iou);
      QExecPlan plan = build_plan(g);
      auto qacts = run_fixed(plan, frame);
      json snr = json::object();
      for (const auto &o : g.outputs)
        snr[o] = snr_to_json(snr_report(f.head_float.at(o), qacts.at(o)));
      std::ofstream sf(staged.path() / "snr_report.json");
      sf << snr.dump(2) << "\n";
      write_detections(f.detections, staged.path() / "detections.jsonl");
      if (f.seg.width) write_seg_outputs(f.seg, staged.path());
      std::cout << snr.dump(2) << "\n";
    } else {
      RunOutputs o = run_graph(g, frame, r_mode, conf, nms_iou);
      write_detections(o.detections, staged.path() / "detections.jsonl");
      if (o.seg.width) write_seg_outputs(o.seg, staged.path());
    }
    write_manifest(staged.path());
    staged.commit();
    std::cout << "artifacts written to " << out_dir << "\n";
    return 0;
  }

  if (cost->parsed()) {
    std::ifstream tf(c_model);
    if (!tf) throw CliError{kExitArgs, "cannot read " + c_model};
    json jt;
    try {
      tf >> jt;
    } catch (const json::exception &e) {
      throw CliError{kExitArgs, e.what()};
    }
    NetworkGraph g;
    try {
      g = topology_from_json(jt);
    } catch (const ParseError &e) {
      throw CliError{kExitArgs, e.what()};
    }
    HwConfig hw;
    hw.clock_hz = c_clock * 1e6;
    CostReport report;
    try {
      report = graph_cost(g, hw);
    } catch (const GraphError &e) {
      throw CliError{kExitGraph, e.what()};
    }

    const auto W = g.input_spec.width, H = g.input_spec.height;
    const std::uint64_t bgr = input_traffic(InputFormat::BGR, W, H);
    const std::uint64_t yuv = input_traffic(InputFormat::YUV420, W, H);
    std::printf("peak: %dx%dx%d MACs/cycle @ %.0f MHz = %.1f GMAC/s\n", hw.in_lanes,
                hw.out_lanes, hw.mult_grid, hw.clock_hz / 1e6, hw.peak_macs_per_s() / 1e9);
    std::printf("input traffic @%ux%u: bgr %llu bytes, yuv420 %llu bytes, ratio %.1f\n", W,
                H, (unsigned long long)bgr, (unsigned long long)yuv,
                double(bgr) / double(yuv));
    std::printf("%-14s %12s %12s %6s %10s %10s %10s\n", "layer", "macs", "cycles", "util",
                "in_B", "out_B", "wgt_B");
    for (const auto &op : report.ops)
      std::printf("%-14s %12llu %12llu %6.2f %10llu %10llu %10llu\n", op.name.c_str(),
                  (unsigned long long)op.macs, (unsigned long long)op.cycles,
                  op.utilization, (unsigned long long)op.in_bytes,
                  (unsigned long long)op.out_bytes, (unsigned long long)op.weight_bytes);
    std::printf("total: %llu MACs, %llu cycles, %llu traffic bytes, %.1f fps\n",
                (unsigned long long)report.total_macs,
                (unsigned long long)report.total_cycles,
                (unsigned long long)report.total_traffic_bytes, report.fps);

    if (!c_json_out.empty()) {
      json j = cost_to_json(report, hw);
      j["input_traffic"] = {{"bgr", bgr}, {"yuv420", yuv}, {"ratio", double(bgr) / yuv}};
      std::ofstream jf(c_json_out);
      jf << j.dump(2) << "\n";
    }
    return 0;
  }
  return kExitArgs;
}

}  // namespace

int main(int argc, char **argv) {
  try {
    return dispatch(argc, argv);
  } catch (const CliError &e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const QFormatMismatch &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitQFormat;
  } catch (const GraphError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitGraph;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitArgs;
  }
}
