#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "test_util.hpp"
#include "yuvnet/image.hpp"
#include "yuvnet/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace yuvnet;

namespace {

int run_cli(const std::string &args) {
  const std::string cmd = std::string(YUVNET_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  if (status < 0) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// One workspace per test binary run, populated lazily: a built model, an
// optimized model, calibration frames and a test frame.
struct Workspace {
  fs::path dir;
  std::string topo, weights, qtopo, qweights, frame_path, calib_dir;

  Workspace() {
    dir = fs::temp_directory_path() / ("yuvnet_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    topo = (dir / "model.json").string();
    weights = (dir / "model.bin").string();
    qtopo = (dir / "model_q.json").string();
    qweights = (dir / "model_q.bin").string();
    calib_dir = (dir / "calib").string();
    frame_path = (dir / "frame.i420").string();

    REQUIRE(run_cli("build --width 64 --height 64 --seg-classes 3 --det-classes 2 --out " +
                    topo + " " + weights) == 0);

    fs::create_directories(calib_dir);
    std::mt19937 rng(301);
    for (int i = 0; i < 3; ++i) {
      auto f = testutil::random_frame(64, 64, rng);
      save_i420(f, calib_dir + "/frame" + std::to_string(i) + ".i420");
    }
    save_i420(testutil::random_frame(64, 64, rng), frame_path);

    REQUIRE(run_cli("optimize --model " + topo + " --weights " + weights + " --calib-dir " +
                    calib_dir + " --report " + (dir / "passes.json").string() + " --out " +
                    qtopo + " " + qweights) == 0);
  }
  ~Workspace() { fs::remove_all(dir); }
};

Workspace &ws() {
  static Workspace w;
  return w;
}

std::string slurp(const fs::path &p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("build writes a loadable model") {
  auto g = load_model(ws().topo, ws().weights);
  CHECK(g.input_spec.width == 64);
  CHECK(g.outputs == std::vector<std::string>{"yolo", "seg"});
}

TEST_CASE("build rejects a resolution that is not a multiple of 32") {
  CHECK(run_cli("build --width 100 --height 64 --out " + (ws().dir / "x.json").string() +
                " " + (ws().dir / "x.bin").string()) == 2);
}

TEST_CASE("build rejects malformed arguments") {
  CHECK(run_cli("build") == 2);                       // missing --out
  CHECK(run_cli("frobnicate") == 2);                  // unknown subcommand
  CHECK(run_cli("build --format rgba --out a b") == 2);
}

TEST_CASE("optimize emits an annotated model and a pass report") {
  auto g = load_model(ws().qtopo, ws().qweights);
  int convs = 0;
  for (const auto &n : g.nodes) {
    CHECK(n.kind != OpKind::BatchNorm);
    if (is_convlike(n.kind)) {
      ++convs;
      CHECK(n.attrs.out_frac >= 0);
      CHECK(n.attrs.requant_shift >= 0);
      CHECK(std::holds_alternative<QTensor>(g.blobs.at(n.name + ".weight")));
    }
  }
  CHECK(convs > 0);

  json rep = json::parse(slurp(ws().dir / "passes.json"));
  CHECK(rep["batchnorm"]["folded"].get<int>() == 12);  // every conv/tconv block
  CHECK(rep["macro_ops"].size() >= 12);
  CHECK(rep.contains("activation_frac_bits"));
}

TEST_CASE("optimize fails cleanly on an empty calibration directory") {
  fs::path empty = ws().dir / "empty_calib";
  fs::create_directories(empty);
  CHECK(run_cli("optimize --model " + ws().topo + " --weights " + ws().weights +
                " --calib-dir " + empty.string() + " --out " +
                (ws().dir / "q2.json").string() + " " + (ws().dir / "q2.bin").string()) == 2);
}

TEST_CASE("run produces the artifact set in float and fixed mode") {
  for (const std::string mode : {"float", "fixed"}) {
    const fs::path out = ws().dir / ("run_" + mode);
    REQUIRE(run_cli("run --model " + ws().qtopo + " --weights " + ws().qweights +
                    " --input " + ws().frame_path + " --width 64 --height 64 --mode " + mode +
                    " --out " + out.string()) == 0);
    CHECK(fs::exists(out / "detections.jsonl"));
    CHECK(fs::exists(out / "segmentation.pgm"));
    CHECK(fs::exists(out / "segmentation.ppm"));
    CHECK(fs::exists(out / "manifest.json"));
    CHECK(!fs::exists(out.string() + ".tmp"));

    json manifest = json::parse(slurp(out / "manifest.json"));
    CHECK(manifest["files"].size() == 3);
    for (const auto &f : manifest["files"]) {
      CHECK(f.contains("crc32"));
      CHECK(f["bytes"].get<std::uint64_t>() > 0);
    }
    std::uint32_t w = 0, h = 0;
    auto ids = load_pgm((out / "segmentation.pgm").string(), w, h);
    CHECK(w == 64);
    CHECK(h == 64);
    for (auto id : ids) CHECK(id < 3);
  }
}

TEST_CASE("repeated runs are byte-identical") {
  const fs::path a = ws().dir / "det_a", b = ws().dir / "det_b";
  const std::string args = "run --model " + ws().qtopo + " --weights " + ws().qweights +
                           " --input " + ws().frame_path +
                           " --width 64 --height 64 --mode fixed --out ";
  REQUIRE(run_cli(args + a.string()) == 0);
  REQUIRE(run_cli(args + b.string()) == 0);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "segmentation.pgm") == slurp(b / "segmentation.pgm"));
}

TEST_CASE("run maps failures to the documented exit codes") {
  // Fixed mode needs the quantization annotations.
  CHECK(run_cli("run --model " + ws().topo + " --weights " + ws().weights + " --input " +
                ws().frame_path + " --width 64 --height 64 --mode fixed --out " +
                (ws().dir / "bad1").string()) == 3);
  // Missing input frame.
  CHECK(run_cli("run --model " + ws().qtopo + " --weights " + ws().qweights +
                " --input /nonexistent.i420 --width 64 --height 64 --out " +
                (ws().dir / "bad2").string()) == 2);
  // Resolution mismatch.
  CHECK(run_cli("run --model " + ws().qtopo + " --weights " + ws().qweights + " --input " +
                ws().frame_path + " --width 128 --height 128 --out " +
                (ws().dir / "bad3").string()) == 2);
  // Truncated weights file.
  const fs::path bad_w = ws().dir / "bad.bin";
  {
    std::string bytes = slurp(ws().qweights);
    bytes.resize(bytes.size() / 2);
    std::ofstream(bad_w, std::ios::binary) << bytes;
  }
  CHECK(run_cli("run --model " + ws().qtopo + " --weights " + bad_w.string() + " --input " +
                ws().frame_path + " --width 64 --height 64 --out " +
                (ws().dir / "bad4").string()) == 2);
}

TEST_CASE("failed runs leave no partial artifact directory") {
  const fs::path out = ws().dir / "never";
  CHECK(run_cli("run --model " + ws().qtopo + " --weights " + ws().qweights + " --input " +
                ws().frame_path + " --width 32 --height 32 --out " + out.string()) == 2);
  CHECK(!fs::exists(out));
  CHECK(!fs::exists(out.string() + ".tmp"));
}

TEST_CASE("cost reports totals and the 2:1 input bandwidth ratio") {
  const fs::path jout = ws().dir / "cost.json";
  REQUIRE(run_cli("cost --model " + ws().topo + " --json-out " + jout.string()) == 0);
  json j = json::parse(slurp(jout));
  CHECK(j["peak_gmacs"].get<double>() == 400.0);
  CHECK(j["total_cycles"].get<std::uint64_t>() > 0);
  CHECK(j["fps"].get<double>() > 0.0);
  CHECK(j["input_traffic"]["ratio"].get<double>() == 2.0);
  CHECK(j["input_traffic"]["bgr"].get<std::uint64_t>() == 3ull * 64 * 64);
  CHECK(j["layers"].size() >= 12);
}

TEST_CASE("compare writes a per-head snr report") {
  const fs::path out = ws().dir / "cmp";
  REQUIRE(run_cli("compare --model " + ws().qtopo + " --weights " + ws().qweights +
                  " --input " + ws().frame_path + " --width 64 --height 64 --out " +
                  out.string()) == 0);
  json snr = json::parse(slurp(out / "snr_report.json"));
  REQUIRE(snr.contains("yolo"));
  REQUIRE(snr.contains("seg"));
  for (const char *head : {"yolo", "seg"}) {
    if (snr[head]["snr_db"].is_number())
      CHECK(snr[head]["snr_db"].get<double>() > 20.0);
    CHECK(snr[head].contains("max_abs_err"));
  }
}
