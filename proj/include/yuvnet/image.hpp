#pragma once

// Raw I420 frame handling plus PGM/PPM output for segmentation maps.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace yuvnet {

// Planar YUV4:2:0: full-resolution luma, U and V at half resolution per
// axis. 1.5 bytes per pixel.
struct Frame {
  std::uint32_t width = 0, height = 0;
  std::vector<std::uint8_t> y;  // width*height
  std::vector<std::uint8_t> u;  // (width/2)*(height/2)
  std::vector<std::uint8_t> v;

  static std::size_t i420_size(std::uint32_t w, std::uint32_t h) {
    return std::size_t(w) * h * 3 / 2;
  }
};

inline Frame load_i420(const std::string &path, std::uint32_t width, std::uint32_t height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() != Frame::i420_size(width, height))
    throw std::runtime_error(path + ": expected " +
                             std::to_string(Frame::i420_size(width, height)) +
                             " bytes for " + std::to_string(width) + "x" +
                             std::to_string(height) + " I420, got " +
                             std::to_string(bytes.size()));
  Frame fr;
  fr.width = width;
  fr.height = height;
  const std::size_t ysz = std::size_t(width) * height, csz = ysz / 4;
  fr.y.assign(bytes.begin(), bytes.begin() + ysz);
  fr.u.assign(bytes.begin() + ysz, bytes.begin() + ysz + csz);
  fr.v.assign(bytes.begin() + ysz + csz, bytes.end());
  return fr;
}

inline void save_i420(const Frame &fr, const std::string &path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  auto w = [&](const std::vector<std::uint8_t> &p) {
    f.write(reinterpret_cast<const char *>(p.data()), std::streamsize(p.size()));
  };
  w(fr.y);
  w(fr.u);
  w(fr.v);
}

inline void save_pgm(const std::vector<std::uint8_t> &pixels, std::uint32_t width,
                     std::uint32_t height, const std::string &path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char *>(pixels.data()), std::streamsize(pixels.size()));
}

// RGB triples, row-major.
inline void save_ppm(const std::vector<std::uint8_t> &pixels, std::uint32_t width,
                     std::uint32_t height, const std::string &path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P6\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char *>(pixels.data()), std::streamsize(pixels.size()));
}

inline std::vector<std::uint8_t> load_pgm(const std::string &path, std::uint32_t &width,
                                          std::uint32_t &height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string magic;
  unsigned maxval;
  f >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval > 255) throw std::runtime_error(path + ": not an 8-bit PGM");
  f.get();
  std::vector<std::uint8_t> pixels(std::size_t(width) * height);
  f.read(reinterpret_cast<char *>(pixels.data()), std::streamsize(pixels.size()));
  if (!f) throw std::runtime_error(path + ": truncated PGM");
  return pixels;
}

}  // namespace yuvnet
