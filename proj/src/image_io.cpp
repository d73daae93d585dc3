#include "anomseg/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "anomseg/common.hpp"

namespace anomseg::io {

namespace {

uint8_t quantize(double v) {
  double q = std::lround(std::min(std::max(v, 0.0), 1.0) * 255.0);
  return static_cast<uint8_t>(q);
}

struct PnmHeader {
  std::string magic;
  int w = 0, h = 0, maxval = 0;
};

PnmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  PnmHeader hd;
  auto next_token = [&in]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    return std::string();
  };
  hd.magic = next_token();
  try {
    hd.w = std::stoi(next_token());
    hd.h = std::stoi(next_token());
    hd.maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PNM header: " + path.string());
  }
  in.get();  // single whitespace before raster
  if (hd.w <= 0 || hd.h <= 0 || hd.maxval != 255)
    throw IoError("unsupported PNM file: " + path.string());
  return hd;
}

std::vector<uint8_t> read_raster(std::istream& in, size_t n, const std::filesystem::path& path) {
  std::vector<uint8_t> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw IoError("truncated PNM raster: " + path.string());
  return buf;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.ndim() != 3 || rgb.dim(0) != 3) throw IoError("write_ppm expects [3,H,W]");
  long h = rgb.dim(1), w = rgb.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x)
      for (long c = 0; c < 3; ++c)
        row[static_cast<size_t>(x * 3 + c)] = quantize(rgb.at3(c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  PnmHeader hd = read_header(in, path);
  if (hd.magic != "P6") throw IoError("not a P6 PPM: " + path.string());
  auto buf = read_raster(in, static_cast<size_t>(hd.w) * hd.h * 3, path);
  Tensor t({3, hd.h, hd.w});
  for (long y = 0; y < hd.h; ++y)
    for (long x = 0; x < hd.w; ++x)
      for (long c = 0; c < 3; ++c)
        t.at3(c, y, x) = buf[static_cast<size_t>((y * hd.w + x) * 3 + c)] / 255.0;
  return t;
}

void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
  if (gray.ndim() != 2) throw IoError("write_pgm expects [H,W]");
  long h = gray.dim(0), w = gray.dim(1);
  ByteMap m(static_cast<int>(h), static_cast<int>(w));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      m.at(static_cast<int>(y), static_cast<int>(x)) = quantize(gray.at2(y, x));
  write_pgm_bytes(path, m);
}

Tensor read_pgm(const std::filesystem::path& path) {
  ByteMap m = read_pgm_bytes(path);
  Tensor t({m.h, m.w});
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) t.at2(y, x) = m.at(y, x) / 255.0;
  return t;
}

void write_pgm_bytes(const std::filesystem::path& path, const ByteMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path.string());
  out << "P5\n" << map.w << " " << map.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(map.v.data()),
            static_cast<std::streamsize>(map.v.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

ByteMap read_pgm_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  PnmHeader hd = read_header(in, path);
  if (hd.magic != "P5") throw IoError("not a P5 PGM: " + path.string());
  auto buf = read_raster(in, static_cast<size_t>(hd.w) * hd.h, path);
  ByteMap m(hd.h, hd.w);
  m.v = std::move(buf);
  return m;
}

}  // namespace anomseg::io
