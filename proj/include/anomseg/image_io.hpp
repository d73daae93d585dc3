#pragma once

#include <filesystem>
#include <string>

#include "anomseg/tensor.hpp"

namespace anomseg::io {

// Binary PPM (P6) for RGB planes and PGM (P5) for single-channel planes,
// maxval 255. Real-valued planes are stored as round(v*255); the generator
// quantizes to that grid so the round trip is lossless.

void write_ppm(const std::filesystem::path& path, const Tensor& rgb);   // [3,H,W] in [0,1]
Tensor read_ppm(const std::filesystem::path& path);

void write_pgm(const std::filesystem::path& path, const Tensor& gray);  // [H,W] in [0,1]
Tensor read_pgm(const std::filesystem::path& path);

void write_pgm_bytes(const std::filesystem::path& path, const ByteMap& map);
ByteMap read_pgm_bytes(const std::filesystem::path& path);

}  // namespace anomseg::io
