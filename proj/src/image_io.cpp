// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/image_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace minidino {

namespace {

unsigned char to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return (unsigned char)(c * 255.0f + 0.5f);
}

}  // namespace

void write_ppm(const std::string& path, const std::vector<float>& rgb, int h,
               int w) {
  if ((int)rgb.size() != h * w * 3)
    throw std::invalid_argument("write_ppm: buffer size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w * 3; ++x) row[x] = to_byte(rgb[y * w * 3 + x]);
    os.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

void write_pgm(const std::string& path, const std::vector<float>& gray, int h,
               int w, float lo, float hi) {
  if ((int)gray.size() != h * w)
    throw std::invalid_argument("write_pgm: buffer size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  const float span = hi - lo;
  std::vector<unsigned char> row(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      row[x] = to_byte(span > 0 ? (gray[y * w + x] - lo) / span : 0.0f);
    os.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

}  // namespace minidino
