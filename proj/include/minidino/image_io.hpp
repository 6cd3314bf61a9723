// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace minidino {

// Binary PPM (P6) from interleaved RGB in [0, 1].
void write_ppm(const std::string& path, const std::vector<float>& rgb, int h,
               int w);

// Binary PGM (P5); values mapped linearly from [lo, hi] to [0, 255].
void write_pgm(const std::string& path, const std::vector<float>& gray, int h,
               int w, float lo, float hi);

}  // namespace minidino
