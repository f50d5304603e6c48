/* Copyright 2026 The bevcar Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef BEVCAR_PNG_IO_HPP_
#define BEVCAR_PNG_IO_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace bevcar::png {

// Interleaved 8-bit pixels, row-major.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

// Writes 8-bit gray or RGB. Throws DataError naming the file on failure.
void write(const std::string& path, const Image& image);

// Writes a one-bit grayscale mask; nonzero pixels become white.
void write_mask(const std::string& path, int64_t height, int64_t width,
                const std::vector<uint8_t>& mask);

// Reads any PNG, expanded to 8 bits per channel. Gray stays single
// channel, palette and RGB become three channels, alpha is stripped.
Image read(const std::string& path);

}  // namespace bevcar::png

#endif  // BEVCAR_PNG_IO_HPP_
