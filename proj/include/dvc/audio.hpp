#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvc/tensor.hpp"

namespace dvc {

// 16-bit PCM mono WAV. Samples are exchanged as floats in [-1, 1].

inline void write_wav(const std::filesystem::path& path,
                      const std::vector<float>& samples, int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "wav: cannot open for writing: " + path.string());
  auto u32 = [&](std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
  };
  auto u16 = [&](std::uint16_t v) {
    os.write(reinterpret_cast<const char*>(&v), 2);
  };
  std::uint32_t data_bytes = std::uint32_t(samples.size()) * 2;
  os.write("RIFF", 4);
  u32(36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(std::uint32_t(sample_rate));
  u32(std::uint32_t(sample_rate) * 2);
  u16(2);
  u16(16);
  os.write("data", 4);
  u32(data_bytes);
  for (float s : samples) {
    float c = std::clamp(s, -1.0f, 1.0f);
    auto v = std::int16_t(std::lrint(c * 32767.0f));
    os.write(reinterpret_cast<const char*>(&v), 2);
  }
  check(bool(os), "wav: write failed: " + path.string());
}

inline std::vector<float> read_wav(const std::filesystem::path& path,
                                   int expected_rate) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "wav: cannot open: " + path.string());
  char tag[4];
  auto read_u32 = [&] {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    check(bool(is), "wav: truncated: " + path.string());
    return v;
  };
  auto read_u16 = [&] {
    std::uint16_t v;
    is.read(reinterpret_cast<char*>(&v), 2);
    check(bool(is), "wav: truncated: " + path.string());
    return v;
  };
  is.read(tag, 4);
  check(bool(is) && std::memcmp(tag, "RIFF", 4) == 0,
        "wav: not a RIFF file: " + path.string());
  read_u32();
  is.read(tag, 4);
  check(bool(is) && std::memcmp(tag, "WAVE", 4) == 0,
        "wav: not a WAVE file: " + path.string());

  bool have_fmt = false;
  std::vector<float> samples;
  while (is.read(tag, 4)) {
    std::uint32_t size = read_u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      std::uint16_t format = read_u16();
      std::uint16_t channels = read_u16();
      std::uint32_t rate = read_u32();
      read_u32();
      read_u16();
      std::uint16_t bits = read_u16();
      check(format == 1 && bits == 16, "wav: only 16-bit PCM supported");
      check(channels == 1, "wav: only mono supported");
      check(int(rate) == expected_rate,
            "wav: unexpected sample rate in " + path.string());
      if (size > 16) is.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      check(have_fmt, "wav: data chunk before fmt chunk");
      std::size_t n = size / 2;
      samples.resize(n);
      std::vector<std::int16_t> raw(n);
      is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(size));
      check(bool(is), "wav: truncated data: " + path.string());
      for (std::size_t i = 0; i < n; ++i)
        samples[i] = float(raw[i]) / 32767.0f;
      return samples;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("wav: no data chunk in " + path.string());
}

}  // namespace dvc
