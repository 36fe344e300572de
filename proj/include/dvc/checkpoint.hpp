#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvc/optim.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

// Binary weight container. Layout:
//   magic "DVC1"
//   u64 record count
//   per record: u32 name length, name bytes (UTF-8, no terminator),
//               u64 rank, rank * u64 dims, dims-product * f32 payload
struct CheckpointRecord {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  check(bool(is), "checkpoint: truncated file");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<CheckpointRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "checkpoint: cannot open for writing: " + path.string());
  os.write("DVC1", 4);
  detail::write_pod<std::uint64_t>(os, records.size());
  for (const CheckpointRecord& r : records) {
    detail::write_pod<std::uint32_t>(os, std::uint32_t(r.name.size()));
    os.write(r.name.data(), std::streamsize(r.name.size()));
    detail::write_pod<std::uint64_t>(os, r.shape.size());
    std::uint64_t n = 1;
    for (int d : r.shape) {
      detail::write_pod<std::uint64_t>(os, std::uint64_t(d));
      n *= std::uint64_t(d);
    }
    check(n == r.data.size(), "checkpoint: record shape/data mismatch");
    os.write(reinterpret_cast<const char*>(r.data.data()),
             std::streamsize(n * sizeof(float)));
  }
  check(bool(os), "checkpoint: write failed: " + path.string());
}

inline std::vector<CheckpointRecord> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "checkpoint: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  check(bool(is) && std::memcmp(magic, "DVC1", 4) == 0,
        "checkpoint: bad magic in " + path.string());
  auto count = detail::read_pod<std::uint64_t>(is);
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    auto name_len = detail::read_pod<std::uint32_t>(is);
    r.name.resize(name_len);
    is.read(r.name.data(), name_len);
    auto rank = detail::read_pod<std::uint64_t>(is);
    check(rank <= 8, "checkpoint: implausible tensor rank");
    std::uint64_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      auto dim = detail::read_pod<std::uint64_t>(is);
      r.shape.push_back(int(dim));
      n *= dim;
    }
    r.data.resize(n);
    is.read(reinterpret_cast<char*>(r.data.data()),
            std::streamsize(n * sizeof(float)));
    check(bool(is), "checkpoint: truncated record in " + path.string());
    records.push_back(std::move(r));
  }
  return records;
}

inline void save_params(const std::filesystem::path& path,
                        const ParamStore& store) {
  std::vector<CheckpointRecord> records;
  records.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor& p = store.at(i);
    records.push_back({store.names()[i], p.shape(), p.data()});
  }
  save_checkpoint(path, records);
}

// Restores values into already-registered parameters. Every stored record
// must match a parameter by name and shape; extra parameters are an error so
// config/checkpoint drift is caught instead of silently half-loading.
inline void load_params(const std::filesystem::path& path, ParamStore& store) {
  auto records = load_checkpoint(path);
  check(records.size() == store.size(),
        "checkpoint: parameter count mismatch in " + path.string());
  for (const CheckpointRecord& r : records) {
    Tensor p = store.get(r.name);
    check(p.shape() == r.shape,
          "checkpoint: shape mismatch for parameter " + r.name);
    p.data() = r.data;
  }
}

inline void save_optimizer(const std::filesystem::path& path, AdamW& opt,
                           const ParamStore& store,
                           std::int64_t completed_steps) {
  std::vector<CheckpointRecord> records;
  records.push_back({"adamw.steps",
                     {2},
                     {float(opt.moment_steps()), float(completed_steps)}});
  for (std::size_t i = 0; i < store.size(); ++i) {
    records.push_back(
        {store.names()[i] + ".m", store.at(i).shape(), opt.first_moments()[i]});
    records.push_back({store.names()[i] + ".v", store.at(i).shape(),
                       opt.second_moments()[i]});
  }
  save_checkpoint(path, records);
}

// Returns the completed-step counter stored alongside the moments.
inline std::int64_t load_optimizer(const std::filesystem::path& path,
                                   AdamW& opt, const ParamStore& store) {
  auto records = load_checkpoint(path);
  check(records.size() == 1 + 2 * store.size(),
        "optimizer checkpoint: record count mismatch");
  check(records[0].name == "adamw.steps" && records[0].data.size() == 2,
        "optimizer checkpoint: missing step counter");
  opt.set_moment_steps(std::int64_t(records[0].data[0]));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const CheckpointRecord& m = records[1 + 2 * i];
    const CheckpointRecord& v = records[2 + 2 * i];
    check(m.name == store.names()[i] + ".m" &&
              v.name == store.names()[i] + ".v",
          "optimizer checkpoint: name mismatch at " + store.names()[i]);
    opt.first_moments()[i] = m.data;
    opt.second_moments()[i] = v.data;
  }
  return std::int64_t(records[0].data[1]);
}

}  // namespace dvc
