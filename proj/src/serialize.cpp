#include "ckd/serialize.hpp"

#include <fmt/format.h>

#include <cstdint>
#include <cstring>
#include <fstream>

namespace ckd {

namespace {
constexpr char kMagic[4] = {'C', 'K', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensorView>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  f.write(kMagic, 4);
  write_pod(f, kVersion);
  write_pod(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    write_pod(f, static_cast<std::uint32_t>(nt.name.size()));
    f.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& shape = nt.tensor->shape();
    write_pod(f, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) write_pod(f, static_cast<std::int32_t>(d));
    f.write(reinterpret_cast<const char*>(nt.tensor->data()),
            static_cast<std::streamsize>(nt.tensor->size() * sizeof(float)));
  }
  if (!f) throw IoError(fmt::format("short write to {}", path.string()));
}

std::map<std::string, Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot open {}", path.string()));
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(fmt::format("{} is not a tensor container", path.string()));
  }
  const auto version = read_pod<std::uint32_t>(f);
  if (version != kVersion) throw IoError(fmt::format("unsupported container version {}", version));
  const auto count = read_pod<std::uint32_t>(f);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto rank = read_pod<std::uint32_t>(f);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = read_pod<std::int32_t>(f);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) throw IoError(fmt::format("truncated tensor container {}", path.string()));
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace ckd
