#include "psdepth/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "psdepth/error.hpp"

namespace psd {

namespace {

constexpr char kMagic[4] = {'U', 'D', 'C', 'K'};
constexpr std::size_t kMaxNameLen = 1u << 20;
constexpr std::size_t kMaxElems = std::size_t{1} << 33;

// The artifact targets little-endian hosts; serialize through memcpy.
template <typename T>
void write_pod(std::ofstream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& what) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw DataError("checkpoint: truncated while reading " + what);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_pod<std::uint64_t>(os, d);
    const auto vals = tensor.values();
    os.write(reinterpret_cast<const char*>(vals.data()),
             static_cast<std::streamsize>(vals.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "'");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  const auto count = read_pod<std::uint32_t>(is, "tensor count");

  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_pod<std::uint32_t>(is, "name length");
    if (name_len > kMaxNameLen) throw DataError("checkpoint: unreasonable name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw DataError("checkpoint: truncated tensor name");
    const auto rank = read_pod<std::uint32_t>(is, "rank");
    if (rank > 8) throw DataError("checkpoint: unreasonable rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = read_pod<std::uint64_t>(is, "extent");
      shape[d] = static_cast<std::size_t>(extent);
      if (extent == 0 || numel > kMaxElems / std::max<std::size_t>(1, shape[d]))
        throw DataError("checkpoint: extent overflow in tensor '" + name + "'");
      numel *= shape[d];
    }
    std::vector<double> values(numel);
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated payload in tensor '" + name + "'");
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

}  // namespace psd
