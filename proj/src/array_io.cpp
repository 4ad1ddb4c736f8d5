#include "uqseg/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace uqseg {

namespace {

constexpr char kMagic[8] = {'U', 'Q', 'A', 'R', 'R', 'A', 'Y', '1'};
constexpr std::uint8_t kFloat64 = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("array container: truncated file");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes[i]) << (8 * i));
  return v;
}

}  // namespace

void write_arrays(const std::filesystem::path& path, std::span<const ArrayRecord> records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("array container: cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const ArrayRecord& r : records) {
    std::uint64_t count = 1;
    for (auto d : r.dims) count *= d;
    if (count != r.values.size()) throw std::invalid_argument("array container: dims do not match value count");
    if (r.name.size() > 0xffff || r.dims.size() > 0xff) throw std::invalid_argument("array container: record too large");
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put_le<std::uint8_t>(os, kFloat64);
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.dims.size()));
    for (auto d : r.dims) put_le<std::uint64_t>(os, d);
    for (double v : r.values) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw std::runtime_error("array container: write failed for '" + path.string() + "'");
}

std::vector<ArrayRecord> read_arrays(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("array container: cannot open '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("array container: bad magic in '" + path.string() + "'");
  }
  const auto count = get_le<std::uint32_t>(is);
  std::vector<ArrayRecord> out(count);
  for (ArrayRecord& r : out) {
    const auto name_len = get_le<std::uint16_t>(is);
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len)) throw std::runtime_error("array container: truncated name");
    const auto dtype = get_le<std::uint8_t>(is);
    if (dtype != kFloat64) throw std::runtime_error("array container: unsupported dtype " + std::to_string(dtype));
    const auto ndim = get_le<std::uint8_t>(is);
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      r.dims.push_back(get_le<std::uint64_t>(is));
      n *= r.dims.back();
    }
    r.values.resize(n);
    for (double& v : r.values) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  }
  return out;
}

ArrayRecord to_record(const std::string& name, const Tensor& t) {
  const Shape4& s = t.shape();
  return {name, {s.n, s.c, s.h, s.w}, std::vector<double>(t.values().begin(), t.values().end())};
}

Tensor to_tensor(const ArrayRecord& r) {
  if (r.dims.empty() || r.dims.size() > 4) throw std::invalid_argument("array container: expected 1-4 dims");
  std::uint64_t d[4] = {1, 1, 1, 1};
  const std::size_t off = 4 - r.dims.size();
  for (std::size_t i = 0; i < r.dims.size(); ++i) d[off + i] = r.dims[i];
  return Tensor({d[0], d[1], d[2], d[3]}, r.values);
}

}  // namespace uqseg
