// SPDX-License-Identifier: Apache-2.0

#include "raed/checkpoint.hpp"

#include <bit>
#include <boost/crc.hpp>
#include <cstring>
#include <fstream>
#include <set>

#include "raed/error.hpp"

namespace raed {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written with native little-endian layout");

namespace {

constexpr char kMagic[4] = {'R', 'A', 'E', 'D'};
constexpr std::size_t kHeaderBytes = 12;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_doubles(std::span<double> out) {
    need(out.size() * sizeof(double));
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("tensor file truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::vector<std::uint8_t> encode_tensor_file(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name too long");
    if (t.rank() > 0xFF) throw FormatError("tensor rank too large");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  put<std::uint64_t>(
      out, crc64(std::span(out).subspan(kHeaderBytes)));
  return out;
}

NamedTensors decode_tensor_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + 8 || std::memcmp(bytes.data(), kMagic, 4))
    throw FormatError("not a tensor file (bad magic)");
  Reader r(bytes);
  r.get_string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kTensorFileVersion)
    throw FormatError("unsupported tensor file version " +
                      std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  const std::size_t body_end = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body_end, 8);
  if (stored != crc64(bytes.subspan(kHeaderBytes, body_end - kHeaderBytes)))
    throw FormatError("tensor file checksum mismatch");
  Reader body(bytes.first(body_end));
  body.get_string(kHeaderBytes);
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = body.get<std::uint16_t>();
    std::string name = body.get_string(name_len);
    if (!seen.insert(name).second)
      throw FormatError("duplicate tensor name '" + name + "'");
    const auto rank = body.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = body.get<std::uint64_t>();
    std::vector<double> values(shape_numel(shape));
    body.get_doubles(values);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (body.position() != body_end)
    throw FormatError("trailing bytes in tensor file");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_tensor_file(const std::filesystem::path& path,
                       const NamedTensors& tensors) {
  write_file_bytes(path, encode_tensor_file(tensors));
}

NamedTensors read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor_file(read_file_bytes(path));
}

void assign_parameters(ParameterTable& table, const NamedTensors& tensors) {
  if (tensors.size() != table.size()) {
    throw FormatError("checkpoint holds " + std::to_string(tensors.size()) +
                      " tensors, model expects " + std::to_string(table.size()));
  }
  for (const auto& [name, t] : tensors) {
    if (!table.contains(name))
      throw FormatError("checkpoint tensor '" + name + "' not in model");
    Tensor target = table.get(name);
    if (target.shape() != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(t.shape()) + ", model expects " +
                        shape_str(target.shape()));
    }
    auto dst = target.mutable_data();
    auto src = t.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

NamedTensors snapshot(const ParameterTable& table) {
  NamedTensors out;
  for (const auto& [name, t] : table.entries()) out.emplace_back(name, t.detach());
  return out;
}

}  // namespace raed
