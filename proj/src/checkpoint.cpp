#include "neurontrace/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "neurontrace/error.hpp"

namespace neurontrace {

namespace {

constexpr std::string_view kMagic = "NTCKPT01";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::uint64_t u64() {
    if (at_ + 8 > bytes_.size()) throw IoError(source_ + ": truncated checkpoint");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[at_ + i])} << (8 * i);
    at_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view take(std::size_t n) {
    if (at_ + n > bytes_.size()) throw IoError(source_ + ": truncated checkpoint");
    auto s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t at_ = 0;
  const std::string& source_;
};

void put_tensor(std::string& out, const Tensor& t) {
  put_u64(out, t.shape.size());
  for (std::size_t d : t.shape) put_u64(out, d);
  for (double v : t.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor get_tensor(ByteReader& in, const Shape& expected, const std::string& source) {
  const std::uint64_t rank = in.u64();
  if (rank != expected.size()) throw IoError(source + ": tensor rank does not match the model");
  Shape shape(rank);
  for (auto& d : shape) d = in.u64();
  if (shape != expected)
    throw IoError(source + ": tensor shape " + shape_string(shape) + " does not match model (" + shape_string(expected) + ")");
  Tensor t(shape);
  for (double& v : t.data) v = in.f64();
  return t;
}

}  // namespace

std::string encode_checkpoint(const ModelArch& arch, const ModelWeights& weights) {
  weights.check_compatible(arch);
  std::string out(kMagic);
  put_u64(out, arch.fingerprint());
  put_u64(out, 2 * weights.params.size());
  for (const auto& p : weights.params) {
    put_tensor(out, p.weight);
    put_tensor(out, p.bias);
  }
  return out;
}

ModelWeights decode_checkpoint(const ModelArch& arch, std::string_view bytes, const std::string& source) {
  ByteReader in(bytes, source);
  if (in.take(kMagic.size()) != kMagic) throw IoError(source + ": not a checkpoint (bad magic)");
  if (in.u64() != arch.fingerprint()) throw IoError(source + ": checkpoint was written for a different model");
  const auto& infos = arch.param_layers();
  if (in.u64() != 2 * infos.size()) throw IoError(source + ": tensor count does not match the model");
  ModelWeights w;
  for (const auto& info : infos) {
    LayerParams p;
    p.weight = get_tensor(in, info.weight_shape, source);
    p.bias = get_tensor(in, info.bias_shape, source);
    w.params.push_back(std::move(p));
  }
  if (!in.done()) throw IoError(source + ": trailing bytes after checkpoint");
  return w;
}

void write_checkpoint(const std::filesystem::path& path, const ModelArch& arch, const ModelWeights& weights) {
  write_file_atomic(path, encode_checkpoint(arch, weights));
}

ModelWeights read_checkpoint(const std::filesystem::path& path, const ModelArch& arch) {
  return decode_checkpoint(arch, read_file(path), path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace neurontrace
