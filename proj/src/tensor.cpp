#include "tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "common.hpp"

namespace pp {

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) fail(ErrorCode::InvalidArgument, "non-positive tensor extent");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (static_cast<int>(values.size()) != shape_numel(t.shape_))
    fail(ErrorCode::InvalidArgument, "value count does not match shape");
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, std::mt19937_64& rng,
                     double sigma, double mean) {
  Tensor t(std::move(shape));
  // scale a unit normal so sigma == 0 degenerates to the constant mean
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data_) v = mean + sigma * dist(rng);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

const Tensor* TensorFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

namespace {

constexpr char kMagic[8] = {'P', 'P', 'T', 'E', 'N', 'S', 'R', '1'};

void write_u64_le(std::ostream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64_le(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64_le(std::ostream& out, const double* vals, size_t count) {
  // host is little-endian on every supported target; keep the byte swap
  // explicit anyway so the format stays pinned
  std::vector<unsigned char> buf(count * 8);
  for (size_t i = 0; i < count; ++i) {
    uint64_t bits;
    std::memcpy(&bits, &vals[i], 8);
    for (int b = 0; b < 8; ++b)
      buf[i * 8 + static_cast<size_t>(b)] =
          static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

void read_f64_le(std::istream& in, double* vals, size_t count) {
  std::vector<unsigned char> buf(count * 8);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!in) fail(ErrorCode::Io, "truncated tensor payload");
  for (size_t i = 0; i < count; ++i) {
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<uint64_t>(buf[i * 8 + static_cast<size_t>(b)])
              << (8 * b);
    std::memcpy(&vals[i], &bits, 8);
  }
}

}  // namespace

void save_tensor_file(const std::string& path, const TensorFile& file) {
  nlohmann::json header;
  header["manifest"] = file.manifest;
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    dir.push_back({{"name", name},
                   {"shape", t.shape()},
                   {"dtype", "f64"},
                   {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel()) * 8;
  }
  header["tensors"] = dir;
  std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write tensor file: " + path);
  out.write(kMagic, 8);
  write_u64_le(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : file.tensors)
    write_f64_le(out, t.data(), static_cast<size_t>(t.numel()));
  out.flush();
  if (!out) fail(ErrorCode::Io, "short write to tensor file: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open tensor file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    fail(ErrorCode::Io, "not a tensor container: " + path);
  uint64_t header_len = read_u64_le(in);
  if (!in) fail(ErrorCode::Io, "truncated tensor header: " + path);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) fail(ErrorCode::Io, "truncated tensor header: " + path);

  nlohmann::json header = nlohmann::json::parse(header_text, nullptr, false);
  if (header.is_discarded())
    fail(ErrorCode::Io, "corrupt tensor header JSON: " + path);

  TensorFile file;
  file.manifest = header.value("manifest", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    if (entry.at("dtype").get<std::string>() != "f64")
      fail(ErrorCode::Io, "unsupported dtype in tensor file");
    Tensor t(shape);
    read_f64_le(in, t.data(), static_cast<size_t>(t.numel()));
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  return file;
}

}  // namespace pp
