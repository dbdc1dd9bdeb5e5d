#include "iba/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace iba {

namespace {

bool g_nonfinite_checks = false;

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("tensor write failed");
}

void read_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw IoError("tensor read failed: truncated stream");
  }
}

void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  write_bytes(out, b, 4);
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  read_bytes(in, b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64le(std::ostream& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  write_bytes(out, b, 8);
}

double read_f64le(std::istream& in) {
  unsigned char b[8];
  read_bytes(in, b, 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

constexpr char kMagic[4] = {'I', 'B', 'A', 'T'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

void set_nonfinite_checks(bool enabled) { g_nonfinite_checks = enabled; }
bool nonfinite_checks_enabled() { return g_nonfinite_checks; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
  }
  if (values.size() != shape_size(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(shape_size(shape), 0.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

const std::vector<double>& Tensor::values() const {
  if (!data_) throw ValueError("tensor is undefined");
  return *data_;
}

const double* Tensor::data() const { return values().data(); }

double Tensor::value() const {
  if (size() != 1) throw ShapeError("value() needs a single-element tensor, got " + shape_str(shape_));
  return (*data_)[0];
}

std::size_t Tensor::flat_index(const std::size_t* idx, std::size_t n) const {
  if (n != shape_.size()) {
    throw ShapeError("index rank " + std::to_string(n) + " does not match " + shape_str(shape_));
  }
  std::size_t flat = 0;
  for (std::size_t a = 0; a < n; ++a) {
    if (idx[a] >= shape_[a]) throw std::out_of_range("tensor index out of range");
    flat = flat * shape_[a] + idx[a];
  }
  return flat;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (!defined()) throw ValueError("reshaped() on an undefined tensor");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  t.tape_id_ = 0;
  t.node_ = -1;
  return t;
}

Tensor Tensor::traced(std::uint64_t tape_id, int node) const {
  Tensor t = *this;
  t.tape_id_ = tape_id;
  t.node_ = node;
  return t;
}

void Tensor::save(std::ostream& out) const {
  if (!defined()) throw ValueError("cannot serialize an undefined tensor");
  write_bytes(out, kMagic, 4);
  write_bytes(out, &kVersion, 1);
  write_u32le(out, static_cast<std::uint32_t>(shape_.size()));
  for (std::size_t d : shape_) write_u32le(out, static_cast<std::uint32_t>(d));
  for (double v : *data_) write_f64le(out, v);
}

Tensor Tensor::load(std::istream& in) {
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad tensor magic");
  std::uint8_t version;
  read_bytes(in, &version, 1);
  if (version != kVersion) throw IoError("unsupported tensor version " + std::to_string(version));
  std::uint32_t rank = read_u32le(in);
  if (rank > 8) throw IoError("tensor rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = read_u32le(in);
    if (d == 0) throw IoError("tensor dim must be positive");
    shape[i] = d;
  }
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = read_f64le(in);
  return Tensor(std::move(shape), std::move(values));
}

void Tensor::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  save(out);
}

Tensor Tensor::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for read: " + path);
  return load(in);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::fabs(av[i] - bv[i]));
  return m;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace iba
