#include "fedsb/serialize.hpp"

#include <cstring>
#include <stdexcept>

namespace fedsb {

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'S', 'B', 'A'};
constexpr std::uint16_t kVersion = 1;

// Kind tags: 0..4 follow Method, 100 is a bare matrix frame.
constexpr std::uint16_t kMatrixTag = 100;

[[noreturn]] void fail(const char* what) { throw std::runtime_error(what); }

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const std::size_t at = bytes_.size();
    bytes_.resize(at + sizeof(T));
    std::memcpy(bytes_.data() + at, &value, sizeof(T));
  }
  void put_matrix(const Matrix& m) {
    put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    const std::size_t at = bytes_.size();
    bytes_.resize(at + m.size() * sizeof(double));
    std::memcpy(bytes_.data() + at, m.data().data(), m.size() * sizeof(double));
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) fail("serialize: truncated frame");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  Matrix get_matrix() {
    const std::uint32_t rows = get<std::uint32_t>();
    const std::uint32_t cols = get<std::uint32_t>();
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (pos_ + count * sizeof(double) > bytes_.size()) fail("serialize: truncated tensor");
    std::vector<double> entries(count);
    std::memcpy(entries.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return Matrix(rows, cols, std::move(entries));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_header(Writer& w, std::uint16_t tag, double alpha, std::uint32_t tensors) {
  for (std::uint8_t b : kMagic) w.put<std::uint8_t>(b);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint16_t>(tag);
  w.put<double>(alpha);
  w.put<std::uint32_t>(tensors);
}

struct Header {
  std::uint16_t tag = 0;
  double alpha = 0.0;
  std::uint32_t tensors = 0;
};

Header read_header(Reader& r) {
  for (std::uint8_t expected : kMagic)
    if (r.get<std::uint8_t>() != expected) fail("serialize: bad magic");
  if (r.get<std::uint16_t>() != kVersion) fail("serialize: unsupported version");
  Header h;
  h.tag = r.get<std::uint16_t>();
  h.alpha = r.get<double>();
  h.tensors = r.get<std::uint32_t>();
  return h;
}

}  // namespace

std::vector<std::uint8_t> serialize_adapter(Method method, const Adapter& adapter) {
  Writer w;
  if (const LoraPair* p = std::get_if<LoraPair>(&adapter)) {
    write_header(w, static_cast<std::uint16_t>(method), p->alpha, 2);
    w.put_matrix(p->b);
    w.put_matrix(p->a);
  } else {
    const SbTriple& t = std::get<SbTriple>(adapter);
    write_header(w, static_cast<std::uint16_t>(method), 0.0, 3);
    w.put_matrix(t.b);
    w.put_matrix(t.r);
    w.put_matrix(t.a);
  }
  return w.take();
}

std::pair<Method, Adapter> deserialize_adapter(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const Header h = read_header(r);
  if (h.tag > static_cast<std::uint16_t>(Method::kFedSb))
    fail("serialize: frame is not an adapter");
  const Method method = static_cast<Method>(h.tag);
  Adapter adapter;
  if (h.tensors == 2) {
    LoraPair p;
    p.alpha = h.alpha;
    p.b = r.get_matrix();
    p.a = r.get_matrix();
    adapter = std::move(p);
  } else if (h.tensors == 3) {
    SbTriple t;
    t.b = r.get_matrix();
    t.r = r.get_matrix();
    t.a = r.get_matrix();
    adapter = std::move(t);
  } else {
    fail("serialize: unexpected tensor count");
  }
  if (!r.done()) fail("serialize: trailing bytes");
  return {method, std::move(adapter)};
}

std::vector<std::uint8_t> serialize_matrix(const Matrix& m) {
  Writer w;
  write_header(w, kMatrixTag, 0.0, 1);
  w.put_matrix(m);
  return w.take();
}

Matrix deserialize_matrix(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const Header h = read_header(r);
  if (h.tag != kMatrixTag || h.tensors != 1) fail("serialize: frame is not a matrix");
  Matrix m = r.get_matrix();
  if (!r.done()) fail("serialize: trailing bytes");
  return m;
}

std::size_t measure_params(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const Header h = read_header(r);
  std::size_t params = 0;
  for (std::uint32_t i = 0; i < h.tensors; ++i) params += r.get_matrix().size();
  if (!r.done()) fail("serialize: trailing bytes");
  return params;
}

}  // namespace fedsb
