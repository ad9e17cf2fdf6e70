#include "dmilab/io/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'I', 'L', 'A', 'B', 'C', '\0'};
// Guards against absurd allocations from a damaged length field.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }
  std::string_view view() const { return out_; }

 private:
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::string_view take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw TruncatedFileError(std::string("container truncated while reading ") + what);
    }
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) { return le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return le<std::uint64_t>(what); }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    return std::string(take(n, what));
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  template <class T>
  T le(const char* what) {
    auto s = take(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(s[i])) << (8 * i);
    }
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const Container& c) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kContainerVersion);
  w.str(c.kind);
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  w.u64(fnv1a(w.view()));
  return w.take();
}

Container decode_container(std::string_view bytes) {
  Reader r(bytes);
  auto magic = r.take(sizeof kMagic, "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) {
    throw MagicMismatchError("not a dmilab container (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) {
    throw VersionMismatchError("container version " + std::to_string(version) +
                               " is not supported (expected " +
                               std::to_string(kContainerVersion) + ")");
  }
  Container c;
  c.kind = r.str("kind");
  const std::uint32_t n_meta = r.u32("meta count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str("meta key");
    c.meta[std::move(k)] = r.str("meta value");
  }
  const std::uint32_t n_tensors = r.u32("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str("tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw CorruptFileError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = r.u64("tensor dims");
      count *= d;
      if (count > kMaxElements) throw CorruptFileError("tensor '" + name + "' is implausibly large");
    }
    if (r.remaining() < count * 8) {
      throw TruncatedFileError("container truncated inside tensor '" + name + "'");
    }
    std::vector<double> data(count);
    for (auto& v : data) v = r.f64("tensor data");
    c.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const std::size_t body_end = r.pos();
  const std::uint64_t stored = r.u64("checksum");
  if (r.remaining() != 0) throw CorruptFileError("trailing bytes after container checksum");
  if (stored != fnv1a(bytes.substr(0, body_end))) {
    throw CorruptFileError("container checksum mismatch");
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_container(ss.str());
}

}  // namespace dmilab
