#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "storm/config.hpp"
#include "storm/model.hpp"

namespace storm {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'O', 'R', 'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(path_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (pos_ + n > buf_.size()) throw FormatError(path_ + ": truncated checkpoint");
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const StormModel& model, const std::string& path) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  std::string config;
  for (const auto& [k, v] : model.config().to_map()) config += k + "=" + v + "\n";
  w.str(config);
  w.f64(model.normalization.mean);
  w.f64(model.normalization.stddev);
  const auto& params = model.parameters().all();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rows()));
    w.u32(static_cast<std::uint32_t>(p.value.cols()));
    for (double v : p.value.data()) w.f64(v);
  }
  const std::uint64_t checksum = fnv1a64(w.buffer());
  w.u64(checksum);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path);
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw FormatError("write failed for " + path);
}

StormModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  Reader r(buf, path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path + ": not a STORM checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError(path + ": checkpoint format version " + std::to_string(version) + " is not supported");
  }
  if (buf.size() < 8 || fnv1a64(std::string_view(buf).substr(0, buf.size() - 8)) !=
                            [&] {
                              std::uint64_t v;
                              std::memcpy(&v, buf.data() + buf.size() - 8, 8);
                              return v;
                            }()) {
    throw FormatError(path + ": checksum mismatch, file is corrupt");
  }
  KeyValues kv;
  for (const auto& line : split(r.str(), '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path + ": malformed config block");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  PowerNormalization norm;
  norm.mean = r.f64();
  norm.stddev = r.f64();
  StormModel model(ModelConfig::from_map(kv), norm);
  auto& params = model.parameters();
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw FormatError(path + ": checkpoint holds " + std::to_string(count) + " arrays, model expects " +
                      std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const ParamId id = params.find(name);
    if (id == kNoNode) throw FormatError(path + ": unknown parameter " + name);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    Tensor& t = params[id].value;
    if (rows != t.rows() || cols != t.cols()) {
      throw FormatError(path + ": parameter " + name + " has shape " + shape_string(rows, cols) + ", expected " +
                        t.shape_string());
    }
    for (double& v : t.data()) v = r.f64();
  }
  if (r.position() + 8 != buf.size()) throw FormatError(path + ": trailing bytes after parameters");
  return model;
}

}  // namespace storm
