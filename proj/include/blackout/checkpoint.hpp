#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blackout/dqn.hpp"

namespace blackout {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'K', 'O', 'D', 'Q', 'N', '\0', '\x1a'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkParams online;
  NetworkParams target;
  OptimizerState optimizer;
  nlohmann::json meta;  // sidecar contents
};

namespace detail {

class ByteWriter {
public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& buffer() { return buf_; }

private:
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> buf_;
};

class ByteReader {
public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const std::uint16_t n = u16();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() const { return pos_ == n_; }

private:
  void need(std::size_t n) const {
    if (pos_ + n > n_) throw CheckpointError("checkpoint truncated");
  }
  template <class T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Mat& m) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

inline void read_tensor(ByteReader& r, const std::string& name, Mat& m) {
  const std::string got = r.str();
  if (got != name) throw CheckpointError("checkpoint tensor '" + got + "' where '" + name + "' expected");
  const std::uint32_t rows = r.u32(), cols = r.u32();
  if (rows != m.rows() || cols != m.cols())
    throw CheckpointError("dimension mismatch in tensor " + name + ": file " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
}

inline std::uint32_t crc(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace detail

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  std::filesystem::path s = p;
  s += ".json";
  return s;
}

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const NetworkDims& d = c.online.dims;
  for (int v : {d.kappa, d.features, d.actions, d.hidden1, d.hidden2}) w.u32(static_cast<std::uint32_t>(v));
  const AdamConfig& a = c.optimizer.cfg;
  w.u64(static_cast<std::uint64_t>(c.optimizer.step));
  for (double v : {a.lr, a.beta1, a.beta2, a.eps, a.decay}) w.f64(v);
  w.u32(static_cast<std::uint32_t>(a.decay_every));
  w.u32(4 * NetworkParams::kCount);
  const std::string nm[4] = {"online.", "target.", "adam_m.", "adam_v."};
  for (int i = 0; i < NetworkParams::kCount; ++i) detail::write_tensor(w, nm[0] + NetworkParams::kNames[i], c.online.t[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i) detail::write_tensor(w, nm[1] + NetworkParams::kNames[i], c.target.t[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i) detail::write_tensor(w, nm[2] + NetworkParams::kNames[i], c.optimizer.m[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i) detail::write_tensor(w, nm[3] + NetworkParams::kNames[i], c.optimizer.v[i]);
  auto& buf = w.buffer();
  w.u32(detail::crc(buf.data(), buf.size()));
  return std::move(buf);
}

// `expect` pins the architecture the caller needs; any mismatch is an error.
inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& buf, const NetworkDims* expect = nullptr) {
  if (buf.size() < sizeof kCheckpointMagic + 8) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const std::size_t body = buf.size() - 4;
  detail::ByteReader tail(buf.data() + body, 4);
  if (tail.u32() != detail::crc(buf.data(), body)) throw CheckpointError("checkpoint checksum mismatch");

  detail::ByteReader r(buf.data(), body);
  char magic[8];
  r.bytes(magic, 8);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  NetworkDims d;
  d.kappa = static_cast<int>(r.u32());
  d.features = static_cast<int>(r.u32());
  d.actions = static_cast<int>(r.u32());
  d.hidden1 = static_cast<int>(r.u32());
  d.hidden2 = static_cast<int>(r.u32());
  if (expect && !(*expect == d))
    throw CheckpointError("checkpoint dimension mismatch: file has kappa=" + std::to_string(d.kappa) +
                          " O=" + std::to_string(d.features) + " actions=" + std::to_string(d.actions) +
                          ", expected kappa=" + std::to_string(expect->kappa) + " O=" +
                          std::to_string(expect->features) + " actions=" + std::to_string(expect->actions));

  Checkpoint c;
  c.online = NetworkParams::zeros(d);
  c.target = NetworkParams::zeros(d);
  AdamConfig a;
  const auto step = static_cast<std::int64_t>(r.u64());
  a.lr = r.f64();
  a.beta1 = r.f64();
  a.beta2 = r.f64();
  a.eps = r.f64();
  a.decay = r.f64();
  a.decay_every = static_cast<int>(r.u32());
  c.optimizer = OptimizerState::for_params(c.online, a);
  c.optimizer.step = step;
  if (r.u32() != 4 * NetworkParams::kCount) throw CheckpointError("unexpected tensor count");
  for (int i = 0; i < NetworkParams::kCount; ++i)
    detail::read_tensor(r, std::string("online.") + NetworkParams::kNames[i], c.online.t[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i)
    detail::read_tensor(r, std::string("target.") + NetworkParams::kNames[i], c.target.t[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i)
    detail::read_tensor(r, std::string("adam_m.") + NetworkParams::kNames[i], c.optimizer.m[i]);
  for (int i = 0; i < NetworkParams::kCount; ++i)
    detail::read_tensor(r, std::string("adam_v.") + NetworkParams::kNames[i], c.optimizer.v[i]);
  if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto buf = encode_checkpoint(c);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
  }
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw CheckpointError("cannot write " + sidecar_path(path).string());
  side << c.meta.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkDims* expect = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint c = decode_checkpoint(buf, expect);
  std::ifstream side(sidecar_path(path));
  if (side) {
    try {
      c.meta = nlohmann::json::parse(side);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("bad checkpoint sidecar: " + std::string(e.what()));
    }
  }
  return c;
}

}  // namespace blackout
