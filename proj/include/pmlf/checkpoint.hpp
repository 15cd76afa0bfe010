#pragma once

// Checkpoint container:
//   "PMLFCKPT" | u32 version | u32 stage | u64 config hash
//   | u64 n | n bytes of UTF-8 JSON {config, epoch, metrics, rng_state}
//   | u32 count | count x (u32 name_len, name, u32 rows, u32 cols, f32 row-major)
// Integers are little-endian. The hash is FNV-1a over the compact dump of `config`.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmlf/core.hpp"
#include "pmlf/feature_store.hpp"
#include "pmlf/nets.hpp"

namespace pmlf {

using Matrix = Eigen::MatrixXd;

enum class Stage : std::uint32_t { STAGE1 = 1, STAGE2 = 2 };

inline std::string to_string(Stage s) { return s == Stage::STAGE1 ? "STAGE1" : "STAGE2"; }

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Stage stage = Stage::STAGE1;
  nlohmann::json config = nlohmann::json::object();
  int epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
  std::string rng_state;
  std::vector<std::pair<std::string, Matrix>> tensors;

  std::uint64_t config_hash() const { return fnv1a64(config.dump()); }

  bool has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return true;
    return false;
  }
  const Matrix& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw Error(Errc::NotFound, "checkpoint has no tensor '" + name + "'");
  }

  /// Appends the current values of `ps` under `prefix`.
  void add_params(const std::string& prefix, const nets::ParamList& ps) {
    for (const auto& [n, v] : ps) tensors.emplace_back(prefix + n, v->value());
  }

  /// Loads every parameter of `ps` from tensors named `prefix + name`.
  void restore_params(const std::string& prefix, const nets::ParamList& ps) const {
    for (const auto& [n, v] : ps) {
      const Matrix& src = tensor(prefix + n);
      auto& dst = v->mutable_value();
      if (src.rows() != dst.rows() || src.cols() != dst.cols())
        throw Error(Errc::DimMismatch, "checkpoint tensor '" + prefix + n + "' has the wrong shape");
      dst = src;
    }
  }
};

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  const unsigned char* take(std::size_t n) {
    if (pos_ + n > b_.size()) throw Error(Errc::ParseError, "checkpoint is truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(b_.data()) + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return store::detail::get_u32(take(4)); }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::string str(std::size_t n) { return std::string(reinterpret_cast<const char*>(take(n)), n); }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out;
  out.append("PMLFCKPT", 8);
  store::detail::put_u32(out, kCheckpointVersion);
  store::detail::put_u32(out, static_cast<std::uint32_t>(c.stage));
  detail::put_u64(out, c.config_hash());
  const nlohmann::json meta = {
      {"config", c.config}, {"epoch", c.epoch}, {"metrics", c.metrics}, {"rng_state", c.rng_state}};
  const std::string text = meta.dump();
  detail::put_u64(out, text.size());
  out += text;
  store::detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, m] : c.tensors) {
    store::detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    store::detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    store::detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) store::detail::put_f32(out, static_cast<float>(m(i, j)));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& blob) {
  detail::Reader r(blob);
  if (blob.size() < 8 || std::memcmp(r.take(8), "PMLFCKPT", 8) != 0)
    throw Error(Errc::ParseError, "not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(Errc::VersionMismatch, "checkpoint format version " + std::to_string(version) + " is not supported");
  Checkpoint c;
  const auto stage = r.u32();
  if (stage != 1 && stage != 2) throw Error(Errc::ParseError, "invalid checkpoint stage");
  c.stage = static_cast<Stage>(stage);
  const auto hash = r.u64();
  const auto n = r.u64();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(n));
    c.config = meta.at("config");
    c.epoch = meta.at("epoch").get<int>();
    c.metrics = meta.at("metrics");
    c.rng_state = meta.at("rng_state").get<std::string>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Errc::ParseError, std::string("checkpoint metadata: ") + e.what());
  }
  if (c.config_hash() != hash) throw Error(Errc::HashMismatch, "checkpoint config does not match its hash");
  const auto count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str(r.u32());
    const auto rows = r.u32();
    const auto cols = r.u32();
    Matrix m(rows, cols);
    const auto* p = r.take(static_cast<std::size_t>(rows) * cols * 4);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j, p += 4) m(i, j) = store::detail::get_f32(p);
    c.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (!r.done()) throw Error(Errc::ParseError, "trailing bytes after checkpoint tensors");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  const auto blob = encode_checkpoint(c);
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot read checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(blob);
}

}  // namespace pmlf
