#pragma once

// One binary array file per segment:
//   bytes 0..3   magic "PMLF"
//   bytes 4..7   rank (uint32 LE, 1 or 2)
//   bytes 8..11  dim0 (uint32 LE)
//   bytes 12..15 dim1 (uint32 LE, 0 for rank 1)
//   then dim0*dim1 (or dim0) float32 LE values, row-major.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pmlf/core.hpp"

namespace pmlf::store {

using Matrix = Eigen::MatrixXd;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace detail

/// Encodes a T x d matrix (rank 2) as a feature-store blob.
inline std::string encode(const Matrix& m) {
  std::string out;
  out.reserve(16 + static_cast<std::size_t>(m.size()) * 4);
  out.append("PMLF", 4);
  detail::put_u32(out, 2);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f32(out, static_cast<float>(m(i, j)));
  return out;
}

/// Decodes a blob; rank-1 arrays come back as a single row.
inline Matrix decode(const std::string& blob, const std::string& where = "<memory>") {
  if (blob.size() < 16 || std::memcmp(blob.data(), "PMLF", 4) != 0)
    throw Error(Errc::ParseError, "bad feature header in " + where);
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t rank = detail::get_u32(p + 4);
  const std::uint32_t d0 = detail::get_u32(p + 8);
  const std::uint32_t d1 = detail::get_u32(p + 12);
  if (rank != 1 && rank != 2) throw Error(Errc::ParseError, "unsupported rank in " + where);
  const std::size_t rows = rank == 2 ? d0 : 1;
  const std::size_t cols = rank == 2 ? d1 : d0;
  if (blob.size() != 16 + rows * cols * 4) throw Error(Errc::ParseError, "truncated feature file " + where);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const unsigned char* q = p + 16;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j, q += 4)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = detail::get_f32(q);
  return m;
}

inline void write_features(const std::filesystem::path& path, const Matrix& m) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  const auto blob = encode(m);
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline Matrix read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::NotFound, "feature file not found: " + path.string());
  std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode(blob, path.string());
}

}  // namespace pmlf::store
