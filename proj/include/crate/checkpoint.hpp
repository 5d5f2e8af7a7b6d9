#pragma once

#include "crate/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace crate {

// Single-file checkpoint, fixed little-endian layout:
//   "CR8W" | u32 version
//   config block: 13 x u32 (L, d, K, p, C, H, W, P_H, P_W, classes,
//                 attention, mlp, mlp_hidden), 3 x f64 (eps, lambda, eta)
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, u32 dims[rank],
//     u8 dtype (0 = f32, 1 = f64), payload in column-major order
//   u32 CRC-32 (IEEE) of all preceding bytes
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
  std::vector<unsigned char> bytes;

  void u8(uint8_t v) { bytes.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    const uint64_t u = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(u >> (8 * i)));
  }
  void raw(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
};

struct ByteReader {
  const std::vector<unsigned char>& bytes;
  size_t at = 0;

  void need(size_t n) const {
    if (at + n > bytes.size()) throw IoError("checkpoint truncated at byte " + std::to_string(at));
  }
  uint8_t u8() {
    need(1);
    return bytes[at++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[at++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[at++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + at), n);
    at += n;
    return s;
  }
};

}  // namespace detail

inline void save_checkpoint(const CrateModel& m, const std::string& path) {
  detail::ByteWriter w;
  w.raw("CR8W", 4);
  w.u32(kCheckpointVersion);
  const auto& c = m.config;
  for (int v : {c.num_layers, c.model_dim, c.num_heads, c.head_dim, c.channels, c.height,
                c.width, c.patch_h, c.patch_w, c.num_classes,
                c.attention == AttentionKind::Mssa ? 0 : 1, c.mlp == MlpKind::Ista ? 0 : 1,
                c.mlp_hidden})
    w.u32(static_cast<uint32_t>(v));
  w.f64(c.quant_eps);
  w.f64(c.sparsity);
  w.f64(c.ista_step);

  uint32_t count = 0;
  visit_params(m, [&](const std::string&, const Mat&) { ++count; });
  w.u32(count);
  visit_params(m, [&](const std::string& name, const Mat& tensor) {
    w.u32(static_cast<uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u32(2);  // rank
    w.u32(static_cast<uint32_t>(tensor.rows()));
    w.u32(static_cast<uint32_t>(tensor.cols()));
    w.u8(1);  // f64
    for (Index j = 0; j < tensor.cols(); ++j)
      for (Index i = 0; i < tensor.rows(); ++i) w.f64(tensor(i, j));
  });
  w.u32(detail::crc32_ieee(w.bytes.data(), w.bytes.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline CrateModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw IoError("checkpoint truncated: " + path);

  const uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                              static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8 |
                              static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16 |
                              static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24;
  const uint32_t actual_crc = detail::crc32_ieee(bytes.data(), bytes.size() - 4);
  if (stored_crc != actual_crc)
    throw IoError("checkpoint CRC mismatch: stored " + std::to_string(stored_crc) +
                  ", computed " + std::to_string(actual_crc));

  detail::ByteReader r{bytes};
  if (r.str(4) != "CR8W") throw IoError("bad checkpoint magic in " + path);
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint version mismatch: file has " + std::to_string(version) +
                  ", loader expects " + std::to_string(kCheckpointVersion));

  ModelConfig cfg;
  cfg.num_layers = static_cast<int>(r.u32());
  cfg.model_dim = static_cast<int>(r.u32());
  cfg.num_heads = static_cast<int>(r.u32());
  cfg.head_dim = static_cast<int>(r.u32());
  cfg.channels = static_cast<int>(r.u32());
  cfg.height = static_cast<int>(r.u32());
  cfg.width = static_cast<int>(r.u32());
  cfg.patch_h = static_cast<int>(r.u32());
  cfg.patch_w = static_cast<int>(r.u32());
  cfg.num_classes = static_cast<int>(r.u32());
  cfg.attention = r.u32() == 0 ? AttentionKind::Mssa : AttentionKind::Mhsa;
  cfg.mlp = r.u32() == 0 ? MlpKind::Ista : MlpKind::Mlp;
  cfg.mlp_hidden = static_cast<int>(r.u32());
  cfg.quant_eps = r.f64();
  cfg.sparsity = r.f64();
  cfg.ista_step = r.f64();

  CrateModel model = init_model(cfg, 0);
  const uint32_t count = r.u32();
  std::map<std::string, Mat*> slots;
  visit_params(model, [&](const std::string& name, Mat& t) { slots[name] = &t; });
  if (count != slots.size())
    throw IoError("checkpoint tensor count " + std::to_string(count) + " does not match model (" +
                  std::to_string(slots.size()) + ")");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const uint32_t rank = r.u32();
    if (rank != 2) throw IoError("unsupported tensor rank " + std::to_string(rank) + " for " + name);
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    const uint8_t dtype = r.u8();
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError("unknown tensor name in checkpoint: " + name);
    Mat& t = *it->second;
    if (t.rows() != static_cast<Index>(rows) || t.cols() != static_cast<Index>(cols))
      throw IoError("tensor shape mismatch for " + name);
    for (uint32_t j = 0; j < cols; ++j)
      for (uint32_t ri = 0; ri < rows; ++ri) {
        if (dtype == 1) {
          t(ri, j) = r.f64();
        } else if (dtype == 0) {
          r.need(4);
          uint32_t v = 0;
          for (int b = 0; b < 4; ++b) v |= static_cast<uint32_t>(bytes[r.at++]) << (8 * b);
          t(ri, j) = static_cast<double>(std::bit_cast<float>(v));
        } else {
          throw IoError("unknown dtype tag " + std::to_string(dtype) + " for " + name);
        }
      }
  }
  if (r.at != bytes.size() - 4)
    throw IoError("checkpoint has trailing bytes after tensor records");
  return model;
}

}  // namespace crate
