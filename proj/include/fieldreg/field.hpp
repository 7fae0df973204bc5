#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fieldreg/errors.hpp"

namespace fieldreg {

/// Dense grid function with one or more channels. Storage is channel major:
/// entry (ch, row, col) sits at data[(ch*h + row)*w + col].
struct Field {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> data;

  Field() = default;
  Field(int h_, int w_, int c_) : h(h_), w(w_), c(c_) {
    if (h_ <= 0 || w_ <= 0 || c_ <= 0)
      throw std::invalid_argument("Field: dimensions must be positive");
    data.assign(static_cast<std::size_t>(h_) * w_ * c_, 0.0);
  }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  double& at(int ch, int row, int col) {
    return data[(static_cast<std::size_t>(ch) * h + row) * w + col];
  }
  double at(int ch, int row, int col) const {
    return data[(static_cast<std::size_t>(ch) * h + row) * w + col];
  }

  double* chan(int ch) { return data.data() + static_cast<std::size_t>(ch) * plane(); }
  const double* chan(int ch) const {
    return data.data() + static_cast<std::size_t>(ch) * plane();
  }

  bool same_shape(const Field& o) const { return h == o.h && w == o.w && c == o.c; }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Paired input/output sample collection plus the seed that generated it.
struct Dataset {
  std::vector<Field> inputs;
  std::vector<Field> outputs;
  std::vector<std::string> input_names;
  std::vector<std::string> output_names;
  std::uint64_t seed = 0;
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& buf, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(buf, v);
}

/// Bounds-checked little-endian reader over a loaded file image.
struct Cursor {
  const unsigned char* p;
  std::size_t n;
  std::size_t pos = 0;
  std::string what;

  void need(std::size_t k) const {
    if (pos + k > n) throw format_error(what + ": truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
};

inline std::vector<unsigned char> slurp(const std::filesystem::path& path,
                                        const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error(std::string(what) + ": cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

inline void spew(const std::filesystem::path& path, const std::string& bytes,
                 const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error(std::string(what) + ": cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw format_error(std::string(what) + ": write failed on " + path.string());
}

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Dataset container format, version 1. Little-endian throughout.
///   "FRDS" | u32 version | u32 N | u32 H u32 W u32 C_in | u32 H_out u32 W_out
///   u32 C_out | u64 seed | N input blocks | N output blocks
/// Each block is H*W*C doubles in channel-major order.
inline void dataset_write(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.inputs.empty() || ds.inputs.size() != ds.outputs.size())
    throw std::invalid_argument("dataset_write: need matching nonempty sample lists");
  const Field& fi = ds.inputs.front();
  const Field& fo = ds.outputs.front();
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    if (!ds.inputs[i].same_shape(fi) || !ds.outputs[i].same_shape(fo))
      throw std::invalid_argument("dataset_write: inconsistent sample shapes");
    if (!ds.inputs[i].finite() || !ds.outputs[i].finite())
      throw std::invalid_argument("dataset_write: non-finite entries");
  }

  std::string buf;
  buf.reserve(48 + 8 * ds.inputs.size() * (fi.size() + fo.size()));
  buf.append("FRDS");
  detail::put_u32(buf, 1);
  detail::put_u32(buf, static_cast<std::uint32_t>(ds.inputs.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(fi.h));
  detail::put_u32(buf, static_cast<std::uint32_t>(fi.w));
  detail::put_u32(buf, static_cast<std::uint32_t>(fi.c));
  detail::put_u32(buf, static_cast<std::uint32_t>(fo.h));
  detail::put_u32(buf, static_cast<std::uint32_t>(fo.w));
  detail::put_u32(buf, static_cast<std::uint32_t>(fo.c));
  detail::put_u64(buf, ds.seed);
  for (const Field& f : ds.inputs)
    for (double v : f.data) detail::put_f64(buf, v);
  for (const Field& f : ds.outputs)
    for (double v : f.data) detail::put_f64(buf, v);
  detail::spew(path, buf, "dataset_write");
}

inline Dataset dataset_read(const std::filesystem::path& path) {
  auto bytes = detail::slurp(path, "dataset_read");
  detail::Cursor cur{bytes.data(), bytes.size(), 0, "dataset_read"};

  cur.need(4);
  if (std::memcmp(cur.p, "FRDS", 4) != 0)
    throw format_error("dataset_read: bad magic, not an FRDS file");
  cur.pos += 4;
  std::uint32_t version = cur.u32();
  if (version != 1)
    throw format_error("dataset_read: unsupported version " + std::to_string(version));

  std::uint32_t n = cur.u32();
  std::uint32_t h = cur.u32(), w = cur.u32(), c = cur.u32();
  std::uint32_t ho = cur.u32(), wo = cur.u32(), co = cur.u32();
  std::uint64_t seed = cur.u64();
  if (n == 0 || h == 0 || w == 0 || c == 0 || ho == 0 || wo == 0 || co == 0)
    throw format_error("dataset_read: zero dimension in header");

  std::size_t doubles = std::size_t{n} * (std::size_t{h} * w * c + std::size_t{ho} * wo * co);
  if (cur.pos + 8 * doubles != bytes.size())
    throw format_error(bytes.size() < cur.pos + 8 * doubles
                           ? "dataset_read: truncated file"
                           : "dataset_read: trailing bytes after payload");

  Dataset ds;
  ds.seed = seed;
  ds.inputs.reserve(n);
  ds.outputs.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Field f(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    for (double& v : f.data) v = cur.f64();
    if (!f.finite()) throw format_error("dataset_read: non-finite input entry");
    ds.inputs.push_back(std::move(f));
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    Field f(static_cast<int>(ho), static_cast<int>(wo), static_cast<int>(co));
    for (double& v : f.data) v = cur.f64();
    if (!f.finite()) throw format_error("dataset_read: non-finite output entry");
    ds.outputs.push_back(std::move(f));
  }
  return ds;
}

/// One channel as rows of comma separated values, full double precision.
inline void write_channel_csv(const std::filesystem::path& path, const Field& f, int ch) {
  if (ch < 0 || ch >= f.c) throw std::invalid_argument("write_channel_csv: bad channel");
  std::string buf;
  for (int r = 0; r < f.h; ++r) {
    for (int col = 0; col < f.w; ++col) {
      if (col) buf.push_back(',');
      buf += detail::fmt_g17(f.at(ch, r, col));
    }
    buf.push_back('\n');
  }
  detail::spew(path, buf, "write_channel_csv");
}

/// Min-max scaled 8-bit grayscale heatmap (binary PPM, P5). A constant field
/// maps to black.
inline void write_channel_ppm(const std::filesystem::path& path, const Field& f, int ch) {
  if (ch < 0 || ch >= f.c) throw std::invalid_argument("write_channel_ppm: bad channel");
  const double* p = f.chan(ch);
  double lo = p[0], hi = p[0];
  for (std::size_t i = 0; i < f.plane(); ++i) {
    lo = std::min(lo, p[i]);
    hi = std::max(hi, p[i]);
  }
  double span = hi - lo;
  std::string buf = "P5\n" + std::to_string(f.w) + " " + std::to_string(f.h) + "\n255\n";
  for (std::size_t i = 0; i < f.plane(); ++i) {
    int v = span > 0.0 ? static_cast<int>(std::lround((p[i] - lo) / span * 255.0)) : 0;
    buf.push_back(static_cast<char>(v));
  }
  detail::spew(path, buf, "write_channel_ppm");
}

}  // namespace fieldreg
