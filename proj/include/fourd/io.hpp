#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fourd/common.hpp"
#include "fourd/geometry.hpp"

namespace fourd {

// ---------------------------------------------------------------------------
// 8-bit frame codecs. Images hold [0,1] reals; quantization is round-to-
// nearest with clamping.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> quantize(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const real v = std::min(real(1), std::max(real(0), img.data[i]));
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  const auto bytes = quantize(img);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write_ppm: write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w < 1 || h < 1)
    throw IoError("read_ppm: unsupported header in " + path);
  f.get();  // single whitespace after maxval
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("read_ppm: truncated file " + path);
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

namespace detail {

inline void push_u32be(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(static_cast<std::uint8_t>(x >> 24));
  v.push_back(static_cast<std::uint8_t>(x >> 16));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
  v.push_back(static_cast<std::uint8_t>(x));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char tag[4],
                      const std::vector<std::uint8_t>& payload) {
  push_u32be(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), tag, tag + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  push_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

inline void write_png(const std::string& path, const Image& img) {
  const auto bytes = quantize(img);
  // Filter 0 (none) per scanline.
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (1 + static_cast<std::size_t>(img.width) * 3));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const auto* row = bytes.data() + static_cast<std::size_t>(y) * img.width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(img.width) * 3);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("write_png: deflate failed for " + path);
  comp.resize(comp_len);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::push_u32be(ihdr, static_cast<std::uint32_t>(img.width));
  detail::push_u32be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write_png: write failed for " + path);
}

inline Image read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_png: cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (data.size() < 8 || data[1] != 'P' || data[2] != 'N' || data[3] != 'G')
    throw IoError("read_png: not a PNG: " + path);
  auto u32 = [&](std::size_t off) {
    return (static_cast<std::uint32_t>(data[off]) << 24) |
           (static_cast<std::uint32_t>(data[off + 1]) << 16) |
           (static_cast<std::uint32_t>(data[off + 2]) << 8) |
           static_cast<std::uint32_t>(data[off + 3]);
  };
  std::size_t pos = 8;
  int w = 0, h = 0;
  std::vector<std::uint8_t> idat;
  while (pos + 8 <= data.size()) {
    const std::uint32_t len = u32(pos);
    const std::string tag(data.begin() + pos + 4, data.begin() + pos + 8);
    const std::size_t payload = pos + 8;
    if (payload + len > data.size()) throw IoError("read_png: truncated chunk in " + path);
    if (tag == "IHDR") {
      w = static_cast<int>(u32(payload));
      h = static_cast<int>(u32(payload + 4));
      if (data[payload + 8] != 8 || data[payload + 9] != 2)
        throw IoError("read_png: only 8-bit RGB supported: " + path);
    } else if (tag == "IDAT") {
      idat.insert(idat.end(), data.begin() + payload, data.begin() + payload + len);
    } else if (tag == "IEND") {
      break;
    }
    pos = payload + len + 4;
  }
  if (w < 1 || h < 1 || idat.empty()) throw IoError("read_png: missing image data: " + path);

  const std::size_t stride = static_cast<std::size_t>(w) * 3;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("read_png: inflate failed for " + path);

  Image img(w, h);
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    for (std::size_t i = 0; i < stride; ++i) {
      const std::uint8_t a = i >= 3 ? row[i - 3] : 0;
      const std::uint8_t b = prev[i];
      const std::uint8_t c = i >= 3 ? prev[i - 3] : 0;
      switch (filter) {
        case 0: break;
        case 1: row[i] = static_cast<std::uint8_t>(row[i] + a); break;
        case 2: row[i] = static_cast<std::uint8_t>(row[i] + b); break;
        case 3: row[i] = static_cast<std::uint8_t>(row[i] + ((a + b) / 2)); break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          const std::uint8_t pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          row[i] = static_cast<std::uint8_t>(row[i] + pred);
          break;
        }
        default: throw IoError("read_png: unknown filter in " + path);
      }
    }
    std::memcpy(prev.data(), row, stride);
    for (std::size_t i = 0; i < stride; ++i)
      img.data[static_cast<std::size_t>(y) * stride + i] = row[i] / 255.0;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoint container: one little-endian float64 blob plus a JSON manifest
// of {name, shape, offset} entries (offset in elements).
// ---------------------------------------------------------------------------

struct CheckpointArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointArray>& arrays,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["meta"] = extra;
  manifest["arrays"] = nlohmann::json::array();
  std::vector<double> blob;
  for (const auto& a : arrays) {
    std::size_t n = 1;
    for (std::size_t d : a.shape) n *= d;
    if (n != a.values.size()) throw InputError("save_checkpoint: shape mismatch for " + a.name);
    manifest["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", blob.size()}});
    blob.insert(blob.end(), a.values.begin(), a.values.end());
  }

  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw IoError("save_checkpoint: cannot open " + path);
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  bin.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(double)));
  if (!bin) throw IoError("save_checkpoint: write failed for " + path);

  std::ofstream mf(path + ".json");
  if (!mf) throw IoError("save_checkpoint: cannot open " + path + ".json");
  mf << manifest.dump(2) << "\n";
}

inline std::vector<CheckpointArray> load_checkpoint(const std::string& path,
                                                    nlohmann::json* extra = nullptr) {
  std::ifstream mf(path + ".json");
  if (!mf) throw IoError("load_checkpoint: cannot open " + path + ".json");
  nlohmann::json manifest;
  mf >> manifest;
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw IoError("load_checkpoint: cannot open " + path);
  bin.seekg(0, std::ios::end);
  const std::size_t n_bytes = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);
  std::vector<double> values(n_bytes / sizeof(double));
  bin.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n_bytes));

  if (extra && manifest.contains("meta")) *extra = manifest["meta"];
  std::vector<CheckpointArray> arrays;
  for (const auto& e : manifest["arrays"]) {
    CheckpointArray a;
    a.name = e["name"].get<std::string>();
    a.shape = e["shape"].get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (std::size_t d : a.shape) n *= d;
    const std::size_t off = e["offset"].get<std::size_t>();
    if (off + n > values.size()) throw IoError("load_checkpoint: manifest exceeds blob: " + path);
    a.values.assign(values.begin() + off, values.begin() + off + n);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

}  // namespace fourd
