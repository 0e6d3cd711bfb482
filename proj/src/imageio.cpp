#include "fclab/imageio.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace fclab {

namespace {

void put_u32be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& payload) {
  put_u32be(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(4 + payload.size()));
  put_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png(const Tensor& image_chw, const std::string& path) {
  if (image_chw.ndim() != 3 || (image_chw.dim(0) != 1 && image_chw.dim(0) != 3))
    throw std::invalid_argument("write_png: expected 1xHxW or 3xHxW, got " +
                                image_chw.shape_str());
  const int C = image_chw.dim(0), H = image_chw.dim(1), W = image_chw.dim(2);

  // Scanlines: filter byte 0 then interleaved channel bytes.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(H) * (1 + static_cast<std::size_t>(W) * C));
  for (int y = 0; y < H; ++y) {
    raw.push_back(0);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const double v = image_chw[(static_cast<std::size_t>(c) * H + y) * W + x];
        raw.push_back(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L)));
      }
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("write_png: zlib compression failed");
  comp.resize(comp_len);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(W));
  put_u32be(ihdr, static_cast<std::uint32_t>(H));
  ihdr.push_back(8);                          // bit depth
  ihdr.push_back(C == 1 ? 0 : 2);             // grayscale or truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_png: write failed for " + path);
}

void save_tensor_blob(const Tensor& t, const std::string& name, const std::string& path) {
  std::vector<std::uint8_t> out = {'P', 'F', 'C', 'K', 1, 0, 0, 0, 1, 0, 0, 0};
  out.push_back(static_cast<std::uint8_t>(name.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>((name.size() >> 8) & 0xff));
  out.insert(out.end(), name.begin(), name.end());
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  };
  put_u32(static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint64_t bits;
    double v = t[i];
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xff));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor blob: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("tensor blob: write failed for " + path);
}

Tensor load_tensor_blob(const std::string& path, std::string* name) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor blob: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("tensor blob: truncated " + path);
  };
  need(12);
  if (std::memcmp(buf.data(), "PFCK", 4) != 0)
    throw std::runtime_error("tensor blob: bad magic in " + path);
  pos = 12;  // magic + version + count (always 1)
  auto u16 = [&] {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  };
  auto u32 = [&] {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  const std::uint16_t nlen = u16();
  need(nlen);
  if (name) name->assign(reinterpret_cast<const char*>(buf.data() + pos), nlen);
  pos += nlen;
  const std::uint32_t ndim = u32();
  std::vector<int> shape(ndim);
  std::size_t total = 1;
  for (auto& d : shape) {
    d = static_cast<int>(u32());
    total *= static_cast<std::size_t>(d);
  }
  need(total * 8);
  std::vector<double> data(total);
  for (std::size_t i = 0; i < total; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[pos + b]) << (8 * b);
    pos += 8;
    std::memcpy(&data[i], &bits, 8);
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace fclab
