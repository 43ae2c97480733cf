#include "catsd/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace catsd {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

int color_type_for(int channels) {
  switch (channels) {
    case 1: return 0;
    case 3: return 2;
    case 4: return 6;
    default: throw std::runtime_error("png: unsupported channel count");
  }
}

int channels_for(int color_type) {
  switch (color_type) {
    case 0: return 1;
    case 2: return 3;
    case 6: return 4;
    default: throw std::runtime_error("png: unsupported color type");
  }
}

std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace

ImageU8 make_image(int width, int height, int channels, std::uint8_t fill) {
  ImageU8 img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(static_cast<std::size_t>(width) * height * channels, fill);
  return img;
}

ImageF make_imagef(int width, int height, int channels, double fill) {
  ImageF img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.data.assign(static_cast<std::size_t>(width) * height * channels, fill);
  return img;
}

ImageF to_float(const ImageU8& img) {
  ImageF out = make_imagef(img.width, img.height, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(y, x, c) / 255.0;
  return out;
}

ImageU8 to_u8(const ImageF& img) {
  ImageU8 out = make_image(img.width, img.height, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double v = img.at(c, y, x);
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return out;
}

std::vector<std::uint8_t> png_encode(const ImageU8& img) {
  require(img.width > 0 && img.height > 0, "png: empty image");
  require(img.pixels.size() ==
              static_cast<std::size_t>(img.width) * img.height * img.channels,
          "png: pixel buffer size mismatch");
  const int bpp = img.channels;
  const std::size_t stride = static_cast<std::size_t>(img.width) * bpp;

  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    const std::uint8_t* row = img.pixels.data() + static_cast<std::size_t>(y) * stride;
    raw.insert(raw.end(), row, row + stride);
  }

  uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_cap);
  require(compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK,
          "png: deflate failed");
  comp.resize(comp_cap);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(static_cast<std::uint8_t>(color_type_for(img.channels)));
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});
  return out;
}

ImageU8 png_decode(const std::vector<std::uint8_t>& bytes) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  require(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0, "png: bad signature");

  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= bytes.size() && !saw_iend) {
    const std::uint32_t len = get_u32(bytes.data() + pos);
    require(pos + 12 + len <= bytes.size(), "png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      require(len == 13, "png: bad IHDR");
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      require(payload[8] == 8, "png: only 8-bit depth supported");
      channels = channels_for(payload[9]);
      require(payload[12] == 0, "png: interlaced images not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  require(saw_ihdr && saw_iend && !idat.empty(), "png: missing chunks");
  require(width > 0 && height > 0, "png: bad dimensions");

  const int bpp = channels;
  const std::size_t stride = static_cast<std::size_t>(width) * bpp;
  std::vector<std::uint8_t> raw((stride + 1) * height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  require(uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) == Z_OK &&
              raw_len == raw.size(),
          "png: inflate failed");

  ImageU8 img = make_image(width, height, channels);
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
    std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
      const int b = prev[i];
      const int c = i >= static_cast<std::size_t>(bpp) ? prev[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("png: unknown filter");
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

void png_save(const std::string& path, const ImageU8& img) { write_file(path, png_encode(img)); }

ImageU8 png_load(const std::string& path) { return png_decode(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open file: " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write file: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  require(f.good(), "write failed: " + path);
}

}  // namespace catsd
