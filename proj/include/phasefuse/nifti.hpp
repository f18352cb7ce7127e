#pragma once

// Single-file NIfTI-1 (.nii) subset: little-endian, uncompressed, 3D,
// datatypes uint8 / int16 / float32, vox_offset 352 with an empty extension
// flag. Orientation matrices are ignored apart from the qform/sform offset,
// which supplies the origin.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/volume.hpp"

namespace phasefuse {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

enum class nifti_dtype : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

inline nifti_dtype parse_nifti_dtype(const std::string& s) {
  if (s == "uint8") return nifti_dtype::uint8;
  if (s == "int16") return nifti_dtype::int16;
  if (s == "float32") return nifti_dtype::float32;
  throw usage_error("unsupported NIfTI datatype '" + s + "' (expected uint8|int16|float32)");
}

namespace detail {

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiVoxOffset = 352;

template <class T>
T get_le(const std::vector<unsigned char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

template <class T>
void put_le(std::vector<unsigned char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

inline std::size_t dtype_bytes(std::int16_t code) {
  switch (code) {
    case 2: return 1;
    case 4: return 2;
    case 16: return 4;
    default: return 0;
  }
}

struct nifti_raw {
  geometry geom;
  std::vector<double> values;
};

inline nifti_raw read_nifti_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() >= 2 && buf[0] == 0x1F && buf[1] == 0x8B)
    fail(path + ": gzip-compressed NIfTI is not supported; decompress to .nii first");
  if (buf.size() < kNiftiVoxOffset) fail(path + ": file too short for a NIfTI-1 header");
  const auto sizeof_hdr = get_le<std::int32_t>(buf, 0);
  if (sizeof_hdr != static_cast<std::int32_t>(kNiftiHeaderSize)) {
    if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr))) == static_cast<std::int32_t>(kNiftiHeaderSize))
      fail(path + ": big-endian NIfTI is not supported");
    fail(path + ": not a NIfTI-1 file (sizeof_hdr=" + std::to_string(sizeof_hdr) + ")");
  }
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0) fail(path + ": magic is not \"n+1\" (single-file NIfTI-1 only)");

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = get_le<std::int16_t>(buf, 40 + 2 * i);
  if (dim[0] != 3) fail(path + ": dim[0]=" + std::to_string(dim[0]) + ", only 3D volumes are supported");
  for (int i = 1; i <= 3; ++i)
    if (dim[i] <= 0) fail(path + ": non-positive dim[" + std::to_string(i) + "]");
  const auto datatype = get_le<std::int16_t>(buf, 70);
  const std::size_t bytes = dtype_bytes(datatype);
  if (bytes == 0) fail(path + ": unsupported datatype code " + std::to_string(datatype));

  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = get_le<float>(buf, 76 + 4 * i);
  const auto vox_offset = static_cast<std::size_t>(get_le<float>(buf, 108));
  float slope = get_le<float>(buf, 112);
  const float inter = get_le<float>(buf, 116);
  if (slope == 0.0f) slope = 1.0f;

  geometry g;
  g.dims = {static_cast<std::size_t>(dim[3]), static_cast<std::size_t>(dim[2]), static_cast<std::size_t>(dim[1])};
  g.spacing = {pixdim[3], pixdim[2], pixdim[1]};
  if (get_le<std::int16_t>(buf, 252) > 0)
    g.origin = {get_le<float>(buf, 276), get_le<float>(buf, 272), get_le<float>(buf, 268)};
  else if (get_le<std::int16_t>(buf, 254) > 0)
    g.origin = {get_le<float>(buf, 324), get_le<float>(buf, 308), get_le<float>(buf, 292)};
  g.validate();

  const std::size_t n = g.voxels();
  if (vox_offset < kNiftiVoxOffset || buf.size() != vox_offset + n * bytes)
    fail(path + ": header/data size mismatch (expected " + std::to_string(n * bytes) + " data bytes at offset " +
         std::to_string(vox_offset) + ", file has " + std::to_string(buf.size()) + " bytes)");

  nifti_raw raw{g, std::vector<double>(n)};
  const unsigned char* p = buf.data() + vox_offset;
  const bool identity = slope == 1.0f && inter == 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    switch (datatype) {
      case 2: v = p[i]; break;
      case 4: {
        std::int16_t s;
        std::memcpy(&s, p + 2 * i, 2);
        v = s;
        break;
      }
      case 16: {
        float f;
        std::memcpy(&f, p + 4 * i, 4);
        v = f;
        break;
      }
    }
    raw.values[i] = identity ? v : static_cast<double>(slope) * v + static_cast<double>(inter);
  }
  return raw;
}

template <class T>
void write_nifti_impl(const grid<T>& v, const std::string& path, nifti_dtype dtype) {
  const auto code = static_cast<std::int16_t>(dtype);
  const std::size_t bytes = dtype_bytes(code);
  const std::size_t n = v.size();
  std::vector<unsigned char> buf(kNiftiVoxOffset + n * bytes, 0);
  put_le<std::int32_t>(buf, 0, static_cast<std::int32_t>(kNiftiHeaderSize));
  buf[38] = 'r';
  const auto& d = v.dims();
  for (int a = 0; a < 3; ++a)
    require(d[a] <= static_cast<std::size_t>(std::numeric_limits<std::int16_t>::max()), "nifti: dimension too large");
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(d[2]), static_cast<std::int16_t>(d[1]),
                               static_cast<std::int16_t>(d[0]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put_le<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  put_le<std::int16_t>(buf, 70, code);
  put_le<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * bytes));
  const float pixdim[8] = {1.0f, static_cast<float>(v.spacing()[2]), static_cast<float>(v.spacing()[1]),
                           static_cast<float>(v.spacing()[0]), 0.0f, 0.0f, 0.0f, 0.0f};
  for (int i = 0; i < 8; ++i) put_le<float>(buf, 76 + 4 * i, pixdim[i]);
  put_le<float>(buf, 108, static_cast<float>(kNiftiVoxOffset));
  put_le<float>(buf, 112, 1.0f);
  put_le<float>(buf, 116, 0.0f);
  put_le<std::uint8_t>(buf, 123, 2);  // xyzt_units: mm
  put_le<std::int16_t>(buf, 252, 1);  // qform_code: scanner
  put_le<float>(buf, 268, static_cast<float>(v.origin()[2]));
  put_le<float>(buf, 272, static_cast<float>(v.origin()[1]));
  put_le<float>(buf, 276, static_cast<float>(v.origin()[0]));
  std::memcpy(buf.data() + 344, "n+1\0", 4);

  unsigned char* p = buf.data() + kNiftiVoxOffset;
  auto src = v.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(src[i]);
    switch (dtype) {
      case nifti_dtype::uint8: {
        const double r = std::round(x);
        require(r >= 0.0 && r <= 255.0, "nifti: value " + std::to_string(x) + " out of uint8 range");
        p[i] = static_cast<unsigned char>(r);
        break;
      }
      case nifti_dtype::int16: {
        const double r = std::round(x);
        require(r >= -32768.0 && r <= 32767.0, "nifti: value " + std::to_string(x) + " out of int16 range");
        const auto s = static_cast<std::int16_t>(r);
        std::memcpy(p + 2 * i, &s, 2);
        break;
      }
      case nifti_dtype::float32: {
        const auto f = static_cast<float>(src[i]);
        std::memcpy(p + 4 * i, &f, 4);
        break;
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) fail("write failed: " + path);
}

}  // namespace detail

inline volume read_nifti(const std::string& path) {
  auto raw = detail::read_nifti_raw(path);
  std::vector<float> data(raw.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(raw.values[i]);
  return volume(raw.geom, std::move(data));
}

/// Reads a binary label volume; any value other than 0 or 1 is an error.
inline mask read_nifti_mask(const std::string& path) {
  auto raw = detail::read_nifti_raw(path);
  std::vector<std::uint8_t> data(raw.values.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double v = raw.values[i];
    detail::require(v == 0.0 || v == 1.0, path + ": mask contains label " + std::to_string(v) + " (expected 0/1)");
    data[i] = static_cast<std::uint8_t>(v);
  }
  return mask(raw.geom, std::move(data));
}

inline void write_nifti(const volume& v, const std::string& path, nifti_dtype dtype = nifti_dtype::float32) {
  detail::write_nifti_impl(v, path, dtype);
}

inline void write_nifti(const mask& m, const std::string& path, nifti_dtype dtype = nifti_dtype::uint8) {
  detail::write_nifti_impl(m, path, dtype);
}

}  // namespace phasefuse
