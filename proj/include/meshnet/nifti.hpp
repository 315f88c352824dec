#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/volume.hpp"

namespace meshnet {
namespace nifti {

// Single-file uncompressed NIfTI-1 (.nii), little-endian, datatypes
// uint8/int16/int32/float32. Orientation and affine fields are carried
// through verbatim but never interpreted; reslicing is someone else's job.

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;

struct Header {
  std::int32_t sizeof_hdr = 348;     // offset 0
  char data_type[10] = {};           // 4
  char db_name[18] = {};             // 14
  std::int32_t extents = 0;          // 32
  std::int16_t session_error = 0;    // 36
  char regular = 'r';                // 38
  char dim_info = 0;                 // 39
  std::int16_t dim[8] = {};          // 40
  float intent_p1 = 0;               // 56
  float intent_p2 = 0;               // 60
  float intent_p3 = 0;               // 64
  std::int16_t intent_code = 0;      // 68
  std::int16_t datatype = 0;         // 70
  std::int16_t bitpix = 0;           // 72
  std::int16_t slice_start = 0;      // 74
  float pixdim[8] = {};              // 76
  float vox_offset = 352;            // 108
  float scl_slope = 0;               // 112
  float scl_inter = 0;               // 116
  std::int16_t slice_end = 0;        // 120
  char slice_code = 0;               // 122
  char xyzt_units = 0;               // 123
  float cal_max = 0;                 // 124
  float cal_min = 0;                 // 128
  float slice_duration = 0;          // 132
  float toffset = 0;                 // 136
  std::int32_t glmax = 0;            // 140
  std::int32_t glmin = 0;            // 144
  char descrip[80] = {};             // 148
  char aux_file[24] = {};            // 228
  std::int16_t qform_code = 0;       // 252
  std::int16_t sform_code = 0;       // 254
  float quatern_b = 0;               // 256
  float quatern_c = 0;               // 260
  float quatern_d = 0;               // 264
  float qoffset_x = 0;               // 268
  float qoffset_y = 0;               // 272
  float qoffset_z = 0;               // 276
  float srow_x[4] = {};              // 280
  float srow_y[4] = {};              // 296
  float srow_z[4] = {};              // 312
  char intent_name[16] = {};         // 328
  char magic[4] = {'n', '+', '1', 0};  // 344
};
static_assert(sizeof(Header) == 348, "NIfTI-1 header must pack to 348 bytes");

namespace detail {

template <typename Disk, typename T>
std::vector<T> convert_section(std::ifstream& f, std::size_t n,
                               std::size_t data_offset, const std::string& path) {
  std::vector<Disk> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(n * sizeof(Disk)));
  if (static_cast<std::size_t>(f.gcount()) != n * sizeof(Disk)) {
    std::ostringstream os;
    os << path << ": truncated data section at byte offset "
       << data_offset + static_cast<std::size_t>(f.gcount()) << ", expected "
       << n * sizeof(Disk) << " data bytes";
    throw FormatError(os.str());
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(buf[i]);
  return out;
}

inline std::int16_t smallest_label_dtype(std::int32_t lo, std::int32_t hi) {
  if (lo >= 0 && hi <= 255) return kDtUint8;
  if (lo >= -32768 && hi <= 32767) return kDtInt16;
  return kDtInt32;
}

}  // namespace detail

template <typename T>
VolumeT<T> load(const std::string& path, VolumeKind kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": file not found");

  Header h;
  f.read(reinterpret_cast<char*>(&h), sizeof(h));
  if (f.gcount() != sizeof(h))
    throw FormatError(path + ": malformed header at byte offset 0, file shorter than 348 bytes");

  if (h.sizeof_hdr != 348) {
    std::ostringstream os;
    os << path << ": malformed header at byte offset 0, sizeof_hdr = "
       << h.sizeof_hdr << " (expected 348";
    if (h.sizeof_hdr == 1543569408) os << "; file looks big-endian, unsupported";
    os << ")";
    throw FormatError(os.str());
  }
  if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1' &&
        h.magic[3] == 0))
    throw FormatError(path +
                      ": malformed header at byte offset 344, magic is not "
                      "'n+1' (only single-file .nii supported)");
  if (h.dim[0] < 3 || h.dim[0] > 7)
    throw FormatError(path + ": malformed header at byte offset 40, dim[0] out of range");
  for (int i = 4; i <= h.dim[0]; ++i)
    if (h.dim[i] > 1)
      throw FormatError(path + ": only single 3-d volumes supported, dim[" +
                        std::to_string(i) + "] > 1");

  VolumeT<T> v;
  v.kind = kind;
  for (int a = 0; a < 3; ++a) {
    v.dims[a] = h.dim[a + 1];
    v.spacing[a] = h.pixdim[a + 1];
  }
  VolumeT<T>::check_dims(v.dims);
  v.nifti_header.resize(sizeof(Header));
  std::memcpy(v.nifti_header.data(), &h, sizeof(Header));

  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (h.vox_offset < 352)
    throw FormatError(path + ": malformed header at byte offset 108, vox_offset < 352");
  f.seekg(static_cast<std::streamoff>(offset));
  const std::size_t n = v.voxel_count();
  switch (h.datatype) {
    case kDtUint8:
      v.data = detail::convert_section<std::uint8_t, T>(f, n, offset, path);
      break;
    case kDtInt16:
      v.data = detail::convert_section<std::int16_t, T>(f, n, offset, path);
      break;
    case kDtInt32:
      v.data = detail::convert_section<std::int32_t, T>(f, n, offset, path);
      break;
    case kDtFloat32:
      v.data = detail::convert_section<float, T>(f, n, offset, path);
      break;
    default: {
      std::ostringstream os;
      os << path << ": unsupported datatype " << h.datatype
         << " at byte offset 70 (supported: uint8=2, int16=4, int32=8, float32=16)";
      throw FormatError(os.str());
    }
  }
  return v;
}

namespace detail {

template <typename Disk, typename T>
void write_section(std::ofstream& f, const std::vector<T>& data) {
  std::vector<Disk> buf(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    buf[i] = static_cast<Disk>(data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(Disk)));
}

template <typename T>
std::int16_t pick_dtype(const VolumeT<T>& v) {
  if (v.kind == VolumeKind::intensity) return kDtFloat32;
  std::int64_t lo = 0, hi = 0;
  for (const auto& x : v.data) {
    lo = std::min<std::int64_t>(lo, static_cast<std::int64_t>(x));
    hi = std::max<std::int64_t>(hi, static_cast<std::int64_t>(x));
  }
  return smallest_label_dtype(static_cast<std::int32_t>(lo),
                              static_cast<std::int32_t>(hi));
}

}  // namespace detail

template <typename T>
void write(const VolumeT<T>& v, const std::string& path) {
  Header h;
  if (v.nifti_header.size() == sizeof(Header))
    std::memcpy(&h, v.nifti_header.data(), sizeof(Header));
  else
    std::snprintf(h.descrip, sizeof(h.descrip), "meshnet");

  h.sizeof_hdr = 348;
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    h.dim[a + 1] = static_cast<std::int16_t>(v.dims[a]);
    h.pixdim[a + 1] = static_cast<float>(v.spacing[a]);
  }
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = detail::pick_dtype(v);
  switch (h.datatype) {
    case kDtUint8: h.bitpix = 8; break;
    case kDtInt16: h.bitpix = 16; break;
    default: h.bitpix = 32; break;
  }
  h.vox_offset = 352;
  h.magic[0] = 'n'; h.magic[1] = '+'; h.magic[2] = '1'; h.magic[3] = 0;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(&h), sizeof(h));
  const char ext[4] = {0, 0, 0, 0};  // no header extensions
  f.write(ext, 4);
  switch (h.datatype) {
    case kDtUint8: detail::write_section<std::uint8_t>(f, v.data); break;
    case kDtInt16: detail::write_section<std::int16_t>(f, v.data); break;
    case kDtInt32: detail::write_section<std::int32_t>(f, v.data); break;
    default: detail::write_section<float>(f, v.data); break;
  }
  if (!f) throw IoError(path + ": write failed");
}

}  // namespace nifti

enum class VolumeFormat { nifti1, raw };

inline VolumeFormat format_from_path(const std::string& path) {
  return path.size() >= 4 && path.substr(path.size() - 4) == ".nii"
             ? VolumeFormat::nifti1
             : VolumeFormat::raw;
}

template <typename T>
VolumeT<T> load_volume(const std::string& path, VolumeFormat format,
                       VolumeKind kind) {
  if (format == VolumeFormat::nifti1) return nifti::load<T>(path, kind);
  VolumeT<T> v = load_volume_raw<T>(path);
  v.kind = kind;
  return v;
}

template <typename T>
void write_volume(const VolumeT<T>& v, const std::string& path,
                  VolumeFormat format) {
  if (format == VolumeFormat::nifti1)
    nifti::write(v, path);
  else
    write_volume_raw(v, path);
}

}  // namespace meshnet
