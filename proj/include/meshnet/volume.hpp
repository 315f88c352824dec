#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"

namespace meshnet {

enum class VolumeKind { intensity, labels };

/// 3-d scalar grid with voxel spacing. Data is stored x fastest-varying,
/// then y, then z; every module in the library assumes this order.
/// Volumes are immutable by convention once built: pipeline code treats
/// them as read-only and shares them freely across threads.
template <typename T>
struct VolumeT {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<T> data;
  VolumeKind kind = VolumeKind::intensity;
  /// Raw 348-byte NIfTI-1 header captured at load time, written back
  /// verbatim (minus geometry/datatype fields) on save. Empty for volumes
  /// made in memory.
  std::vector<std::uint8_t> nifti_header;

  VolumeT() = default;
  VolumeT(std::array<int, 3> d, VolumeKind k, T fill = T(0))
      : dims(d), kind(k) {
    check_dims(d);
    data.assign(voxel_count(), fill);
  }

  static void check_dims(const std::array<int, 3>& d) {
    for (int v : d)
      if (v <= 0) throw ShapeError("volume dimensions must be positive");
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  T& at(int x, int y, int z) { return data[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data[index(x, y, z)]; }

  template <typename U>
  VolumeT<U> cast() const {
    VolumeT<U> out;
    out.dims = dims;
    out.spacing = spacing;
    out.kind = kind;
    out.nifti_header = nifti_header;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Volume = VolumeT<float>;
using LabelVolume = VolumeT<std::int32_t>;

/// Rescales an intensity volume to [0, 1]. A constant volume maps to all
/// zeros (with a warning on stderr) instead of failing, so batch pipelines
/// survive degenerate inputs.
inline Volume minmax_normalize(const Volume& v) {
  if (v.kind != VolumeKind::intensity)
    throw ShapeError("minmax_normalize expects an intensity volume");
  if (v.data.empty()) throw ShapeError("minmax_normalize on empty volume");
  const auto [mn_it, mx_it] = std::minmax_element(v.data.begin(), v.data.end());
  const float mn = *mn_it, mx = *mx_it;
  Volume out = v;
  if (mx == mn) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    std::cerr << "meshnet: warning: constant volume in minmax_normalize, "
                 "output set to zeros\n";
    return out;
  }
  const float scale = 1.0f / (mx - mn);
  for (auto& x : out.data) x = (x - mn) * scale;
  return out;
}

/// Centers the volume inside a side^3 cube of zeros. Offset per axis is
/// floor((side - dim) / 2).
template <typename T>
VolumeT<T> pad_to_cube(const VolumeT<T>& v, int side) {
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] > side) {
      std::ostringstream os;
      os << "pad_to_cube: dim " << a << " (" << v.dims[a]
         << ") exceeds target side " << side;
      throw ShapeError(os.str());
    }
  VolumeT<T> out({side, side, side}, v.kind);
  out.spacing = v.spacing;
  out.nifti_header = v.nifti_header;
  const int ox = (side - v.dims[0]) / 2;
  const int oy = (side - v.dims[1]) / 2;
  const int oz = (side - v.dims[2]) / 2;
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y) {
      const T* src = &v.at(0, y, z);
      T* dst = &out.at(ox, y + oy, z + oz);
      std::copy(src, src + v.dims[0], dst);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Raw format: a contiguous little-endian element buffer next to a text
// sidecar "<path>.meta" declaring dims, spacing, dtype and kind.
// ---------------------------------------------------------------------------

namespace detail {

inline const char* dtype_name(float) { return "float32"; }
inline const char* dtype_name(std::int32_t) { return "int32"; }
inline const char* dtype_name(std::int16_t) { return "int16"; }
inline const char* dtype_name(std::uint8_t) { return "uint8"; }

template <typename Disk, typename T>
std::vector<T> read_elements(std::ifstream& f, std::size_t n,
                             const std::string& path) {
  std::vector<Disk> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(n * sizeof(Disk)));
  if (static_cast<std::size_t>(f.gcount()) != n * sizeof(Disk)) {
    std::ostringstream os;
    os << path << ": truncated data section at byte offset " << f.gcount()
       << ", expected " << n * sizeof(Disk) << " bytes";
    throw FormatError(os.str());
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(buf[i]);
  return out;
}

}  // namespace detail

template <typename T>
void write_volume_raw(const VolumeT<T>& v, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(v.data.data()),
          static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (!f) throw IoError(path + ": write failed");
  std::ofstream meta(path + ".meta");
  if (!meta) throw IoError(path + ".meta: cannot open for writing");
  meta << "dims " << v.dims[0] << " " << v.dims[1] << " " << v.dims[2] << "\n";
  meta << "spacing " << v.spacing[0] << " " << v.spacing[1] << " "
       << v.spacing[2] << "\n";
  meta << "dtype " << detail::dtype_name(T{}) << "\n";
  meta << "kind " << (v.kind == VolumeKind::labels ? "labels" : "intensity")
       << "\n";
}

template <typename T>
VolumeT<T> load_volume_raw(const std::string& path) {
  std::ifstream meta(path + ".meta");
  if (!meta) throw IoError(path + ".meta: sidecar metadata file not found");
  VolumeT<T> v;
  std::string dtype = "float32";
  std::string line;
  while (std::getline(meta, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "dims")
      is >> v.dims[0] >> v.dims[1] >> v.dims[2];
    else if (key == "spacing")
      is >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
    else if (key == "dtype")
      is >> dtype;
    else if (key == "kind") {
      std::string k;
      is >> k;
      v.kind = (k == "labels") ? VolumeKind::labels : VolumeKind::intensity;
    } else if (!key.empty() && key[0] != '#') {
      throw FormatError(path + ".meta: unknown key '" + key + "'");
    }
    if (!is && !key.empty() && key[0] != '#')
      throw FormatError(path + ".meta: malformed line '" + line + "'");
  }
  VolumeT<T>::check_dims(v.dims);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": file not found");
  const std::size_t n = v.voxel_count();
  if (dtype == "float32")
    v.data = detail::read_elements<float, T>(f, n, path);
  else if (dtype == "int32")
    v.data = detail::read_elements<std::int32_t, T>(f, n, path);
  else if (dtype == "int16")
    v.data = detail::read_elements<std::int16_t, T>(f, n, path);
  else if (dtype == "uint8")
    v.data = detail::read_elements<std::uint8_t, T>(f, n, path);
  else
    throw FormatError(path + ".meta: unsupported dtype '" + dtype + "'");
  return v;
}

/// Computes the label-mass center of a set of label volumes: the mean
/// coordinate of all nonzero-label voxels. Used to re-derive the Gaussian
/// sampler center from a training set.
inline std::array<double, 3> label_mass_center(
    const std::vector<const LabelVolume*>& vols) {
  double sx = 0, sy = 0, sz = 0, n = 0;
  for (const auto* v : vols) {
    for (int z = 0; z < v->dims[2]; ++z)
      for (int y = 0; y < v->dims[1]; ++y)
        for (int x = 0; x < v->dims[0]; ++x)
          if (v->at(x, y, z) != 0) {
            sx += x;
            sy += y;
            sz += z;
            n += 1;
          }
  }
  if (n == 0) throw ShapeError("label_mass_center: no nonzero labels");
  return {sx / n, sy / n, sz / n};
}

}  // namespace meshnet
