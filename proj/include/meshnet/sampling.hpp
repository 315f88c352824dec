#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/volume.hpp"

namespace meshnet {

enum class SampleMode { nonoverlap, gaussian };

/// Subvolume sampler settings. The Gaussian center/std defaults are the
/// label-mass center of the training set used for the atlas model; the
/// nonoverlap grid guarantees whole-volume coverage regardless.
struct SamplerConfig {
  std::array<int, 3> volume_dims{256, 256, 256};
  int side = 38;
  SampleMode mode = SampleMode::nonoverlap;
  std::array<double, 3> gaussian_mean{127.0, 145.0, 127.0};
  std::array<double, 3> gaussian_std{60.0, 60.0, 60.0};
  int count = 1024;
  std::uint64_t seed = 0;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (volume_dims[a] < 1)
        throw ConfigError("sampler: volume dims must be positive");
      if (side < 1 || side > volume_dims[a])
        throw ConfigError("sampler: side must be in [1, min volume dim]");
      if (gaussian_std[a] <= 0)
        throw ConfigError("sampler: gaussian std must be positive");
    }
  }
};

using Corner = std::array<int, 3>;

/// Stride-`side` tiling plus, when a dim is not a multiple of side, one
/// extra window clamped to dim - side, so every voxel is covered. Corners
/// come out in z-major order (z slowest).
inline std::vector<Corner> grid_nonoverlap(const SamplerConfig& cfg) {
  cfg.validate();
  std::array<std::vector<int>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    for (int c = 0; c + cfg.side <= cfg.volume_dims[a]; c += cfg.side)
      axis[a].push_back(c);
    const int last = axis[a].back();
    if (last + cfg.side < cfg.volume_dims[a])
      axis[a].push_back(cfg.volume_dims[a] - cfg.side);
  }
  std::vector<Corner> corners;
  corners.reserve(axis[0].size() * axis[1].size() * axis[2].size());
  for (int cz : axis[2])
    for (int cy : axis[1])
      for (int cx : axis[0]) corners.push_back({cx, cy, cz});
  return corners;
}

/// Corner of Gaussian draw `index` in stream cfg.seed: window center drawn
/// per axis from N(mean, std), rounded to the nearest voxel, converted to
/// the minimum-index corner and clamped into range. Draw i, axis a
/// consumes normal deviate i*3 + a, so corners are a pure function of
/// (cfg, seed, index) and streams can be split across workers.
inline Corner gaussian_corner(const SamplerConfig& cfg, std::uint64_t index) {
  Corner corner;
  const int half = cfg.side / 2;
  for (int a = 0; a < 3; ++a) {
    const double center =
        cfg.gaussian_mean[a] +
        cfg.gaussian_std[a] * normal_at(cfg.seed, index * 3 + a);
    int c = static_cast<int>(std::llround(center)) - half;
    const int hi = cfg.volume_dims[a] - cfg.side;
    c = std::max(0, std::min(hi, c));
    corner[a] = c;
  }
  return corner;
}

/// `cfg.count` corners from the head of the Gaussian stream.
inline std::vector<Corner> gaussian_sample(const SamplerConfig& cfg) {
  cfg.validate();
  if (cfg.count < 1) throw ConfigError("sampler: count must be >= 1");
  std::vector<Corner> corners(cfg.count);
  for (int i = 0; i < cfg.count; ++i)
    corners[i] = gaussian_corner(cfg, static_cast<std::uint64_t>(i));
  return corners;
}

/// Corner list plus the extracted side^3 windows, one flat slab per corner.
template <typename T>
struct SubvolumeBatch {
  int side = 0;
  std::vector<Corner> corners;
  std::vector<T> patches;  // corners.size() * side^3, x fastest within each

  const T* patch(std::size_t i) const {
    return patches.data() + i * static_cast<std::size_t>(side) * side * side;
  }
};

template <typename T>
void check_corner(const VolumeT<T>& v, const Corner& c, int side) {
  for (int a = 0; a < 3; ++a)
    if (c[a] < 0 || c[a] + side > v.dims[a])
      throw ShapeError("subvolume corner (" + std::to_string(c[0]) + "," +
                       std::to_string(c[1]) + "," + std::to_string(c[2]) +
                       ") out of bounds for side " + std::to_string(side));
}

template <typename T>
SubvolumeBatch<T> extract(const VolumeT<T>& v, const std::vector<Corner>& corners,
                          int side) {
  SubvolumeBatch<T> batch;
  batch.side = side;
  batch.corners = corners;
  batch.patches.resize(corners.size() * static_cast<std::size_t>(side) * side * side);
  std::size_t o = 0;
  for (const Corner& c : corners) {
    check_corner(v, c, side);
    for (int z = 0; z < side; ++z)
      for (int y = 0; y < side; ++y) {
        const T* src = &v.at(c[0], c[1] + y, c[2] + z);
        std::copy(src, src + side, batch.patches.data() + o);
        o += side;
      }
  }
  return batch;
}

/// Accumulates one side^3 patch into the target grid at `corner`.
template <typename U, typename T>
void scatter_add(VolumeT<U>& target, const Corner& corner, const T* patch,
                 int side) {
  check_corner(target, corner, side);
  std::size_t o = 0;
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y) {
      U* dst = &target.at(corner[0], corner[1] + y, corner[2] + z);
      for (int x = 0; x < side; ++x) dst[x] += static_cast<U>(patch[o + x]);
      o += side;
    }
}

template <typename U, typename T>
void scatter_add(VolumeT<U>& target, const SubvolumeBatch<T>& batch) {
  for (std::size_t i = 0; i < batch.corners.size(); ++i)
    scatter_add(target, batch.corners[i], batch.patch(i), batch.side);
}

/// How many windows of the corner list cover each voxel.
inline LabelVolume coverage_map(const std::array<int, 3>& dims,
                                const std::vector<Corner>& corners, int side) {
  LabelVolume cov(dims, VolumeKind::labels, 0);
  std::vector<std::int32_t> ones(static_cast<std::size_t>(side) * side * side, 1);
  for (const Corner& c : corners) scatter_add(cov, c, ones.data(), side);
  return cov;
}

}  // namespace meshnet
