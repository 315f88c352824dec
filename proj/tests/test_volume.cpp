#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "meshnet/labels.hpp"
#include "meshnet/nifti.hpp"
#include "meshnet/volume.hpp"
#include "oracles.hpp"

using namespace meshnet;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("volume");

TEST_CASE("minmax_normalize maps endpoints to {0, 1}") {
  Volume v({3, 1, 1}, VolumeKind::intensity);
  v.data = {0.0f, 5.0f, 10.0f};
  auto out = minmax_normalize(v);
  CHECK(out.data[0] == 0.0f);
  CHECK(out.data[1] == 0.5f);
  CHECK(out.data[2] == 1.0f);
}

TEST_CASE("minmax_normalize is idempotent and order preserving") {
  Rng rng(2);
  Volume v({8, 8, 8}, VolumeKind::intensity);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-40.0, 75.0));
  auto once = minmax_normalize(v);
  auto twice = minmax_normalize(once);
  float mn = 2, mx = -1;
  for (std::size_t i = 0; i < once.data.size(); ++i) {
    CHECK(std::abs(once.data[i] - twice.data[i]) <= 1e-7f);
    mn = std::min(mn, once.data[i]);
    mx = std::max(mx, once.data[i]);
  }
  CHECK(mn == 0.0f);
  CHECK(mx == 1.0f);
  // rank order preserved
  for (int trial = 0; trial < 200; ++trial) {
    const auto i = rng.below(v.data.size()), j = rng.below(v.data.size());
    CHECK((v.data[i] < v.data[j]) == (once.data[i] < once.data[j]));
  }
}

TEST_CASE("minmax_normalize of a constant volume returns zeros") {
  Volume v({2, 2, 2}, VolumeKind::intensity, 7.5f);
  auto out = minmax_normalize(v);
  for (auto x : out.data) CHECK(x == 0.0f);
}

TEST_CASE("pad_to_cube centers and preserves content") {
  Volume same({4, 4, 4}, VolumeKind::intensity, 1.0f);
  auto unchanged = pad_to_cube(same, 4);
  CHECK(unchanged.data == same.data);

  Volume small({2, 2, 2}, VolumeKind::intensity, 1.0f);
  auto padded = pad_to_cube(small, 4);
  REQUIRE(padded.dims == std::array<int, 3>{4, 4, 4});
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const bool inside = x >= 1 && x <= 2 && y >= 1 && y <= 2 && z >= 1 && z <= 2;
        CHECK(padded.at(x, y, z) == (inside ? 1.0f : 0.0f));
      }

  // checksum: sum of voxels preserved for random input
  Rng rng(3);
  Volume r({3, 5, 4}, VolumeKind::intensity);
  double sum = 0;
  for (auto& v : r.data) {
    v = static_cast<float>(rng.uniform(0.0, 1.0));
    sum += v;
  }
  auto rp = pad_to_cube(r, 9);
  double padded_sum = 0;
  for (auto v : rp.data) padded_sum += v;
  CHECK(padded_sum == doctest::Approx(sum).epsilon(1e-6));

  Volume big({10, 4, 4}, VolumeKind::intensity);
  CHECK_THROWS_AS(pad_to_cube(big, 9), ShapeError);
}

TEST_CASE("raw round trip is bit exact") {
  Rng rng(4);
  Volume v({2, 2, 2}, VolumeKind::intensity);
  v.spacing = {1.0, 1.25, 1.5};
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto path = temp_path("mn_test_vol.raw");
  write_volume_raw(v, path);
  auto back = load_volume_raw<float>(path);
  CHECK(back.dims == v.dims);
  CHECK(back.spacing == v.spacing);
  CHECK(back.kind == VolumeKind::intensity);
  CHECK(std::memcmp(back.data.data(), v.data.data(),
                    v.data.size() * sizeof(float)) == 0);
  std::remove(path.c_str());
  std::remove((path + ".meta").c_str());
}

TEST_CASE("raw loader reports missing and malformed sidecars") {
  CHECK_THROWS_AS(load_volume_raw<float>(temp_path("mn_no_such_file.raw")),
                  IoError);
  const auto path = temp_path("mn_trunc.raw");
  {
    std::ofstream data(path, std::ios::binary);
    const float one = 1.0f;
    data.write(reinterpret_cast<const char*>(&one), sizeof(one));
    std::ofstream meta(path + ".meta");
    meta << "dims 2 2 2\nspacing 1 1 1\ndtype float32\nkind intensity\n";
  }
  CHECK_THROWS_AS(load_volume_raw<float>(path), FormatError);
  std::remove(path.c_str());
  std::remove((path + ".meta").c_str());
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("nifti");

TEST_CASE("nifti round trip is value exact for intensity and labels") {
  Rng rng(5);
  Volume v({16, 16, 16}, VolumeKind::intensity);
  v.spacing = {1.0, 1.0, 1.0};
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 1.0));
  const auto path = temp_path("mn_test.nii");
  nifti::write(v, path);
  auto back = nifti::load<float>(path, VolumeKind::intensity);
  CHECK(back.dims == v.dims);
  CHECK(std::memcmp(back.data.data(), v.data.data(),
                    v.data.size() * sizeof(float)) == 0);

  LabelVolume lv({5, 4, 3}, VolumeKind::labels);
  for (auto& x : lv.data) x = static_cast<std::int32_t>(rng.below(50));
  nifti::write(lv, path);
  auto lb = nifti::load<std::int32_t>(path, VolumeKind::labels);
  CHECK(lb.data == lv.data);
  // 50 classes fit in uint8 on disk
  std::ifstream f(path, std::ios::binary);
  nifti::Header h;
  f.read(reinterpret_cast<char*>(&h), sizeof(h));
  CHECK(h.datatype == nifti::kDtUint8);
  CHECK(h.vox_offset == 352);
  std::remove(path.c_str());
}

TEST_CASE("nifti header fields survive a load/save cycle") {
  Volume v({4, 4, 4}, VolumeKind::intensity, 0.5f);
  const auto path = temp_path("mn_affine.nii");
  nifti::write(v, path);
  auto loaded = nifti::load<float>(path, VolumeKind::intensity);
  REQUIRE(loaded.nifti_header.size() == 348);
  // poke an orientation field, write, reload, expect it carried through
  nifti::Header h;
  std::memcpy(&h, loaded.nifti_header.data(), sizeof(h));
  h.qform_code = 1;
  h.quatern_b = 0.25f;
  std::memcpy(loaded.nifti_header.data(), &h, sizeof(h));
  nifti::write(loaded, path);
  auto again = nifti::load<float>(path, VolumeKind::intensity);
  std::memcpy(&h, again.nifti_header.data(), sizeof(h));
  CHECK(h.qform_code == 1);
  CHECK(h.quatern_b == 0.25f);
  std::remove(path.c_str());
}

TEST_CASE("nifti loader rejects bad headers with byte offsets") {
  const auto path = temp_path("mn_bad.nii");
  // sizeof_hdr != 348
  {
    std::ofstream f(path, std::ios::binary);
    nifti::Header h;
    h.sizeof_hdr = 347;
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
  }
  CHECK_THROWS_WITH_AS(nifti::load<float>(path, VolumeKind::intensity),
                       doctest::Contains("byte offset 0"), FormatError);
  // unsupported datatype
  {
    std::ofstream f(path, std::ios::binary);
    nifti::Header h;
    h.dim[0] = 3;
    h.dim[1] = h.dim[2] = h.dim[3] = 2;
    h.datatype = 64;  // float64, outside the supported subset
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
  }
  CHECK_THROWS_WITH_AS(nifti::load<float>(path, VolumeKind::intensity),
                       doctest::Contains("unsupported datatype"), FormatError);
  // truncated data section
  {
    std::ofstream f(path, std::ios::binary);
    nifti::Header h;
    h.dim[0] = 3;
    h.dim[1] = h.dim[2] = h.dim[3] = 4;
    h.datatype = nifti::kDtFloat32;
    h.bitpix = 32;
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char pad[4] = {};
    f.write(pad, 4);
    const float x = 1.0f;
    f.write(reinterpret_cast<const char*>(&x), sizeof(x));  // 1 of 64 voxels
  }
  CHECK_THROWS_WITH_AS(nifti::load<float>(path, VolumeKind::intensity),
                       doctest::Contains("truncated"), FormatError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(nifti::load<float>(temp_path("mn_absent.nii"),
                                     VolumeKind::intensity),
                  IoError);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("labels");

TEST_CASE("label map load, apply, and error paths") {
  const auto path = temp_path("mn_map.txt");
  {
    std::ofstream f(path);
    f << "# aseg-style ids to contiguous classes\n";
    f << "0 0 background\n10 1 left_thalamus\n49 2 right_thalamus\n";
  }
  auto map = LabelMap::load(path);
  CHECK(map.num_classes() == 3);
  CHECK(map.names[1] == "left_thalamus");

  LabelVolume v({2, 1, 1}, VolumeKind::labels);
  v.data = {10, 49};
  auto mapped = map.apply(v);
  CHECK(mapped.data == std::vector<std::int32_t>{1, 2});

  v.data = {10, 77};
  CHECK_THROWS_AS(map.apply(v), FormatError);
  auto lenient = map.apply(v, false);
  CHECK(lenient.data == std::vector<std::int32_t>{1, 0});
  std::remove(path.c_str());
}

TEST_CASE("label mass center of a known blob") {
  LabelVolume v({8, 8, 8}, VolumeKind::labels, 0);
  v.at(2, 3, 4) = 1;
  v.at(4, 3, 4) = 2;
  auto c = label_mass_center({&v});
  CHECK(c[0] == doctest::Approx(3.0));
  CHECK(c[1] == doctest::Approx(3.0));
  CHECK(c[2] == doctest::Approx(4.0));
}

TEST_SUITE_END();
