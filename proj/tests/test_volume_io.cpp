#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "subseg/npz.hpp"
#include "subseg/rng.hpp"
#include "subseg/volume.hpp"

using namespace subseg;
namespace fs = std::filesystem;

namespace {

// Independent percentile oracle: sort and linearly interpolate at
// rank pct/100 * (n-1).
double oracle_pct(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double r = pct / 100.0 * double(v.size() - 1);
  const size_t lo = size_t(r);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = r - double(lo);
  return v[lo] + f * (v[hi] - v[lo]);
}

struct TempDir {
  fs::path p;
  TempDir() {
    p = fs::temp_directory_path() / ("subseg_io_" + std::to_string(::getpid()));
    fs::create_directories(p);
  }
  ~TempDir() { fs::remove_all(p); }
  std::string file(const std::string& name) const { return (p / name).string(); }
};

MultiModalVolume ramp_volume(long d, long h, long w, long m) {
  MultiModalVolume vol;
  vol.intensities = Tensor({d, h, w, m});
  for (size_t i = 0; i < vol.intensities.data.size(); ++i)
    vol.intensities.data[i] = double(i % 251);
  return vol;
}

CaseArchive random_case(Rng& rng) {
  CaseArchive a;
  const long d = 1 + long(rng.below(4));
  const long h = 1 + long(rng.below(6));
  const long w = 1 + long(rng.below(6));
  const long m = rng.below(2) ? 4 : 1;
  a.img_dims = {d, h, w, m};
  a.imgs.resize(size_t(d * h * w * m));
  for (auto& v : a.imgs) v = uint8_t(rng.below(256));
  a.gts.resize(size_t(d * h * w));
  const uint8_t labels[4] = {0, 1, 2, 4};
  for (auto& v : a.gts) v = labels[rng.below(4)];
  a.spacing = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)};
  return a;
}

}  // namespace

TEST_CASE("percentile clipping matches the sort-and-interpolate oracle") {
  Rng rng(202);
  for (int trial = 0; trial < 100; ++trial) {
    const long n = 20 + long(rng.below(400));
    Tensor t({n});
    for (double& v : t.data) v = rng.uniform(-80.0, 180.0);
    const double lo = rng.uniform(0.0, 30.0);
    const double hi = rng.uniform(60.0, 100.0);

    const Tensor out = clip_percentiles(t, lo, hi);
    const double plo = oracle_pct(t.data, lo);
    const double phi = oracle_pct(t.data, hi);
    for (long i = 0; i < n; ++i) {
      const double want = std::min(std::max(t.data[size_t(i)], plo), phi);
      CHECK(std::fabs(out.data[size_t(i)] - want) <= 1e-9);
      CHECK(out.data[size_t(i)] >= plo - 1e-9);
      CHECK(out.data[size_t(i)] <= phi + 1e-9);
    }
  }
}

TEST_CASE("percentile clipping fixed cases") {
  Tensor flat({1000});
  for (long i = 0; i < 1000; ++i) flat.data[size_t(i)] = double(i);
  Rng rng(7);
  rng.shuffle(flat.data);

  SUBCASE("full band is the identity") {
    const Tensor out = clip_percentiles(flat, 0.0, 100.0);
    CHECK(out.data == flat.data);
  }
  SUBCASE("half-percent band pins the known bounds") {
    const Tensor out = clip_percentiles(flat, 0.5, 99.5);
    const auto [mn, mx] = std::minmax_element(out.data.begin(), out.data.end());
    CHECK(*mn == doctest::Approx(4.995).epsilon(1e-12));
    CHECK(*mx == doctest::Approx(994.005).epsilon(1e-12));
    // interior values pass through
    for (size_t i = 0; i < out.data.size(); ++i)
      if (flat.data[i] >= 5.0 && flat.data[i] <= 994.0) CHECK(out.data[i] == flat.data[i]);
  }
  SUBCASE("constant volume is unchanged") {
    const Tensor c = Tensor::full({3, 4, 5}, 7.0);
    const Tensor out = clip_percentiles(c);
    CHECK(out.data == c.data);
  }
  SUBCASE("ordering is preserved") {
    const Tensor out = clip_percentiles(flat, 10.0, 90.0);
    for (size_t i = 0; i < out.data.size(); ++i)
      for (size_t j = 0; j < out.data.size(); j += 97)
        if (flat.data[i] <= flat.data[j]) CHECK(out.data[i] <= out.data[j]);
  }
  SUBCASE("invalid inputs throw") {
    CHECK_THROWS_AS(clip_percentiles(Tensor{}), std::invalid_argument);
    CHECK_THROWS_AS(clip_percentiles(flat, 60.0, 40.0), std::invalid_argument);
    CHECK_THROWS_AS(clip_percentiles(flat, -1.0, 50.0), std::invalid_argument);
  }
}

TEST_CASE("minmax normalization endpoints, idempotence, rank order") {
  SUBCASE("hand-computed values") {
    const Tensor t = Tensor::from({4}, {0.0, 1.0, 2.0, 4.0});
    const Tensor out = minmax_normalize(t);
    CHECK(out.data[0] == doctest::Approx(0.0));
    CHECK(out.data[1] == doctest::Approx(63.75));
    CHECK(out.data[2] == doctest::Approx(127.5));
    CHECK(out.data[3] == doctest::Approx(255.0));
  }
  SUBCASE("constant maps to zeros") {
    const Tensor out = minmax_normalize(Tensor::full({2, 3}, 42.0));
    for (double v : out.data) CHECK(v == 0.0);
  }
  SUBCASE("the maximum maps to exactly 255 even when the affine map rounds up") {
    // 0.7 * (255 / 0.7) rounds to 255.00000000000003 in double arithmetic.
    const Tensor out = minmax_normalize(Tensor::from({2}, {0.0, 0.7}));
    CHECK(out.data[0] == 0.0);
    CHECK(out.data[1] == 255.0);
  }
  SUBCASE("random volumes: range, order, idempotence") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor t({6, 5, 4});
      for (double& v : t.data) v = rng.uniform(-500.0, 500.0);
      const Tensor a = minmax_normalize(t);
      const auto [mn, mx] = std::minmax_element(a.data.begin(), a.data.end());
      CHECK(*mn == 0.0);
      CHECK(*mx == 255.0);
      const Tensor b = minmax_normalize(a);
      for (size_t i = 0; i < a.data.size(); ++i)
        CHECK(b.data[i] == doctest::Approx(a.data[i]).epsilon(1e-9));
      for (size_t i = 1; i < t.data.size(); ++i)
        if (t.data[i - 1] <= t.data[i]) CHECK(a.data[i - 1] <= a.data[i] + 1e-12);
      // clip then normalize stays in [0, 255]
      const Tensor c = minmax_normalize(clip_percentiles(t, 2.0, 98.0));
      for (double v : c.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 255.0);
      }
    }
  }
  SUBCASE("empty input throws") { CHECK_THROWS_AS(minmax_normalize(Tensor{}), std::invalid_argument); }
}

TEST_CASE("labeled-slab cropping keeps exactly the labeled slices") {
  auto make_mask = [](long d, long h, long w) {
    SegmentationMask m;
    m.dims = {d, h, w};
    m.labels.assign(size_t(d * h * w), 0);
    return m;
  };

  SUBCASE("band of labeled slices") {
    MultiModalVolume vol = ramp_volume(155, 3, 3, 1);
    SegmentationMask mask = make_mask(155, 3, 3);
    for (long d = 10; d <= 20; ++d) mask.at(d, 1, 1) = 2;
    const CropResult r = crop_to_labeled_roi(vol, mask);
    CHECK(r.volume.depth() == 11);
    CHECK(r.mask.dims[0] == 11);
    CHECK(r.slice_offset == 10);
    for (long d = 0; d < 11; ++d)
      for (long h = 0; h < 3; ++h)
        for (long w = 0; w < 3; ++w) CHECK(r.volume.at(d, h, w, 0) == vol.at(d + 10, h, w, 0));
  }
  SUBCASE("sparse labels keep the covering slab") {
    MultiModalVolume vol = ramp_volume(40, 2, 2, 4);
    SegmentationMask mask = make_mask(40, 2, 2);
    mask.at(5, 0, 0) = 1;
    mask.at(30, 1, 1) = 4;
    const CropResult r = crop_to_labeled_roi(vol, mask);
    CHECK(r.volume.depth() == 26);
    CHECK(r.slice_offset == 5);
  }
  SUBCASE("fully labeled volume is identity") {
    MultiModalVolume vol = ramp_volume(6, 2, 2, 1);
    SegmentationMask mask = make_mask(6, 2, 2);
    std::fill(mask.labels.begin(), mask.labels.end(), 2);
    const CropResult r = crop_to_labeled_roi(vol, mask);
    CHECK(r.volume.depth() == 6);
    CHECK(r.slice_offset == 0);
  }
  SUBCASE("unlabeled volume returned whole") {
    MultiModalVolume vol = ramp_volume(6, 2, 2, 1);
    const CropResult r = crop_to_labeled_roi(vol, make_mask(6, 2, 2));
    CHECK(r.volume.depth() == 6);
    CHECK(r.slice_offset == 0);
  }
  SUBCASE("no labeled voxel is ever discarded") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
      const long d = 3 + long(rng.below(12));
      MultiModalVolume vol = ramp_volume(d, 3, 2, 1);
      SegmentationMask mask = make_mask(d, 3, 2);
      for (auto& v : mask.labels)
        if (rng.uniform() < 0.1) v = 4;
      const CropResult r = crop_to_labeled_roi(vol, mask);
      const long in_count = long(std::count_if(mask.labels.begin(), mask.labels.end(),
                                               [](uint8_t v) { return v != 0; }));
      const long out_count = long(std::count_if(r.mask.labels.begin(), r.mask.labels.end(),
                                                [](uint8_t v) { return v != 0; }));
      CHECK(in_count == out_count);
    }
  }
  SUBCASE("shape mismatch throws") {
    MultiModalVolume vol = ramp_volume(6, 2, 2, 1);
    CHECK_THROWS_AS(crop_to_labeled_roi(vol, make_mask(5, 2, 2)), std::invalid_argument);
  }
}

TEST_CASE("intensity-based cropping trims zero slices") {
  MultiModalVolume vol;
  vol.intensities = Tensor({8, 2, 2, 1});
  for (long d = 3; d <= 5; ++d) vol.at(d, 1, 0, 0) = 9.0;
  const auto [cropped, offset] = crop_to_intensity_roi(vol);
  CHECK(cropped.depth() == 3);
  CHECK(offset == 3);

  MultiModalVolume blank;
  blank.intensities = Tensor({4, 2, 2, 1});
  const auto [whole, off0] = crop_to_intensity_roi(blank);
  CHECK(whole.depth() == 4);
  CHECK(off0 == 0);
}

TEST_CASE("modality stacking") {
  std::vector<Tensor> mods;
  for (int m = 0; m < 4; ++m) mods.push_back(Tensor::full({2, 3, 4}, double(m + 1)));

  const MultiModalVolume vol = stack_modalities(mods);
  CHECK(vol.modalities() == 4);
  for (long d = 0; d < 2; ++d)
    for (long h = 0; h < 3; ++h)
      for (long w = 0; w < 4; ++w)
        for (long m = 0; m < 4; ++m) CHECK(vol.at(d, h, w, m) == double(m + 1));

  SUBCASE("wrong arity") {
    mods.pop_back();
    CHECK_THROWS_AS(stack_modalities(mods), std::invalid_argument);
  }
  SUBCASE("shape mismatch") {
    mods[2] = Tensor::full({2, 3, 5}, 3.0);
    CHECK_THROWS_AS(stack_modalities(mods), std::invalid_argument);
  }
}

TEST_CASE("8-bit rounding is half-up with clamping") {
  CHECK(round_half_up_u8(0.0) == 0);
  CHECK(round_half_up_u8(0.5) == 1);
  CHECK(round_half_up_u8(2.4) == 2);
  CHECK(round_half_up_u8(2.5) == 3);
  CHECK(round_half_up_u8(254.5) == 255);
  CHECK(round_half_up_u8(300.0) == 255);
  CHECK(round_half_up_u8(-3.0) == 0);
}

TEST_CASE("case archives round trip bit-exactly") {
  TempDir dir;
  Rng rng(99);
  const std::string path = dir.file("case.npz");
  for (int trial = 0; trial < 1000; ++trial) {
    const CaseArchive a = random_case(rng);
    save_case(a, path);
    const CaseArchive b = load_case(path);
    REQUIRE(b.img_dims == a.img_dims);
    REQUIRE(b.imgs == a.imgs);
    REQUIRE(b.gts == a.gts);
    REQUIRE(b.spacing == a.spacing);
  }
}

TEST_CASE("volume and archive conversions invert each other") {
  Rng rng(15);
  CaseArchive a = random_case(rng);
  const auto [vol, mask] = archive_to_volume(a);
  const CaseArchive b = make_archive(vol, mask);
  CHECK(b.imgs == a.imgs);
  CHECK(b.gts == a.gts);

  SUBCASE("unnormalized intensities are rejected") {
    MultiModalVolume big = vol;
    big.intensities.data[0] = 300.0;
    CHECK_THROWS_AS(make_archive(big, mask), std::invalid_argument);
  }
}

TEST_CASE("archive format errors name the offending key") {
  TempDir dir;
  Rng rng(1);
  const CaseArchive good = random_case(rng);

  auto raw_arrays = [&] {
    npz::Archive arrs;
    arrs["imgs"] = npz::Array::from_bytes(
        {good.img_dims[0], good.img_dims[1], good.img_dims[2], good.img_dims[3]}, good.imgs);
    arrs["gts"] = npz::Array::from_bytes(
        {good.img_dims[0], good.img_dims[1], good.img_dims[2]}, good.gts);
    arrs["spacing"] = npz::Array::from_doubles({3}, {1.0, 1.0, 1.0});
    return arrs;
  };

  SUBCASE("missing spacing") {
    npz::Archive arrs = raw_arrays();
    arrs.erase("spacing");
    const std::string path = dir.file("missing.npz");
    npz::save(path, arrs);
    CHECK_THROWS_WITH_AS(load_case(path), doctest::Contains("spacing"), npz::FormatError);
  }
  SUBCASE("invalid gts label") {
    npz::Archive arrs = raw_arrays();
    arrs["gts"].raw[0] = 3;
    const std::string path = dir.file("label3.npz");
    npz::save(path, arrs);
    CHECK_THROWS_WITH_AS(load_case(path), doctest::Contains("gts"), npz::FormatError);
  }
  SUBCASE("wrong imgs dtype") {
    npz::Archive arrs = raw_arrays();
    std::vector<double> as_f(good.imgs.begin(), good.imgs.end());
    arrs["imgs"] = npz::Array::from_doubles(
        {good.img_dims[0], good.img_dims[1], good.img_dims[2], good.img_dims[3]}, as_f);
    const std::string path = dir.file("dtype.npz");
    npz::save(path, arrs);
    CHECK_THROWS_WITH_AS(load_case(path), doctest::Contains("imgs"), npz::FormatError);
  }
  SUBCASE("gts shape mismatch") {
    npz::Archive arrs = raw_arrays();
    arrs["gts"].shape[0] += 0;  // reshape to wrong spatial dims instead
    std::vector<uint8_t> extra(good.gts);
    extra.push_back(0);
    arrs["gts"] = npz::Array::from_bytes(
        {good.img_dims[0] * good.img_dims[1] * good.img_dims[2] + 1, 1, 1}, extra);
    const std::string path = dir.file("shape.npz");
    npz::save(path, arrs);
    CHECK_THROWS_WITH_AS(load_case(path), doctest::Contains("gts"), npz::FormatError);
  }
  SUBCASE("garbage file") {
    const std::string path = dir.file("junk.npz");
    std::ofstream(path, std::ios::binary) << "this is not a zip archive";
    CHECK_THROWS_AS(load_case(path), npz::FormatError);
  }
  SUBCASE("truncated file") {
    const std::string path = dir.file("trunc.npz");
    save_case(good, path);
    const auto full_size = fs::file_size(path);
    fs::resize_file(path, full_size / 2);
    CHECK_THROWS_AS(load_case(path), npz::FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_case(dir.file("nope.npz")), npz::FormatError); }
}

TEST_CASE("array container carries integer and float dtypes") {
  TempDir dir;
  const std::string path = dir.file("mixed.npz");

  npz::Archive arrs;
  arrs["f8"] = npz::Array::from_doubles({2, 3}, {1.5, -2.0, 0.0, 3.25, 1e9, -1e-9});
  arrs["u1"] = npz::Array::from_bytes({4}, {0, 127, 128, 255});
  {
    npz::Array i4;
    i4.dtype = "<i4";
    i4.shape = {3};
    const int32_t vals[3] = {-1000000, 0, 2147483647};
    i4.raw.resize(12);
    std::memcpy(i4.raw.data(), vals, 12);
    arrs["i4"] = i4;
  }
  {
    npz::Array f4;
    f4.dtype = "<f4";
    f4.shape = {2};
    const float vals[2] = {0.5f, -7.25f};
    f4.raw.resize(8);
    std::memcpy(f4.raw.data(), vals, 8);
    arrs["f4"] = f4;
  }
  npz::save(path, arrs);

  const npz::Archive back = npz::load(path);
  REQUIRE(back.size() == 4);
  CHECK(back.at("f8").as_doubles() == arrs.at("f8").as_doubles());
  CHECK(back.at("u1").as_bytes() == std::vector<uint8_t>{0, 127, 128, 255});
  CHECK(back.at("i4").as_doubles() == std::vector<double>{-1000000.0, 0.0, 2147483647.0});
  CHECK(back.at("f4").as_doubles() == std::vector<double>{0.5, -7.25});
  CHECK(back.at("i4").shape == std::vector<long>{3});
  CHECK_THROWS_AS(back.at("f8").as_bytes(), npz::FormatError);
}
