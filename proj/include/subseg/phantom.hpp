#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "subseg/volume.hpp"

namespace subseg {

/// Nested-sphere tumor phantom: necrotic core (label 1) inside an enhancing
/// rim (label 4) inside edema (label 2), on a uniform background.
struct PhantomSpec {
  std::array<long, 3> size{24, 64, 64};           // depth, height, width
  std::array<double, 3> center{11.5, 31.5, 31.5};
  std::array<double, 3> radii{9.0, 5.5, 2.5};     // edema > enhancing > necrotic
  double noise_sigma = 0.0;
  uint64_t seed = 0;

  void validate() const;
};

/// Returns a PhantomSpec with the tumor centered in the given volume size and the
/// edema radius at a quarter of the in-plane extent, capped so the sphere
/// fits the depth axis with room for jitter.
PhantomSpec default_phantom_spec(const std::array<long, 3>& size, double noise_sigma,
                                 uint64_t seed);

/// Mean intensity of a label's tissue in modality m (T1, T1c, T2, FLAIR).
/// Encodes the qualitative contrasts the attention mechanism should learn:
/// edema bright in T2/FLAIR, enhancing tumor bright in T1c, necrotic core
/// dark in T1c but bright in FLAIR, mid-range background.
double signature_intensity(uint8_t label, long modality);

std::pair<MultiModalVolume, SegmentationMask> generate_phantom(const PhantomSpec& spec);

/// Per-case perturbation ranges; all-zero ranges reproduce the base spec.
struct PhantomJitter {
  double center = 2.0;        // voxels, uniform per axis
  double radius_frac = 0.12;  // joint radius scale drawn from [1-f, 1+f]
  double noise_frac = 0.0;    // noise_sigma scale drawn from [1-f, 1+f]
};

/// Generates n cases; case i uses spec seed base_spec.seed + i and its
/// perturbations are drawn from an independent stream of `seed`.
std::vector<CaseArchive> generate_dataset(long n_cases, const PhantomSpec& base_spec,
                                          uint64_t seed, const PhantomJitter& jitter = {});

}  // namespace subseg
