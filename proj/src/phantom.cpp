#include "subseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "subseg/rng.hpp"

namespace subseg {

namespace {

// Rows: background, edema (2), enhancing (4), necrotic (1).
// Columns: T1, T1c, T2, FLAIR.
constexpr double kSignature[4][4] = {
    {80.0, 80.0, 80.0, 80.0},
    {100.0, 100.0, 200.0, 210.0},
    {110.0, 220.0, 150.0, 150.0},
    {90.0, 40.0, 160.0, 220.0},
};

int signature_row(uint8_t label) {
  switch (label) {
    case 0: return 0;
    case 2: return 1;
    case 4: return 2;
    case 1: return 3;
    default: throw std::invalid_argument("phantom: invalid label " + std::to_string(int(label)));
  }
}

}  // namespace

double signature_intensity(uint8_t label, long modality) {
  if (modality < 0 || modality > 3)
    throw std::invalid_argument("phantom: modality index outside [0,3]");
  return kSignature[signature_row(label)][modality];
}

void PhantomSpec::validate() const {
  for (long s : size)
    if (s <= 0) throw std::invalid_argument("phantom: volume size must be positive");
  if (!(radii[0] > radii[1] && radii[1] > radii[2] && radii[2] > 0.0))
    throw std::invalid_argument("phantom: radii must nest (edema > enhancing > necrotic > 0)");
  for (int i = 0; i < 3; ++i) {
    if (center[i] - radii[0] < 0.0 || center[i] + radii[0] > static_cast<double>(size[i] - 1))
      throw std::invalid_argument("phantom: edema sphere does not fit inside the volume");
  }
  if (noise_sigma < 0.0) throw std::invalid_argument("phantom: noise_sigma must be >= 0");
}

PhantomSpec default_phantom_spec(const std::array<long, 3>& size, double noise_sigma,
                                 uint64_t seed) {
  PhantomSpec spec;
  spec.size = size;
  for (int i = 0; i < 3; ++i) spec.center[i] = static_cast<double>(size[i] - 1) / 2.0;
  const double in_plane = 0.25 * static_cast<double>(std::min(size[1], size[2]));
  const double depth_cap = 0.4 * static_cast<double>(size[0] - 1);
  const double base = std::min(in_plane, depth_cap);
  spec.radii = {base, 0.625 * base, 0.3 * base};
  spec.noise_sigma = noise_sigma;
  spec.seed = seed;
  return spec;
}

std::pair<MultiModalVolume, SegmentationMask> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const long D = spec.size[0], H = spec.size[1], W = spec.size[2];

  MultiModalVolume vol;
  vol.intensities = Tensor({D, H, W, 4});
  SegmentationMask mask;
  mask.dims = {D, H, W};
  mask.labels.assign(static_cast<size_t>(D * H * W), 0);

  const double r_ed2 = spec.radii[0] * spec.radii[0];
  const double r_en2 = spec.radii[1] * spec.radii[1];
  const double r_ne2 = spec.radii[2] * spec.radii[2];
  Rng rng(spec.seed);

  size_t vi = 0, li = 0;
  for (long d = 0; d < D; ++d) {
    const double dd = static_cast<double>(d) - spec.center[0];
    for (long h = 0; h < H; ++h) {
      const double dh = static_cast<double>(h) - spec.center[1];
      for (long w = 0; w < W; ++w) {
        const double dw = static_cast<double>(w) - spec.center[2];
        const double d2 = dd * dd + dh * dh + dw * dw;
        uint8_t lab = 0;
        if (d2 <= r_ne2)
          lab = 1;
        else if (d2 <= r_en2)
          lab = 4;
        else if (d2 <= r_ed2)
          lab = 2;
        mask.labels[li++] = lab;
        for (long m = 0; m < 4; ++m) {
          double v = signature_intensity(lab, m);
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
          vol.intensities.data[vi++] = std::clamp(v, 0.0, 255.0);
        }
      }
    }
  }
  return {vol, mask};
}

std::vector<CaseArchive> generate_dataset(long n_cases, const PhantomSpec& base_spec,
                                          uint64_t seed, const PhantomJitter& jitter) {
  if (n_cases < 1) throw std::invalid_argument("phantom: n_cases must be >= 1");
  base_spec.validate();
  if (jitter.center < 0.0 || jitter.radius_frac < 0.0 || jitter.noise_frac < 0.0 ||
      jitter.radius_frac >= 1.0 || jitter.noise_frac > 1.0)
    throw std::invalid_argument("phantom: jitter ranges out of bounds");

  std::vector<CaseArchive> out;
  out.reserve(static_cast<size_t>(n_cases));
  for (long i = 0; i < n_cases; ++i) {
    Rng jit(mix_seed(seed, static_cast<uint64_t>(i)));
    PhantomSpec spec = base_spec;
    for (int a = 0; a < 3; ++a)
      spec.center[a] += jit.uniform(-jitter.center, jitter.center);
    const double rscale = jit.uniform(1.0 - jitter.radius_frac, 1.0 + jitter.radius_frac);
    for (double& r : spec.radii) r *= rscale;
    spec.noise_sigma *= jit.uniform(1.0 - jitter.noise_frac, 1.0 + jitter.noise_frac);
    for (int a = 0; a < 3; ++a) {
      const double lo = spec.radii[0];
      const double hi = static_cast<double>(spec.size[a] - 1) - spec.radii[0];
      if (lo > hi) throw std::invalid_argument("phantom: jittered sphere cannot fit the volume");
      spec.center[a] = std::clamp(spec.center[a], lo, hi);
    }
    spec.seed = base_spec.seed + static_cast<uint64_t>(i);

    auto [vol, mask] = generate_phantom(spec);
    out.push_back(make_archive(vol, mask));
  }
  return out;
}

}  // namespace subseg
