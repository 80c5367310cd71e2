#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "subseg/tensor.hpp"

namespace subseg {

inline constexpr std::array<const char*, 4> kModalityNames{"T1", "T1c", "T2", "FLAIR"};

/// Multi-modal intensity volume, depth x height x width x modality.
/// Modality axis is length 4 (order T1, T1c, T2, FLAIR) or 1 in
/// single-modality mode.
struct MultiModalVolume {
  Tensor intensities;  // rank 4
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  long depth() const { return intensities.dim(0); }
  long height() const { return intensities.dim(1); }
  long width() const { return intensities.dim(2); }
  long modalities() const { return intensities.dim(3); }

  double at(long d, long h, long w, long m) const {
    return intensities.data[static_cast<size_t>(
        ((d * height() + h) * width() + w) * modalities() + m)];
  }
  double& at(long d, long h, long w, long m) {
    return intensities.data[static_cast<size_t>(
        ((d * height() + h) * width() + w) * modalities() + m)];
  }

  void validate() const;
};

/// Voxel labels: 0 background, 1 necrotic core, 2 edema, 4 enhancing tumor.
struct SegmentationMask {
  std::array<long, 3> dims{0, 0, 0};  // depth, height, width
  std::vector<uint8_t> labels;

  long numel() const { return dims[0] * dims[1] * dims[2]; }
  uint8_t at(long d, long h, long w) const {
    return labels[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
  }
  uint8_t& at(long d, long h, long w) {
    return labels[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
  }

  void validate() const;
};

/// Binary voxel mask with explicit spatial shape.
struct BinaryMask {
  std::array<long, 3> dims{0, 0, 0};
  std::vector<uint8_t> v;
};

/// One 2-D slice of labels over {0, 1, 2, 4}.
struct LabelSlice {
  std::array<long, 2> dims{0, 0};  // rows, cols
  std::vector<uint8_t> v;

  uint8_t at(long r, long c) const { return v[static_cast<size_t>(r * dims[1] + c)]; }
  uint8_t& at(long r, long c) { return v[static_cast<size_t>(r * dims[1] + c)]; }
};

/// Serialized case: normalized 8-bit images, labels, voxel spacing in mm.
struct CaseArchive {
  std::array<long, 4> img_dims{0, 0, 0, 0};  // depth, height, width, modality
  std::vector<uint8_t> imgs;
  std::vector<uint8_t> gts;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  void validate() const;
};

/// Rounds to nearest integer, halves up, clamped into [0, 255].
uint8_t round_half_up_u8(double v);

/// Percentile of the values by linear interpolation over the sorted array.
double percentile(std::vector<double> values, double pct);

/// Clamps every value into [P_lo, P_hi] of the input distribution.
Tensor clip_percentiles(const Tensor& volume, double lo_pct = 0.5, double hi_pct = 99.5);

/// Affine rescale so min -> 0 and max -> 255; constant input maps to zeros.
Tensor minmax_normalize(const Tensor& volume);

struct CropResult {
  MultiModalVolume volume;
  SegmentationMask mask;
  long slice_offset = 0;
};

/// Minimal contiguous slab of slices holding any nonzero label; an unlabeled
/// volume is returned whole with offset 0.
CropResult crop_to_labeled_roi(const MultiModalVolume& volume, const SegmentationMask& mask);

/// Label-free slab rule for inference: slices with any nonzero intensity.
std::pair<MultiModalVolume, long> crop_to_intensity_roi(const MultiModalVolume& volume);

/// Stacks four single-modality arrays (T1, T1c, T2, FLAIR) along a new axis.
MultiModalVolume stack_modalities(const std::vector<Tensor>& volumes,
                                  const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});

/// Quantizes a normalized volume plus mask into an archive.
CaseArchive make_archive(const MultiModalVolume& volume, const SegmentationMask& mask);
std::pair<MultiModalVolume, SegmentationMask> archive_to_volume(const CaseArchive& archive);

/// Compressed container with keys exactly "imgs", "gts", "spacing".
void save_case(const CaseArchive& archive, const std::string& path);
CaseArchive load_case(const std::string& path);

}  // namespace subseg
