#include "subseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "subseg/npz.hpp"

namespace subseg {

namespace {

bool valid_label(uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

}  // namespace

void MultiModalVolume::validate() const {
  if (intensities.rank() != 4)
    throw std::invalid_argument("volume: expected rank 4, got " + shape_str(intensities.dims));
  const long m = modalities();
  if (m != 1 && m != 4)
    throw std::invalid_argument("volume: modality axis must be 1 or 4, got " + std::to_string(m));
  for (double s : spacing)
    if (!(s > 0.0)) throw std::invalid_argument("volume: spacing must be positive");
}

void SegmentationMask::validate() const {
  for (long d : dims)
    if (d <= 0) throw std::invalid_argument("mask: dims must be positive");
  if (static_cast<long>(labels.size()) != numel())
    throw std::invalid_argument("mask: label count does not match dims");
  for (uint8_t v : labels)
    if (!valid_label(v))
      throw std::invalid_argument("mask: invalid label " + std::to_string(int(v)) +
                                  ", expected one of {0,1,2,4}");
}

void CaseArchive::validate() const {
  for (long d : img_dims)
    if (d <= 0) throw std::invalid_argument("archive: dims must be positive");
  if (img_dims[3] != 1 && img_dims[3] != 4)
    throw std::invalid_argument("archive: modality axis must be 1 or 4");
  const long spatial = img_dims[0] * img_dims[1] * img_dims[2];
  if (static_cast<long>(imgs.size()) != spatial * img_dims[3])
    throw std::invalid_argument("archive: imgs size does not match dims");
  if (static_cast<long>(gts.size()) != spatial)
    throw std::invalid_argument("archive: gts size does not match dims");
  for (uint8_t v : gts)
    if (!valid_label(v))
      throw std::invalid_argument("archive: gts contains invalid label " + std::to_string(int(v)));
  for (double s : spacing)
    if (!(s > 0.0)) throw std::invalid_argument("archive: spacing must be positive");
}

uint8_t round_half_up_u8(double v) {
  const double r = std::floor(v + 0.5);
  return static_cast<uint8_t>(std::clamp(r, 0.0, 255.0));
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (pct < 0.0 || pct > 100.0) throw std::invalid_argument("percentile: pct outside [0,100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const size_t k = static_cast<size_t>(pos);
  const double frac = pos - static_cast<double>(k);
  if (k + 1 >= values.size()) return values.back();
  return values[k] * (1.0 - frac) + values[k + 1] * frac;
}

Tensor clip_percentiles(const Tensor& volume, double lo_pct, double hi_pct) {
  if (volume.numel() == 0) throw std::invalid_argument("clip_percentiles: empty volume");
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
    throw std::invalid_argument("clip_percentiles: need 0 <= lo < hi <= 100");
  const double lo = percentile(volume.data, lo_pct);
  const double hi = percentile(volume.data, hi_pct);
  Tensor out = volume;
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return out;
}

Tensor minmax_normalize(const Tensor& volume) {
  if (volume.numel() == 0) throw std::invalid_argument("minmax_normalize: empty volume");
  const auto [mn_it, mx_it] = std::minmax_element(volume.data.begin(), volume.data.end());
  const double mn = *mn_it, mx = *mx_it;
  Tensor out = volume;
  if (mx == mn) {
    std::fill(out.data.begin(), out.data.end(), 0.0);
    return out;
  }
  // Dividing by the range before scaling keeps the map monotone with exact
  // endpoints: the ratio is 1.0 at the maximum, so nothing lands outside
  // [0, 255] by an ulp.
  const double range = mx - mn;
  for (double& v : out.data) v = (v - mn) / range * 255.0;
  return out;
}

CropResult crop_to_labeled_roi(const MultiModalVolume& volume, const SegmentationMask& mask) {
  volume.validate();
  if (mask.dims[0] != volume.depth() || mask.dims[1] != volume.height() ||
      mask.dims[2] != volume.width())
    throw std::invalid_argument("crop_to_labeled_roi: volume and mask shapes differ");

  const long slice = mask.dims[1] * mask.dims[2];
  long lo = -1, hi = -1;
  for (long d = 0; d < mask.dims[0]; ++d) {
    bool any = false;
    for (long i = 0; i < slice && !any; ++i)
      any = mask.labels[static_cast<size_t>(d * slice + i)] != 0;
    if (any) {
      if (lo < 0) lo = d;
      hi = d;
    }
  }
  if (lo < 0) return {volume, mask, 0};

  const long nd = hi - lo + 1;
  CropResult r;
  r.slice_offset = lo;
  r.volume.spacing = volume.spacing;
  r.volume.intensities = Tensor({nd, volume.height(), volume.width(), volume.modalities()});
  const long vslice = volume.height() * volume.width() * volume.modalities();
  std::copy_n(volume.intensities.data.begin() + lo * vslice, nd * vslice,
              r.volume.intensities.data.begin());
  r.mask.dims = {nd, mask.dims[1], mask.dims[2]};
  r.mask.labels.assign(mask.labels.begin() + lo * slice, mask.labels.begin() + (hi + 1) * slice);
  return r;
}

std::pair<MultiModalVolume, long> crop_to_intensity_roi(const MultiModalVolume& volume) {
  volume.validate();
  const long vslice = volume.height() * volume.width() * volume.modalities();
  long lo = -1, hi = -1;
  for (long d = 0; d < volume.depth(); ++d) {
    bool any = false;
    for (long i = 0; i < vslice && !any; ++i)
      any = volume.intensities.data[static_cast<size_t>(d * vslice + i)] != 0.0;
    if (any) {
      if (lo < 0) lo = d;
      hi = d;
    }
  }
  if (lo < 0) return {volume, 0};
  const long nd = hi - lo + 1;
  MultiModalVolume out;
  out.spacing = volume.spacing;
  out.intensities = Tensor({nd, volume.height(), volume.width(), volume.modalities()});
  std::copy_n(volume.intensities.data.begin() + lo * vslice, nd * vslice,
              out.intensities.data.begin());
  return {out, lo};
}

MultiModalVolume stack_modalities(const std::vector<Tensor>& volumes,
                                  const std::array<double, 3>& spacing) {
  if (volumes.size() != 4)
    throw std::invalid_argument("stack_modalities: expected 4 modalities, got " +
                                std::to_string(volumes.size()));
  for (const Tensor& t : volumes) {
    if (t.rank() != 3)
      throw std::invalid_argument("stack_modalities: inputs must be rank 3");
    if (!t.same_shape(volumes[0]))
      throw std::invalid_argument("stack_modalities: modality shapes differ");
  }
  MultiModalVolume out;
  out.spacing = spacing;
  const long d = volumes[0].dim(0), h = volumes[0].dim(1), w = volumes[0].dim(2);
  out.intensities = Tensor({d, h, w, 4});
  const long spatial = d * h * w;
  for (long i = 0; i < spatial; ++i)
    for (long m = 0; m < 4; ++m)
      out.intensities.data[static_cast<size_t>(i * 4 + m)] =
          volumes[static_cast<size_t>(m)].data[static_cast<size_t>(i)];
  out.validate();
  return out;
}

CaseArchive make_archive(const MultiModalVolume& volume, const SegmentationMask& mask) {
  volume.validate();
  mask.validate();
  if (mask.dims[0] != volume.depth() || mask.dims[1] != volume.height() ||
      mask.dims[2] != volume.width())
    throw std::invalid_argument("make_archive: volume and mask shapes differ");
  for (double v : volume.intensities.data)
    if (v < 0.0 || v > 255.0)
      throw std::invalid_argument("make_archive: intensities outside [0,255]; normalize first");
  CaseArchive a;
  a.img_dims = {volume.depth(), volume.height(), volume.width(), volume.modalities()};
  a.imgs.resize(volume.intensities.data.size());
  for (size_t i = 0; i < a.imgs.size(); ++i)
    a.imgs[i] = round_half_up_u8(volume.intensities.data[i]);
  a.gts = mask.labels;
  a.spacing = volume.spacing;
  return a;
}

std::pair<MultiModalVolume, SegmentationMask> archive_to_volume(const CaseArchive& archive) {
  archive.validate();
  MultiModalVolume vol;
  vol.spacing = archive.spacing;
  vol.intensities =
      Tensor({archive.img_dims[0], archive.img_dims[1], archive.img_dims[2], archive.img_dims[3]});
  for (size_t i = 0; i < archive.imgs.size(); ++i)
    vol.intensities.data[i] = static_cast<double>(archive.imgs[i]);
  SegmentationMask mask;
  mask.dims = {archive.img_dims[0], archive.img_dims[1], archive.img_dims[2]};
  mask.labels = archive.gts;
  return {vol, mask};
}

void save_case(const CaseArchive& archive, const std::string& path) {
  archive.validate();
  npz::Archive arrs;
  arrs["imgs"] = npz::Array::from_bytes(
      {archive.img_dims[0], archive.img_dims[1], archive.img_dims[2], archive.img_dims[3]},
      archive.imgs);
  arrs["gts"] = npz::Array::from_bytes(
      {archive.img_dims[0], archive.img_dims[1], archive.img_dims[2]}, archive.gts);
  arrs["spacing"] = npz::Array::from_doubles(
      {3}, {archive.spacing[0], archive.spacing[1], archive.spacing[2]});
  npz::save(path, arrs);
}

CaseArchive load_case(const std::string& path) {
  const npz::Archive arrs = npz::load(path);
  for (const char* key : {"imgs", "gts", "spacing"})
    if (!arrs.count(key))
      throw npz::FormatError("case archive '" + path + "' missing key '" + key + "'");

  const npz::Array& imgs = arrs.at("imgs");
  const npz::Array& gts = arrs.at("gts");
  const npz::Array& spacing = arrs.at("spacing");

  if (imgs.dtype != "|u1")
    throw npz::FormatError("case archive key 'imgs' must be uint8, found '" + imgs.dtype + "'");
  if (gts.dtype != "|u1")
    throw npz::FormatError("case archive key 'gts' must be uint8, found '" + gts.dtype + "'");
  if (spacing.dtype != "<f8")
    throw npz::FormatError("case archive key 'spacing' must be float64, found '" + spacing.dtype +
                           "'");
  if (imgs.shape.size() != 4)
    throw npz::FormatError("case archive key 'imgs' must be rank 4");
  if (gts.shape.size() != 3 || gts.shape[0] != imgs.shape[0] || gts.shape[1] != imgs.shape[1] ||
      gts.shape[2] != imgs.shape[2])
    throw npz::FormatError("case archive key 'gts' shape does not match 'imgs'");
  if (spacing.shape != std::vector<long>{3})
    throw npz::FormatError("case archive key 'spacing' must hold 3 values");

  CaseArchive a;
  a.img_dims = {imgs.shape[0], imgs.shape[1], imgs.shape[2], imgs.shape[3]};
  a.imgs = imgs.as_bytes();
  a.gts = gts.as_bytes();
  const std::vector<double> sp = spacing.as_doubles();
  a.spacing = {sp[0], sp[1], sp[2]};
  for (uint8_t v : a.gts)
    if (!valid_label(v))
      throw npz::FormatError("case archive key 'gts' contains invalid label " +
                             std::to_string(int(v)));
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw npz::FormatError("case archive '" + path + "': " + e.what());
  }
  return a;
}

}  // namespace subseg
