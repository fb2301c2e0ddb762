#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dermgan/dataset.hpp"
#include "dermgan/image.hpp"

namespace dermgan {

struct RoiGroup {
  std::vector<int> member_indices;  // ascending
  BoundingBox hull;
};

/// Connected components of the "margin-dilated rectangles intersect" graph.
/// Groups are ordered by their smallest member index.
[[nodiscard]] std::vector<RoiGroup> group_adjacent_rois(const std::vector<BoundingBox>& rois, int margin);

class CropError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Square window around a group hull. Side is uniform in
/// [max(target, hull max dim), min(min(W,H), scale_max * hull max dim)]
/// (upper end raised to the lower end when the interval is empty). The window
/// contains the hull when it can; otherwise it is the largest square centred
/// on the hull centre, clamped to the image.
[[nodiscard]] BoundingBox sample_crop_window(const RoiGroup& group, int image_width, int image_height,
                                             int target_size, double scale_max, uint64_t seed);

/// Window -> target affine map of a point (target-frame coordinates).
struct CropTransform {
  BoundingBox window;
  int target_size;
  [[nodiscard]] double scale() const { return static_cast<double>(target_size) / window.width(); }
  [[nodiscard]] double map_x(double x) const { return (x - window.x0) * scale(); }
  [[nodiscard]] double map_y(double y) const { return (y - window.y0) * scale(); }
  [[nodiscard]] double unmap_x(double u) const { return u / scale() + window.x0; }
  [[nodiscard]] double unmap_y(double v) const { return v / scale() + window.y0; }
};

struct CropResult {
  ImageTensor image;
  std::vector<BoundingBox> rois;
};

/// Bilinear resample of `window` to target_size^2. ROI corners go through the
/// affine map (floor for x0/y0, ceil for x1/y1), get clipped to the target
/// frame, and boxes with zero clipped area are dropped.
[[nodiscard]] CropResult crop_and_resize(const ImageTensor& image, const BoundingBox& window,
                                         const std::vector<BoundingBox>& rois, int target_size);

[[nodiscard]] BoundingBox map_box(const CropTransform& t, const BoundingBox& b);

struct CropSetConfig {
  int crops_per_group = 2;
  int target_size = 64;
  int margin = 20;
  double scale_max = 3.0;
  uint64_t seed = 11;
};

/// Crops every ROI group of every case; writes crops/<id>.png and manifest.jsonl under out_dir.
DatasetManifest build_crop_set(const DatasetManifest& source, const CropSetConfig& config,
                               const std::filesystem::path& out_dir);

}  // namespace dermgan
