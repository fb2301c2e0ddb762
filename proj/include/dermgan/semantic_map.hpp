#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dermgan/dataset.hpp"
#include "dermgan/image.hpp"

namespace dermgan {

/// Integer codes written into the map channels.
class CodeTables {
 public:
  /// Tones {36, 72, ..., 216}; condition k -> floor(255 k / K).
  explicit CodeTables(int num_classes);

  [[nodiscard]] int num_classes() const { return num_classes_; }
  [[nodiscard]] uint8_t tone_code(Fitzpatrick f) const;
  [[nodiscard]] uint8_t condition_code(int class_id) const;

  /// Nearest code within `tolerance` levels, else nullopt.
  [[nodiscard]] std::optional<Fitzpatrick> nearest_tone(double value, double tolerance) const;
  [[nodiscard]] std::optional<int> nearest_condition(double value, double tolerance) const;

  /// Smallest distance between any two codes of the same table.
  [[nodiscard]] int min_code_gap() const;

 private:
  int num_classes_;
};

/// Conditioning input for the generator: R = skin tone code everywhere,
/// G = B = condition code inside the union of ROIs and 0 elsewhere.
struct SemanticMap {
  Fitzpatrick skin = Fitzpatrick::I;
  ConditionClass condition;
  std::vector<BoundingBox> rois;
  RgbImage tensor;

  [[nodiscard]] int width() const { return tensor.width; }
  [[nodiscard]] int height() const { return tensor.height; }
};

class MapError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[nodiscard]] SemanticMap encode_map(Fitzpatrick skin, const ConditionClass& condition,
                                     const std::vector<BoundingBox>& rois, int width, int height,
                                     const CodeTables& codes);

struct DecodedMap {
  Fitzpatrick skin;
  int condition_id;
  /// 4-connected components of the nonzero G mask, sorted by (y0, x0).
  std::vector<BoundingBox> rois;
};

/// Quantisation noise up to `tolerance` levels is absorbed by nearest-code matching.
[[nodiscard]] DecodedMap decode_map(const RgbImage& tensor, const CodeTables& codes, double tolerance = 3.0);

/// Uniform non-empty ROI subset, then each survivor shifted by up to
/// +/- max(4, side/10) per axis and clamped in frame. Box sizes are kept.
[[nodiscard]] SemanticMap perturb_map(const SemanticMap& map, uint64_t seed, const CodeTables& codes);
[[nodiscard]] SemanticMap set_skin_color(const SemanticMap& map, Fitzpatrick tone, const CodeTables& codes);
/// Scales each ROI about its centre and clamps it to the frame.
[[nodiscard]] SemanticMap set_roi_scale(const SemanticMap& map, double scale, const CodeTables& codes);

[[nodiscard]] BoundingBox scale_box(const BoundingBox& b, double scale, int width, int height);

/// [-1, 1] normalisation used at the network boundary: code / 127.5 - 1.
[[nodiscard]] ImageTensor normalized(const SemanticMap& map);

/// Binary mask of the ROI union, row-major W*H.
[[nodiscard]] std::vector<uint8_t> roi_mask(const std::vector<BoundingBox>& rois, int width, int height);

/// Convenience: map of a manifest record at the given frame size.
[[nodiscard]] SemanticMap map_for_record(const CaseRecord& r, int width, int height, const CodeTables& codes);

}  // namespace dermgan
