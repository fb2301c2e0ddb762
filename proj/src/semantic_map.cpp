#include "dermgan/semantic_map.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <tuple>

#include "dermgan/rng.hpp"

namespace dermgan {

CodeTables::CodeTables(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1 || num_classes > 26) throw MapError("code tables support 1..26 condition classes");
}

uint8_t CodeTables::tone_code(Fitzpatrick f) const { return static_cast<uint8_t>(36 * level(f)); }

uint8_t CodeTables::condition_code(int class_id) const {
  if (class_id < 1 || class_id > num_classes_) {
    throw MapError("condition id " + std::to_string(class_id) + " outside 1.." + std::to_string(num_classes_));
  }
  return static_cast<uint8_t>((255 * class_id) / num_classes_);
}

std::optional<Fitzpatrick> CodeTables::nearest_tone(double value, double tolerance) const {
  std::optional<Fitzpatrick> best;
  double best_d = tolerance;
  for (auto f : kAllFitzpatrick) {
    const double d = std::abs(value - tone_code(f));
    if (d <= best_d) {
      best_d = d;
      best = f;
    }
  }
  return best;
}

std::optional<int> CodeTables::nearest_condition(double value, double tolerance) const {
  std::optional<int> best;
  double best_d = tolerance;
  for (int k = 1; k <= num_classes_; ++k) {
    const double d = std::abs(value - condition_code(k));
    if (d <= best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

int CodeTables::min_code_gap() const {
  int gap = 36;
  for (int k = 1; k < num_classes_; ++k) gap = std::min(gap, condition_code(k + 1) - condition_code(k));
  gap = std::min<int>(gap, condition_code(1));  // distance from the "no condition" zero
  return gap;
}

std::vector<uint8_t> roi_mask(const std::vector<BoundingBox>& rois, int width, int height) {
  std::vector<uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
  for (const auto& b : rois) {
    for (int y = std::max(0, b.y0); y < std::min(height, b.y1); ++y)
      for (int x = std::max(0, b.x0); x < std::min(width, b.x1); ++x) mask[static_cast<std::size_t>(y) * width + x] = 1;
  }
  return mask;
}

SemanticMap encode_map(Fitzpatrick skin, const ConditionClass& condition, const std::vector<BoundingBox>& rois,
                       int width, int height, const CodeTables& codes) {
  if (rois.empty()) throw MapError("semantic map needs at least one ROI");
  for (const auto& b : rois) {
    if (!b.valid() || !b.within(width, height)) {
      throw MapError("ROI [" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," + std::to_string(b.x1) + "," +
                     std::to_string(b.y1) + "] outside " + std::to_string(width) + "x" + std::to_string(height));
    }
  }
  SemanticMap m;
  m.skin = skin;
  m.condition = condition;
  m.rois = rois;
  m.tensor = RgbImage(width, height);
  const uint8_t tone = codes.tone_code(skin);
  const uint8_t cond = codes.condition_code(condition.id);
  const auto mask = roi_mask(rois, width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const bool inside = mask[static_cast<std::size_t>(y) * width + x] != 0;
      m.tensor.at(x, y, 0) = tone;
      m.tensor.at(x, y, 1) = inside ? cond : 0;
      m.tensor.at(x, y, 2) = inside ? cond : 0;
    }
  return m;
}

DecodedMap decode_map(const RgbImage& t, const CodeTables& codes, double tolerance) {
  const int w = t.width, h = t.height;
  if (w <= 0 || h <= 0) throw MapError("empty map tensor");
  double r_sum = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) r_sum += t.at(x, y, 0);
  const auto tone = codes.nearest_tone(r_sum / (static_cast<double>(w) * h), tolerance);
  if (!tone) throw MapError("R channel matches no skin tone code");

  // A pixel belongs to the condition mask when G and B both clear the noise floor.
  const double floor = std::max(tolerance, static_cast<double>(codes.min_code_gap()) / 2.0);
  std::vector<uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
  double code_sum = 0;
  int64_t count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int g = t.at(x, y, 1), b = t.at(x, y, 2);
      if (g > floor && b > floor) {
        mask[static_cast<std::size_t>(y) * w + x] = 1;
        code_sum += 0.5 * (g + b);
        ++count;
      }
    }
  if (count == 0) throw MapError("map has no condition pixels");
  const auto cond = codes.nearest_condition(code_sum / static_cast<double>(count), tolerance);
  if (!cond) throw MapError("G/B channels match no condition code");

  DecodedMap out{*tone, *cond, {}};
  std::vector<int> stack;
  for (int start = 0; start < w * h; ++start) {
    if (mask[start] != 1) continue;
    BoundingBox box{start % w, start / w, start % w + 1, start / w + 1};
    mask[start] = 2;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % w, py = p / w;
      box = box.united({px, py, px + 1, py + 1});
      const int nb[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= w || q[1] < 0 || q[1] >= h) continue;
        const int qi = q[1] * w + q[0];
        if (mask[qi] == 1) {
          mask[qi] = 2;
          stack.push_back(qi);
        }
      }
    }
    out.rois.push_back(box);
  }
  std::sort(out.rois.begin(), out.rois.end(),
            [](const BoundingBox& a, const BoundingBox& b) { return std::tie(a.y0, a.x0) < std::tie(b.y0, b.x0); });
  return out;
}

SemanticMap perturb_map(const SemanticMap& map, uint64_t seed, const CodeTables& codes) {
  if (map.rois.empty()) throw MapError("cannot perturb a map without ROIs");
  if (map.rois.size() > 62) throw MapError("too many ROIs to subset");
  Rng rng(seed);
  const int n = static_cast<int>(map.rois.size());
  const uint64_t subset = uniform_int<uint64_t>(rng, 1, (uint64_t{1} << n) - 1);
  const int w = map.width(), h = map.height();
  const int max_dx = std::max(4, w / 10), max_dy = std::max(4, h / 10);
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < n; ++i) {
    if (!(subset & (uint64_t{1} << i))) continue;
    BoundingBox b = map.rois[static_cast<std::size_t>(i)];
    const int dx = uniform_int(rng, -max_dx, max_dx), dy = uniform_int(rng, -max_dy, max_dy);
    const int nx0 = std::clamp(b.x0 + dx, 0, w - b.width());
    const int ny0 = std::clamp(b.y0 + dy, 0, h - b.height());
    boxes.push_back({nx0, ny0, nx0 + b.width(), ny0 + b.height()});
  }
  return encode_map(map.skin, map.condition, boxes, w, h, codes);
}

SemanticMap set_skin_color(const SemanticMap& map, Fitzpatrick tone, const CodeTables& codes) {
  SemanticMap out = map;
  out.skin = tone;
  const uint8_t code = codes.tone_code(tone);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out.tensor.at(x, y, 0) = code;
  return out;
}

BoundingBox scale_box(const BoundingBox& b, double scale, int width, int height) {
  if (!(scale > 0.0)) throw MapError("ROI scale must be positive");
  const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
  const double hw = 0.5 * b.width() * scale, hh = 0.5 * b.height() * scale;
  if (2.0 * hw < 1.0 || 2.0 * hh < 1.0) throw MapError("ROI scale collapses a box below 1 px");
  BoundingBox out{static_cast<int>(std::floor(cx - hw + 0.5)), static_cast<int>(std::floor(cy - hh + 0.5)),
                  static_cast<int>(std::floor(cx + hw + 0.5)), static_cast<int>(std::floor(cy + hh + 0.5))};
  out.x0 = std::clamp(out.x0, 0, width - 1);
  out.y0 = std::clamp(out.y0, 0, height - 1);
  out.x1 = std::clamp(out.x1, out.x0 + 1, width);
  out.y1 = std::clamp(out.y1, out.y0 + 1, height);
  return out;
}

SemanticMap set_roi_scale(const SemanticMap& map, double scale, const CodeTables& codes) {
  std::vector<BoundingBox> boxes;
  boxes.reserve(map.rois.size());
  for (const auto& b : map.rois) boxes.push_back(scale_box(b, scale, map.width(), map.height()));
  SemanticMap out = encode_map(map.skin, map.condition, boxes, map.width(), map.height(), codes);
  // Keep the tone plane exactly as given, so tone and geometry edits commute.
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out.tensor.at(x, y, 0) = map.tensor.at(x, y, 0);
  return out;
}

ImageTensor normalized(const SemanticMap& map) { return to_image_tensor(map.tensor); }

SemanticMap map_for_record(const CaseRecord& r, int width, int height, const CodeTables& codes) {
  return encode_map(r.skin, r.condition, r.rois, width, height, codes);
}

}  // namespace dermgan
