#include <cstdio>
#include <cmath>
#include <numbers>

#include "dermgan/dataset.hpp"
#include "dermgan/rng.hpp"

namespace dermgan {

namespace {

// Background skin tones, strictly darker in every channel from I to VI.
constexpr std::array<std::array<uint8_t, 3>, 6> kSkinPalette = {{
    {238, 214, 196},
    {224, 190, 160},
    {198, 156, 120},
    {160, 118, 84},
    {118, 80, 56},
    {72, 48, 34},
}};

constexpr std::array<std::string_view, 26> kHueNames = {
    "crimson", "amber",  "olive",  "teal",    "azure",   "violet", "rose",  "ochre",  "lime",
    "cyan",    "indigo", "plum",   "scarlet", "saffron", "moss",   "jade",  "cobalt", "orchid",
    "coral",   "gold",   "fern",   "aqua",    "navy",    "mauve",  "rust",  "sage"};

constexpr std::array<std::string_view, 3> kShapeNames = {"disc", "ring", "blob"};
constexpr int kMaxClasses = 26;
constexpr int kMaxMotifs = 3;
constexpr int kPlacementAttempts = 64;

std::array<uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  auto q = [&](double t) { return static_cast<uint8_t>(std::lround(std::clamp(t + m, 0.0, 1.0) * 255.0)); };
  return {q(r), q(g), q(b)};
}

int max_channel_gap(const std::array<uint8_t, 3>& a, const std::array<uint8_t, 3>& b) {
  int gap = 0;
  for (int c = 0; c < 3; ++c) gap = std::max(gap, std::abs(static_cast<int>(a[c]) - static_cast<int>(b[c])));
  return gap;
}

struct Motif {
  MotifShape shape;
  double cx, cy, radius;
  double phase1, phase2;

  [[nodiscard]] double extent() const { return shape == MotifShape::kBlob ? radius * 1.34 : radius; }

  [[nodiscard]] bool covers(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    switch (shape) {
      case MotifShape::kDisc: return d <= radius;
      case MotifShape::kRing: return d <= radius && d >= 0.55 * radius;
      case MotifShape::kBlob: {
        const double theta = std::atan2(dy, dx);
        return d <= radius * (1.0 + 0.22 * std::sin(3.0 * theta + phase1) + 0.12 * std::sin(5.0 * theta + phase2));
      }
    }
    return false;
  }
};

/// Pixel-center rasterisation; returns the tight box, or nullopt when empty.
std::optional<BoundingBox> motif_box(const Motif& m, int size) {
  const int lo_x = std::max(0, static_cast<int>(std::floor(m.cx - m.extent())) - 1);
  const int hi_x = std::min(size, static_cast<int>(std::ceil(m.cx + m.extent())) + 1);
  const int lo_y = std::max(0, static_cast<int>(std::floor(m.cy - m.extent())) - 1);
  const int hi_y = std::min(size, static_cast<int>(std::ceil(m.cy + m.extent())) + 1);
  std::optional<BoundingBox> box;
  for (int y = lo_y; y < hi_y; ++y)
    for (int x = lo_x; x < hi_x; ++x) {
      if (!m.covers(x + 0.5, y + 0.5)) continue;
      const BoundingBox px{x, y, x + 1, y + 1};
      box = box ? box->united(px) : px;
    }
  return box;
}

int class_for_case(const PhantomConfig& c, int index) {
  if (c.per_class_counts.empty()) return index % c.num_classes + 1;
  int acc = 0;
  for (int k = 0; k < c.num_classes; ++k) {
    acc += c.per_class_counts[k];
    if (index < acc) return k + 1;
  }
  throw std::out_of_range("phantom case index out of range");
}

int case_count(const PhantomConfig& c) {
  if (c.per_class_counts.empty()) return c.n_cases;
  int n = 0;
  for (int v : c.per_class_counts) n += v;
  return n;
}

std::string case_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%06d", index);
  return buf;
}

}  // namespace

std::array<uint8_t, 3> skin_palette(Fitzpatrick f) { return kSkinPalette.at(static_cast<std::size_t>(level(f) - 1)); }

MotifRule motif_rule(int class_id) {
  if (class_id < 1 || class_id > kMaxClasses) throw std::out_of_range("class id " + std::to_string(class_id));
  const int k = class_id - 1;
  MotifRule rule;
  rule.shape = static_cast<MotifShape>(k % 3);
  rule.base_color = hsv_to_rgb(std::fmod(k * 137.508, 360.0), 0.85, 0.75);
  const int size_bucket = (k / 3) % 3;
  rule.radius_min = 0.045 + 0.02 * size_bucket;
  rule.radius_max = rule.radius_min * 1.6;
  return rule;
}

std::array<uint8_t, 3> lesion_color(int class_id, Fitzpatrick f) {
  const auto base = motif_rule(class_id).base_color;
  const auto skin = skin_palette(f);
  // Lesions darken with the surrounding skin.
  double scale = 1.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    std::array<uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
      const double v = scale * (0.75 * base[c] + 0.25 * 0.5 * skin[c]);
      out[c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
    if (max_channel_gap(out, skin) >= kMinLesionContrast) return out;
    scale *= 0.7;
  }
  // Fallback for pathological palettes: pure contrast in the red channel.
  return {static_cast<uint8_t>(skin[0] > 127 ? 0 : 255), skin[1], skin[2]};
}

std::vector<ConditionClass> phantom_class_table(int k) {
  if (k < 1 || k > kMaxClasses) throw std::invalid_argument("phantom class count must be in [1, 26]");
  std::vector<ConditionClass> table;
  for (int id = 1; id <= k; ++id) {
    const auto rule = motif_rule(id);
    table.push_back({id, std::string(kShapeNames[static_cast<int>(rule.shape)]) + "-" +
                             std::string(kHueNames[static_cast<std::size_t>(id - 1)])});
  }
  return table;
}

void validate_phantom_config(const PhantomConfig& c) {
  if (c.num_classes < 1 || c.num_classes > kMaxClasses) throw std::invalid_argument("phantom: K must be in [1, 26]");
  if (c.image_size < 32) throw std::invalid_argument("phantom: image_size must be >= 32");
  if (c.jitter < 0 || 3 * c.jitter >= kMinLesionContrast) throw std::invalid_argument("phantom: jitter must be in [0, 13]");
  if (!c.per_class_counts.empty()) {
    if (static_cast<int>(c.per_class_counts.size()) != c.num_classes) {
      throw std::invalid_argument("phantom: per_class_counts must have K entries");
    }
    for (int v : c.per_class_counts)
      if (v < 0) throw std::invalid_argument("phantom: negative per-class count");
  }
  if (case_count(c) < 1) throw std::invalid_argument("phantom: n_cases must be >= 1");
  if (c.train_ratio < 0 || c.validation_ratio < 0 || c.train_ratio + c.validation_ratio > 1.0) {
    throw std::invalid_argument("phantom: invalid split ratios");
  }
}

PhantomCase render_phantom_case(const PhantomConfig& config, int index) {
  validate_phantom_config(config);
  const int size = config.image_size;
  PhantomCase out;
  auto& rec = out.record;
  rec.case_id = case_id_for(index);
  rec.image_path = "images/" + rec.case_id + ".png";
  const int class_id = class_for_case(config, index);
  rec.condition = phantom_class_table(config.num_classes)[static_cast<std::size_t>(class_id - 1)];
  rec.split = split_for_case(rec.case_id, config.train_ratio, config.validation_ratio);

  Rng rng(derive_seed(config.seed, rec.case_id));
  rec.skin = fitzpatrick_from_level(uniform_int(rng, 1, 6));
  const int wanted = uniform_int(rng, 1, kMaxMotifs);

  RgbImage img(size, size);
  const auto skin = skin_palette(rec.skin);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) {
        const int v = skin[c] + uniform_int(rng, -config.jitter, config.jitter);
        img.at(x, y, c) = static_cast<uint8_t>(std::clamp(v, 0, 255));
      }

  const auto rule = motif_rule(class_id);
  const auto paint = lesion_color(class_id, rec.skin);
  std::vector<Motif> placed;
  for (int attempt = 0; attempt < kPlacementAttempts && static_cast<int>(placed.size()) < wanted; ++attempt) {
    Motif m;
    m.shape = rule.shape;
    m.radius = uniform_real(rng, rule.radius_min, rule.radius_max) * size;
    m.phase1 = uniform_real(rng, 0.0, 2.0 * std::numbers::pi);
    m.phase2 = uniform_real(rng, 0.0, 2.0 * std::numbers::pi);
    const double ext = m.extent() + 1.0;
    m.cx = uniform_real(rng, ext, size - ext);
    m.cy = uniform_real(rng, ext, size - ext);
    const auto box = motif_box(m, size);
    if (!box) continue;
    bool clash = false;
    for (const auto& b : rec.rois) clash = clash || box->dilated(2).intersects(b);
    if (clash) continue;
    placed.push_back(m);
    rec.rois.push_back(*box);
  }

  for (std::size_t i = 0; i < placed.size(); ++i) {
    const auto& box = rec.rois[i];
    for (int y = box.y0; y < box.y1; ++y)
      for (int x = box.x0; x < box.x1; ++x) {
        if (!placed[i].covers(x + 0.5, y + 0.5)) continue;
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = paint[c];
      }
  }
  out.image = std::move(img);
  return out;
}

DatasetManifest generate_phantom_dataset(const PhantomConfig& config, const std::filesystem::path& out_dir) {
  validate_phantom_config(config);
  std::filesystem::create_directories(out_dir / "images");
  DatasetManifest m;
  m.class_table = phantom_class_table(config.num_classes);
  m.image_width = config.image_size;
  m.image_height = config.image_size;
  m.root = out_dir;
  const int n = case_count(config);
  for (int i = 0; i < n; ++i) {
    auto pc = render_phantom_case(config, i);
    write_png(out_dir / pc.record.image_path, pc.image);
    m.records.push_back(std::move(pc.record));
  }
  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace dermgan
