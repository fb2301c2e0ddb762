#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dermgan/image.hpp"

namespace dermgan {

enum class Fitzpatrick : uint8_t { I = 1, II, III, IV, V, VI };

inline constexpr std::array<Fitzpatrick, 6> kAllFitzpatrick = {Fitzpatrick::I,  Fitzpatrick::II, Fitzpatrick::III,
                                                               Fitzpatrick::IV, Fitzpatrick::V,  Fitzpatrick::VI};

[[nodiscard]] constexpr int level(Fitzpatrick f) { return static_cast<int>(f); }
[[nodiscard]] std::string_view to_string(Fitzpatrick f);
/// Accepts roman numerals "I".."VI".
[[nodiscard]] Fitzpatrick parse_fitzpatrick(std::string_view s);
[[nodiscard]] Fitzpatrick fitzpatrick_from_level(int level);

struct ConditionClass {
  int id = 0;  // 1..K; 0 is reserved for "no condition" in map encodings
  std::string name;
  friend bool operator==(const ConditionClass&, const ConditionClass&) = default;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  [[nodiscard]] int width() const { return x1 - x0; }
  [[nodiscard]] int height() const { return y1 - y0; }
  [[nodiscard]] int64_t area() const { return static_cast<int64_t>(width()) * height(); }
  [[nodiscard]] int max_dim() const { return std::max(width(), height()); }
  [[nodiscard]] bool valid() const { return x0 < x1 && y0 < y1; }
  [[nodiscard]] bool within(int w, int h) const { return x0 >= 0 && y0 >= 0 && x1 <= w && y1 <= h; }
  [[nodiscard]] bool contains(const BoundingBox& o) const {
    return x0 <= o.x0 && y0 <= o.y0 && o.x1 <= x1 && o.y1 <= y1;
  }
  [[nodiscard]] bool contains_pixel(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  [[nodiscard]] bool intersects(const BoundingBox& o) const {
    return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
  [[nodiscard]] BoundingBox dilated(int m) const { return {x0 - m, y0 - m, x1 + m, y1 + m}; }
  [[nodiscard]] BoundingBox united(const BoundingBox& o) const {
    return {std::min(x0, o.x0), std::min(y0, o.y0), std::max(x1, o.x1), std::max(y1, o.y1)};
  }

  friend auto operator<=>(const BoundingBox&, const BoundingBox&) = default;
};

enum class Split { kTrain, kValidation, kTest };
[[nodiscard]] std::string_view to_string(Split s);
[[nodiscard]] Split parse_split(std::string_view s);

/// Lineage of derived cases: crops point at their source case and window,
/// synthetic images at their pool map, seed, and generator checkpoint.
struct Provenance {
  std::string source_case_id;
  std::optional<BoundingBox> window;
  std::optional<uint64_t> seed;
  std::optional<std::string> checkpoint_id;
  std::optional<std::string> transform;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct CaseRecord {
  std::string case_id;
  std::string image_path;  // relative to the manifest directory unless absolute
  Fitzpatrick skin = Fitzpatrick::I;
  ConditionClass condition;
  std::vector<BoundingBox> rois;
  Split split = Split::kTrain;
  bool synthetic = false;
  std::optional<Provenance> provenance;
  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

struct DatasetManifest {
  std::vector<ConditionClass> class_table;
  int image_width = 0;  // size hints; 0 when heterogeneous
  int image_height = 0;
  std::vector<CaseRecord> records;
  /// Directory relative image paths resolve against. Not serialised.
  std::filesystem::path root;

  [[nodiscard]] std::filesystem::path resolve(const CaseRecord& r) const;
  [[nodiscard]] int num_classes() const { return static_cast<int>(class_table.size()); }
  [[nodiscard]] const ConditionClass& condition(int id) const;
  [[nodiscard]] std::vector<const CaseRecord*> in_split(Split s) const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.class_table == b.class_table && a.image_width == b.image_width && a.image_height == b.image_height &&
           a.records == b.records;
  }
};

class ManifestParseError : public std::runtime_error {
 public:
  ManifestParseError(const std::string& path, int line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  [[nodiscard]] int line() const { return line_; }

 private:
  int line_;
};

class ManifestValidationError : public std::runtime_error {
 public:
  ManifestValidationError(const std::string& case_id, const std::string& what)
      : std::runtime_error("case '" + case_id + "': " + what), case_id_(case_id) {}
  [[nodiscard]] const std::string& case_id() const { return case_id_; }

 private:
  std::string case_id_;
};

struct ManifestLoadOptions {
  /// Decode each PNG header and check ROIs against the real image size.
  bool check_image_bounds = true;
};

/// Checks CaseRecord and manifest invariants; throws ManifestValidationError.
/// `image_size` supplies actual dimensions when known.
void validate_record(const CaseRecord& r, const DatasetManifest& m, std::optional<std::pair<int, int>> image_size);
void validate_manifest(const DatasetManifest& m, bool check_image_bounds);

[[nodiscard]] DatasetManifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions options = {});
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

[[nodiscard]] Split split_for_case(std::string_view case_id, double train_ratio, double validation_ratio);

// ---- phantom dataset ------------------------------------------------------

struct PhantomConfig {
  int n_cases = 200;
  int image_size = 128;
  int num_classes = 8;
  uint64_t seed = 7;
  /// When non-empty, exact per-class case counts (size K); overrides n_cases.
  std::vector<int> per_class_counts;
  int jitter = 6;  // per-pixel background noise amplitude
  double train_ratio = 0.7;
  double validation_ratio = 0.15;
};

enum class MotifShape { kDisc, kRing, kBlob };

/// Deterministic appearance rule for one condition class.
struct MotifRule {
  MotifShape shape;
  std::array<uint8_t, 3> base_color;
  double radius_min;  // fraction of image side
  double radius_max;
};

[[nodiscard]] MotifRule motif_rule(int class_id);
[[nodiscard]] std::array<uint8_t, 3> skin_palette(Fitzpatrick f);
/// Lesion paint colour; differs from the skin palette by >= kMinLesionContrast in some channel.
inline constexpr int kMinLesionContrast = 40;
[[nodiscard]] std::array<uint8_t, 3> lesion_color(int class_id, Fitzpatrick f);
[[nodiscard]] std::vector<ConditionClass> phantom_class_table(int k);
void validate_phantom_config(const PhantomConfig& c);

struct PhantomCase {
  CaseRecord record;
  RgbImage image;
};

/// Renders case `index` of the configured dataset in memory.
[[nodiscard]] PhantomCase render_phantom_case(const PhantomConfig& config, int index);

/// Writes images/<case_id>.png and manifest.jsonl under `out_dir`.
DatasetManifest generate_phantom_dataset(const PhantomConfig& config, const std::filesystem::path& out_dir);

}  // namespace dermgan
