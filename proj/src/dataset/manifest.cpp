#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "dermgan/dataset.hpp"
#include "dermgan/rng.hpp"

namespace dermgan {

using ojson = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 6> kRoman = {"I", "II", "III", "IV", "V", "VI"};
constexpr std::string_view kFormatTag = "dermgan-manifest";
constexpr int kFormatVersion = 1;

ojson box_to_json(const BoundingBox& b) { return ojson::array({b.x0, b.y0, b.x1, b.y1}); }

BoundingBox box_from_json(const ojson& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x0,y0,x1,y1]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

ojson record_to_json(const CaseRecord& r) {
  ojson j;
  j["case_id"] = r.case_id;
  j["image_path"] = r.image_path;
  j["fitzpatrick"] = std::string(to_string(r.skin));
  j["condition"] = r.condition.name;
  j["condition_id"] = r.condition.id;
  ojson rois = ojson::array();
  for (const auto& b : r.rois) rois.push_back(box_to_json(b));
  j["rois"] = std::move(rois);
  j["split"] = std::string(to_string(r.split));
  if (r.synthetic) j["synthetic"] = true;
  if (r.provenance) {
    const auto& p = *r.provenance;
    ojson pj;
    pj["source_case_id"] = p.source_case_id;
    if (p.window) pj["window"] = box_to_json(*p.window);
    if (p.seed) pj["seed"] = *p.seed;
    if (p.checkpoint_id) pj["checkpoint_id"] = *p.checkpoint_id;
    if (p.transform) pj["transform"] = *p.transform;
    j["provenance"] = std::move(pj);
  }
  return j;
}

CaseRecord record_from_json(const ojson& j) {
  CaseRecord r;
  r.case_id = j.at("case_id").get<std::string>();
  r.image_path = j.at("image_path").get<std::string>();
  r.skin = parse_fitzpatrick(j.at("fitzpatrick").get<std::string>());
  r.condition.name = j.at("condition").get<std::string>();
  r.condition.id = j.at("condition_id").get<int>();
  for (const auto& b : j.at("rois")) r.rois.push_back(box_from_json(b));
  r.split = parse_split(j.at("split").get<std::string>());
  r.synthetic = j.value("synthetic", false);
  if (j.contains("provenance")) {
    const auto& pj = j["provenance"];
    Provenance p;
    p.source_case_id = pj.at("source_case_id").get<std::string>();
    if (pj.contains("window")) p.window = box_from_json(pj["window"]);
    if (pj.contains("seed")) p.seed = pj["seed"].get<uint64_t>();
    if (pj.contains("checkpoint_id")) p.checkpoint_id = pj["checkpoint_id"].get<std::string>();
    if (pj.contains("transform")) p.transform = pj["transform"].get<std::string>();
    r.provenance = std::move(p);
  }
  return r;
}

}  // namespace

std::string_view to_string(Fitzpatrick f) { return kRoman.at(static_cast<std::size_t>(level(f) - 1)); }

Fitzpatrick parse_fitzpatrick(std::string_view s) {
  for (std::size_t i = 0; i < kRoman.size(); ++i) {
    if (kRoman[i] == s) return static_cast<Fitzpatrick>(i + 1);
  }
  throw std::invalid_argument("unknown Fitzpatrick type '" + std::string(s) + "'");
}

Fitzpatrick fitzpatrick_from_level(int lvl) {
  if (lvl < 1 || lvl > 6) throw std::invalid_argument("Fitzpatrick level out of range: " + std::to_string(lvl));
  return static_cast<Fitzpatrick>(lvl);
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "validation") return Split::kValidation;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

std::filesystem::path DatasetManifest::resolve(const CaseRecord& r) const {
  std::filesystem::path p(r.image_path);
  return p.is_absolute() ? p : root / p;
}

const ConditionClass& DatasetManifest::condition(int id) const {
  for (const auto& c : class_table) {
    if (c.id == id) return c;
  }
  throw std::out_of_range("condition id " + std::to_string(id) + " not in class table");
}

std::vector<const CaseRecord*> DatasetManifest::in_split(Split s) const {
  std::vector<const CaseRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

Split split_for_case(std::string_view case_id, double train_ratio, double validation_ratio) {
  const double u = static_cast<double>(splitmix64(stable_hash(case_id)) >> 11) * 0x1.0p-53;
  if (u < train_ratio) return Split::kTrain;
  if (u < train_ratio + validation_ratio) return Split::kValidation;
  return Split::kTest;
}

void validate_record(const CaseRecord& r, const DatasetManifest& m, std::optional<std::pair<int, int>> image_size) {
  if (r.case_id.empty()) throw ManifestValidationError(r.case_id, "empty case_id");
  if (r.rois.empty()) throw ManifestValidationError(r.case_id, "rois must be non-empty");
  const ConditionClass* cls = nullptr;
  for (const auto& c : m.class_table) {
    if (c.id == r.condition.id) cls = &c;
  }
  if (!cls) {
    throw ManifestValidationError(r.case_id, "condition_id " + std::to_string(r.condition.id) + " not in class table");
  }
  if (cls->name != r.condition.name) {
    throw ManifestValidationError(r.case_id, "condition name '" + r.condition.name + "' does not match class table '" +
                                                 cls->name + "' for id " + std::to_string(r.condition.id));
  }
  for (const auto& b : r.rois) {
    if (!b.valid()) {
      throw ManifestValidationError(r.case_id, "degenerate roi [" + std::to_string(b.x0) + "," + std::to_string(b.y0) +
                                                   "," + std::to_string(b.x1) + "," + std::to_string(b.y1) +
                                                   "]: requires x0 < x1 and y0 < y1");
    }
    if (b.x0 < 0 || b.y0 < 0) throw ManifestValidationError(r.case_id, "roi has negative origin");
    if (image_size && !b.within(image_size->first, image_size->second)) {
      throw ManifestValidationError(r.case_id, "roi [" + std::to_string(b.x0) + "," + std::to_string(b.y0) + "," +
                                                   std::to_string(b.x1) + "," + std::to_string(b.y1) +
                                                   "] exceeds image bounds " + std::to_string(image_size->first) +
                                                   "x" + std::to_string(image_size->second));
    }
  }
}

void validate_manifest(const DatasetManifest& m, bool check_image_bounds) {
  std::set<int> ids;
  for (const auto& c : m.class_table) {
    if (c.id < 1) throw ManifestValidationError("<class table>", "class ids must be >= 1");
    if (!ids.insert(c.id).second) throw ManifestValidationError("<class table>", "duplicate class id");
  }
  std::set<std::string> seen;
  for (const auto& r : m.records) {
    if (!seen.insert(r.case_id).second) throw ManifestValidationError(r.case_id, "duplicate case_id");
    std::optional<std::pair<int, int>> dims;
    if (check_image_bounds) {
      try {
        dims = read_png_size(m.resolve(r));
      } catch (const ImageIoError& e) {
        throw ManifestValidationError(r.case_id, std::string("image unreadable: ") + e.what());
      }
    }
    validate_record(r, m, dims);
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestParseError(path.string(), lineno, e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != kFormatTag) throw std::invalid_argument("missing manifest header line");
        if (j.value("version", 0) != kFormatVersion) throw std::invalid_argument("unsupported manifest version");
        m.image_width = j.value("image_width", 0);
        m.image_height = j.value("image_height", 0);
        for (const auto& c : j.at("classes")) m.class_table.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
        have_header = true;
        continue;
      }
      m.records.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestParseError(path.string(), lineno, e.what());
    } catch (const std::invalid_argument& e) {
      throw ManifestParseError(path.string(), lineno, e.what());
    }
  }
  if (!have_header) throw ManifestParseError(path.string(), lineno, "empty manifest (no header line)");
  validate_manifest(m, options.check_image_bounds);
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ostringstream os;
  ojson header;
  header["format"] = kFormatTag;
  header["version"] = kFormatVersion;
  header["image_width"] = m.image_width;
  header["image_height"] = m.image_height;
  ojson classes = ojson::array();
  for (const auto& c : m.class_table) classes.push_back({{"id", c.id}, {"name", c.name}});
  header["classes"] = std::move(classes);
  os << header.dump() << '\n';
  for (const auto& r : m.records) os << record_to_json(r).dump() << '\n';

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << os.str();
  out.flush();
  if (!out) throw std::runtime_error("write failed for manifest " + path.string());
}

}  // namespace dermgan
