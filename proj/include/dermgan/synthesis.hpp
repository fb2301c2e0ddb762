#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dermgan/dataset.hpp"
#include "dermgan/networks.hpp"
#include "dermgan/semantic_map.hpp"

namespace dermgan {

struct PoolMap {
  std::string source_id;  // case id the map was taken from
  SemanticMap map;
};

/// Semantic maps of every record in `split` of a (crop) manifest.
[[nodiscard]] std::vector<PoolMap> map_pool(const DatasetManifest& manifest, Split split);

struct SampledMap {
  std::size_t pool_index;
  SemanticMap map;
};

/// Uniform pool draw followed by perturb_map; deterministic per seed.
[[nodiscard]] SampledMap sample_semantic_map(const std::vector<PoolMap>& pool, uint64_t seed, const CodeTables& codes);

/// Symbolic (skin, condition, boxes) description of a map.
struct MapTriple {
  Fitzpatrick skin;
  int condition_id;
  std::vector<BoundingBox> rois;
};

struct GenerationRequest {
  std::filesystem::path checkpoint;
  /// Pool-sourced when non-empty; otherwise `triples` are used in order, unperturbed.
  std::vector<PoolMap> pool;
  std::vector<MapTriple> triples;
  std::vector<ConditionClass> class_table;
  int count = 1;
  uint64_t seed = 0;
  /// Optional class composition (class id -> count, summing to `count`).
  /// Classes are cycled and each draw is restricted to pool maps of that class.
  std::map<int, int> per_class_counts;
  std::filesystem::path out_dir;
  std::string id_prefix = "syn";
};

/// Writes out_dir/images/<prefix>_NNNNNN.png and out_dir/manifest.jsonl.
/// Records carry synthetic=true and provenance {source map, seed, checkpoint id}.
DatasetManifest generate_images(const GenerationRequest& request);

/// Generator outputs for a list of maps, as 8-bit images. Batched, no grad.
template <typename T>
[[nodiscard]] std::vector<RgbImage> render_maps(const Generator<T>& g, const std::vector<SemanticMap>& maps,
                                                int batch_size = 16);

/// Loads the checkpoint once (any precision) and renders the maps.
[[nodiscard]] std::vector<RgbImage> render_maps(const std::filesystem::path& checkpoint,
                                                const std::vector<SemanticMap>& maps);

/// Maps for the Type I..VI sweep (tone plane replaced, boxes untouched).
[[nodiscard]] std::vector<SemanticMap> color_sweep_maps(const SemanticMap& map, const CodeTables& codes);
[[nodiscard]] std::vector<SemanticMap> size_sweep_maps(const SemanticMap& map, const std::vector<double>& scales,
                                                       const CodeTables& codes);

/// Six generated images, Type I first.
[[nodiscard]] std::vector<RgbImage> color_sweep(const SemanticMap& map, const std::filesystem::path& checkpoint,
                                                const CodeTables& codes);
/// One generated image per scale.
[[nodiscard]] std::vector<RgbImage> size_sweep(const SemanticMap& map, const std::vector<double>& scales,
                                               const std::filesystem::path& checkpoint, const CodeTables& codes);

/// Individual PNGs <prefix>_<i>.png plus <prefix>_sheet.png in one row.
void write_sweep(const std::vector<RgbImage>& images, const std::filesystem::path& out_dir, const std::string& prefix);

}  // namespace dermgan
