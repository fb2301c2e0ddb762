#include "dermgan/synthesis.hpp"

#include <cstdio>

#include "dermgan/rng.hpp"

namespace dermgan {

std::vector<PoolMap> map_pool(const DatasetManifest& manifest, Split split) {
  const CodeTables codes(manifest.num_classes());
  std::vector<PoolMap> pool;
  for (const auto* r : manifest.in_split(split)) {
    int w = manifest.image_width, h = manifest.image_height;
    if (w <= 0 || h <= 0) std::tie(w, h) = read_png_size(manifest.resolve(*r));
    pool.push_back({r->case_id, map_for_record(*r, w, h, codes)});
  }
  return pool;
}

SampledMap sample_semantic_map(const std::vector<PoolMap>& pool, uint64_t seed, const CodeTables& codes) {
  if (pool.empty()) throw MapError("semantic map pool is empty");
  Rng rng(seed);
  const auto idx = uniform_int<std::size_t>(rng, 0, pool.size() - 1);
  return {idx, perturb_map(pool[idx].map, derive_seed(seed, "perturb"), codes)};
}

template <typename T>
std::vector<RgbImage> render_maps(const Generator<T>& g, const std::vector<SemanticMap>& maps, int batch_size) {
  nn::NoGradGuard no_grad;
  std::vector<RgbImage> out;
  out.reserve(maps.size());
  const int s = g.config().image_size;
  for (std::size_t start = 0; start < maps.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(maps.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<ImageTensor> inputs;
    for (std::size_t i = start; i < end; ++i) {
      if (maps[i].width() != s || maps[i].height() != s) {
        throw MapError("map " + std::to_string(maps[i].width()) + "x" + std::to_string(maps[i].height()) +
                       " does not match generator image size " + std::to_string(s));
      }
      inputs.push_back(normalized(maps[i]));
    }
    const auto y = g.forward(nn::Var<T>(to_batch<T>(inputs)));
    for (const auto& img : from_batch(y.value())) out.push_back(to_rgb_image(img));
  }
  return out;
}

std::vector<RgbImage> render_maps(const std::filesystem::path& checkpoint, const std::vector<SemanticMap>& maps) {
  const auto info = read_checkpoint_info(checkpoint);
  if (info.precision == "float64") return render_maps(load_generator<double>(checkpoint), maps);
  return render_maps(load_generator<float>(checkpoint), maps);
}

DatasetManifest generate_images(const GenerationRequest& req) {
  if (req.count < 1) throw std::invalid_argument("generation count must be >= 1");
  if (req.pool.empty() && req.triples.empty()) throw MapError("generation needs a map pool or explicit triples");
  if (req.class_table.empty()) throw std::invalid_argument("generation needs the class table");
  const auto info = read_checkpoint_info(req.checkpoint);
  const int size = info.generator.image_size;
  const CodeTables codes(static_cast<int>(req.class_table.size()));
  const std::string ckpt_id = checkpoint_id(req.checkpoint);

  // Class schedule: cycle through classes that still have quota.
  std::vector<int> class_order;
  if (!req.per_class_counts.empty()) {
    if (req.pool.empty()) throw std::invalid_argument("per-class counts need a map pool");
    std::map<int, int> remaining = req.per_class_counts;
    int total = 0;
    for (const auto& [k, v] : remaining) {
      if (v < 0) throw std::invalid_argument("negative per-class count");
      total += v;
    }
    if (total != req.count) {
      throw std::invalid_argument("per-class counts sum to " + std::to_string(total) + ", expected " +
                                  std::to_string(req.count));
    }
    while (static_cast<int>(class_order.size()) < total) {
      for (auto& [k, v] : remaining) {
        if (v > 0) {
          class_order.push_back(k);
          --v;
        }
      }
    }
  }
  std::map<int, std::vector<PoolMap>> by_class;
  for (const auto& p : req.pool) by_class[p.map.condition.id].push_back(p);

  std::vector<SemanticMap> maps;
  std::vector<CaseRecord> records;
  for (int i = 0; i < req.count; ++i) {
    const uint64_t seed = derive_seed(req.seed, static_cast<uint64_t>(i));
    Provenance prov;
    prov.seed = seed;
    prov.checkpoint_id = ckpt_id;
    SemanticMap m;
    if (!req.pool.empty()) {
      const std::vector<PoolMap>* pool = &req.pool;
      if (!class_order.empty()) {
        const int k = class_order[static_cast<std::size_t>(i)];
        const auto it = by_class.find(k);
        if (it == by_class.end()) throw MapError("map pool has no maps of class " + std::to_string(k));
        pool = &it->second;
      }
      auto sampled = sample_semantic_map(*pool, seed, codes);
      prov.source_case_id = (*pool)[sampled.pool_index].source_id;
      prov.transform = "perturb";
      m = std::move(sampled.map);
    } else {
      const auto& t = req.triples[static_cast<std::size_t>(i) % req.triples.size()];
      if (t.condition_id < 1 || t.condition_id > static_cast<int>(req.class_table.size())) {
        throw MapError("triple condition id " + std::to_string(t.condition_id) + " outside the class table");
      }
      m = encode_map(t.skin, req.class_table[static_cast<std::size_t>(t.condition_id - 1)], t.rois, size, size, codes);
      prov.source_case_id = "triple_" + std::to_string(i % req.triples.size());
      prov.transform = "explicit";
    }
    if (m.width() != size || m.height() != size) {
      throw MapError("map " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                     " does not match checkpoint image size " + std::to_string(size));
    }
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%06d", req.id_prefix.c_str(), i);
    CaseRecord r;
    r.case_id = id;
    r.image_path = "images/" + r.case_id + ".png";
    r.skin = m.skin;
    r.condition = m.condition;
    r.rois = m.rois;
    r.split = Split::kTrain;
    r.synthetic = true;
    r.provenance = std::move(prov);
    records.push_back(std::move(r));
    maps.push_back(std::move(m));
  }

  const auto images = render_maps(req.checkpoint, maps);
  std::filesystem::create_directories(req.out_dir / "images");
  DatasetManifest out;
  out.class_table = req.class_table;
  out.image_width = size;
  out.image_height = size;
  out.root = req.out_dir;
  for (std::size_t i = 0; i < records.size(); ++i) write_png(req.out_dir / records[i].image_path, images[i]);
  out.records = std::move(records);
  validate_manifest(out, false);
  save_manifest(out, req.out_dir / "manifest.jsonl");
  return out;
}

std::vector<SemanticMap> color_sweep_maps(const SemanticMap& map, const CodeTables& codes) {
  std::vector<SemanticMap> out;
  for (auto f : kAllFitzpatrick) out.push_back(set_skin_color(map, f, codes));
  return out;
}

std::vector<SemanticMap> size_sweep_maps(const SemanticMap& map, const std::vector<double>& scales,
                                         const CodeTables& codes) {
  if (scales.empty()) throw MapError("size sweep needs at least one scale");
  std::vector<SemanticMap> out;
  for (double s : scales) out.push_back(set_roi_scale(map, s, codes));
  return out;
}

std::vector<RgbImage> color_sweep(const SemanticMap& map, const std::filesystem::path& checkpoint,
                                  const CodeTables& codes) {
  return render_maps(checkpoint, color_sweep_maps(map, codes));
}

std::vector<RgbImage> size_sweep(const SemanticMap& map, const std::vector<double>& scales,
                                 const std::filesystem::path& checkpoint, const CodeTables& codes) {
  return render_maps(checkpoint, size_sweep_maps(map, scales, codes));
}

void write_sweep(const std::vector<RgbImage>& images, const std::filesystem::path& out_dir,
                 const std::string& prefix) {
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    write_png(out_dir / (prefix + "_" + std::to_string(i) + ".png"), images[i]);
  }
  write_png(out_dir / (prefix + "_sheet.png"), contact_sheet(images, static_cast<int>(images.size())));
}

template std::vector<RgbImage> render_maps(const Generator<float>&, const std::vector<SemanticMap>&, int);
template std::vector<RgbImage> render_maps(const Generator<double>&, const std::vector<SemanticMap>&, int);

}  // namespace dermgan
