#include "dermgan/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dermgan/rng.hpp"

namespace dermgan {

std::vector<RoiGroup> group_adjacent_rois(const std::vector<BoundingBox>& rois, int margin) {
  const int n = static_cast<int>(rois.size());
  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (rois[i].dilated(margin).intersects(rois[j].dilated(margin))) {
        const int a = find(i), b = find(j);
        parent[std::max(a, b)] = std::min(a, b);
      }
    }
  std::vector<RoiGroup> groups;
  std::vector<int> slot(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    const int root = find(i);
    if (slot[root] < 0) {
      slot[root] = static_cast<int>(groups.size());
      groups.push_back({{}, rois[i]});
    }
    auto& g = groups[static_cast<std::size_t>(slot[root])];
    g.member_indices.push_back(i);
    g.hull = g.hull.united(rois[i]);
  }
  return groups;
}

BoundingBox sample_crop_window(const RoiGroup& group, int image_width, int image_height, int target_size,
                               double scale_max, uint64_t seed) {
  const int min_side = std::min(image_width, image_height);
  if (min_side < target_size) {
    throw CropError("image " + std::to_string(image_width) + "x" + std::to_string(image_height) +
                    " is smaller than the crop target " + std::to_string(target_size));
  }
  const auto& hull = group.hull;
  if (!hull.valid() || !hull.within(image_width, image_height)) throw CropError("group hull outside image");
  Rng rng(seed);
  const int hull_dim = hull.max_dim();
  const int lo = std::max(target_size, hull_dim);

  if (lo > min_side) {
    // Hull cannot fit in any square: largest square centred on the hull.
    const int side = min_side;
    const double cx = 0.5 * (hull.x0 + hull.x1), cy = 0.5 * (hull.y0 + hull.y1);
    const int x0 = std::clamp(static_cast<int>(std::lround(cx - side / 2.0)), 0, image_width - side);
    const int y0 = std::clamp(static_cast<int>(std::lround(cy - side / 2.0)), 0, image_height - side);
    return {x0, y0, x0 + side, y0 + side};
  }
  const int hi = std::max(lo, std::min(min_side, static_cast<int>(std::floor(scale_max * hull_dim))));
  const int side = uniform_int(rng, lo, hi);
  const int x_lo = std::max(0, hull.x1 - side), x_hi = std::min(hull.x0, image_width - side);
  const int y_lo = std::max(0, hull.y1 - side), y_hi = std::min(hull.y0, image_height - side);
  const int x0 = uniform_int(rng, x_lo, x_hi);
  const int y0 = uniform_int(rng, y_lo, y_hi);
  return {x0, y0, x0 + side, y0 + side};
}

BoundingBox map_box(const CropTransform& t, const BoundingBox& b) {
  // Small epsilon keeps exact multiples from being pushed outward by rounding error.
  constexpr double kEps = 1e-9;
  BoundingBox out{static_cast<int>(std::floor(t.map_x(b.x0) + kEps)), static_cast<int>(std::floor(t.map_y(b.y0) + kEps)),
                  static_cast<int>(std::ceil(t.map_x(b.x1) - kEps)), static_cast<int>(std::ceil(t.map_y(b.y1) - kEps))};
  out.x0 = std::max(out.x0, 0);
  out.y0 = std::max(out.y0, 0);
  out.x1 = std::min(out.x1, t.target_size);
  out.y1 = std::min(out.y1, t.target_size);
  return out;
}

CropResult crop_and_resize(const ImageTensor& image, const BoundingBox& window, const std::vector<BoundingBox>& rois,
                           int target_size) {
  if (!window.valid() || !window.within(image.width, image.height)) throw CropError("crop window outside image");
  if (target_size < 1) throw CropError("target size must be positive");
  CropResult out;
  out.image = ImageTensor(target_size, target_size);
  const double sx = static_cast<double>(window.width()) / target_size;
  const double sy = static_cast<double>(window.height()) / target_size;
  for (int v = 0; v < target_size; ++v) {
    const double src_y = std::clamp(window.y0 + (v + 0.5) * sy - 0.5, static_cast<double>(window.y0),
                                    static_cast<double>(window.y1 - 1));
    const int y0 = static_cast<int>(std::floor(src_y));
    const int y1 = std::min(y0 + 1, window.y1 - 1);
    const double fy = src_y - y0;
    for (int u = 0; u < target_size; ++u) {
      const double src_x = std::clamp(window.x0 + (u + 0.5) * sx - 0.5, static_cast<double>(window.x0),
                                      static_cast<double>(window.x1 - 1));
      const int x0 = static_cast<int>(std::floor(src_x));
      const int x1 = std::min(x0 + 1, window.x1 - 1);
      const double fx = src_x - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - fx) * image.at(x0, y0, c) + fx * image.at(x1, y0, c);
        const double bot = (1 - fx) * image.at(x0, y1, c) + fx * image.at(x1, y1, c);
        out.image.at(u, v, c) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  const CropTransform t{window, target_size};
  for (const auto& b : rois) {
    const auto mb = map_box(t, b);
    if (mb.valid()) out.rois.push_back(mb);
  }
  return out;
}

DatasetManifest build_crop_set(const DatasetManifest& source, const CropSetConfig& config,
                               const std::filesystem::path& out_dir) {
  if (config.crops_per_group < 1) throw CropError("crops_per_group must be >= 1");
  std::filesystem::create_directories(out_dir / "crops");
  DatasetManifest out;
  out.class_table = source.class_table;
  out.image_width = config.target_size;
  out.image_height = config.target_size;
  out.root = out_dir;
  for (const auto& rec : source.records) {
    RgbImage img;
    try {
      img = read_png(source.resolve(rec));
    } catch (const ImageIoError& e) {
      throw ImageIoError("case '" + rec.case_id + "': " + e.what());
    }
    const ImageTensor tensor = to_image_tensor(img);
    const uint64_t case_seed = derive_seed(config.seed, rec.case_id);
    const auto groups = group_adjacent_rois(rec.rois, config.margin);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (int ci = 0; ci < config.crops_per_group; ++ci) {
        const uint64_t crop_seed = derive_seed(case_seed, gi * 1000 + static_cast<uint64_t>(ci));
        const auto window =
            sample_crop_window(groups[gi], img.width, img.height, config.target_size, config.scale_max, crop_seed);
        auto crop = crop_and_resize(tensor, window, rec.rois, config.target_size);
        if (crop.rois.empty()) continue;
        CaseRecord r;
        r.case_id = rec.case_id + "_g" + std::to_string(gi) + "_c" + std::to_string(ci);
        r.image_path = "crops/" + r.case_id + ".png";
        r.skin = rec.skin;
        r.condition = rec.condition;
        r.rois = std::move(crop.rois);
        r.split = rec.split;
        r.synthetic = rec.synthetic;
        r.provenance = Provenance{rec.case_id, window, std::nullopt, std::nullopt, std::nullopt};
        write_png(out_dir / r.image_path, to_rgb_image(crop.image));
        out.records.push_back(std::move(r));
      }
    }
  }
  validate_manifest(out, false);
  save_manifest(out, out_dir / "manifest.jsonl");
  return out;
}

}  // namespace dermgan
