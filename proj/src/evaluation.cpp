#include "dermgan/evaluation.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "dermgan/rng.hpp"
#include "dermgan/synthesis.hpp"

namespace dermgan {

std::string_view to_string(EmbedderKind k) {
  switch (k) {
    case EmbedderKind::kPretrainedInceptionPool3: return "pretrained-inception-pool3";
    case EmbedderKind::kSmallTrainedExtractor: return "small-trained-extractor";
    case EmbedderKind::kRandomProjection: return "random-projection";
  }
  return "?";
}

EmbedderKind parse_embedder(std::string_view s) {
  if (s == "pretrained-inception-pool3") return EmbedderKind::kPretrainedInceptionPool3;
  if (s == "small-trained-extractor") return EmbedderKind::kSmallTrainedExtractor;
  if (s == "random-projection") return EmbedderKind::kRandomProjection;
  throw ConfigError("unknown embedder '" + std::string(s) +
                    "' (expected random-projection, small-trained-extractor or pretrained-inception-pool3)");
}

RandomProjectionEmbedder::RandomProjectionEmbedder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ConfigError("random-projection dimension must be >= 1");
}

const Eigen::MatrixXd& RandomProjectionEmbedder::matrix(int64_t pixels) const {
  if (matrix_.rows() != pixels) {
    Rng rng(derive_seed(seed_, static_cast<uint64_t>(pixels)));
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(pixels)));
    matrix_.resize(pixels, dim_);
    for (int64_t r = 0; r < pixels; ++r)
      for (int c = 0; c < dim_; ++c) matrix_(r, c) = dist(rng);
  }
  return matrix_;
}

Eigen::MatrixXd RandomProjectionEmbedder::embed(const std::vector<RgbImage>& images) const {
  if (images.empty()) throw std::invalid_argument("cannot embed an empty image set");
  const int64_t pixels = static_cast<int64_t>(images[0].pixels.size());
  Eigen::MatrixXd flat(static_cast<Eigen::Index>(images.size()), pixels);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (static_cast<int64_t>(images[i].pixels.size()) != pixels) {
      throw std::invalid_argument("random-projection embedding needs images of one size");
    }
    for (int64_t p = 0; p < pixels; ++p) {
      flat(static_cast<Eigen::Index>(i), p) = images[i].pixels[static_cast<std::size_t>(p)] / 127.5 - 1.0;
    }
  }
  return flat * matrix(pixels);
}

Eigen::MatrixXd ExtractorEmbedder::embed(const std::vector<RgbImage>& images) const {
  if (images.empty()) throw std::invalid_argument("cannot embed an empty image set");
  nn::NoGradGuard no_grad;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), dim());
  constexpr std::size_t kBatch = 64;
  for (std::size_t s = 0; s < images.size(); s += kBatch) {
    std::vector<ImageTensor> chunk;
    for (std::size_t i = s; i < std::min(images.size(), s + kBatch); ++i) chunk.push_back(to_image_tensor(images[i]));
    const auto f = model_.features(nn::Var<float>(to_batch<float>(chunk)));
    for (std::size_t r = 0; r < chunk.size(); ++r)
      for (int c = 0; c < dim(); ++c)
        out(static_cast<Eigen::Index>(s + r), c) = f.value()[static_cast<int64_t>(r) * dim() + c];
  }
  return out;
}

std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec) {
  switch (spec.kind) {
    case EmbedderKind::kRandomProjection: return std::make_unique<RandomProjectionEmbedder>(spec.dim, spec.seed);
    case EmbedderKind::kSmallTrainedExtractor:
      if (spec.weights.empty()) {
        throw EmbedderUnavailable("small-trained-extractor needs a trained classifier directory");
      }
      return std::make_unique<ExtractorEmbedder>(Classifier::load(spec.weights));
    case EmbedderKind::kPretrainedInceptionPool3:
      throw EmbedderUnavailable(
          "pretrained-inception-pool3 weights are not available in this build; use --embedder "
          "small-trained-extractor or --embedder random-projection instead");
  }
  throw ConfigError("unknown embedder kind");
}

GaussianStats gaussian_stats(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw std::invalid_argument("gaussian_stats needs at least 2 samples, got " + std::to_string(x.rows()));
  GaussianStats s;
  s.n = x.rows();
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centred = x.rowwise() - s.mean.transpose();
  const Eigen::MatrixXd c = centred.transpose() * centred / static_cast<double>(s.n - 1);
  s.cov = 0.5 * (c + c.transpose());
  return s;
}

namespace {

double psd_floor(const Eigen::VectorXd& ev) {
  const double scale = ev.size() > 0 ? ev.cwiseAbs().maxCoeff() : 0.0;
  return -1e-8 * std::max(1.0, scale);
}

}  // namespace

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("sqrtm_psd needs a square matrix");
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * std::max(1.0, m.cwiseAbs().maxCoeff())) throw NotPsdError("sqrtm_psd: matrix is not symmetric");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NotPsdError("sqrtm_psd: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double floor = psd_floor(ev);
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < floor) throw NotPsdError("sqrtm_psd: eigenvalue " + std::to_string(ev[i]) + " is negative");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  const Eigen::MatrixXd s = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (s + s.transpose());
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw std::invalid_argument("frechet_distance: dimension mismatch " + std::to_string(a.mean.size()) + " vs " +
                                std::to_string(b.mean.size()));
  }
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const Eigen::MatrixXd ra = sqrtm_psd(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  // PSD by construction; negative eigenvalues here are rounding noise.
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  double tr_root = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr_root += std::sqrt(std::max(es.eigenvalues()[i], 0.0));
  const double trace_sum = a.cov.trace() + b.cov.trace();
  double d = mean_term + trace_sum - 2.0 * tr_root;
  if (d < 0.0 && d >= -1e-6) d = 0.0;
  // Identical inputs cancel to within rounding; snap that residue to 0.
  if (std::abs(d) <= 1e-12 * std::max(1.0, trace_sum)) d = 0.0;
  return d;
}

nlohmann::ordered_json FidResult::to_json() const {
  return {{"mean", mean}, {"half_width", half_width}, {"trials", trials},
          {"subsample", subsample}, {"embedder", embedder}, {"values", values}};
}

FidResult fid_of_features(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake, int trials, int subsample,
                          uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("fid needs at least one trial");
  const auto n_min = std::min(real.rows(), fake.rows());
  const int sub = subsample > 0 ? subsample : static_cast<int>(n_min);
  if (sub < 2 || sub > n_min) {
    throw std::invalid_argument("fid subsample " + std::to_string(sub) + " needs 2 <= subsample <= min set size " +
                                std::to_string(n_min));
  }
  FidResult out;
  out.trials = trials;
  out.subsample = sub;
  // Rows in lexicographic order make the draw independent of input ordering.
  auto canonical = [](const Eigen::MatrixXd& x) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      for (Eigen::Index c = 0; c < x.cols(); ++c)
        if (x(a, c) != x(b, c)) return x(a, c) < x(b, c);
      return false;
    });
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(order[i]);
    return out;
  };
  const Eigen::MatrixXd a = canonical(real);
  const Eigen::MatrixXd b = canonical(fake);
  Rng rng(seed);
  auto draw = [&](Eigen::Index n) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    // Partial Fisher-Yates: the first `sub` slots are a uniform subset.
    for (int i = 0; i < sub; ++i) {
      std::swap(idx[static_cast<std::size_t>(i)],
                idx[uniform_int<std::size_t>(rng, static_cast<std::size_t>(i), idx.size() - 1)]);
    }
    idx.resize(static_cast<std::size_t>(sub));
    return idx;
  };
  auto stats = [&](const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx) {
    Eigen::MatrixXd rows(sub, x.cols());
    for (int i = 0; i < sub; ++i) rows.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
    return gaussian_stats(rows);
  };
  for (int t = 0; t < trials; ++t) {
    const auto ia = draw(a.rows());
    // Equal-sized sets share the draw, so a set scored against itself gives 0.
    const auto ib = b.rows() == a.rows() ? ia : draw(b.rows());
    out.values.push_back(frechet_distance(stats(a, ia), stats(b, ib)));
  }
  out.mean = std::accumulate(out.values.begin(), out.values.end(), 0.0) / trials;
  if (trials > 1) {
    double var = 0;
    for (double v : out.values) var += (v - out.mean) * (v - out.mean);
    out.half_width = 1.96 * std::sqrt(var / (trials - 1));
  }
  return out;
}

FidResult fid_of_sets(const std::vector<RgbImage>& real, const std::vector<RgbImage>& fake, const Embedder& embedder,
                      int trials, int subsample, uint64_t seed) {
  auto r = fid_of_features(embedder.embed(real), embedder.embed(fake), trials, subsample, seed);
  r.embedder = embedder.name();
  return r;
}

std::vector<std::filesystem::path> collect_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ImageIoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<RgbImage> read_pngs(const std::vector<std::filesystem::path>& paths) {
  std::vector<RgbImage> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_png(p));
  return out;
}

std::vector<AblationVariant> standard_variants(const GeneratorConfig& g, const TrainConfig& t) {
  std::vector<AblationVariant> v(4, AblationVariant{"", g, t});
  v[0].name = kAblationColumns[1];
  v[1].name = kAblationColumns[2];
  v[1].generator.upsample = UpsampleMode::kTransposeConv;
  v[2].name = kAblationColumns[3];
  v[2].train.weights.w_roi = 0.0;
  v[3].name = kAblationColumns[4];
  v[3].train.weights.w_fm = 0.0;
  return v;
}

double AblationCell::median_mean() const {
  std::vector<double> m;
  for (const auto& r : per_seed)
    if (std::isfinite(r.mean)) m.push_back(r.mean);
  if (m.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(m.begin(), m.end());
  const std::size_t k = m.size() / 2;
  return m.size() % 2 == 1 ? m[k] : 0.5 * (m[k - 1] + m[k]);
}

namespace {

std::string cell_text(const FidResult& r) {
  if (!std::isfinite(r.mean)) return "failed";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", r.mean, r.half_width);
  return buf;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
  return out;
}

}  // namespace

std::string AblationTable::csv() const {
  std::ostringstream os;
  os << "seed,column,mean,half_width,trials,subsample\n";
  char buf[256];
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& r = cells[c].per_seed[s];
      std::snprintf(buf, sizeof(buf), "%llu,%s,%.17g,%.17g,%d,%d\n", static_cast<unsigned long long>(seeds[s]),
                    columns[c].c_str(), r.mean, r.half_width, r.trials, r.subsample);
      os << buf;
    }
  return os.str();
}

std::string AblationTable::text() const {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"FID (+/- 1.96 STD)"};
  header.insert(header.end(), columns.begin(), columns.end());
  rows.push_back(header);
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    std::vector<std::string> row{"seed " + std::to_string(seeds[s])};
    for (const auto& cell : cells) row.push_back(cell_text(cell.per_seed[s]));
    rows.push_back(row);
  }
  std::vector<std::string> med{"median"};
  for (const auto& cell : cells) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", cell.median_mean());
    med.push_back(buf);
  }
  rows.push_back(med);
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      os << r[i] << std::string(width[i] - r[i].size(), ' ');
      if (i + 1 < r.size()) os << "  ";
    }
    os << "\n";
  }
  return os.str();
}

nlohmann::ordered_json AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  j["columns"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < columns.size(); ++c) {
    nlohmann::ordered_json col = {{"name", columns[c]}, {"median_mean", cells[c].median_mean()}, {"errors", cells[c].errors}};
    col["per_seed"] = nlohmann::ordered_json::array();
    for (const auto& r : cells[c].per_seed) col["per_seed"].push_back(r.to_json());
    j["columns"].push_back(std::move(col));
  }
  return j;
}

AblationTable run_ablation(const DatasetManifest& crops, const AblationSettings& settings,
                           const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (settings.variants.empty()) throw std::invalid_argument("ablation needs at least one variant");
  if (settings.seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  fs::create_directories(out_dir);
  const CodeTables codes(crops.num_classes());

  std::vector<const CaseRecord*> held_out;
  for (const auto& r : crops.records)
    if (r.split != Split::kTrain) held_out.push_back(&r);
  if (held_out.size() < 4) throw std::invalid_argument("ablation needs at least 4 held-out real crops");
  std::vector<RgbImage> held_images;
  std::vector<PoolMap> held_maps;
  for (const auto* r : held_out) {
    held_images.push_back(read_png(crops.resolve(*r)));
    held_maps.push_back({r->case_id, map_for_record(*r, held_images.back().width, held_images.back().height, codes)});
  }

  std::unique_ptr<Embedder> embedder;
  if (settings.fid.embedder.kind == EmbedderKind::kSmallTrainedExtractor && settings.fid.embedder.weights.empty()) {
    auto trained = train_classifier(load_labeled(crops, Split::kTrain), settings.extractor);
    trained.model.save(out_dir / "extractor");
    embedder = std::make_unique<ExtractorEmbedder>(std::move(trained.model));
  } else {
    embedder = make_embedder(settings.fid.embedder);
  }
  const Eigen::MatrixXd held_features = embedder->embed(held_images);

  AblationTable table;
  table.seeds = settings.seeds;
  table.columns.push_back(kAblationColumns[0]);
  for (const auto& v : settings.variants) table.columns.push_back(v.name);
  table.cells.resize(table.columns.size());

  const FidResult failed{std::numeric_limits<double>::quiet_NaN(), 0, 0, 0, embedder->name(), {}};
  for (uint64_t seed : settings.seeds) {
    std::vector<std::size_t> perm(held_out.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "ablation-halves"));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_int<std::size_t>(rng, 0, i - 1)]);
    const std::size_t half = perm.size() / 2;
    Eigen::MatrixXd r1(static_cast<Eigen::Index>(half), held_features.cols());
    Eigen::MatrixXd r2(static_cast<Eigen::Index>(perm.size() - half), held_features.cols());
    std::vector<PoolMap> pool;
    for (std::size_t i = 0; i < half; ++i) {
      r1.row(static_cast<Eigen::Index>(i)) = held_features.row(static_cast<Eigen::Index>(perm[i]));
      pool.push_back(held_maps[perm[i]]);
    }
    for (std::size_t i = half; i < perm.size(); ++i) {
      r2.row(static_cast<Eigen::Index>(i - half)) = held_features.row(static_cast<Eigen::Index>(perm[i]));
    }
    const uint64_t fid_seed = derive_seed(settings.fid.seed, seed);
    const int sub = settings.fid.subsample > 0 ? settings.fid.subsample
                                               : std::max(2, static_cast<int>(std::min(r1.rows(), r2.rows()) * 4 / 5));
    auto real_row = fid_of_features(r1, r2, settings.fid.trials, sub, fid_seed);
    real_row.embedder = embedder->name();
    table.cells[0].per_seed.push_back(real_row);

    for (std::size_t v = 0; v < settings.variants.size(); ++v) {
      const auto& variant = settings.variants[v];
      auto& cell = table.cells[v + 1];
      try {
        TrainConfig t = variant.train;
        t.seed = seed;
        const auto run_dir = out_dir / (slug(variant.name) + "_seed" + std::to_string(seed));
        const auto result = train_any(crops, variant.generator, settings.discriminator, t, run_dir);
        std::vector<SemanticMap> maps;
        for (Eigen::Index i = 0; i < r2.rows(); ++i) {
          maps.push_back(sample_semantic_map(pool, derive_seed(derive_seed(seed, "ablation-maps"), static_cast<uint64_t>(i)),
                                             codes)
                             .map);
        }
        const auto generated = render_maps(result.final_checkpoint, maps);
        auto r = fid_of_features(r2, embedder->embed(generated), settings.fid.trials, sub, fid_seed);
        r.embedder = embedder->name();
        cell.per_seed.push_back(r);
        std::cerr << "ablation: " << variant.name << " seed " << seed << " FID " << r.mean << "\n";
      } catch (const std::exception& e) {
        cell.per_seed.push_back(failed);
        cell.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
        std::cerr << "ablation: " << variant.name << " seed " << seed << " failed: " << e.what() << "\n";
      }
    }
  }

  std::ofstream(out_dir / "ablation.csv", std::ios::trunc) << table.csv();
  std::ofstream(out_dir / "ablation.txt", std::ios::trunc) << table.text();
  std::ofstream(out_dir / "ablation.json", std::ios::trunc) << table.to_json().dump(2) << "\n";
  return table;
}

}  // namespace dermgan
