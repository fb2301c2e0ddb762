#include "dermgan/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "dermgan/rng.hpp"
#include "dermgan/semantic_map.hpp"

namespace dermgan {

using nn::Tensor;
using nn::Var;

template <typename T>
Var<T> l1_whole(const Var<T>& x, const Var<T>& y) {
  return nn::l1_loss(x, y);
}

template <typename T>
Var<T> l1_region(const Var<T>& x, const Var<T>& y, const Tensor<T>& mask) {
  return nn::masked_l1_loss(x, y, mask);
}

template <typename T>
GanLosses<T> gan_losses(const Var<T>& real_logits, const Var<T>& fake_logits) {
  auto d = nn::add(nn::bce_with_logits(real_logits, T(1)), nn::bce_with_logits(fake_logits, T(0)));
  return {d, nn::bce_with_logits(fake_logits, T(1))};
}

template <typename T>
Var<T> feature_match_loss(const Var<T>& real_tap, const Var<T>& fake_tap, FeatureMatchMode mode) {
  if (real_tap.shape() != fake_tap.shape()) {
    throw nn::ShapeError("feature_match_loss: tap shapes " + real_tap.shape().str() + " and " +
                         fake_tap.shape().str() + " differ");
  }
  if (mode == FeatureMatchMode::kPerPair) return nn::mse_loss(real_tap, fake_tap);
  return nn::mse_loss(nn::batch_mean(real_tap), nn::batch_mean(fake_tap));
}

void validate(const LossWeights& w) {
  for (double v : {w.w_rec, w.w_roi, w.w_gan, w.w_fm}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (w.w_rec + w.w_roi + w.w_gan + w.w_fm <= 0.0) throw ConfigError("at least one loss weight must be positive");
}

bool LossReport::all_finite() const {
  for (double v : {l1_whole, l1_roi, gan_g, gan_d, feature_match, total_g, total_d})
    if (!std::isfinite(v)) return false;
  return true;
}

std::string LossReport::str() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "l1_whole=%g l1_roi=%g gan_g=%g gan_d=%g feature_match=%g total_g=%g total_d=%g",
                l1_whole, l1_roi, gan_g, gan_d, feature_match, total_g, total_d);
  return buf;
}

std::string_view to_string(Precision p) { return p == Precision::kFloat32 ? "float32" : "float64"; }

Precision parse_precision(std::string_view s) {
  if (s == "float32") return Precision::kFloat32;
  if (s == "float64") return Precision::kFloat64;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected float32 or float64)");
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("steps must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.lr_g > 0.0) || !(c.lr_d > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (c.checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  validate(c.weights);
}

nlohmann::ordered_json to_json(const LossWeights& w) {
  return {{"w_rec", w.w_rec}, {"w_roi", w.w_roi}, {"w_gan", w.w_gan}, {"w_fm", w.w_fm}};
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"weights", to_json(c.weights)},
          {"feature_match", c.feature_match == FeatureMatchMode::kBatchMean ? "batch_mean" : "per_pair"},
          {"flip_augment", c.flip_augment},
          {"report_disabled_terms", c.report_disabled_terms},
          {"precision", to_string(c.precision)}};
}

TrainConfig train_config_from_json(const nlohmann::ordered_json& j) {
  static const std::vector<std::string> keys = {
      "steps", "batch_size", "lr_g", "lr_d", "beta1", "beta2",
      "seed", "checkpoint_every", "weights", "feature_match", "flip_augment", "report_disabled_terms",
      "precision"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("unknown train config key '" + k + "'");
  }
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_g = j.value("lr_g", c.lr_g);
    c.lr_d = j.value("lr_d", c.lr_d);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      if (!w.is_object()) throw ConfigError("weights must be a JSON object");
      for (const auto& [k, v] : w.items()) {
        if (k != "w_rec" && k != "w_roi" && k != "w_gan" && k != "w_fm") {
          throw ConfigError("unknown weights key '" + k + "'");
        }
      }
      c.weights.w_rec = w.value("w_rec", c.weights.w_rec);
      c.weights.w_roi = w.value("w_roi", c.weights.w_roi);
      c.weights.w_gan = w.value("w_gan", c.weights.w_gan);
      c.weights.w_fm = w.value("w_fm", c.weights.w_fm);
    }
    if (j.contains("feature_match")) {
      const auto s = j.at("feature_match").get<std::string>();
      if (s == "batch_mean") {
        c.feature_match = FeatureMatchMode::kBatchMean;
      } else if (s == "per_pair") {
        c.feature_match = FeatureMatchMode::kPerPair;
      } else {
        throw ConfigError("unknown feature_match mode '" + s + "'");
      }
    }
    c.flip_augment = j.value("flip_augment", c.flip_augment);
    c.report_disabled_terms = j.value("report_disabled_terms", c.report_disabled_terms);
    if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Data

CropDataset::CropDataset(const DatasetManifest& manifest, std::optional<Split> split) {
  for (const auto& r : manifest.records)
    if (!split || r.split == *split) records_.push_back(r);
  const CodeTables codes(manifest.num_classes());
  for (const auto& r : records_) {
    auto img = read_png(manifest.resolve(r));
    if (img.width != img.height) throw ImageIoError("case '" + r.case_id + "': crops must be square");
    if (size_ == 0) size_ = img.width;
    if (img.width != size_) throw ImageIoError("case '" + r.case_id + "': crops must share one size");
    maps_.push_back(map_for_record(r, size_, size_, codes).tensor);
    images_.push_back(std::move(img));
  }
}

const std::vector<std::size_t>& CropDataset::permutation(uint64_t seed, int64_t epoch) const {
  if (perm_cache_ && perm_cache_->first == std::make_pair(seed, epoch)) return perm_cache_->second;
  std::vector<std::size_t> perm(size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(derive_seed(seed, "data-order"), static_cast<uint64_t>(epoch)));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_int<std::size_t>(rng, 0, i - 1)]);
  perm_cache_.emplace(std::make_pair(seed, epoch), std::move(perm));
  return perm_cache_->second;
}

std::size_t CropDataset::index_at(uint64_t seed, int64_t step, int batch_size, int i) const {
  if (size() == 0) throw std::out_of_range("empty crop dataset");
  const auto pos = static_cast<uint64_t>(step - 1) * static_cast<uint64_t>(batch_size) + static_cast<uint64_t>(i);
  return permutation(seed, static_cast<int64_t>(pos / size()))[pos % size()];
}

bool CropDataset::flip_at(uint64_t seed, int64_t step, int i) {
  return (derive_seed(derive_seed(derive_seed(seed, "flip"), static_cast<uint64_t>(step)), static_cast<uint64_t>(i)) &
          1U) != 0;
}

template <typename T>
TrainingBatch<T> CropDataset::batch(const std::vector<std::size_t>& indices, const std::vector<bool>& flips) const {
  const auto n = static_cast<int64_t>(indices.size());
  const int s = size_;
  TrainingBatch<T> b{Tensor<T>(nn::Shape{n, 3, s, s}), Tensor<T>(nn::Shape{n, 3, s, s}),
                     Tensor<T>(nn::Shape{n, 1, s, s})};
  for (int64_t k = 0; k < n; ++k) {
    const auto idx = indices[static_cast<std::size_t>(k)];
    const bool flip = !flips.empty() && flips[static_cast<std::size_t>(k)];
    const auto& img = images_.at(idx);
    const auto& map = maps_[idx];
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const int sx = flip ? s - 1 - x : x;
        for (int c = 0; c < 3; ++c) {
          b.images.at(k, c, y, x) = static_cast<T>(img.at(sx, y, c) / 127.5 - 1.0);
          b.maps.at(k, c, y, x) = static_cast<T>(map.at(sx, y, c) / 127.5 - 1.0);
        }
        b.masks.at(k, 0, y, x) = map.at(sx, y, 1) != 0 ? T(1) : T(0);
      }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

template <typename T>
TrainConfig with_precision(TrainConfig t) {
  t.precision = sizeof(T) == 4 ? Precision::kFloat32 : Precision::kFloat64;
  validate(t);
  return t;
}

nn::AdamConfig adam_config(double lr, const TrainConfig& t) { return {lr, t.beta1, t.beta2, 1e-8}; }

template <typename T>
void write_json(const std::filesystem::path& p, const nlohmann::ordered_json& j) {
  std::ofstream os(p, std::ios::trunc);
  os << j.dump(2) << "\n";
  if (!os) throw nn::CheckpointError("write failed for " + p.string());
}

}  // namespace

template <typename T>
GanTrainer<T>::GanTrainer(const GeneratorConfig& g, const DiscriminatorConfig& d, const TrainConfig& t)
    : gcfg_(g),
      dcfg_(d),
      train_(with_precision<T>(t)),
      gen_(g, derive_seed(t.seed, "generator-init")),
      disc_(d, derive_seed(t.seed, "discriminator-init")),
      adam_g_(gen_.parameters(), adam_config(t.lr_g, t)),
      adam_d_(disc_.parameters(), adam_config(t.lr_d, t)) {}

template <typename T>
bool GanTrainer<T>::discriminator_active() const {
  return train_.weights.w_gan > 0.0 || train_.weights.w_fm > 0.0;
}

template <typename T>
LossReport GanTrainer<T>::step(const TrainingBatch<T>& batch) {
  const auto& w = train_.weights;
  const bool report_all = train_.report_disabled_terms;
  const bool d_active = discriminator_active();
  const int64_t this_step = step_ + 1;
  LossReport rep;

  const Var<T> maps(batch.maps), real(batch.images);
  const Var<T> fake = gen_.forward(maps);
  const Var<T> fake_const = fake.detach();

  // Discriminator update on a detached fake.
  if (d_active) {
    disc_.parameters().set_requires_grad(true);
    const auto r = disc_.forward(real, maps);
    const auto f = disc_.forward(fake_const, maps);
    const auto losses = gan_losses(r.patch_logits, f.patch_logits);
    rep.gan_d = static_cast<double>(losses.gan_d.item());
    if (!std::isfinite(rep.gan_d)) {
      rep.total_d = rep.gan_d;
      throw NonFiniteLossError(this_step, rep);
    }
    disc_.parameters().zero_grad();
    nn::backward(losses.gan_d);
    adam_d_.step();
  } else if (report_all) {
    nn::NoGradGuard ng;
    const auto r = disc_.forward(real, maps);
    const auto f = disc_.forward(fake_const, maps);
    rep.gan_d = static_cast<double>(gan_losses(r.patch_logits, f.patch_logits).gan_d.item());
  }
  rep.total_d = rep.gan_d;

  // Generator update against the refreshed discriminator.
  disc_.parameters().set_requires_grad(false);
  std::vector<std::pair<T, Var<T>>> terms;
  auto term = [&](double weight, double& slot, auto&& make_graph, auto&& make_value) {
    if (weight > 0.0) {
      Var<T> v = make_graph();
      slot = static_cast<double>(v.item());
      terms.emplace_back(static_cast<T>(weight), v);
    } else if (report_all) {
      nn::NoGradGuard ng;
      slot = static_cast<double>(make_value().item());
    }
  };
  term(w.w_rec, rep.l1_whole, [&] { return l1_whole(fake, real); }, [&] { return l1_whole(fake_const, real); });
  term(
      w.w_roi, rep.l1_roi, [&] { return l1_region(fake, real, batch.masks); },
      [&] { return l1_region(fake_const, real, batch.masks); });

  if (d_active || report_all) {
    // Built outside any guard so the graph exists whenever a D-based term is weighted.
    std::optional<DiscriminatorOutput<T>> f_out, r_out;
    if (d_active) {
      f_out = disc_.forward(fake, maps);
    } else {
      nn::NoGradGuard ng;
      f_out = disc_.forward(fake_const, maps);
    }
    auto real_out = [&]() -> const DiscriminatorOutput<T>& {
      if (!r_out) {
        nn::NoGradGuard ng;
        r_out = disc_.forward(real, maps);
      }
      return *r_out;
    };
    term(
        w.w_gan, rep.gan_g, [&] { return nn::bce_with_logits(f_out->patch_logits, T(1)); },
        [&] { return nn::bce_with_logits(f_out->patch_logits.detach(), T(1)); });
    term(
        w.w_fm, rep.feature_match,
        [&] { return feature_match_loss(real_out().tap_activations, f_out->tap_activations, train_.feature_match); },
        [&] {
          return feature_match_loss(real_out().tap_activations, f_out->tap_activations.detach(), train_.feature_match);
        });
  }

  rep.total_g = w.w_rec * rep.l1_whole + w.w_roi * rep.l1_roi + w.w_gan * rep.gan_g + w.w_fm * rep.feature_match;
  if (!rep.all_finite()) throw NonFiniteLossError(this_step, rep);

  const Var<T> total = nn::weighted_sum(terms);
  gen_.parameters().zero_grad();
  nn::backward(total);
  adam_g_.step();
  disc_.parameters().zero_grad();
  disc_.parameters().set_requires_grad(true);
  step_ = this_step;
  return rep;
}

template <typename T>
void GanTrainer<T>::save_checkpoint(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::path target = dir;
  if (target.filename().empty()) target = target.parent_path();
  const fs::path tmp = target.string() + ".tmp";
  const fs::path old = target.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  nlohmann::ordered_json config = {{"format", "dermgan-checkpoint"},
                                   {"version", 1},
                                   {"precision", precision_name<T>()},
                                   {"generator", to_json(gcfg_)},
                                   {"discriminator", to_json(dcfg_)},
                                   {"train", to_json(train_)}};
  write_json<T>(tmp / kCheckpointConfig, config);
  nn::save_parameters(gen_.parameters(), tmp / kCheckpointGenerator);
  nn::save_parameters(disc_.parameters(), tmp / kCheckpointDiscriminator);
  nn::ParameterList<T> moments;
  moments.append(adam_g_.moments(), "G.");
  moments.append(adam_d_.moments(), "D.");
  nn::save_parameters(moments, tmp / kCheckpointOptimizer);
  write_json<T>(tmp / kCheckpointState,
                {{"step", step_}, {"adam_g_steps", adam_g_.step_count()}, {"adam_d_steps", adam_d_.step_count()}});

  fs::remove_all(old);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old);
}

template <typename T>
void GanTrainer<T>::load_checkpoint(const std::filesystem::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.precision != precision_name<T>()) {
    throw nn::CheckpointError(dir.string() + ": checkpoint precision " + info.precision + ", trainer uses " +
                              precision_name<T>());
  }
  nn::load_parameters(gen_.parameters(), dir / kCheckpointGenerator);
  nn::load_parameters(disc_.parameters(), dir / kCheckpointDiscriminator);
  nn::ParameterList<T> moments;
  moments.append(adam_g_.moments(), "G.");
  moments.append(adam_d_.moments(), "D.");
  nn::load_parameters(moments, dir / kCheckpointOptimizer);
  try {
    step_ = info.state.at("step").get<int64_t>();
    adam_g_.set_step_count(info.state.at("adam_g_steps").get<int64_t>());
    adam_d_.set_step_count(info.state.at("adam_d_steps").get<int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError((dir / kCheckpointState).string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loop

std::string format_log_row(int64_t step, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", static_cast<long long>(step),
                r.l1_whole, r.l1_roi, r.gan_g, r.gan_d, r.feature_match, r.total_g, r.total_d);
  return buf;
}

template <typename T>
TrainResult train(const DatasetManifest& crops, const GeneratorConfig& g, const DiscriminatorConfig& d,
                  const TrainConfig& t, const std::filesystem::path& out_dir, const TrainOptions& options) {
  namespace fs = std::filesystem;
  validate(t);
  const CropDataset data(crops, Split::kTrain);
  if (data.size() == 0) throw std::invalid_argument("crop manifest has no train-split records");
  if (data.image_size() != g.image_size) {
    throw ConfigError("crop size " + std::to_string(data.image_size()) + " does not match generator image_size " +
                      std::to_string(g.image_size));
  }
  GanTrainer<T> trainer(g, d, t);
  fs::create_directories(out_dir / "checkpoints");
  TrainResult result;
  result.log_path = out_dir / "train_log.csv";

  std::vector<std::string> kept;
  if (options.resume_from) {
    trainer.load_checkpoint(*options.resume_from);
    std::ifstream is(result.log_path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) <= trainer.step_count()) kept.push_back(line);
    }
  }
  std::ofstream log(result.log_path, std::ios::trunc);
  log << kTrainLogHeader << "\n";
  for (const auto& l : kept) log << l << "\n";
  log.flush();

  std::vector<std::size_t> idx(static_cast<std::size_t>(t.batch_size));
  std::vector<bool> flips(static_cast<std::size_t>(t.batch_size));
  for (int64_t s = trainer.step_count() + 1; s <= t.steps; ++s) {
    for (int i = 0; i < t.batch_size; ++i) {
      idx[static_cast<std::size_t>(i)] = data.index_at(t.seed, s, t.batch_size, i);
      flips[static_cast<std::size_t>(i)] = t.flip_augment && CropDataset::flip_at(t.seed, s, i);
    }
    const auto report = trainer.step(data.batch<T>(idx, flips));
    result.reports.push_back(report);
    log << format_log_row(s, report) << "\n";
    log.flush();
    if (options.progress_every > 0 && s % options.progress_every == 0) {
      std::cerr << "step " << s << "/" << t.steps << "  " << report.str() << "\n";
    }
    if (s % t.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06lld", static_cast<long long>(s));
      trainer.save_checkpoint(out_dir / "checkpoints" / name);
    }
  }
  if (!log) throw std::runtime_error("failed to write " + result.log_path.string());
  result.final_checkpoint = out_dir / "final";
  trainer.save_checkpoint(result.final_checkpoint);
  return result;
}

TrainResult train_any(const DatasetManifest& crops, const GeneratorConfig& g, const DiscriminatorConfig& d,
                      const TrainConfig& t, const std::filesystem::path& out_dir, const TrainOptions& options) {
  if (t.precision == Precision::kFloat64) return train<double>(crops, g, d, t, out_dir, options);
  return train<float>(crops, g, d, t, out_dir, options);
}

#define DERMGAN_INSTANTIATE(T)                                                                                  \
  template Var<T> l1_whole(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> l1_region(const Var<T>&, const Var<T>&, const Tensor<T>&);                                    \
  template GanLosses<T> gan_losses(const Var<T>&, const Var<T>&);                                               \
  template Var<T> feature_match_loss(const Var<T>&, const Var<T>&, FeatureMatchMode);                           \
  template TrainingBatch<T> CropDataset::batch(const std::vector<std::size_t>&, const std::vector<bool>&) const; \
  template class GanTrainer<T>;                                                                                 \
  template TrainResult train<T>(const DatasetManifest&, const GeneratorConfig&, const DiscriminatorConfig&,     \
                                const TrainConfig&, const std::filesystem::path&, const TrainOptions&);
DERMGAN_INSTANTIATE(float)
DERMGAN_INSTANTIATE(double)
#undef DERMGAN_INSTANTIATE

}  // namespace dermgan
