#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermgan/dataset.hpp"
#include "dermgan/networks.hpp"

namespace dermgan {

// Loss terms. Images are [N,3,H,W], masks [N,1,H,W].

/// Mean absolute difference over every element.
template <typename T>
nn::Var<T> l1_whole(const nn::Var<T>& x, const nn::Var<T>& y);
/// Mean absolute difference over mask-selected pixels; throws on an empty mask.
template <typename T>
nn::Var<T> l1_region(const nn::Var<T>& x, const nn::Var<T>& y, const nn::Tensor<T>& mask);

template <typename T>
struct GanLosses {
  nn::Var<T> gan_d;  // BCE(real -> 1) + BCE(fake -> 0)
  nn::Var<T> gan_g;  // BCE(fake -> 1), non-saturating
};
template <typename T>
GanLosses<T> gan_losses(const nn::Var<T>& real_logits, const nn::Var<T>& fake_logits);

enum class FeatureMatchMode { kBatchMean, kPerPair };

/// kBatchMean: MSE between batch-mean activation tensors.
/// kPerPair: MSE between paired activations.
template <typename T>
nn::Var<T> feature_match_loss(const nn::Var<T>& real_tap, const nn::Var<T>& fake_tap,
                              FeatureMatchMode mode = FeatureMatchMode::kBatchMean);

struct LossWeights {
  double w_rec = 10.0;
  double w_roi = 10.0;
  double w_gan = 1.0;
  double w_fm = 10.0;
};
void validate(const LossWeights& w);

struct LossReport {
  double l1_whole = 0;
  double l1_roi = 0;
  double gan_g = 0;
  double gan_d = 0;
  double feature_match = 0;
  double total_g = 0;  // = w_rec*l1_whole + w_roi*l1_roi + w_gan*gan_g + w_fm*feature_match
  double total_d = 0;  // = gan_d
  [[nodiscard]] bool all_finite() const;
  [[nodiscard]] std::string str() const;
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

enum class Precision { kFloat32, kFloat64 };
[[nodiscard]] std::string_view to_string(Precision p);
[[nodiscard]] Precision parse_precision(std::string_view s);

struct TrainConfig {
  int64_t steps = 2000;
  int batch_size = 8;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  uint64_t seed = 1;
  int64_t checkpoint_every = 500;
  LossWeights weights;
  FeatureMatchMode feature_match = FeatureMatchMode::kBatchMean;
  bool flip_augment = true;
  /// Zero-weight terms are still evaluated (without gradient) for the log.
  /// Turning this off skips them entirely; 0 is reported instead.
  bool report_disabled_terms = true;
  Precision precision = Precision::kFloat32;
};
void validate(const TrainConfig& c);

nlohmann::ordered_json to_json(const LossWeights& w);
nlohmann::ordered_json to_json(const TrainConfig& c);
/// Missing keys keep defaults; unknown keys throw ConfigError.
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(int64_t step, const LossReport& report)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + report.str()),
        step_(step), report_(report) {}
  [[nodiscard]] int64_t step() const { return step_; }
  [[nodiscard]] const LossReport& report() const { return report_; }

 private:
  int64_t step_;
  LossReport report_;
};

template <typename T>
struct TrainingBatch {
  nn::Tensor<T> maps;    // [N,3,S,S] normalised semantic maps
  nn::Tensor<T> images;  // [N,3,S,S] in [-1,1]
  nn::Tensor<T> masks;   // [N,1,S,S] ROI union, 0/1
};

/// Decoded crop set held as 8-bit data; batches are materialised on demand.
class CropDataset {
 public:
  /// Loads every record of `split` (all records when nullopt).
  CropDataset(const DatasetManifest& manifest, std::optional<Split> split);

  [[nodiscard]] std::size_t size() const { return images_.size(); }
  [[nodiscard]] int image_size() const { return size_; }
  [[nodiscard]] const std::vector<CaseRecord>& records() const { return records_; }
  [[nodiscard]] const RgbImage& image(std::size_t i) const { return images_[i]; }
  [[nodiscard]] const RgbImage& map(std::size_t i) const { return maps_[i]; }

  /// Dataset index of batch element i at `step` (1-based). Each epoch is a
  /// fresh permutation derived from (seed, epoch).
  [[nodiscard]] std::size_t index_at(uint64_t seed, int64_t step, int batch_size, int i) const;
  /// Horizontal flip decision from hash(seed, step, i).
  [[nodiscard]] static bool flip_at(uint64_t seed, int64_t step, int i);

  template <typename T>
  [[nodiscard]] TrainingBatch<T> batch(const std::vector<std::size_t>& indices, const std::vector<bool>& flips) const;

 private:
  [[nodiscard]] const std::vector<std::size_t>& permutation(uint64_t seed, int64_t epoch) const;

  int size_ = 0;
  std::vector<CaseRecord> records_;
  std::vector<RgbImage> images_;
  std::vector<RgbImage> maps_;
  mutable std::optional<std::pair<std::pair<uint64_t, int64_t>, std::vector<std::size_t>>> perm_cache_;
};

/// Generator, discriminator and their optimizers under one alternating schedule.
template <typename T>
class GanTrainer {
 public:
  GanTrainer(const GeneratorConfig& g, const DiscriminatorConfig& d, const TrainConfig& t);

  /// One discriminator update on gan_d, then one generator update on total_g.
  /// The report holds post-forward, pre-update values of each network's losses.
  /// Throws NonFiniteLossError before applying any update from a non-finite loss.
  LossReport step(const TrainingBatch<T>& batch);

  /// Whether the discriminator takes part (w_gan or w_fm nonzero).
  [[nodiscard]] bool discriminator_active() const;

  [[nodiscard]] int64_t step_count() const { return step_; }
  [[nodiscard]] Generator<T>& generator() { return gen_; }
  [[nodiscard]] Discriminator<T>& discriminator() { return disc_; }
  [[nodiscard]] const TrainConfig& config() const { return train_; }

  /// Atomic: written to a sibling temp directory, then renamed into place.
  void save_checkpoint(const std::filesystem::path& dir) const;
  /// Restores parameters, optimizer moments and the step counter.
  void load_checkpoint(const std::filesystem::path& dir);

 private:
  GeneratorConfig gcfg_;
  DiscriminatorConfig dcfg_;
  TrainConfig train_;
  Generator<T> gen_;
  Discriminator<T> disc_;
  nn::Adam<T> adam_g_;
  nn::Adam<T> adam_d_;
  int64_t step_ = 0;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  std::vector<LossReport> reports;  // steps run in this call
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  /// Progress line every N steps to stderr (0 = silent).
  int64_t progress_every = 0;
};

inline constexpr const char* kTrainLogHeader = "step,l1_whole,l1_roi,gan_g,gan_d,feature_match,total_g,total_d";

/// Trains on the train split of a crop manifest. Writes
///   out_dir/train_log.csv, out_dir/checkpoints/step_NNNNNN/, out_dir/final/.
/// On resume the log keeps rows up to the checkpoint step.
template <typename T>
TrainResult train(const DatasetManifest& crops, const GeneratorConfig& g, const DiscriminatorConfig& d,
                  const TrainConfig& t, const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Dispatches on t.precision.
TrainResult train_any(const DatasetManifest& crops, const GeneratorConfig& g, const DiscriminatorConfig& d,
                      const TrainConfig& t, const std::filesystem::path& out_dir, const TrainOptions& options = {});

[[nodiscard]] std::string format_log_row(int64_t step, const LossReport& r);

}  // namespace dermgan
