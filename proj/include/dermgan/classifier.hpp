#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermgan/dataset.hpp"
#include "dermgan/nn/module.hpp"

namespace dermgan {

struct ClassifierConfig {
  int n_classes = 9;  // condition ids 1..K plus index 0 for "other"
  std::array<int, 3> channels = {16, 32, 64};
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  uint64_t seed = 3;
  bool flip = true;
  bool saturation = true;  // saturation scale in [1 - s, 1 + s]
  bool jitter = true;      // additive brightness offset in [-j, j]
  double saturation_strength = 0.25;
  double jitter_strength = 0.1;
};
void validate(const ClassifierConfig& c);
nlohmann::ordered_json to_json(const ClassifierConfig& c);
/// Missing keys keep defaults; unknown keys throw ConfigError.
ClassifierConfig classifier_config_from_json(const nlohmann::ordered_json& j);

/// Three stride-2 3x3 conv blocks with ReLU, global average pool, linear head.
class Classifier {
 public:
  explicit Classifier(const ClassifierConfig& config);

  /// images [N,3,H,W] in [-1,1] -> pooled features [N, channels[2]].
  [[nodiscard]] nn::Var<float> features(const nn::Var<float>& images) const;
  /// images -> logits [N, n_classes].
  [[nodiscard]] nn::Var<float> logits(const nn::Var<float>& images) const;
  /// argmax class per image, batched, no grad.
  [[nodiscard]] std::vector<int> predict(const std::vector<RgbImage>& images, int batch_size = 64) const;

  [[nodiscard]] int feature_dim() const { return config_.channels[2]; }
  [[nodiscard]] const ClassifierConfig& config() const { return config_; }
  [[nodiscard]] nn::ParameterList<float>& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterList<float>& parameters() const { return params_; }

  /// Directory with config.json and classifier.bin.
  void save(const std::filesystem::path& dir) const;
  [[nodiscard]] static Classifier load(const std::filesystem::path& dir);

 private:
  ClassifierConfig config_;
  std::array<nn::Conv2dLayer<float>, 3> blocks_;
  nn::LinearLayer<float> head_;
  nn::ParameterList<float> params_;
};

struct LabeledImage {
  std::string case_id;
  RgbImage image;
  int label = 0;
  bool synthetic = false;
};

/// Decodes every record of `split` (all when nullopt); label = condition id.
[[nodiscard]] std::vector<LabeledImage> load_labeled(const DatasetManifest& m, std::optional<Split> split);

/// Training-time augmentation of one image (flip, saturation, brightness jitter).
[[nodiscard]] RgbImage augment_image(const RgbImage& img, const ClassifierConfig& c, uint64_t seed);

struct ClassifierTrainResult {
  Classifier model;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // on the (augmented) training stream
  std::vector<std::string> warnings;
};

/// Deterministic per config.seed. Classes missing from the data produce a warning.
[[nodiscard]] ClassifierTrainResult train_classifier(const std::vector<LabeledImage>& train,
                                                     const ClassifierConfig& config);

struct EvalReport {
  double top1 = 0;
  std::vector<double> per_class_f1;               // index = class id
  std::vector<std::vector<int64_t>> confusion;    // [true][predicted]
  std::vector<uint8_t> per_example_correct;
  std::vector<int> labels;
  std::vector<int> predictions;
};

/// Builds a report from aligned label and prediction vectors.
[[nodiscard]] EvalReport make_report(const std::vector<int>& labels, const std::vector<int>& predictions,
                                     int n_classes);
[[nodiscard]] EvalReport evaluate_classifier(const Classifier& model, const std::vector<LabeledImage>& test);

/// F1 of class k from a confusion matrix; 0 when precision + recall = 0.
[[nodiscard]] double f1_from_confusion(const std::vector<std::vector<int64_t>>& confusion, int k);

using ReportMetric = std::function<double(const EvalReport&)>;

struct Interval {
  double lo = 0;
  double hi = 0;
};

/// Percentile interval of `metric` over `resamples` with-replacement resamples of the test examples.
[[nodiscard]] Interval bootstrap_ci(const ReportMetric& metric, const EvalReport& report, int resamples = 1000,
                                    double level = 0.95, uint64_t seed = 0);

/// Two-sided paired t-test on per-example correctness differences. Zero variance
/// gives p = 1 for a zero mean difference and p = 0 otherwise.
[[nodiscard]] double paired_accuracy_test(const EvalReport& a, const EvalReport& b);

struct ClassComparison {
  int class_id = 0;
  double f1_baseline = 0;
  double f1_augmented = 0;
  Interval ci_baseline;
  Interval ci_augmented;
};

struct SeedComparison {
  uint64_t seed = 0;
  double top1_baseline = 0;
  double top1_augmented = 0;
  double p_value = 1.0;
  std::vector<ClassComparison> classes;
  std::vector<std::string> warnings;
};

struct AugmentationReport {
  std::vector<SeedComparison> seeds;
  int rare_class = 0;  // 0 when not specified
  [[nodiscard]] nlohmann::ordered_json to_json() const;
};

struct AugmentationSettings {
  ClassifierConfig classifier;
  std::vector<uint64_t> seeds = {1, 2, 3};
  int bootstrap_resamples = 1000;
  int rare_class = 0;
};

/// Baseline on real data vs the same data plus synthetic images, same
/// hyperparameters and seed. Writes report.json, f1_bars.csv and f1_bars.png.
AugmentationReport run_augmentation_experiment(const std::vector<LabeledImage>& real_train,
                                               const std::vector<LabeledImage>& synthetic,
                                               const std::vector<LabeledImage>& test,
                                               const AugmentationSettings& settings,
                                               const std::filesystem::path& out_dir);

/// Grouped bar chart (two bars per class) of F1 values.
[[nodiscard]] RgbImage render_f1_chart(const std::vector<ClassComparison>& classes);

}  // namespace dermgan
