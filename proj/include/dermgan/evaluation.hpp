#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermgan/classifier.hpp"
#include "dermgan/image.hpp"
#include "dermgan/networks.hpp"
#include "dermgan/training.hpp"

namespace dermgan {

enum class EmbedderKind { kPretrainedInceptionPool3, kSmallTrainedExtractor, kRandomProjection };
[[nodiscard]] std::string_view to_string(EmbedderKind k);
[[nodiscard]] EmbedderKind parse_embedder(std::string_view s);

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::kRandomProjection;
  int dim = 64;              // random-projection output dimension
  uint64_t seed = 17;        // random-projection matrix seed
  std::filesystem::path weights;  // classifier directory (extractor) or Inception weights
};

class EmbedderUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps images to feature rows. Deterministic for fixed weights.
class Embedder {
 public:
  virtual ~Embedder() = default;
  [[nodiscard]] virtual Eigen::MatrixXd embed(const std::vector<RgbImage>& images) const = 0;
  [[nodiscard]] virtual int dim() const = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

/// Fixed Gaussian matrix P [pixels, d] with N(0, 1/pixels) entries; row = flatten(x) * P,
/// flatten in HWC order of pixel values mapped to [-1, 1].
class RandomProjectionEmbedder : public Embedder {
 public:
  RandomProjectionEmbedder(int dim, uint64_t seed);
  [[nodiscard]] Eigen::MatrixXd embed(const std::vector<RgbImage>& images) const override;
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] std::string name() const override { return "random-projection"; }
  /// Projection matrix for inputs with `pixels` scalars (generated on demand).
  [[nodiscard]] const Eigen::MatrixXd& matrix(int64_t pixels) const;

 private:
  int dim_;
  uint64_t seed_;
  mutable Eigen::MatrixXd matrix_;
};

/// Global-average-pooled activations of a trained classifier.
class ExtractorEmbedder : public Embedder {
 public:
  explicit ExtractorEmbedder(Classifier model) : model_(std::move(model)) {}
  [[nodiscard]] Eigen::MatrixXd embed(const std::vector<RgbImage>& images) const override;
  [[nodiscard]] int dim() const override { return model_.feature_dim(); }
  [[nodiscard]] std::string name() const override { return "small-trained-extractor"; }

 private:
  Classifier model_;
};

/// Throws EmbedderUnavailable for the Inception embedder (no weights are
/// bundled) and for an extractor spec without a classifier directory.
[[nodiscard]] std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int64_t n = 0;
};

/// Sample mean and unbiased covariance, symmetrised as (C + C^T) / 2.
[[nodiscard]] GaussianStats gaussian_stats(const Eigen::MatrixXd& features);

class NotPsdError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Symmetric square root by eigendecomposition. Eigenvalues in
/// [-1e-8 * max(1, |lambda|_max), 0) are treated as 0; lower ones throw NotPsdError.
[[nodiscard]] Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace of the root is
/// taken from the symmetric form S_a^{1/2} S_b S_a^{1/2}. Results in [-1e-6, 0) clip to 0.
[[nodiscard]] double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct FidSettings {
  EmbedderSpec embedder;
  int trials = 10;
  int subsample = 0;  // 0 = smaller of the two set sizes
  uint64_t seed = 5;
};

struct FidResult {
  double mean = 0;
  double half_width = 0;  // 1.96 * sample standard deviation over trials
  int trials = 0;
  int subsample = 0;
  std::string embedder;
  std::vector<double> values;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
};

/// Per trial subsamples rows without replacement. Rows are put in lexicographic
/// order first, and equal-sized sets share one index draw per trial.
[[nodiscard]] FidResult fid_of_features(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake, int trials,
                                        int subsample, uint64_t seed);
[[nodiscard]] FidResult fid_of_sets(const std::vector<RgbImage>& real, const std::vector<RgbImage>& fake,
                                    const Embedder& embedder, int trials, int subsample, uint64_t seed);

/// PNG files under `dir`, recursively, in sorted path order.
[[nodiscard]] std::vector<std::filesystem::path> collect_pngs(const std::filesystem::path& dir);
[[nodiscard]] std::vector<RgbImage> read_pngs(const std::vector<std::filesystem::path>& paths);

struct AblationVariant {
  std::string name;
  GeneratorConfig generator;
  TrainConfig train;
};

/// full, no-checkerboard (transposed-conv decoder), w_roi = 0, w_fm = 0.
[[nodiscard]] std::vector<AblationVariant> standard_variants(const GeneratorConfig& g, const TrainConfig& t);

struct AblationSettings {
  std::vector<AblationVariant> variants;
  DiscriminatorConfig discriminator;
  std::vector<uint64_t> seeds = {1};
  FidSettings fid;
  /// Extractor embedder: classifier trained on the real train split when no weights are given.
  ClassifierConfig extractor;
};

struct AblationCell {
  std::vector<FidResult> per_seed;  // aligned with settings.seeds
  std::vector<std::string> errors;
  [[nodiscard]] double median_mean() const;
};

struct AblationTable {
  std::vector<std::string> columns;  // "Real Data", then variants
  std::vector<AblationCell> cells;
  std::vector<uint64_t> seeds;
  [[nodiscard]] std::string csv() const;
  [[nodiscard]] std::string text() const;
  [[nodiscard]] nlohmann::ordered_json to_json() const;
};

/// Column headers of the ablation table, in order.
inline const std::vector<std::string> kAblationColumns = {"Real Data", "DermGAN", "No Checkerboard Mitigation",
                                                          "No Condition-Specific Loss", "No Feature Matching"};

/// Held-out real crops (validation + test splits) are split into two halves
/// R1 and R2 per seed. "Real Data" is FID(R1, R2); each variant is trained on
/// the train split and scored as FID(generated from perturbed R1 maps, R2).
/// A failing variant records its error and the others continue. FID subsample
/// 0 means 4/5 of the smaller half, so trials differ.
AblationTable run_ablation(const DatasetManifest& crops, const AblationSettings& settings,
                           const std::filesystem::path& out_dir);

}  // namespace dermgan
