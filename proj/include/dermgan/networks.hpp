#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dermgan/image.hpp"
#include "dermgan/nn/module.hpp"

namespace dermgan {

enum class UpsampleMode {
  kResizeConv,     // nearest 2x resize, then 3x3 same conv
  kTransposeConv,  // 4x4 stride-2 transposed conv (checkerboard-prone reference)
};

struct GeneratorConfig {
  int depth = 4;
  int base_channels = 32;
  int image_size = 64;
  UpsampleMode upsample = UpsampleMode::kResizeConv;
};

struct DiscriminatorConfig {
  int n_layers = 4;
  int base_channels = 32;
  bool condition_on_map = true;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void validate(const GeneratorConfig& c);
void validate(const DiscriminatorConfig& c);

nlohmann::ordered_json to_json(const GeneratorConfig& c);
nlohmann::ordered_json to_json(const DiscriminatorConfig& c);
/// Missing keys keep defaults; unknown keys throw ConfigError.
GeneratorConfig generator_config_from_json(const nlohmann::ordered_json& j);
DiscriminatorConfig discriminator_config_from_json(const nlohmann::ordered_json& j);

/// Channel width at encoder stage i (0-based): base * 2^i, capped at 8 * base.
[[nodiscard]] int stage_channels(int base, int stage);

/// Nearest 2x resize followed by `conv` (expected 3x3, stride 1, pad 1).
template <typename T>
nn::Var<T> upsample_block(const nn::Var<T>& x, const nn::Conv2dLayer<T>& conv);

/// U-Net: stride-2 4x4 encoder with leaky ReLU 0.2, decoder of upsample
/// blocks with ReLU and skip concatenation, tanh head. Instance norm on every
/// stage except the first encoder stage, the head, and 1x1 activations.
template <typename T>
class Generator {
 public:
  Generator(const GeneratorConfig& config, uint64_t seed);

  /// maps [N,3,S,S] in [-1,1] -> images [N,3,S,S] in [-1,1].
  /// `zero_skip` >= 0 replaces that encoder skip (0 = outermost) with zeros.
  [[nodiscard]] nn::Var<T> forward(const nn::Var<T>& maps, int zero_skip = -1) const;

  [[nodiscard]] const GeneratorConfig& config() const { return config_; }
  [[nodiscard]] nn::ParameterList<T>& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterList<T>& parameters() const { return params_; }

 private:
  struct UpStage {
    nn::Conv2dLayer<T> conv;                // resize-conv mode
    nn::ConvTranspose2dLayer<T> transpose;  // transpose mode
  };
  [[nodiscard]] nn::Var<T> up(const UpStage& s, const nn::Var<T>& x) const;

  GeneratorConfig config_;
  std::vector<nn::Conv2dLayer<T>> encoder_;
  std::vector<UpStage> decoder_;  // decoder_[i] outputs the width and resolution of encoder stage i
  UpStage head_;
  nn::ParameterList<T> params_;
};

template <typename T>
struct DiscriminatorOutput {
  nn::Var<T> patch_logits;     // [N,1,S/2^(L-1),S/2^(L-1)]
  nn::Var<T> tap_activations;  // post-activation output of the second-to-last conv
};

/// PatchGAN: L-1 stride-2 4x4 convs with leaky ReLU 0.2 (instance norm after
/// the first), then a 3x3 stride-1 logit conv.
template <typename T>
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& config, uint64_t seed);

  /// `maps` is ignored (may be undefined) when condition_on_map is false.
  [[nodiscard]] DiscriminatorOutput<T> forward(const nn::Var<T>& images, const nn::Var<T>& maps) const;

  [[nodiscard]] const DiscriminatorConfig& config() const { return config_; }
  [[nodiscard]] int input_channels() const { return config_.condition_on_map ? 6 : 3; }
  [[nodiscard]] nn::ParameterList<T>& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterList<T>& parameters() const { return params_; }

 private:
  DiscriminatorConfig config_;
  std::vector<nn::Conv2dLayer<T>> convs_;
  nn::Conv2dLayer<T> logit_;
  nn::ParameterList<T> params_;
};

/// Packs HWC images into an NCHW batch and back.
template <typename T>
[[nodiscard]] nn::Tensor<T> to_batch(const std::vector<const ImageTensor*>& images);
template <typename T>
[[nodiscard]] nn::Tensor<T> to_batch(const std::vector<ImageTensor>& images);
template <typename T>
[[nodiscard]] std::vector<ImageTensor> from_batch(const nn::Tensor<T>& batch);

// Checkpoint directory layout:
//   config.json         generator, discriminator and training configs, precision
//   generator.bin       parameter blob
//   discriminator.bin   parameter blob
//   optimizer.bin       Adam moments of both networks
//   state.json          step counter and optimizer step counts
inline constexpr const char* kCheckpointConfig = "config.json";
inline constexpr const char* kCheckpointGenerator = "generator.bin";
inline constexpr const char* kCheckpointDiscriminator = "discriminator.bin";
inline constexpr const char* kCheckpointOptimizer = "optimizer.bin";
inline constexpr const char* kCheckpointState = "state.json";

struct CheckpointInfo {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  std::string precision;  // "float32" or "float64"
  nlohmann::ordered_json config;  // full config record
  nlohmann::ordered_json state;
};

/// Reads config.json and state.json of a checkpoint directory.
[[nodiscard]] CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Generator with weights from a checkpoint; precision must match T.
template <typename T>
[[nodiscard]] Generator<T> load_generator(const std::filesystem::path& dir);

/// Stable identifier of a checkpoint: directory name plus step.
[[nodiscard]] std::string checkpoint_id(const std::filesystem::path& dir);

template <typename T>
[[nodiscard]] constexpr const char* precision_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

}  // namespace dermgan
