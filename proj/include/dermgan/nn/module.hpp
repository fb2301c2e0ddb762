#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dermgan/nn/ops.hpp"
#include "dermgan/rng.hpp"

namespace dermgan::nn {

template <typename T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

/// Ordered parameter registry; order defines optimizer and checkpoint layout.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, Var<T> var) { entries_.push_back({std::move(name), std::move(var)}); }
  void append(const ParameterList& other, const std::string& prefix) {
    for (const auto& e : other.entries_) entries_.push_back({prefix + e.name, e.var});
  }

  [[nodiscard]] std::vector<NamedParameter<T>>& entries() { return entries_; }
  [[nodiscard]] const std::vector<NamedParameter<T>>& entries() const { return entries_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }
  void set_requires_grad(bool r) {
    for (auto& e : entries_) e.var.set_requires_grad(r);
  }
  [[nodiscard]] int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.var.value().numel();
    return n;
  }

 private:
  std::vector<NamedParameter<T>> entries_;
};

/// Fills with N(0, stddev^2) draws.
template <typename T>
void normal_init(Tensor<T>& t, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
struct Conv2dLayer {
  Var<T> weight;
  std::optional<Var<T>> bias;
  ConvGeometry geometry;

  Conv2dLayer() = default;
  Conv2dLayer(int in, int out, int kernel, ConvGeometry g, bool with_bias, Rng& rng, double init_std = 0.02);
  [[nodiscard]] Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias ? &*bias : nullptr, geometry); }
  void register_into(ParameterList<T>& params, const std::string& name) const;
};

template <typename T>
struct ConvTranspose2dLayer {
  Var<T> weight;
  std::optional<Var<T>> bias;
  ConvGeometry geometry;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(int in, int out, int kernel, ConvGeometry g, bool with_bias, Rng& rng, double init_std = 0.02);
  [[nodiscard]] Var<T> operator()(const Var<T>& x) const {
    return conv_transpose2d(x, weight, bias ? &*bias : nullptr, geometry);
  }
  void register_into(ParameterList<T>& params, const std::string& name) const;
};

template <typename T>
struct LinearLayer {
  Var<T> weight;
  Var<T> bias;

  LinearLayer() = default;
  LinearLayer(int in, int out, Rng& rng, double init_std);
  [[nodiscard]] Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
  void register_into(ParameterList<T>& params, const std::string& name) const;
};

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment gradient step over a fixed ParameterList.
template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig config);

  /// Applies one update from the current grad buffers. Parameters whose grad
  /// buffer was never touched are left unchanged.
  void step();

  [[nodiscard]] int64_t step_count() const { return step_count_; }
  [[nodiscard]] const AdamConfig& config() const { return config_; }
  [[nodiscard]] ParameterList<T>& moments() { return moments_; }
  [[nodiscard]] const ParameterList<T>& moments() const { return moments_; }
  void set_step_count(int64_t t) { step_count_ = t; }

 private:
  ParameterList<T> params_;
  ParameterList<T> moments_;  // "<name>.m" and "<name>.v" per parameter
  AdamConfig config_;
  int64_t step_count_ = 0;
};

/// Versioned binary blob of named tensors.
struct BlobHeader {
  static constexpr uint32_t kMagic = 0x42504744;  // "DGPB"
  static constexpr uint32_t kVersion = 1;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void save_parameters(const ParameterList<T>& params, const std::filesystem::path& path);

/// Loads values into an existing list; names, order, and shapes must match.
template <typename T>
void load_parameters(ParameterList<T>& params, const std::filesystem::path& path);

}  // namespace dermgan::nn
