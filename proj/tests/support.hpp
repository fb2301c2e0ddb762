#pragma once

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dermgan/nn/module.hpp"

namespace dermgan::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string tag = info ? std::string(info->test_suite_name()) + "_" + info->name() : "dermgan";
    for (auto& c : tag)
      if (c == '/') c = '_';
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("dermgan_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  [[nodiscard]] std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

[[nodiscard]] inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename T>
[[nodiscard]] nn::Tensor<T> random_tensor(nn::Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  nn::Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
[[nodiscard]] std::vector<T> values_of(const nn::Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

/// Largest relative error between analytic and central-difference gradients
/// of `loss` over `probes` randomly chosen scalars of every input.
inline double max_grad_error(std::vector<nn::Var<double>> inputs,
                             const std::function<nn::Var<double>(const std::vector<nn::Var<double>>&)>& loss,
                             int probes, uint64_t seed, double h = 1e-6) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  nn::backward(loss(inputs));
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto& v : inputs) {
    const auto grad = v.grad();
    std::uniform_int_distribution<int64_t> pick(0, v.value().numel() - 1);
    for (int p = 0; p < probes; ++p) {
      const int64_t i = pick(rng);
      const double orig = v.value()[i];
      double up, down;
      {
        nn::NoGradGuard g;
        v.mutable_value()[i] = orig + h;
        up = loss(inputs).item();
        v.mutable_value()[i] = orig - h;
        down = loss(inputs).item();
        v.mutable_value()[i] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[i];
      const double err = std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace dermgan::testing
