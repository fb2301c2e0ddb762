#include "dermgan/nn/module.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace dermgan::nn {

template <typename T>
Conv2dLayer<T>::Conv2dLayer(int in, int out, int kernel, ConvGeometry g, bool with_bias, Rng& rng, double init_std)
    : geometry(g) {
  Tensor<T> w(Shape{out, in, kernel, kernel});
  normal_init(w, rng, init_std);
  weight = Var<T>(std::move(w), true);
  if (with_bias) bias = Var<T>(Tensor<T>(Shape{out}), true);
}

template <typename T>
void Conv2dLayer<T>::register_into(ParameterList<T>& params, const std::string& name) const {
  params.add(name + ".weight", weight);
  if (bias) params.add(name + ".bias", *bias);
}

template <typename T>
ConvTranspose2dLayer<T>::ConvTranspose2dLayer(int in, int out, int kernel, ConvGeometry g, bool with_bias, Rng& rng,
                                              double init_std)
    : geometry(g) {
  Tensor<T> w(Shape{in, out, kernel, kernel});
  normal_init(w, rng, init_std);
  weight = Var<T>(std::move(w), true);
  if (with_bias) bias = Var<T>(Tensor<T>(Shape{out}), true);
}

template <typename T>
void ConvTranspose2dLayer<T>::register_into(ParameterList<T>& params, const std::string& name) const {
  params.add(name + ".weight", weight);
  if (bias) params.add(name + ".bias", *bias);
}

template <typename T>
LinearLayer<T>::LinearLayer(int in, int out, Rng& rng, double init_std) {
  Tensor<T> w(Shape{out, in});
  normal_init(w, rng, init_std);
  weight = Var<T>(std::move(w), true);
  bias = Var<T>(Tensor<T>(Shape{out}), true);
}

template <typename T>
void LinearLayer<T>::register_into(ParameterList<T>& params, const std::string& name) const {
  params.add(name + ".weight", weight);
  params.add(name + ".bias", bias);
}

template <typename T>
Adam<T>::Adam(ParameterList<T> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& e : params_.entries()) {
    moments_.add(e.name + ".m", Var<T>(Tensor<T>(e.var.shape())));
    moments_.add(e.name + ".v", Var<T>(Tensor<T>(e.var.shape())));
  }
}

template <typename T>
void Adam<T>::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T lr = static_cast<T>(config_.learning_rate * std::sqrt(bc2) / bc1);
  const T eps = static_cast<T>(config_.epsilon * std::sqrt(bc2));
  auto& moments = moments_.entries();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& node = *params_.entries()[i].var.node();
    if (node.grad.numel() == 0) continue;
    T* p = node.value.data();
    const T* g = node.grad.data();
    T* m = moments[2 * i].var.mutable_value().data();
    T* v = moments[2 * i + 1].var.mutable_value().data();
    for (int64_t k = 0; k < node.value.numel(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      p[k] -= lr * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
}

namespace {

template <typename V>
void write_pod(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw CheckpointError("truncated parameter blob");
  return v;
}

}  // namespace

template <typename T>
void save_parameters(const ParameterList<T>& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_pod<uint32_t>(os, BlobHeader::kMagic);
  write_pod<uint32_t>(os, BlobHeader::kVersion);
  write_pod<uint32_t>(os, sizeof(T));
  write_pod<uint64_t>(os, params.size());
  for (const auto& e : params.entries()) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const auto& dims = e.var.shape().dims();
    write_pod<uint32_t>(os, static_cast<uint32_t>(dims.size()));
    for (int64_t d : dims) write_pod<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.var.value().data()),
             static_cast<std::streamsize>(e.var.value().numel() * sizeof(T)));
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

template <typename T>
void load_parameters(ParameterList<T>& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open parameter blob " + path.string());
  if (read_pod<uint32_t>(is) != BlobHeader::kMagic) throw CheckpointError(path.string() + ": bad magic");
  if (const auto v = read_pod<uint32_t>(is); v != BlobHeader::kVersion) {
    throw CheckpointError(path.string() + ": unsupported blob version " + std::to_string(v));
  }
  if (const auto sz = read_pod<uint32_t>(is); sz != sizeof(T)) {
    throw CheckpointError(path.string() + ": stored with " + std::to_string(8 * sz) + "-bit scalars, expected " +
                          std::to_string(8 * sizeof(T)));
  }
  const auto count = read_pod<uint64_t>(is);
  if (count != params.size()) {
    throw CheckpointError(path.string() + ": holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (auto& e : params.entries()) {
    const auto len = read_pod<uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (name != e.name) throw CheckpointError(path.string() + ": expected tensor '" + e.name + "', found '" + name + "'");
    const auto rank = read_pod<uint32_t>(is);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = read_pod<int64_t>(is);
    if (Shape(dims) != e.var.shape()) {
      throw CheckpointError(path.string() + ": shape mismatch for '" + name + "': " + Shape(dims).str() + " vs " +
                            e.var.shape().str());
    }
    is.read(reinterpret_cast<char*>(e.var.mutable_value().data()),
            static_cast<std::streamsize>(e.var.value().numel() * sizeof(T)));
    if (!is) throw CheckpointError(path.string() + ": truncated data for '" + name + "'");
  }
}

template struct Conv2dLayer<float>;
template struct Conv2dLayer<double>;
template struct ConvTranspose2dLayer<float>;
template struct ConvTranspose2dLayer<double>;
template struct LinearLayer<float>;
template struct LinearLayer<double>;
template class Adam<float>;
template class Adam<double>;
template void save_parameters<float>(const ParameterList<float>&, const std::filesystem::path&);
template void save_parameters<double>(const ParameterList<double>&, const std::filesystem::path&);
template void load_parameters<float>(ParameterList<float>&, const std::filesystem::path&);
template void load_parameters<double>(ParameterList<double>&, const std::filesystem::path&);

}  // namespace dermgan::nn
