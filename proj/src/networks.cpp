#include "dermgan/networks.hpp"

#include <fstream>

namespace dermgan {

using nn::ConvGeometry;
using nn::Tensor;
using nn::Var;

namespace {

constexpr ConvGeometry kDown{2, 1};
constexpr ConvGeometry kSame{1, 1};
constexpr double kLeakySlope = 0.2;

std::string_view upsample_name(UpsampleMode m) {
  return m == UpsampleMode::kResizeConv ? "resize_conv" : "transpose_conv";
}

UpsampleMode parse_upsample(const std::string& s) {
  if (s == "resize_conv") return UpsampleMode::kResizeConv;
  if (s == "transpose_conv") return UpsampleMode::kTransposeConv;
  throw ConfigError("unknown upsample mode '" + s + "' (expected resize_conv or transpose_conv)");
}

void reject_unknown(const nlohmann::ordered_json& j, std::initializer_list<std::string_view> keys,
                    std::string_view what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (auto key : keys) known = known || k == key;
    if (!known) throw ConfigError("unknown " + std::string(what) + " config key '" + k + "'");
  }
}

nlohmann::ordered_json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw nn::CheckpointError("cannot open " + p.string());
  try {
    return nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError(p.string() + ": " + e.what());
  }
}

}  // namespace

void validate(const GeneratorConfig& c) {
  if (c.depth < 2) throw ConfigError("generator depth must be >= 2");
  if (c.base_channels < 1) throw ConfigError("generator base_channels must be >= 1");
  if (c.depth > 16 || c.image_size < 1 || c.image_size % (1 << c.depth) != 0) {
    throw ConfigError("generator image_size " + std::to_string(c.image_size) + " is not divisible by 2^" +
                      std::to_string(c.depth));
  }
}

void validate(const DiscriminatorConfig& c) {
  if (c.n_layers < 3) throw ConfigError("discriminator n_layers must be >= 3");
  if (c.base_channels < 1) throw ConfigError("discriminator base_channels must be >= 1");
}

nlohmann::ordered_json to_json(const GeneratorConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"image_size", c.image_size},
          {"upsample", upsample_name(c.upsample)}};
}

nlohmann::ordered_json to_json(const DiscriminatorConfig& c) {
  return {{"n_layers", c.n_layers}, {"base_channels", c.base_channels}, {"condition_on_map", c.condition_on_map}};
}

GeneratorConfig generator_config_from_json(const nlohmann::ordered_json& j) {
  reject_unknown(j, {"depth", "base_channels", "image_size", "upsample"}, "generator");
  GeneratorConfig c;
  try {
    c.depth = j.value("depth", c.depth);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("upsample")) c.upsample = parse_upsample(j.at("upsample").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  validate(c);
  return c;
}

DiscriminatorConfig discriminator_config_from_json(const nlohmann::ordered_json& j) {
  reject_unknown(j, {"n_layers", "base_channels", "condition_on_map"}, "discriminator");
  DiscriminatorConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.condition_on_map = j.value("condition_on_map", c.condition_on_map);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("discriminator config: ") + e.what());
  }
  validate(c);
  return c;
}

int stage_channels(int base, int stage) { return base << std::min(stage, 3); }

template <typename T>
Var<T> upsample_block(const Var<T>& x, const nn::Conv2dLayer<T>& conv) {
  return conv(nn::upsample_nearest2x(x));
}

template <typename T>
Generator<T>::Generator(const GeneratorConfig& config, uint64_t seed) : config_(config) {
  validate(config_);
  Rng rng(seed);
  const int d = config_.depth, base = config_.base_channels;
  for (int i = 0; i < d; ++i) {
    const int in = i == 0 ? 3 : stage_channels(base, i - 1);
    const bool normed = i > 0 && (config_.image_size >> (i + 1)) > 1;
    encoder_.emplace_back(in, stage_channels(base, i), 4, kDown, !normed, rng);
    encoder_.back().register_into(params_, "enc" + std::to_string(i));
  }
  auto make_up = [&](int in, int out, bool with_bias) {
    UpStage s;
    if (config_.upsample == UpsampleMode::kResizeConv) {
      s.conv = nn::Conv2dLayer<T>(in, out, 3, kSame, with_bias, rng);
    } else {
      s.transpose = nn::ConvTranspose2dLayer<T>(in, out, 4, kDown, with_bias, rng);
    }
    return s;
  };
  auto register_up = [&](const UpStage& s, const std::string& name) {
    if (config_.upsample == UpsampleMode::kResizeConv) {
      s.conv.register_into(params_, name);
    } else {
      s.transpose.register_into(params_, name);
    }
  };
  decoder_.resize(static_cast<std::size_t>(d - 1));
  for (int i = d - 2; i >= 0; --i) {
    const int in = i == d - 2 ? stage_channels(base, d - 1) : 2 * stage_channels(base, i + 1);
    decoder_[static_cast<std::size_t>(i)] = make_up(in, stage_channels(base, i), false);
    register_up(decoder_[static_cast<std::size_t>(i)], "dec" + std::to_string(i));
  }
  head_ = make_up(2 * stage_channels(base, 0), 3, true);
  register_up(head_, "head");
}

template <typename T>
Var<T> Generator<T>::up(const UpStage& s, const Var<T>& x) const {
  return config_.upsample == UpsampleMode::kResizeConv ? upsample_block(x, s.conv) : s.transpose(x);
}

template <typename T>
Var<T> Generator<T>::forward(const Var<T>& maps, int zero_skip) const {
  const auto& sh = maps.shape();
  if (sh.rank() != 4 || sh[1] != 3 || sh[2] != config_.image_size || sh[3] != config_.image_size) {
    throw nn::ShapeError("generator expects [N,3," + std::to_string(config_.image_size) + "," +
                         std::to_string(config_.image_size) + "] maps, got " + sh.str());
  }
  const T slope = static_cast<T>(kLeakySlope);
  std::vector<Var<T>> skips;
  Var<T> h = maps;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    h = encoder_[i](h);
    if (i > 0 && h.shape()[2] > 1) h = nn::instance_norm(h);
    h = nn::leaky_relu(h, slope);
    skips.push_back(h);
  }
  auto skip = [&](std::size_t i) {
    if (static_cast<int>(i) == zero_skip) return Var<T>(Tensor<T>(skips[i].shape()));
    return skips[i];
  };
  Var<T> u = skips.back();
  for (int i = static_cast<int>(decoder_.size()) - 1; i >= 0; --i) {
    u = nn::relu(nn::instance_norm(up(decoder_[static_cast<std::size_t>(i)], u)));
    u = nn::concat_channels(u, skip(static_cast<std::size_t>(i)));
  }
  return nn::tanh(up(head_, u));
}

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorConfig& config, uint64_t seed) : config_(config) {
  validate(config_);
  Rng rng(seed);
  const int base = config_.base_channels;
  for (int i = 0; i < config_.n_layers - 1; ++i) {
    const int in = i == 0 ? input_channels() : stage_channels(base, i - 1);
    convs_.emplace_back(in, stage_channels(base, i), 4, kDown, true, rng);
    convs_.back().register_into(params_, "conv" + std::to_string(i));
  }
  logit_ = nn::Conv2dLayer<T>(stage_channels(base, config_.n_layers - 2), 1, 3, kSame, true, rng);
  logit_.register_into(params_, "logit");
}

template <typename T>
DiscriminatorOutput<T> Discriminator<T>::forward(const Var<T>& images, const Var<T>& maps) const {
  const auto& sh = images.shape();
  if (sh.rank() != 4 || sh[1] != 3) throw nn::ShapeError("discriminator expects [N,3,H,W] images, got " + sh.str());
  const int64_t stride = int64_t{1} << (config_.n_layers - 1);
  if (sh[2] % stride != 0 || sh[3] % stride != 0) {
    throw nn::ShapeError("discriminator input " + sh.str() + " not divisible by " + std::to_string(stride));
  }
  Var<T> h = images;
  if (config_.condition_on_map) {
    if (!maps.defined() || maps.shape() != sh) {
      throw nn::ShapeError("discriminator map " + (maps.defined() ? maps.shape().str() : std::string("<none>")) +
                           " does not match image " + sh.str());
    }
    h = nn::concat_channels(images, maps);
  }
  const T slope = static_cast<T>(kLeakySlope);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i](h);
    if (i > 0 && h.shape()[2] * h.shape()[3] > 1) h = nn::instance_norm(h);
    h = nn::leaky_relu(h, slope);
  }
  return {logit_(h), h};
}

template <typename T>
Tensor<T> to_batch(const std::vector<const ImageTensor*>& images) {
  if (images.empty()) throw nn::ShapeError("empty image batch");
  const int w = images[0]->width, h = images[0]->height;
  Tensor<T> out(nn::Shape{static_cast<int64_t>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = *images[n];
    if (img.width != w || img.height != h) throw nn::ShapeError("images in a batch must share a size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(static_cast<int64_t>(n), c, y, x) = static_cast<T>(img.at(x, y, c));
  }
  return out;
}

template <typename T>
Tensor<T> to_batch(const std::vector<ImageTensor>& images) {
  std::vector<const ImageTensor*> ptrs;
  for (const auto& i : images) ptrs.push_back(&i);
  return to_batch<T>(ptrs);
}

template <typename T>
std::vector<ImageTensor> from_batch(const Tensor<T>& batch) {
  if (batch.shape().rank() != 4 || batch.dim(1) != 3) throw nn::ShapeError("expected [N,3,H,W], got " + batch.shape().str());
  const int h = static_cast<int>(batch.dim(2)), w = static_cast<int>(batch.dim(3));
  std::vector<ImageTensor> out;
  for (int64_t n = 0; n < batch.dim(0); ++n) {
    ImageTensor img(w, h);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(x, y, c) = static_cast<float>(batch.at(n, c, y, x));
    out.push_back(std::move(img));
  }
  return out;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  CheckpointInfo info;
  info.config = read_json_file(dir / kCheckpointConfig);
  info.state = read_json_file(dir / kCheckpointState);
  try {
    info.generator = generator_config_from_json(info.config.at("generator"));
    info.discriminator = discriminator_config_from_json(info.config.at("discriminator"));
    info.precision = info.config.at("precision").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError((dir / kCheckpointConfig).string() + ": " + e.what());
  }
  return info;
}

template <typename T>
Generator<T> load_generator(const std::filesystem::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.precision != precision_name<T>()) {
    throw nn::CheckpointError(dir.string() + ": checkpoint precision " + info.precision + ", requested " +
                              precision_name<T>());
  }
  Generator<T> g(info.generator, 0);
  nn::load_parameters(g.parameters(), dir / kCheckpointGenerator);
  return g;
}

std::string checkpoint_id(const std::filesystem::path& dir) {
  const auto info = read_checkpoint_info(dir);
  auto abs = std::filesystem::weakly_canonical(dir);
  if (abs.filename().empty()) abs = abs.parent_path();
  const auto name = abs.filename().string();
  return name + "@" + std::to_string(info.state.value("step", int64_t{0}));
}

#define DERMGAN_INSTANTIATE(T)                                                   \
  template Var<T> upsample_block(const Var<T>&, const nn::Conv2dLayer<T>&);      \
  template class Generator<T>;                                                   \
  template class Discriminator<T>;                                               \
  template Tensor<T> to_batch(const std::vector<const ImageTensor*>&);           \
  template Tensor<T> to_batch(const std::vector<ImageTensor>&);                  \
  template std::vector<ImageTensor> from_batch(const Tensor<T>&);                \
  template Generator<T> load_generator(const std::filesystem::path&);
DERMGAN_INSTANTIATE(float)
DERMGAN_INSTANTIATE(double)
#undef DERMGAN_INSTANTIATE

}  // namespace dermgan
