#include "dermgan/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "dermgan/networks.hpp"
#include "dermgan/rng.hpp"

namespace dermgan {

using nn::Tensor;
using nn::Var;

void validate(const ClassifierConfig& c) {
  if (c.n_classes < 2) throw ConfigError("classifier n_classes must be >= 2");
  for (int ch : c.channels)
    if (ch < 1) throw ConfigError("classifier channels must be positive");
  if (c.epochs < 1 || c.batch_size < 1) throw ConfigError("classifier epochs and batch_size must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ConfigError("classifier learning_rate must be positive");
  if (c.saturation_strength < 0.0 || c.saturation_strength > 1.0) throw ConfigError("saturation_strength in [0, 1]");
  if (c.jitter_strength < 0.0 || c.jitter_strength > 1.0) throw ConfigError("jitter_strength in [0, 1]");
}

nlohmann::ordered_json to_json(const ClassifierConfig& c) {
  return {{"n_classes", c.n_classes},
          {"channels", c.channels},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"flip", c.flip},
          {"saturation", c.saturation},
          {"jitter", c.jitter},
          {"saturation_strength", c.saturation_strength},
          {"jitter_strength", c.jitter_strength}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::ordered_json& j) {
  static const std::vector<std::string> keys = {"n_classes", "channels", "epochs", "batch_size",
                                                "learning_rate", "seed", "flip", "saturation",
                                                "jitter", "saturation_strength", "jitter_strength"};
  if (!j.is_object()) throw ConfigError("classifier config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown classifier config key '" + k + "'");
    }
  }
  ClassifierConfig c;
  try {
    c.n_classes = j.value("n_classes", c.n_classes);
    if (j.contains("channels")) c.channels = j.at("channels").get<std::array<int, 3>>();
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.flip = j.value("flip", c.flip);
    c.saturation = j.value("saturation", c.saturation);
    c.jitter = j.value("jitter", c.jitter);
    c.saturation_strength = j.value("saturation_strength", c.saturation_strength);
    c.jitter_strength = j.value("jitter_strength", c.jitter_strength);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("classifier config: ") + e.what());
  }
  validate(c);
  return c;
}

Classifier::Classifier(const ClassifierConfig& config) : config_(config) {
  validate(config_);
  Rng rng(derive_seed(config_.seed, "classifier-init"));
  int in = 3;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const int out = config_.channels[b];
    blocks_[b] = nn::Conv2dLayer<float>(in, out, 3, {2, 1}, true, rng, std::sqrt(2.0 / (9.0 * in)));
    blocks_[b].register_into(params_, "block" + std::to_string(b));
    in = out;
  }
  head_ = nn::LinearLayer<float>(in, config_.n_classes, rng, std::sqrt(1.0 / in));
  head_.register_into(params_, "head");
}

Var<float> Classifier::features(const Var<float>& images) const {
  Var<float> h = images;
  for (const auto& b : blocks_) h = nn::relu(b(h));
  return nn::global_avg_pool(h);
}

Var<float> Classifier::logits(const Var<float>& images) const { return head_(features(images)); }

namespace {

Tensor<float> pack(const std::vector<const RgbImage*>& images) {
  const int w = images.at(0)->width, h = images[0]->height;
  Tensor<float> t(nn::Shape{static_cast<int64_t>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = *images[n];
    if (img.width != w || img.height != h) throw nn::ShapeError("classifier batch images must share one size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at(static_cast<int64_t>(n), c, y, x) = static_cast<float>(img.at(x, y, c) / 127.5 - 1.0);
  }
  return t;
}

int argmax_row(const Tensor<float>& logits, int64_t r) {
  const int64_t c = logits.dim(1);
  const float* z = logits.data() + r * c;
  return static_cast<int>(std::max_element(z, z + c) - z);
}

}  // namespace

std::vector<int> Classifier::predict(const std::vector<RgbImage>& images, int batch_size) const {
  nn::NoGradGuard no_grad;
  std::vector<int> out;
  for (std::size_t s = 0; s < images.size(); s += static_cast<std::size_t>(batch_size)) {
    std::vector<const RgbImage*> chunk;
    for (std::size_t i = s; i < std::min(images.size(), s + static_cast<std::size_t>(batch_size)); ++i)
      chunk.push_back(&images[i]);
    const auto z = logits(Var<float>(pack(chunk)));
    for (int64_t r = 0; r < z.value().dim(0); ++r) out.push_back(argmax_row(z.value(), r));
  }
  return out;
}

void Classifier::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "config.json", std::ios::trunc);
  os << to_json(config_).dump(2) << "\n";
  if (!os) throw nn::CheckpointError("write failed for " + (dir / "config.json").string());
  nn::save_parameters(params_, dir / "classifier.bin");
}

Classifier Classifier::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.json");
  if (!is) throw nn::CheckpointError("cannot open " + (dir / "config.json").string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw nn::CheckpointError((dir / "config.json").string() + ": " + e.what());
  }
  Classifier c(classifier_config_from_json(j));
  nn::load_parameters(c.params_, dir / "classifier.bin");
  return c;
}

std::vector<LabeledImage> load_labeled(const DatasetManifest& m, std::optional<Split> split) {
  std::vector<LabeledImage> out;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    out.push_back({r.case_id, read_png(m.resolve(r)), r.condition.id, r.synthetic});
  }
  return out;
}

RgbImage augment_image(const RgbImage& img, const ClassifierConfig& c, uint64_t seed) {
  Rng rng(seed);
  const bool flip = c.flip && uniform_int(rng, 0, 1) == 1;
  const double sat = c.saturation ? uniform_real(rng, 1.0 - c.saturation_strength, 1.0 + c.saturation_strength) : 1.0;
  const double shift = c.jitter ? 255.0 * uniform_real(rng, -c.jitter_strength, c.jitter_strength) : 0.0;
  RgbImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int sx = flip ? img.width - 1 - x : x;
      const double r = img.at(sx, y, 0), g = img.at(sx, y, 1), b = img.at(sx, y, 2);
      const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
      const double v[3] = {r, g, b};
      for (int ch = 0; ch < 3; ++ch) {
        const double o = gray + sat * (v[ch] - gray) + shift;
        out.at(x, y, ch) = static_cast<uint8_t>(std::clamp(std::lround(o), 0L, 255L));
      }
    }
  return out;
}

ClassifierTrainResult train_classifier(const std::vector<LabeledImage>& train, const ClassifierConfig& config) {
  if (train.empty()) throw std::invalid_argument("classifier training set is empty");
  ClassifierTrainResult result{Classifier(config), {}, {}, {}};
  auto& model = result.model;
  std::vector<int64_t> support(static_cast<std::size_t>(config.n_classes), 0);
  for (const auto& s : train) {
    if (s.label < 0 || s.label >= config.n_classes) {
      throw std::out_of_range("case '" + s.case_id + "': label " + std::to_string(s.label) + " outside 0.." +
                              std::to_string(config.n_classes - 1));
    }
    ++support[static_cast<std::size_t>(s.label)];
  }
  for (int k = 1; k < config.n_classes; ++k) {
    if (support[static_cast<std::size_t>(k)] == 0) {
      result.warnings.push_back("class " + std::to_string(k) + " is absent from the training data");
    }
  }
  nn::Adam<float> adam(model.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8});
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(config.seed, "classifier-order"), static_cast<uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_int<std::size_t>(rng, 0, i - 1)]);
    double loss_sum = 0;
    int64_t correct = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
      std::vector<RgbImage> aug;
      std::vector<int> labels;
      for (std::size_t i = s; i < e; ++i) {
        const auto& sample = train[order[i]];
        const uint64_t aseed = derive_seed(derive_seed(config.seed, static_cast<uint64_t>(epoch)), i);
        aug.push_back(augment_image(sample.image, config, aseed));
        labels.push_back(sample.label);
      }
      std::vector<const RgbImage*> ptrs;
      for (const auto& a : aug) ptrs.push_back(&a);
      const auto z = model.logits(Var<float>(pack(ptrs)));
      const auto loss = nn::softmax_cross_entropy(z, labels);
      model.parameters().zero_grad();
      nn::backward(loss);
      adam.step();
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(labels.size());
      for (std::size_t r = 0; r < labels.size(); ++r)
        correct += argmax_row(z.value(), static_cast<int64_t>(r)) == labels[r] ? 1 : 0;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(train.size()));
    result.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(train.size()));
  }
  return result;
}

double f1_from_confusion(const std::vector<std::vector<int64_t>>& confusion, int k) {
  const auto kk = static_cast<std::size_t>(k);
  const double tp = static_cast<double>(confusion[kk][kk]);
  double predicted = 0, actual = 0;
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    predicted += static_cast<double>(confusion[i][kk]);
    actual += static_cast<double>(confusion[kk][i]);
  }
  const double p = predicted > 0 ? tp / predicted : 0.0;
  const double r = actual > 0 ? tp / actual : 0.0;
  return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
}

EvalReport make_report(const std::vector<int>& labels, const std::vector<int>& predictions, int n_classes) {
  if (labels.empty()) throw std::invalid_argument("evaluation set is empty");
  if (labels.size() != predictions.size()) throw std::invalid_argument("labels and predictions differ in length");
  EvalReport rep;
  rep.labels = labels;
  rep.predictions = predictions;
  rep.confusion.assign(static_cast<std::size_t>(n_classes), std::vector<int64_t>(static_cast<std::size_t>(n_classes), 0));
  int64_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || t >= n_classes || p < 0 || p >= n_classes) throw std::out_of_range("class index outside the table");
    ++rep.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    rep.per_example_correct.push_back(t == p ? 1 : 0);
    hits += t == p ? 1 : 0;
  }
  rep.top1 = static_cast<double>(hits) / static_cast<double>(labels.size());
  for (int k = 0; k < n_classes; ++k) rep.per_class_f1.push_back(f1_from_confusion(rep.confusion, k));
  return rep;
}

EvalReport evaluate_classifier(const Classifier& model, const std::vector<LabeledImage>& test) {
  if (test.empty()) throw std::invalid_argument("test set is empty");
  std::vector<RgbImage> images;
  std::vector<int> labels;
  for (const auto& s : test) {
    images.push_back(s.image);
    labels.push_back(s.label);
  }
  return make_report(labels, model.predict(images), model.config().n_classes);
}

Interval bootstrap_ci(const ReportMetric& metric, const EvalReport& report, int resamples, double level,
                      uint64_t seed) {
  const std::size_t n = report.labels.size();
  if (n == 0) throw std::invalid_argument("bootstrap needs at least one prediction");
  if (resamples < 1 || !(level > 0.0 && level < 1.0)) throw std::invalid_argument("invalid bootstrap settings");
  const int n_classes = static_cast<int>(report.confusion.size());
  Rng rng(seed);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(resamples));
  std::vector<int> labels(n), preds(n);
  for (int r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = uniform_int<std::size_t>(rng, 0, n - 1);
      labels[i] = report.labels[j];
      preds[i] = report.predictions[j];
    }
    const double v = metric(make_report(labels, preds, n_classes));
    values.push_back(std::isfinite(v) ? v : 0.0);
  }
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(values.size() - 1, i + 1);
    return values[i] + (pos - static_cast<double>(i)) * (values[j] - values[i]);
  };
  const double alpha = 1.0 - level;
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

double paired_accuracy_test(const EvalReport& a, const EvalReport& b) {
  const std::size_t n = a.per_example_correct.size();
  if (n != b.per_example_correct.size() || a.labels != b.labels) {
    throw std::invalid_argument("paired test needs reports on the same test set in the same order");
  }
  if (n < 2) throw std::invalid_argument("paired test needs at least two examples");
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(a.per_example_correct[i]) - b.per_example_correct[i];
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.per_example_correct[i]) - b.per_example_correct[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);
  if (var == 0.0) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / std::sqrt(var / static_cast<double>(n));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

nlohmann::ordered_json AugmentationReport::to_json() const {
  nlohmann::ordered_json j;
  j["rare_class"] = rare_class;
  j["seeds"] = nlohmann::ordered_json::array();
  for (const auto& s : seeds) {
    nlohmann::ordered_json js = {{"seed", s.seed},
                                 {"top1_baseline", s.top1_baseline},
                                 {"top1_augmented", s.top1_augmented},
                                 {"p_value", s.p_value},
                                 {"warnings", s.warnings}};
    js["classes"] = nlohmann::ordered_json::array();
    for (const auto& c : s.classes) {
      js["classes"].push_back({{"class_id", c.class_id},
                               {"f1_baseline", c.f1_baseline},
                               {"f1_augmented", c.f1_augmented},
                               {"ci_baseline", {c.ci_baseline.lo, c.ci_baseline.hi}},
                               {"ci_augmented", {c.ci_augmented.lo, c.ci_augmented.hi}}});
    }
    j["seeds"].push_back(std::move(js));
  }
  return j;
}

RgbImage render_f1_chart(const std::vector<ClassComparison>& classes) {
  constexpr int kBar = 12, kGap = 14, kMargin = 20, kPlot = 200;
  const int n = static_cast<int>(classes.size());
  RgbImage img(2 * kMargin + n * (2 * kBar + kGap), kPlot + 2 * kMargin);
  std::fill(img.pixels.begin(), img.pixels.end(), uint8_t{255});
  auto rect = [&](int x0, int y0, int x1, int y1, std::array<uint8_t, 3> c) {
    for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x)
        for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[static_cast<std::size_t>(ch)];
  };
  const int base = kMargin + kPlot;
  for (int q = 0; q <= 4; ++q) rect(kMargin, base - q * kPlot / 4, img.width - kMargin, base - q * kPlot / 4 + 1, {220, 220, 220});
  for (int i = 0; i < n; ++i) {
    const int x = kMargin + kGap / 2 + i * (2 * kBar + kGap);
    const auto h = [&](double f1) { return static_cast<int>(std::lround(std::clamp(f1, 0.0, 1.0) * kPlot)); };
    rect(x, base - h(classes[static_cast<std::size_t>(i)].f1_baseline), x + kBar, base, {150, 150, 150});
    rect(x + kBar, base - h(classes[static_cast<std::size_t>(i)].f1_augmented), x + 2 * kBar, base, {40, 90, 200});
  }
  rect(kMargin, base, img.width - kMargin, base + 1, {0, 0, 0});
  return img;
}

AugmentationReport run_augmentation_experiment(const std::vector<LabeledImage>& real_train,
                                               const std::vector<LabeledImage>& synthetic,
                                               const std::vector<LabeledImage>& test,
                                               const AugmentationSettings& settings,
                                               const std::filesystem::path& out_dir) {
  if (settings.seeds.empty()) throw std::invalid_argument("augmentation experiment needs at least one seed");
  for (const auto& s : synthetic) {
    if (!s.synthetic) throw std::invalid_argument("case '" + s.case_id + "' in the synthetic set is not flagged synthetic");
  }
  std::vector<LabeledImage> augmented = real_train;
  augmented.insert(augmented.end(), synthetic.begin(), synthetic.end());

  AugmentationReport report;
  report.rare_class = settings.rare_class;
  const int n_classes = settings.classifier.n_classes;
  for (uint64_t seed : settings.seeds) {
    ClassifierConfig cfg = settings.classifier;
    cfg.seed = seed;
    auto base = train_classifier(real_train, cfg);
    auto aug = train_classifier(augmented, cfg);
    const auto rb = evaluate_classifier(base.model, test);
    const auto ra = evaluate_classifier(aug.model, test);
    SeedComparison sc;
    sc.seed = seed;
    sc.top1_baseline = rb.top1;
    sc.top1_augmented = ra.top1;
    sc.p_value = paired_accuracy_test(ra, rb);
    sc.warnings = base.warnings;
    for (const auto& w : aug.warnings) sc.warnings.push_back("augmented: " + w);
    for (int k = 1; k < n_classes; ++k) {
      const ReportMetric metric = [k](const EvalReport& r) { return r.per_class_f1[static_cast<std::size_t>(k)]; };
      const uint64_t bseed = derive_seed(seed, static_cast<uint64_t>(k));
      sc.classes.push_back({k, rb.per_class_f1[static_cast<std::size_t>(k)], ra.per_class_f1[static_cast<std::size_t>(k)],
                            bootstrap_ci(metric, rb, settings.bootstrap_resamples, 0.95, bseed),
                            bootstrap_ci(metric, ra, settings.bootstrap_resamples, 0.95, bseed)});
    }
    report.seeds.push_back(std::move(sc));
  }

  std::filesystem::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "report.json", std::ios::trunc);
    os << report.to_json().dump(2) << "\n";
  }
  std::ofstream csv(out_dir / "f1_bars.csv", std::ios::trunc);
  csv << "seed,class_id,f1_baseline,f1_augmented,ci_baseline_lo,ci_baseline_hi,ci_augmented_lo,ci_augmented_hi\n";
  std::vector<ClassComparison> mean_bars = report.seeds.front().classes;
  for (auto& m : mean_bars) m.f1_baseline = m.f1_augmented = 0;
  for (const auto& s : report.seeds) {
    for (std::size_t i = 0; i < s.classes.size(); ++i) {
      const auto& c = s.classes[i];
      char line[256];
      std::snprintf(line, sizeof(line), "%llu,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                    static_cast<unsigned long long>(s.seed), c.class_id, c.f1_baseline, c.f1_augmented,
                    c.ci_baseline.lo, c.ci_baseline.hi, c.ci_augmented.lo, c.ci_augmented.hi);
      csv << line;
      mean_bars[i].f1_baseline += c.f1_baseline / static_cast<double>(report.seeds.size());
      mean_bars[i].f1_augmented += c.f1_augmented / static_cast<double>(report.seeds.size());
    }
  }
  write_png(out_dir / "f1_bars.png", render_f1_chart(mean_bars));
  return report;
}

}  // namespace dermgan
