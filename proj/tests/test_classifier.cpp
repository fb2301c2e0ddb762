#include "support.hpp"

#include <fstream>
#include <numeric>

#include "dermgan/classifier.hpp"
#include "dermgan/networks.hpp"
#include "dermgan/image.hpp"
#include "dermgan/rng.hpp"

namespace dermgan {
namespace {

using testing::TempDir;

std::vector<float> flat(const nn::ParameterList<float>& params) {
  std::vector<float> out;
  for (const auto& e : params.entries())
    for (float v : e.var.value().values()) out.push_back(v);
  return out;
}

EvalReport report_from_pairs(const std::vector<std::pair<int, int>>& pairs, int n_classes) {
  std::vector<int> labels, preds;
  for (auto [t, p] : pairs) {
    labels.push_back(t);
    preds.push_back(p);
  }
  return make_report(labels, preds, n_classes);
}

// Expands a confusion matrix into aligned (label, prediction) pairs.
EvalReport report_from_confusion(const std::vector<std::vector<int>>& c) {
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t t = 0; t < c.size(); ++t)
    for (std::size_t p = 0; p < c.size(); ++p)
      for (int i = 0; i < c[t][p]; ++i) pairs.emplace_back(static_cast<int>(t), static_cast<int>(p));
  return report_from_pairs(pairs, static_cast<int>(c.size()));
}

void expect_consistent(const EvalReport& r) {
  int64_t trace = 0, total = 0;
  std::vector<int64_t> support(r.confusion.size(), 0);
  for (int l : r.labels) ++support[static_cast<std::size_t>(l)];
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    trace += r.confusion[i][i];
    const auto row = std::accumulate(r.confusion[i].begin(), r.confusion[i].end(), int64_t{0});
    EXPECT_EQ(row, support[i]);
    total += row;
    EXPECT_NEAR(r.per_class_f1[i], f1_from_confusion(r.confusion, static_cast<int>(i)), 1e-12);
  }
  EXPECT_EQ(r.top1, static_cast<double>(trace) / static_cast<double>(total));
  EXPECT_EQ(static_cast<int64_t>(std::accumulate(r.per_example_correct.begin(), r.per_example_correct.end(), 0)), trace);
}

TEST(Report, HandComputedTwoClassConfusion) {
  const auto r = report_from_confusion({{8, 2}, {4, 6}});
  const double p = 8.0 / 12, rc = 8.0 / 10;
  EXPECT_NEAR(r.per_class_f1[0], 2 * p * rc / (p + rc), 1e-12);
  EXPECT_NEAR(r.per_class_f1[0], 0.7273, 1e-4);
  EXPECT_NEAR(r.per_class_f1[1], 2 * 0.75 * 0.6 / 1.35, 1e-12);
  EXPECT_DOUBLE_EQ(r.top1, 0.7);
  expect_consistent(r);
}

TEST(Report, PerfectAndConstantPredictors) {
  Rng rng(1);
  std::vector<int> labels(300);
  for (auto& l : labels) l = uniform_int(rng, 0, 4);
  const auto perfect = make_report(labels, labels, 5);
  EXPECT_EQ(perfect.top1, 1.0);
  for (double f : perfect.per_class_f1) EXPECT_EQ(f, 1.0);
  expect_consistent(perfect);
  const auto constant = make_report(labels, std::vector<int>(labels.size(), 2), 5);
  for (int k = 0; k < 5; ++k)
    if (k != 2) EXPECT_EQ(constant.per_class_f1[static_cast<std::size_t>(k)], 0.0);
  EXPECT_GT(constant.per_class_f1[2], 0.0);
  expect_consistent(constant);
}

TEST(Report, RandomStreamsAreConsistentAndErrors) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = uniform_int(rng, 2, 9), n = uniform_int(rng, 1, 200);
    std::vector<int> l(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      l[static_cast<std::size_t>(i)] = uniform_int(rng, 0, k - 1);
      p[static_cast<std::size_t>(i)] = uniform_int(rng, 0, k - 1);
    }
    expect_consistent(make_report(l, p, k));
  }
  EXPECT_THROW((void)make_report({}, {}, 3), std::invalid_argument);
  EXPECT_THROW((void)make_report({0, 1}, {0}, 3), std::invalid_argument);
  EXPECT_THROW((void)make_report({0, 3}, {0, 1}, 3), std::out_of_range);
}

TEST(Bootstrap, ZeroVarianceBoundsAndDeterminism) {
  const std::vector<int> l(50, 1);
  const auto perfect = make_report(l, l, 3);
  const ReportMetric f1_1 = [](const EvalReport& r) { return r.per_class_f1[1]; };
  const auto ci = bootstrap_ci(f1_1, perfect);
  EXPECT_EQ(ci.lo, 1.0);
  EXPECT_EQ(ci.hi, 1.0);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> labels(120), preds(120);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      labels[i] = uniform_int(rng, 0, 3);
      preds[i] = uniform_real(rng, 0, 1) < 0.6 ? labels[i] : uniform_int(rng, 0, 3);
    }
    const auto r = make_report(labels, preds, 4);
    for (int k = 0; k < 4; ++k) {
      const ReportMetric m = [k](const EvalReport& e) { return e.per_class_f1[static_cast<std::size_t>(k)]; };
      const auto c = bootstrap_ci(m, r, 400, 0.95, static_cast<uint64_t>(trial));
      EXPECT_GE(c.lo, 0.0);
      EXPECT_LE(c.hi, 1.0);
      EXPECT_LE(c.lo, c.hi);
      EXPECT_LE(c.lo, m(r));
      EXPECT_GE(c.hi, m(r));
      const auto again = bootstrap_ci(m, r, 400, 0.95, static_cast<uint64_t>(trial));
      EXPECT_EQ(c.lo, again.lo);
      EXPECT_EQ(c.hi, again.hi);
    }
  }
  EXPECT_THROW((void)bootstrap_ci(f1_1, EvalReport{}), std::invalid_argument);
  EXPECT_THROW((void)bootstrap_ci(f1_1, perfect, 0), std::invalid_argument);
  EXPECT_THROW((void)bootstrap_ci(f1_1, perfect, 10, 1.0), std::invalid_argument);
}

// Top-1 is a Bernoulli mean, so the percentile interval approaches
// p +/- 1.96 sqrt(p (1 - p) / n).
TEST(Bootstrap, AccuracyIntervalMatchesNormalApproximation) {
  const int n = 400;
  std::vector<int> labels(n, 0), preds(n, 0);
  for (int i = 0; i < n; ++i)
    if (i % 10 >= 7) preds[static_cast<std::size_t>(i)] = 1;
  const auto r = make_report(labels, preds, 2);
  ASSERT_DOUBLE_EQ(r.top1, 0.7);
  const ReportMetric top1 = [](const EvalReport& e) { return e.top1; };
  const auto ci = bootstrap_ci(top1, r, 4000, 0.95, 11);
  const double half = 1.96 * std::sqrt(0.7 * 0.3 / n);
  EXPECT_NEAR((ci.hi - ci.lo) / 2, half, 0.1 * half);
  EXPECT_NEAR((ci.hi + ci.lo) / 2, 0.7, 0.01);
}

TEST(Bootstrap, WidthShrinksWithTenfoldData) {
  Rng rng(4);
  auto stream = [&](int n) {
    std::vector<int> labels(static_cast<std::size_t>(n)), preds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = uniform_int(rng, 0, 2);
      preds[static_cast<std::size_t>(i)] =
          uniform_real(rng, 0, 1) < 0.5 ? labels[static_cast<std::size_t>(i)] : uniform_int(rng, 0, 2);
    }
    return make_report(labels, preds, 3);
  };
  const ReportMetric m = [](const EvalReport& e) { return e.per_class_f1[1]; };
  int shrinks = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto small = bootstrap_ci(m, stream(60), 300, 0.95, 1);
    const auto large = bootstrap_ci(m, stream(600), 300, 0.95, 1);
    shrinks += (large.hi - large.lo) < (small.hi - small.lo) ? 1 : 0;
  }
  EXPECT_GE(shrinks, 9);
}

EvalReport from_correct(const std::vector<int>& correct) {
  std::vector<int> labels(correct.size(), 0), preds(correct.size());
  for (std::size_t i = 0; i < correct.size(); ++i) preds[i] = correct[i] ? 0 : 1;
  return make_report(labels, preds, 2);
}

TEST(PairedTest, DegenerateCasesAndSymmetry) {
  Rng rng(5);
  std::vector<int> c(80);
  for (auto& v : c) v = uniform_int(rng, 0, 1);
  const auto a = from_correct(c);
  EXPECT_EQ(paired_accuracy_test(a, a), 1.0);
  const auto all = from_correct(std::vector<int>(100, 1)), none = from_correct(std::vector<int>(100, 0));
  EXPECT_LT(paired_accuracy_test(all, none), 1e-10);
  EXPECT_LT(paired_accuracy_test(none, all), 1e-10);
  std::vector<int> d(80);
  for (auto& v : d) v = uniform_int(rng, 0, 1);
  const auto b = from_correct(d);
  EXPECT_EQ(paired_accuracy_test(a, b), paired_accuracy_test(b, a));
  const double p = paired_accuracy_test(a, b);
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 1.0);
  EXPECT_THROW((void)paired_accuracy_test(a, all), std::invalid_argument);
  const auto other_labels = make_report(std::vector<int>(80, 1), std::vector<int>(80, 1), 2);
  EXPECT_THROW((void)paired_accuracy_test(a, other_labels), std::invalid_argument);
}

// Reference p-values of the one-sample t-test on the differences, from an
// independent statistics package.
TEST(PairedTest, MatchesReferenceValues) {
  std::vector<int> a(100, 0), b(100, 0);
  for (int i = 0; i < 10; ++i) a[static_cast<std::size_t>(i)] = 1;
  EXPECT_NEAR(paired_accuracy_test(from_correct(a), from_correct(b)), 0.0012748384719836199, 1e-10);
  std::fill(a.begin(), a.end(), 0);
  for (int i = 0; i < 30; ++i) a[static_cast<std::size_t>(i)] = 1;
  for (int i = 30; i < 50; ++i) b[static_cast<std::size_t>(i)] = 1;
  EXPECT_NEAR(paired_accuracy_test(from_correct(a), from_correct(b)), 0.15833990565972564, 1e-10);
}

TEST(PairedTest, NullRejectionRateIsNominal) {
  Rng rng(6);
  int rejections = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(200), b(200);
    for (auto& v : a) v = uniform_real(rng, 0, 1) < 0.6 ? 1 : 0;
    for (auto& v : b) v = uniform_real(rng, 0, 1) < 0.6 ? 1 : 0;
    rejections += paired_accuracy_test(from_correct(a), from_correct(b)) < 0.05 ? 1 : 0;
  }
  const double rate = rejections / 200.0;
  EXPECT_GE(rate, 0.01);
  EXPECT_LE(rate, 0.12);
}

TEST(ClassifierConfigTest, ValidationAndStrictJson) {
  ClassifierConfig c;
  EXPECT_NO_THROW(validate(c));
  const auto back = classifier_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto bad = c;
  bad.n_classes = 1;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.learning_rate = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  auto j = to_json(c);
  j["dropout"] = 0.5;
  EXPECT_THROW((void)classifier_config_from_json(j), ConfigError);
  EXPECT_EQ(classifier_config_from_json(nlohmann::ordered_json::object()).epochs, c.epochs);
}

TEST(Augment, FlagsActAndAreDeterministic) {
  Rng rng(7);
  RgbImage img(16, 16);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(uniform_int(rng, 30, 220));
  ClassifierConfig off;
  off.flip = off.saturation = off.jitter = false;
  EXPECT_EQ(augment_image(img, off, 1).pixels, img.pixels);
  ClassifierConfig on;
  bool changed = false;
  for (uint64_t s = 0; s < 8; ++s) {
    EXPECT_EQ(augment_image(img, on, s).pixels, augment_image(img, on, s).pixels);
    changed = changed || augment_image(img, on, s).pixels != img.pixels;
  }
  EXPECT_TRUE(changed);
  // Each flag alone alters some draw.
  for (int flag = 0; flag < 3; ++flag) {
    ClassifierConfig one = off;
    (flag == 0 ? one.flip : flag == 1 ? one.saturation : one.jitter) = true;
    bool any = false;
    for (uint64_t s = 0; s < 8; ++s) any = any || augment_image(img, one, s).pixels != img.pixels;
    EXPECT_TRUE(any) << flag;
  }
}

std::vector<LabeledImage> phantom_set(int n, int first_index, uint64_t seed) {
  PhantomConfig pc;
  pc.n_cases = first_index + n;
  pc.image_size = 32;
  pc.seed = seed;
  std::vector<LabeledImage> out;
  for (int i = first_index; i < first_index + n; ++i) {
    auto c = render_phantom_case(pc, i);
    out.push_back({c.record.case_id, std::move(c.image), c.record.condition.id, false});
  }
  return out;
}

ClassifierConfig small_config() {
  ClassifierConfig c;
  c.channels = {8, 16, 32};
  c.epochs = 5;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  return c;
}

class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new std::vector<LabeledImage>(phantom_set(800, 0, 7));
    test_ = new std::vector<LabeledImage>(phantom_set(80, 800, 7));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
  }
  static inline std::vector<LabeledImage>* train_ = nullptr;
  static inline std::vector<LabeledImage>* test_ = nullptr;
};

TEST_F(Trained, LearnsAboveChanceDeterministically) {
  const auto cfg = small_config();
  const auto a = train_classifier(*train_, cfg);
  ASSERT_EQ(a.epoch_accuracy.size(), 5u);
  EXPECT_GT(a.epoch_accuracy.back(), 1.0 / 8 + 0.2);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  const auto report = evaluate_classifier(a.model, *test_);
  EXPECT_GT(report.top1, 1.0 / 8 + 0.2);
  expect_consistent(report);
  // Only the reserved class 0 is empty, and it is not warned about.
  EXPECT_TRUE(a.warnings.empty());

  const auto b = train_classifier(*train_, cfg);
  EXPECT_EQ(flat(a.model.parameters()), flat(b.model.parameters()));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);

  auto flags_off = cfg;
  flags_off.flip = flags_off.saturation = flags_off.jitter = false;
  EXPECT_NE(flat(train_classifier(*train_, flags_off).model.parameters()), flat(a.model.parameters()));
}

TEST_F(Trained, MissingClassWarnsAndSaveLoadRoundTrips) {
  std::vector<LabeledImage> no_three;
  for (const auto& s : *train_)
    if (s.label != 3) no_three.push_back(s);
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto r = train_classifier(no_three, cfg);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("class 3"), std::string::npos);

  TempDir dir;
  r.model.save(dir.path() / "clf");
  const auto loaded = Classifier::load(dir.path() / "clf");
  std::vector<RgbImage> images;
  for (const auto& s : *test_) images.push_back(s.image);
  EXPECT_EQ(loaded.predict(images), r.model.predict(images));
  EXPECT_EQ(flat(loaded.parameters()), flat(r.model.parameters()));

  auto bad = *train_;
  bad[0].label = 9;
  EXPECT_THROW((void)train_classifier(bad, cfg), std::out_of_range);
  EXPECT_THROW((void)train_classifier({}, cfg), std::invalid_argument);
  EXPECT_THROW((void)evaluate_classifier(r.model, {}), std::invalid_argument);
}

TEST_F(Trained, SelfComparisonHasZeroDeltasAndWritesArtifacts) {
  TempDir dir;
  AugmentationSettings s;
  s.classifier = small_config();
  s.classifier.epochs = 2;
  s.seeds = {1, 2};
  s.bootstrap_resamples = 200;
  const auto rep = run_augmentation_experiment(*train_, {}, *test_, s, dir.path());
  ASSERT_EQ(rep.seeds.size(), 2u);
  for (const auto& sc : rep.seeds) {
    EXPECT_EQ(sc.top1_baseline, sc.top1_augmented);
    EXPECT_EQ(sc.p_value, 1.0);
    ASSERT_EQ(sc.classes.size(), 8u);
    for (const auto& c : sc.classes) {
      EXPECT_EQ(c.f1_baseline, c.f1_augmented);
      EXPECT_EQ(c.ci_baseline.lo, c.ci_augmented.lo);
      EXPECT_EQ(c.ci_baseline.hi, c.ci_augmented.hi);
    }
  }
  for (const auto* f : {"report.json", "f1_bars.csv", "f1_bars.png"}) EXPECT_TRUE(std::filesystem::exists(dir.path() / f));
  const auto j = nlohmann::ordered_json::parse(testing::slurp(dir.path() / "report.json"));
  EXPECT_EQ(j["seeds"].size(), 2u);
  const auto csv = testing::slurp(dir.path() / "f1_bars.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 8);
  const auto chart = read_png(dir.path() / "f1_bars.png");
  EXPECT_EQ(chart.width, render_f1_chart(rep.seeds[0].classes).width);
}

TEST_F(Trained, SyntheticAdditionsPopulateTheReport) {
  auto synthetic = phantom_set(40, 320, 99);
  for (auto& s : synthetic) s.synthetic = true;
  AugmentationSettings s;
  s.classifier = small_config();
  s.classifier.epochs = 2;
  s.seeds = {4};
  s.bootstrap_resamples = 100;
  s.rare_class = 2;
  TempDir dir;
  const auto rep = run_augmentation_experiment(*train_, synthetic, *test_, s, dir.path());
  EXPECT_EQ(rep.rare_class, 2);
  const auto& sc = rep.seeds.at(0);
  EXPECT_GE(sc.p_value, 0.0);
  EXPECT_LE(sc.p_value, 1.0);
  for (const auto& c : sc.classes) {
    EXPECT_LE(c.ci_augmented.lo, c.ci_augmented.hi);
    EXPECT_GE(c.ci_augmented.lo, 0.0);
    EXPECT_LE(c.ci_augmented.hi, 1.0);
  }
  synthetic[0].synthetic = false;
  EXPECT_THROW((void)run_augmentation_experiment(*train_, synthetic, *test_, s, dir.path()), std::invalid_argument);
}

}  // namespace
}  // namespace dermgan
