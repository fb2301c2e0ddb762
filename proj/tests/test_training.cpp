#include "support.hpp"

#include "dermgan/preprocess.hpp"
#include "dermgan/training.hpp"

namespace dermgan {
namespace {

using nn::Shape;
using nn::Tensor;
using nn::Var;
using testing::random_tensor;
using testing::TempDir;
using testing::values_of;
using VarD = Var<double>;

}  // namespace

void PrintTo(const LossReport& r, std::ostream* os) { *os << r.str(); }

namespace {

Tensor<double> filled(Shape s, double v) {
  Tensor<double> t(std::move(s));
  for (auto& e : t.values()) e = v;
  return t;
}

TEST(L1Whole, ClosedForms) {
  std::mt19937_64 r(1);
  const auto x = random_tensor<double>({2, 3, 4, 4}, r);
  EXPECT_EQ(l1_whole(VarD(x), VarD(x)).item(), 0.0);
  EXPECT_DOUBLE_EQ(l1_whole(VarD(filled({2, 3, 4, 4}, -1)), VarD(filled({2, 3, 4, 4}, 1))).item(), 2.0);
  // 0.5 on exactly a quarter of the pixels (the first row of four).
  auto y = x;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t j = 0; j < 4; ++j) y.at(n, c, 0, j) += 0.5;
  EXPECT_NEAR(l1_whole(VarD(x), VarD(y)).item(), 0.125, 1e-15);
  EXPECT_THROW((void)l1_whole(VarD(x), VarD(filled({2, 3, 4, 5}, 0))), nn::ShapeError);
}

TEST(L1Region, MaskingContract) {
  std::mt19937_64 r(2);
  const auto x = random_tensor<double>({2, 3, 8, 8}, r);
  Tensor<double> mask(Shape{2, 1, 8, 8});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 2; i < 5; ++i)
      for (int64_t j = 1; j < 7; ++j) mask.at(n, 0, i, j) = 1;
  auto y = random_tensor<double>({2, 3, 8, 8}, r, -5, 5);  // arbitrary outside
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j)
          if (mask.at(n, 0, i, j) > 0) y.at(n, c, i, j) = x.at(n, c, i, j) - 0.5;
  EXPECT_NEAR(l1_region(VarD(x), VarD(y), mask).item(), 0.5, 1e-14);
  EXPECT_EQ(l1_region(VarD(x), VarD(x), mask).item(), 0.0);
  EXPECT_THROW((void)l1_region(VarD(x), VarD(y), Tensor<double>(Shape{2, 1, 8, 8})), std::invalid_argument);
}

TEST(L1Region, FullMaskEqualsWhole) {
  std::mt19937_64 r(3);
  for (int t = 0; t < 20; ++t) {
    const auto x = random_tensor<double>({3, 3, 6, 5}, r), y = random_tensor<double>({3, 3, 6, 5}, r);
    EXPECT_NEAR(l1_region(VarD(x), VarD(y), filled({3, 1, 6, 5}, 1)).item(), l1_whole(VarD(x), VarD(y)).item(), 1e-14);
  }
}

TEST(GanLosses, ClosedFormsAndLimits) {
  const auto z = gan_losses(VarD(filled({2, 1, 4, 4}, 0)), VarD(filled({2, 1, 4, 4}, 0)));
  EXPECT_NEAR(z.gan_d.item(), 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(z.gan_g.item(), std::log(2.0), 1e-12);
  const auto perfect = gan_losses(VarD(filled({1, 1, 2, 2}, 40)), VarD(filled({1, 1, 2, 2}, -40)));
  EXPECT_LT(perfect.gan_d.item(), 1e-15);
  double prev = 1e300;
  for (double l = -5; l <= 5; l += 0.5) {
    const double g = gan_losses(VarD(filled({1, 1, 2, 2}, 0)), VarD(filled({1, 1, 2, 2}, l))).gan_g.item();
    EXPECT_LT(g, prev);
    prev = g;
  }
}

TEST(FeatureMatch, ClosedForms) {
  std::mt19937_64 r(4);
  const auto a = random_tensor<double>({4, 5, 3, 3}, r);
  EXPECT_EQ(feature_match_loss(VarD(a), VarD(a)).item(), 0.0);
  auto b = a;
  for (auto& v : b.values()) v += 1.0;
  EXPECT_NEAR(feature_match_loss(VarD(a), VarD(b)).item(), 1.0, 1e-12);
  auto c = a;
  for (auto& v : c.values()) v += 2.0;
  EXPECT_NEAR(feature_match_loss(VarD(a), VarD(c)).item(), 4.0, 1e-12);
  // Batch-mean form ignores per-sample permutations; per-pair form does not.
  auto swapped = a;
  for (int64_t i = 0; i < a.numel() / 4; ++i) std::swap(swapped[i], swapped[i + a.numel() / 4]);
  EXPECT_NEAR(feature_match_loss(VarD(a), VarD(swapped)).item(), 0.0, 1e-14);
  EXPECT_GT(feature_match_loss(VarD(a), VarD(swapped), FeatureMatchMode::kPerPair).item(), 0.1);
  EXPECT_THROW((void)feature_match_loss(VarD(a), VarD(filled({4, 5, 3, 2}, 0))), nn::ShapeError);
}

GeneratorConfig small_g() {
  GeneratorConfig g;
  g.depth = 3;
  g.base_channels = 4;
  g.image_size = 64;
  return g;
}

DiscriminatorConfig small_d() {
  DiscriminatorConfig d;
  d.n_layers = 3;
  d.base_channels = 4;
  return d;
}

TrainConfig small_t(double w_rec, double w_roi, double w_gan, double w_fm) {
  TrainConfig t;
  t.batch_size = 4;
  t.steps = 10;
  t.lr_g = 2e-3;
  t.lr_d = 2e-3;
  t.precision = Precision::kFloat64;
  t.weights = {w_rec, w_roi, w_gan, w_fm};
  t.checkpoint_every = 5;
  return t;
}

// Each loss term differentiated through a tiny generator, against central differences.
TEST(LossGradients, EveryTermMatchesFiniteDifferences) {
  GeneratorConfig gc;
  gc.depth = 2;
  gc.base_channels = 3;
  gc.image_size = 8;
  Generator<double> g(gc, 5);
  DiscriminatorConfig dc;
  dc.n_layers = 3;
  dc.base_channels = 3;
  const Discriminator<double> d(dc, 6);
  std::mt19937_64 r(7);
  const VarD maps(random_tensor<double>({2, 3, 8, 8}, r)), real(random_tensor<double>({2, 3, 8, 8}, r));
  auto mask = filled({2, 1, 8, 8}, 0);
  for (int64_t i = 2; i < 6; ++i) mask.at(0, 0, i, 3) = mask.at(1, 0, 1, i) = 1;
  std::vector<VarD> params;
  for (auto& e : g.parameters().entries()) params.push_back(e.var);
  const std::vector<std::pair<std::string, std::function<VarD(const VarD&)>>> terms = {
      {"l1_whole", [&](const VarD& f) { return l1_whole(f, real); }},
      {"l1_roi", [&](const VarD& f) { return l1_region(f, real, mask); }},
      {"gan_g", [&](const VarD& f) { return gan_losses(d.forward(real, maps).patch_logits, d.forward(f, maps).patch_logits).gan_g; }},
      {"feature_match", [&](const VarD& f) {
         return feature_match_loss(d.forward(real, maps).tap_activations, d.forward(f, maps).tap_activations);
       }},
  };
  for (const auto& [name, fn] : terms) {
    auto loss = [&](const std::vector<VarD>&) { return fn(g.forward(maps)); };
    EXPECT_LT(testing::max_grad_error(params, loss, 3, 8), 1e-2) << name;
  }
}

class TrainingData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    PhantomConfig pc;
    pc.n_cases = 12;
    pc.image_size = 96;
    const auto src = generate_phantom_dataset(pc, dir_->path() / "phantom");
    crops_ = new DatasetManifest(build_crop_set(src, {}, dir_->path() / "crops"));
    // A 16-crop subset, all marked train.
    subset_ = new DatasetManifest(*crops_);
    subset_->records.resize(16);
    for (auto& rec : subset_->records) rec.split = Split::kTrain;
  }
  static void TearDownTestSuite() {
    delete subset_;
    delete crops_;
    delete dir_;
  }

  static TrainingBatch<double> batch_of(const CropDataset& data, int64_t step, const TrainConfig& t) {
    std::vector<std::size_t> idx;
    std::vector<bool> flips;
    for (int i = 0; i < t.batch_size; ++i) {
      idx.push_back(data.index_at(t.seed, step, t.batch_size, i));
      flips.push_back(CropDataset::flip_at(t.seed, step, i));
    }
    return data.batch<double>(idx, flips);
  }

  static inline TempDir* dir_ = nullptr;
  static inline DatasetManifest* crops_ = nullptr;
  static inline DatasetManifest* subset_ = nullptr;
};

TEST_F(TrainingData, ReportSatisfiesWeightedSumIdentity) {
  const auto t = small_t(10, 7, 1.5, 3);
  GanTrainer<double> trainer(small_g(), small_d(), t);
  const CropDataset data(*subset_, Split::kTrain);
  for (int64_t s = 1; s <= 3; ++s) {
    const auto rep = trainer.step(batch_of(data, s, t));
    EXPECT_TRUE(rep.all_finite());
    EXPECT_EQ(rep.total_g, 10 * rep.l1_whole + 7 * rep.l1_roi + 1.5 * rep.gan_g + 3 * rep.feature_match);
    EXPECT_EQ(rep.total_d, rep.gan_d);
  }
}

TEST_F(TrainingData, PureReconstructionHalvesL1In200Steps) {
  auto t = small_t(1, 0, 0, 0);
  t.steps = 200;
  t.checkpoint_every = 1000;
  TempDir out;
  const auto res = train<double>(*subset_, small_g(), small_d(), t, out.path());
  ASSERT_EQ(res.reports.size(), 200u);
  const double first = res.reports.front().l1_whole, last = res.reports.back().l1_whole;
  EXPECT_LT(last, 0.5 * first) << first << " -> " << last;
}

TEST_F(TrainingData, RoiOnlyLeavesDiscriminatorUntouched) {
  const auto t = small_t(0, 1, 0, 0);
  GanTrainer<double> trainer(small_g(), small_d(), t);
  EXPECT_FALSE(trainer.discriminator_active());
  std::vector<std::vector<double>> before_d, before_g;
  for (const auto& e : trainer.discriminator().parameters().entries()) before_d.push_back(values_of(e.var.value()));
  for (const auto& e : trainer.generator().parameters().entries()) before_g.push_back(values_of(e.var.value()));
  const CropDataset data(*subset_, Split::kTrain);
  for (int64_t s = 1; s <= 3; ++s) (void)trainer.step(batch_of(data, s, t));
  bool g_moved = false;
  std::size_t i = 0;
  for (const auto& e : trainer.discriminator().parameters().entries()) EXPECT_EQ(values_of(e.var.value()), before_d[i++]) << e.name;
  i = 0;
  for (const auto& e : trainer.generator().parameters().entries()) g_moved = g_moved || values_of(e.var.value()) != before_g[i++];
  EXPECT_TRUE(g_moved);
}

TEST_F(TrainingData, SameSeedGivesIdenticalReports) {
  const auto t = small_t(10, 10, 1, 10);
  TempDir a, b;
  const auto ra = train<double>(*subset_, small_g(), small_d(), t, a.path());
  const auto rb = train<double>(*subset_, small_g(), small_d(), t, b.path());
  EXPECT_EQ(ra.reports, rb.reports);
  EXPECT_EQ(testing::slurp(a / "train_log.csv"), testing::slurp(b / "train_log.csv"));
  EXPECT_EQ(testing::slurp(a / "final" / kCheckpointGenerator), testing::slurp(b / "final" / kCheckpointGenerator));
  auto t2 = t;
  t2.seed = 2;
  TempDir c;
  EXPECT_NE(train<double>(*subset_, small_g(), small_d(), t2, c.path()).reports, ra.reports);
}

TEST_F(TrainingData, ResumeContinuesTheSameSequence) {
  const auto t = small_t(10, 10, 1, 10);
  TempDir full, part;
  const auto whole = train<double>(*subset_, small_g(), small_d(), t, full.path());
  EXPECT_TRUE(std::filesystem::exists(full / "checkpoints" / "step_000005"));
  EXPECT_TRUE(std::filesystem::exists(full / "checkpoints" / "step_000010"));

  auto shortened = t;
  shortened.steps = 5;
  (void)train<double>(*subset_, small_g(), small_d(), shortened, part.path());
  TrainOptions opt;
  opt.resume_from = part / "checkpoints" / "step_000005";
  const auto resumed = train<double>(*subset_, small_g(), small_d(), t, part.path(), opt);
  ASSERT_EQ(resumed.reports.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(resumed.reports[i], whole.reports[5 + i]) << i;
  EXPECT_EQ(testing::slurp(full / "train_log.csv"), testing::slurp(part / "train_log.csv"));
  EXPECT_EQ(testing::slurp(full / "final" / kCheckpointGenerator), testing::slurp(part / "final" / kCheckpointGenerator));
}

// A zero weight disables the term exactly: evaluating it for the log or
// skipping it leaves the parameter trajectory bit-identical.
TEST_F(TrainingData, ZeroWeightMatchesSkippedTerm) {
  for (const auto& w : std::vector<LossWeights>{{10, 10, 1, 0}, {10, 0, 1, 10}, {10, 10, 0, 0}}) {
    auto logged = small_t(w.w_rec, w.w_roi, w.w_gan, w.w_fm);
    logged.steps = 4;
    auto skipped = logged;
    skipped.report_disabled_terms = false;
    TempDir a, b;
    const auto ra = train<double>(*subset_, small_g(), small_d(), logged, a.path());
    const auto rb = train<double>(*subset_, small_g(), small_d(), skipped, b.path());
    EXPECT_EQ(testing::slurp(a / "final" / kCheckpointGenerator), testing::slurp(b / "final" / kCheckpointGenerator));
    EXPECT_EQ(testing::slurp(a / "final" / kCheckpointDiscriminator),
              testing::slurp(b / "final" / kCheckpointDiscriminator));
    for (std::size_t i = 0; i < ra.reports.size(); ++i) EXPECT_EQ(ra.reports[i].total_g, rb.reports[i].total_g);
  }
}

TEST_F(TrainingData, NonFiniteLossAbortsBeforeUpdate) {
  const auto t = small_t(10, 10, 1, 10);
  GanTrainer<double> trainer(small_g(), small_d(), t);
  std::vector<std::vector<double>> before;
  for (const auto& e : trainer.generator().parameters().entries()) before.push_back(values_of(e.var.value()));
  const CropDataset data(*subset_, Split::kTrain);
  auto batch = batch_of(data, 1, t);
  batch.images[7] = std::numeric_limits<double>::quiet_NaN();
  try {
    (void)trainer.step(batch);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_FALSE(e.report().all_finite());
  }
  EXPECT_EQ(trainer.step_count(), 0);
  std::size_t i = 0;
  for (const auto& e : trainer.generator().parameters().entries()) EXPECT_EQ(values_of(e.var.value()), before[i++]);
}

TEST_F(TrainingData, CropSizeMismatchIsConfigError) {
  auto g = small_g();
  g.image_size = 32;
  TempDir out;
  EXPECT_THROW((void)train<double>(*subset_, g, small_d(), small_t(1, 0, 0, 0), out.path()), ConfigError);
}

TEST_F(TrainingData, EpochsArePermutations) {
  const CropDataset data(*subset_, Split::kTrain);
  ASSERT_EQ(data.size(), 16u);
  std::vector<int> seen(16, 0);
  for (int64_t s = 1; s <= 4; ++s)
    for (int i = 0; i < 4; ++i) ++seen[data.index_at(3, s, 4, i)];
  EXPECT_EQ(seen, std::vector<int>(16, 1));
}

TEST(TrainConfigJson, StrictRoundTrip) {
  auto t = small_t(1, 2, 3, 4);
  t.feature_match = FeatureMatchMode::kPerPair;
  const auto back = train_config_from_json(to_json(t));
  EXPECT_EQ(to_json(back), to_json(t));
  EXPECT_THROW((void)train_config_from_json({{"stpes", 3}}), ConfigError);
  LossWeights none{0, 0, 0, 0};
  EXPECT_THROW(validate(none), ConfigError);
  LossWeights negative{1, -1, 0, 0};
  EXPECT_THROW(validate(negative), ConfigError);
}

TEST(LogRow, SevenLossFields) {
  const auto row = format_log_row(3, LossReport{1, 2, 3, 4, 5, 6, 7});
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 7);
  EXPECT_EQ(row.substr(0, 2), "3,");
}

}  // namespace
}  // namespace dermgan
