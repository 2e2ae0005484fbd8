#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "fundus/synth.hpp"
#include "fundus/training.hpp"
#include "support/gradcheck.hpp"

using namespace fundus;
using namespace fundus::testing;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.ae_epochs = 2;
  c.batch_size = 4;
  c.seed = 3;
  c.base_width = 4;
  c.depth_levels = 2;
  c.max_width = 16;
  c.res_blocks = 1;
  c.disc_blocks = 2;
  c.disc_base_width = 4;
  c.crop_size = 0;
  c.augment_factor = 1;
  c.adam.lr = 1e-3;
  c.folds = 2;
  c.pretrain_autoencoder = false;
  return c;
}

std::vector<Sample> tiny_data(std::size_t n, std::uint64_t seed = 11) { return synth_dataset(n, 16, seed).samples; }

TrainingSet plain_set(const std::vector<Sample>& s, const TrainConfig& c) { return TrainingSet(s, c.augment_config(0)); }

Tensor<double> tensor_of(std::vector<double> v, Shape s) { return Tensor<double>(std::move(s), std::move(v)); }

std::vector<double> flat_grads(Gen& g) {
  std::vector<double> out;
  for (auto* p : g.params().pointers())
    for (float v : p->grad.data()) out.push_back(v);
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Tensor<float> batch_of(const std::vector<Sample>& s, bool depth) {
  std::vector<const Tensor<float>*> v;
  for (const auto& x : s) v.push_back(depth ? &*x.depth : &x.image);
  return stack(v);
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fundus_training_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Losses, L2MatchesLoopOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> p({3, 1, 4, 4}), t({3, 1, 4, 4});
  for (auto& v : p.data()) v = u(rng);
  for (auto& v : t.data()) v = u(rng);
  double total = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += (p[n * 16 + i] - t[n * 16 + i]) * (p[n * 16 + i] - t[n * 16 + i]);
    total += std::sqrt(s / 16);
  }
  Tape<double> tape;
  EXPECT_NEAR(tape.value(l2_regression_loss(tape, tape.constant(p), t))[0], total / 3, 1e-12);
  Tensor<double> c = t;
  for (auto& v : c.data()) v += 0.25;
  EXPECT_NEAR(tape.value(l2_regression_loss(tape, tape.constant(c), t))[0], 0.25, 1e-12);
  EXPECT_EQ(tape.value(l2_regression_loss(tape, tape.constant(t), t))[0], 0.0);
}

TEST(Losses, L1MatchesLoopOracle) {
  const auto p = tensor_of({0.1, 0.9, 0.4, 0.0}, {1, 2, 1, 2});
  const auto t = tensor_of({0.0, 1.0, 1.0, 0.0}, {1, 2, 1, 2});
  Tape<double> tape;
  EXPECT_NEAR(tape.value(l1_loss(tape, tape.constant(p), t))[0], (0.1 + 0.1 + 0.6 + 0.0) / 4, 1e-15);
  EXPECT_THROW(l1_loss(tape, tape.constant(p), tensor_of({0, 0}, {2})), ShapeError);
}

TEST(Losses, GanClosedForms) {
  EXPECT_NEAR(gan_losses(0.5, 0.5).d_loss, 2 * std::log(2.0), 1e-15);
  EXPECT_NEAR(gan_losses(0.5, 0.5).g_adv_loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(gan_losses(0.5, 0.5, GeneratorLossForm::Minimax).g_adv_loss, -std::log(2.0), 1e-15);
  EXPECT_TRUE(std::isfinite(gan_losses(1.0, 0.0).d_loss));
  EXPECT_TRUE(std::isfinite(gan_losses(0.0, 1.0).d_loss));
  EXPECT_THROW(gan_losses(1.2, 0.5), NumericalError);
  EXPECT_THROW(gan_losses(0.5, -0.1), NumericalError);
}

TEST(Losses, GeneratorFormsPushFakeScoreUp) {
  for (auto form : {GeneratorLossForm::NonSaturating, GeneratorLossForm::Minimax}) {
    Parameter<double> prob(tensor_of({0.3}, {1}));
    Tape<double> tape;
    tape.backward(generator_adversarial_loss(tape, tape.parameter(prob), form));
    EXPECT_LT(prob.grad[0], 0.0);
    if (form == GeneratorLossForm::NonSaturating) EXPECT_NEAR(prob.grad[0], -1.0 / 0.3, 1e-12);
    else EXPECT_NEAR(prob.grad[0], -1.0 / 0.7, 1e-12);
  }
}

TEST(Losses, ObjectiveReductions) {
  EXPECT_EQ(generator_objective(0.7, 0.02, 100, true), 0.7 + 100 * 0.02);
  EXPECT_EQ(generator_objective(0.7, 0.02, 100, false), 0.02);
  EXPECT_EQ(generator_objective(0.7, 0.02, 0, true), 0.7);
  EXPECT_THROW(generator_objective(0.7, 0.02, -1, true), ConfigError);
  Tape<double> tape;
  Var a = tape.constant(tensor_of({0.7}, {1})), r = tape.constant(tensor_of({0.02}, {1}));
  EXPECT_NEAR(tape.value(generator_objective(tape, a, r, 100, true))[0], 2.7, 1e-15);
  EXPECT_EQ(generator_objective(tape, a, r, 100, false).id, r.id);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Tensor<double> target = random_tensor({3, 1, 4, 4}, rng, 0, 1);
  auto check = [](const ScalarFn& f, Tensor<double> x) {
    std::vector<Parameter<double>> in{Parameter<double>(std::move(x))};
    EXPECT_LE(gradcheck(f, in).max_rel_err, 1e-4);
  };
  check([&](Tape<double>& t, const std::vector<Var>& v) { return l2_regression_loss(t, v[0], target); }, random_tensor({3, 1, 4, 4}, rng, 0, 1));
  check([&](Tape<double>& t, const std::vector<Var>& v) { return l1_loss(t, v[0], target); }, random_tensor({3, 1, 4, 4}, rng, 1.05, 2));
  for (bool complement : {false, true})
    check([complement](Tape<double>& t, const std::vector<Var>& v) { return mean_log(t, v[0], complement); }, random_tensor({2, 5}, rng, 0.05, 0.95));
  for (auto form : {GeneratorLossForm::NonSaturating, GeneratorLossForm::Minimax})
    check([form](Tape<double>& t, const std::vector<Var>& v) { return generator_adversarial_loss(t, v[0], form); }, random_tensor({4, 1}, rng, 0.05, 0.95));
  std::vector<Parameter<double>> pair{Parameter<double>(random_tensor({4, 1}, rng, 0.05, 0.95)), Parameter<double>(random_tensor({4, 1}, rng, 0.05, 0.95))};
  EXPECT_LE(gradcheck([](Tape<double>& t, const std::vector<Var>& v) { return discriminator_loss(t, v[0], v[1]); }, pair).max_rel_err, 1e-4);
}

TEST(Autoencoder, LossHalvesWithinFiftyEpochs) {
  TrainConfig c = tiny_config();
  c.ae_epochs = 50;
  c.base_width = 8;
  c.adam.lr = 2e-3;
  const auto data = tiny_data(8);
  const StageResult r = train_autoencoder(plain_set(data, c), {}, c);
  ASSERT_EQ(r.report.epochs.size(), 50u);
  EXPECT_EQ(r.discriminator, nullptr);
  EXPECT_LT(r.report.epochs.back().reg_loss, 0.5 * r.report.epochs.front().reg_loss);
}

TEST(Training, EpochCountAndNonAdversarialVariant) {
  TrainConfig c = tiny_config();
  c.epochs = 3;
  const auto data = tiny_data(5);
  const StageResult adv = train_depth(plain_set(data, c), {}, c);
  EXPECT_EQ(adv.report.epochs.size(), 3u);
  EXPECT_NE(adv.discriminator, nullptr);
  EXPECT_GT(adv.report.epochs[0].d_loss, 0.0);
  c.adversarial = false;
  const StageResult plain = train_depth(plain_set(data, c), {}, c);
  EXPECT_EQ(plain.discriminator, nullptr);
  for (const auto& e : plain.report.epochs) {
    EXPECT_EQ(e.d_loss, 0.0);
    EXPECT_EQ(e.adv_loss, 0.0);
    EXPECT_EQ(e.g_loss, e.reg_loss);
  }
}

TEST(Training, BitwiseDeterministicCheckpoints) {
  TrainConfig c = tiny_config();
  c.augment_factor = 2;
  const auto data = tiny_data(4);
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  StageOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  TrainingSet ts(data, c.augment_config(0));
  const StageResult ra = train_depth(ts, data, c, nullptr, oa);
  const StageResult rb = train_depth(ts, data, c, nullptr, ob);
  EXPECT_EQ(read_file(a / "depth_generator.ckpt"), read_file(b / "depth_generator.ckpt"));
  EXPECT_EQ(read_file(a / "depth_discriminator.ckpt"), read_file(b / "depth_discriminator.ckpt"));
  EXPECT_EQ(read_file(a / "depth_report.jsonl"), read_file(b / "depth_report.jsonl"));
  const auto parsed = parse_report_jsonl(read_file(a / "depth_report.jsonl"));
  ASSERT_EQ(parsed.size(), ra.report.epochs.size());
  EXPECT_EQ(parsed.back().g_loss, ra.report.epochs.back().g_loss);
  c.seed = 4;
  const StageResult rc = train_depth(ts, data, c);
  EXPECT_NE(rc.report.epochs.back().g_loss, ra.report.epochs.back().g_loss);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, SmallStepDecreasesRegression) {
  TrainConfig c = tiny_config();
  const auto data = tiny_data(4);
  Gen g(c.generator_spec(ModelRole::DepthGenerator));
  init_weights(g, 9);
  const Tensor<float> x = batch_of(data, false), t = batch_of(data, true);
  auto loss_at = [&]() {
    Tape<float> tape;
    return tape.value(l2_regression_loss(tape, g.forward(tape, tape.constant(x), true).output, t))[0];
  };
  const float before = loss_at();
  Tape<float> tape;
  Var l = l2_regression_loss(tape, g.forward(tape, tape.constant(x), true).output, t);
  g.params().zero_grad();
  tape.backward(l);
  AdamConfig ac = c.adam;
  ac.lr = 1e-5;
  Adam<float> opt(ac);
  opt.step(g.params().pointers());
  EXPECT_LT(loss_at(), before);
}

TEST(Training, LargeLambdaFollowsRegressionGradient) {
  TrainConfig c = tiny_config();
  const auto data = tiny_data(4);
  Gen g(c.generator_spec(ModelRole::DepthGenerator));
  Disc d(c.discriminator_spec(ModelRole::DepthDiscriminator));
  init_weights(g, 1);
  init_weights(d, 2);
  const Tensor<float> x = batch_of(data, false), t = batch_of(data, true);
  auto grads = [&](double lambda, bool adversarial) {
    Tape<float> tape;
    Var fake = g.forward(tape, tape.constant(x), true).output;
    Var adv = generator_adversarial_loss(tape, d.forward(tape, fake, false), GeneratorLossForm::NonSaturating);
    Var reg = l2_regression_loss(tape, fake, t);
    g.params().zero_grad();
    tape.backward(generator_objective(tape, adv, reg, lambda, adversarial));
    return flat_grads(g);
  };
  const auto pure = grads(1, false);
  EXPECT_GT(cosine(grads(1e6, true), pure), 0.99);
  EXPECT_LT(cosine(grads(0, true), pure), 0.99);
}

TEST(Training, DiscriminatorAndGeneratorGradientsStaySeparate) {
  TrainConfig c = tiny_config();
  const auto data = tiny_data(2);
  Gen g(c.generator_spec(ModelRole::DepthGenerator));
  Disc d(c.discriminator_spec(ModelRole::DepthDiscriminator));
  init_weights(g, 1);
  init_weights(d, 2);
  const Tensor<float> x = batch_of(data, false), t = batch_of(data, true);
  g.params().zero_grad();
  d.params().zero_grad();
  Tape<float> tape;
  Var fake = g.forward(tape, tape.constant(x), true).output;
  tape.backward(generator_adversarial_loss(tape, d.forward(tape, fake, false), GeneratorLossForm::NonSaturating));
  for (auto* p : d.params().pointers())
    for (float v : p->grad.data()) ASSERT_EQ(v, 0.0f);
  double gnorm = 0;
  for (double v : flat_grads(g)) gnorm += v * v;
  EXPECT_GT(gnorm, 0.0);

  g.params().zero_grad();
  Tape<float> dt;
  dt.backward(discriminator_loss(dt, d.forward(dt, dt.constant(t), true), d.forward(dt, dt.constant(tape.value(fake)), true)));
  for (double v : flat_grads(g)) ASSERT_EQ(v, 0.0);
}

TEST(Training, SegmentationStartsFromDepthWeights) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  const auto data = tiny_data(4);
  const StageResult depth = train_depth(plain_set(data, c), {}, c);
  const Gen& source = *depth.generator;
  std::optional<TransferAudit> audit;
  auto g = make_generator(Stage::Segmentation, c, depth.generator.get(), &audit);
  ASSERT_TRUE(audit.has_value());
  EXPECT_FALSE(audit->copied.empty());
  ASSERT_EQ(audit->skipped_layers.size(), 1u);
  for (const auto& id : audit->skipped) EXPECT_TRUE(g->layer(audit->skipped_layers[0]).head) << id;
  for (const auto& id : audit->copied) EXPECT_TRUE(std::ranges::equal(g->params().at(id).value.data(), source.params().at(id).value.data())) << id;
  EXPECT_EQ(audit->copied.size() + audit->skipped.size(), g->params().size());

  const StageResult sr = train_segmentation(plain_set(data, c), data, c, depth.generator.get());
  EXPECT_EQ(sr.report.init, "depth");
  ASSERT_TRUE(sr.report.transfer.has_value());
  EXPECT_EQ(sr.report.transfer->skipped_layers, audit->skipped_layers);
  EXPECT_TRUE(sr.report.epochs.back().val.count("disc_iou"));
}

TEST(CrossValidation, PartitionAndFoldMeans) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.augment_factor = 3;
  const auto data = tiny_data(10);
  const fs::path out = scratch_dir("cv");
  CrossValOptions o;
  o.out_dir = out;
  const CrossValResult cv = cross_validate(data, c, Stage::Depth, o);
  ASSERT_EQ(cv.folds.size(), 2u);
  std::set<std::string> seen;
  for (const auto& f : cv.folds) {
    EXPECT_EQ(f.val_augmented, 0u);
    EXPECT_EQ(f.train_samples, f.train_ids.size() * 3);
    EXPECT_EQ(f.val_ids.size(), 5u);
    for (const auto& id : f.val_ids) {
      EXPECT_TRUE(seen.insert(id).second);
      EXPECT_EQ(std::count(f.train_ids.begin(), f.train_ids.end(), id), 0);
    }
    double sum = 0;
    for (const auto& r : f.rows) sum += r.values.at("rmse");
    EXPECT_NEAR(f.means.at("rmse"), sum / static_cast<double>(f.rows.size()), 1e-12);
  }
  EXPECT_EQ(seen.size(), 10u);
  const auto& agg = cv.fold_summary.groups.at("folds").at("rmse");
  EXPECT_NEAR(agg.mean, (cv.folds[0].means.at("rmse") + cv.folds[1].means.at("rmse")) / 2, 1e-12);
  EXPECT_TRUE(fs::exists(out / "per_image.csv"));
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "fold_0" / "depth_generator.ckpt"));
  const auto j = nlohmann::json::parse(read_file(out / "summary.json"));
  EXPECT_EQ(j["folds"][0]["val_augmented"].get<int>(), 0);
  fs::remove_all(out);
}

TEST(CrossValidation, WorkerCountDoesNotChangeResults) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  const auto data = tiny_data(6);
  CrossValOptions one, two;
  two.workers = 2;
  const auto a = cross_validate(data, c, Stage::Depth, one);
  const auto b = cross_validate(data, c, Stage::Depth, two);
  for (std::size_t f = 0; f < 2; ++f) EXPECT_EQ(a.folds[f].means, b.folds[f].means);
}

TEST(Training, NonFiniteInputIsAnnotated) {
  TrainConfig c = tiny_config();
  auto data = tiny_data(4);
  data[0].image[0] = std::nanf("");
  try {
    train_depth(plain_set(data, c), {}, c);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownKeyAndBadValues) {
  try {
    parse_config("epochs = 3\nlearning_rate = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("epochs = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("seg_init = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("depth_levels = 3\ncrop_size = 100\n"), ConfigError);
  EXPECT_THROW(parse_config("depth_lambda = -2\n"), ConfigError);
}

TEST(Config, TextRoundTripAndHash) {
  TrainConfig c = parse_config("# comment\nepochs = 7\nlr = 0.00125\nresidual = false\ngenerator_loss = minimax\nseg_init = scratch\n");
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.adam.lr, 0.00125);
  EXPECT_FALSE(c.residual);
  EXPECT_EQ(c.generator_loss, GeneratorLossForm::Minimax);
  EXPECT_EQ(c.seg_init, SegInit::Scratch);
  const TrainConfig back = parse_config(config_to_text(c));
  EXPECT_EQ(config_to_text(back), config_to_text(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(TrainConfig{}));
  for (const auto& k : config_keys()) EXPECT_NE(config_help().find(k.name), std::string::npos) << k.name;
}
