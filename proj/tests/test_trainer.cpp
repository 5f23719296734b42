#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dmseg/trainer.hpp"

using namespace dmseg;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.model.encoder.in_channels = 1;
  cfg.model.encoder.base_channels = 2;
  cfg.model.encoder.blocks_per_stage = {1, 1, 1, 1};
  cfg.model.encoder.qsm.mamba = MambaConfig{4, 2, 4};
  cfg.model.decoder.channels = 4;
  cfg.model.decoder.num_classes = 3;
  cfg.crop = {16, 16, 16};
  cfg.precision = Precision::Float64;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 6;
  cfg.lr0 = 0.05;
  cfg.seed = 3;
  cfg.eval_on = "train";
  cfg.phantom.size = 16;
  cfg.phantom.num_classes = 3;
  cfg.phantom_count = 4;
  return cfg;
}

index_t count_params(const ModelConfig& m) {
  DmSegNet<float> net(m, 0);
  return parameter_count(net.parameters());
}

std::vector<std::vector<double>> snapshot(const Trainer<double>& t) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, p] : t.parameters()) out.push_back(p.values());
  return out;
}

}  // namespace

TEST(PolyLr, Examples) {
  EXPECT_EQ(poly_lr(0, 100, 1e-4, 0.9), 1e-4);
  EXPECT_EQ(poly_lr(100, 100, 1e-4, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(50, 100, 1e-4, 0.9), 5.359e-5, 1e-8);
  EXPECT_DOUBLE_EQ(poly_lr(50, 100, 1e-4, 0.9), 1e-4 * std::pow(0.5, 0.9));
  EXPECT_THROW(poly_lr(101, 100, 1e-4, 0.9), InvalidInput);
  EXPECT_THROW(poly_lr(-1, 100, 1e-4, 0.9), InvalidInput);
  EXPECT_THROW(poly_lr(0, 0, 1e-4, 0.9), InvalidInput);
}

TEST(Sgd, UpdateRule) {
  std::vector<double> w{1.0, -2.0, 0.5}, v(3, 0.0);
  const std::vector<double> g{0.5, 0.25, -1.0};
  sgd_step<double>(w, g, v, 0.1, 0.0, 0.0);
  EXPECT_EQ(w, (std::vector<double>{1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25, 0.5 + 0.1}));

  std::vector<double> still{3.0, 4.0}, sv(2, 0.0);
  sgd_step<double>(still, std::vector<double>(2, 0.0), sv, 0.1, 0.0, 0.0);
  EXPECT_EQ(still, (std::vector<double>{3.0, 4.0}));

  // two steps with momentum on a constant gradient: w0 - lr*g*(1 + 1.9)
  std::vector<double> m{2.0}, mv{0.0};
  const std::vector<double> cg{0.5};
  sgd_step<double>(m, cg, mv, 0.01, 0.9, 0.0);
  sgd_step<double>(m, cg, mv, 0.01, 0.9, 0.0);
  EXPECT_NEAR(m[0], 2.0 - 0.01 * 0.5 * 2.9, 1e-15);

  // weight decay enters the velocity as an L2 gradient
  std::vector<double> d{2.0}, dv{0.0};
  sgd_step<double>(d, std::vector<double>{0.0}, dv, 0.1, 0.0, 0.5);
  EXPECT_EQ(d[0], 2.0 - 0.1 * 1.0);

  std::vector<double> bad(2);
  EXPECT_THROW(sgd_step<double>(bad, g, v, 0.1, 0.9, 0.0), InvalidInput);
}

TEST(Trainer, FirstLossIsLogK) {
  Trainer<double> t(tiny_config());
  EXPECT_NEAR(t.train_step().loss, std::log(3.0), 1e-6);
}

TEST(Trainer, DeterministicAt64Bit) {
  auto cfg = tiny_config();
  cfg.steps_per_epoch = 4;
  Trainer<double> a(cfg), b(cfg);
  for (int i = 0; i < 4; ++i) ASSERT_EQ(a.train_step().loss, b.train_step().loss) << i;
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = tiny_config();
  cfg.lr0 = 0.0;
  cfg.steps_per_epoch = 3;
  Trainer<double> t(cfg);
  const auto before = snapshot(t);
  while (!t.done()) EXPECT_EQ(t.train_step().lr, 0.0);
  EXPECT_EQ(snapshot(t), before);
  cfg.lr0 = -1.0;
  EXPECT_THROW(Trainer<double>{cfg}, InvalidInput);
}

TEST(Trainer, AblationParameterCounts) {
  auto m = tiny_config().model;
  m.encoder.base_channels = 4;
  auto with = [&](bool gsc, bool qss) {
    auto x = m;
    x.encoder.gsc_enabled = gsc;
    x.encoder.qsm.quad_directional = qss;
    return count_params(x);
  };
  const index_t m1 = with(false, false), m2 = with(true, false), m3 = with(false, true), full = with(true, true);
  EXPECT_LT(m1, m2);
  EXPECT_LT(m1, m3);
  EXPECT_LE(m3, full);
  // the two toggles add independent parameter sets
  EXPECT_EQ(full - m3, m2 - m1);
}

TEST(Trainer, CheckpointRoundTripAndResume) {
  auto cfg = tiny_config();
  Trainer<double> a(cfg);
  for (int i = 0; i < 3; ++i) a.train_step();
  const auto ck = a.checkpoint();
  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.rng_state, ck.rng_state);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].bytes, ck.tensors[i].bytes);
  }

  Trainer<double> b(cfg);
  b.restore(back);
  EXPECT_EQ(b.step(), 3);
  EXPECT_EQ(snapshot(b), snapshot(a));
  EXPECT_EQ(b.velocities(), a.velocities());
  while (!a.done()) {
    const auto ra = a.train_step(), rb = b.train_step();
    ASSERT_EQ(rb.lr, poly_lr(rb.step, cfg.total_steps(), cfg.lr0, cfg.poly_power));
    ASSERT_EQ(ra.lr, rb.lr);
    ASSERT_EQ(ra.loss, rb.loss);
  }
  EXPECT_EQ(snapshot(b), snapshot(a));
  EXPECT_THROW(a.train_step(), UsageError);

  // a restored model predicts exactly like the original
  const auto net = model_from_checkpoint<double>(a.checkpoint());
  const auto& img = a.train_cases()[0].image;
  EXPECT_EQ(predict_labels(net, img), predict_labels(a.net(), img));

  auto other = cfg;
  other.model.decoder.channels = 6;
  Trainer<double> c(other);
  EXPECT_THROW(c.restore(back), InvalidInput);
}

TEST(Checkpoint, CorruptionIsDetected) {
  Trainer<double> t(tiny_config());
  const auto bytes = serialize_checkpoint(t.checkpoint());

  auto flipped = bytes;
  flipped[flipped.size() - 5] ^= 0x10;
  try {
    deserialize_checkpoint(flipped);
    FAIL() << "expected checksum failure";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }

  auto truncated = bytes;
  truncated.resize(bytes.size() - 100);
  EXPECT_THROW(deserialize_checkpoint(truncated), FormatError);
  EXPECT_THROW(deserialize_checkpoint(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 20)), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), FormatError);

  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(version), VersionMismatch);

  const auto path = (std::filesystem::temp_directory_path() / "dmseg_trainer_test.ckpt").string();
  save_checkpoint(t.checkpoint(), path);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Config, TextRoundTripAndErrors) {
  auto cfg = tiny_config();
  cfg.model.encoder.gsc_enabled = false;
  cfg.model.encoder.qsm.fusion = QsmFusion::ConcatGate;
  cfg.normalize = NormalizeScheme::window(-100, 300);
  cfg.val_every = 5;
  const auto text = to_text(cfg);
  const auto back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.model.encoder.gsc_enabled, false);
  EXPECT_EQ(back.model.encoder.qsm.fusion, QsmFusion::ConcatGate);
  EXPECT_EQ(back.lr0, cfg.lr0);

  EXPECT_THROW(parse_config("train.bogus = 1\n"), InvalidInput);
  EXPECT_THROW(parse_config("train.epochs = two\n"), InvalidInput);
  EXPECT_THROW(parse_config("train.precision = float16\n"), InvalidInput);
  EXPECT_NO_THROW(parse_config("# comment only\n\n"));

  auto bad = cfg;
  bad.crop = {24, 16, 16};
  EXPECT_THROW(bad.validate(), InvalidInput);
  bad = cfg;
  bad.phantom.num_classes = 5;
  EXPECT_THROW(bad.validate(), InvalidInput);
}

TEST(Trainer, NonFiniteLossStopsTraining) {
  auto cfg = tiny_config();
  cfg.lr0 = 1e300;
  cfg.steps_per_epoch = 4;
  Trainer<double> t(cfg);
  bool raised = false;
  try {
    for (int i = 0; i < 4; ++i) t.train_step();
  } catch (const NonFiniteLoss& e) {
    raised = true;
    EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
  }
  EXPECT_TRUE(raised);
}
