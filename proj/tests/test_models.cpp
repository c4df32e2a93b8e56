#include <gtest/gtest.h>

#include <cmath>

#include "blp/eval/train.hpp"
#include "blp/models/checkpoint.hpp"
#include "blp/models/cyclepatch.hpp"
#include "blp/models/mlp.hpp"
#include "common.hpp"

using namespace blp;
using namespace blp::models;

namespace {

std::size_t block_count(std::size_t width, std::size_t hidden, bool ln_affine) {
  return 2 * width * hidden + hidden + width + (ln_affine ? 2 * width : 0);
}

std::size_t expected_count(const CyclePatchConfig& c) {
  std::size_t n = 900 * c.d1 + c.d1;
  for (int l = 0; l < c.effective_intra_layers(); ++l) n += block_count(c.d1, c.d2, c.ln_affine);
  std::size_t width = c.d1;
  if (c.uses_inter()) {
    n += 100 * c.d1 * c.inter_hidden + c.inter_hidden;
    for (int l = 0; l < c.inter_layers; ++l) n += block_count(c.inter_hidden, c.inter_hidden, c.ln_affine);
    width = c.inter_hidden;
  }
  return n + width + 1;
}

CyclePatchConfig small_config() {
  CyclePatchConfig c;
  c.d1 = 8;
  c.d2 = 12;
  c.inter_hidden = 10;
  c.input_norm = false;
  return c;
}

std::vector<double> predict_raw(const Network& net, const std::vector<const prep::SampleTensor*>& batch) {
  const auto pass = net.forward(batch, {});
  return {pass.prediction.values().begin(), pass.prediction.values().end()};
}

/// The record with cycles at positions a and b exchanged, indices kept.
BatteryRecord swap_cycles(BatteryRecord r, std::size_t a, std::size_t b) {
  std::swap(r.cycles[a].charge_points, r.cycles[b].charge_points);
  std::swap(r.cycles[a].discharge_points, r.cycles[b].discharge_points);
  std::swap(r.cycles[a].discharge_capacity, r.cycles[b].discharge_capacity);
  return r;
}

synth::Fleet labeled_fleet(int n, std::uint64_t seed) {
  auto fleet = synth::generate_fleet(blp::testing::noiseless(n, seed));
  for (auto& r : fleet.records) r.life_label = 400;
  return fleet;
}

}  // namespace

TEST(CyclePatch, ParameterCountClosedForm) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    CyclePatchConfig c;
    c.d1 = 2 + rng.below(20);
    c.d2 = 1 + rng.below(20);
    c.intra_layers = static_cast<int>(rng.below(4));
    c.inter = rng.below(2) ? InterKind::MlpStack : InterKind::None;
    c.inter_layers = static_cast<int>(rng.below(3));
    c.inter_hidden = 2 + rng.below(20);
    c.ln_affine = rng.below(2) == 1;
    c.disable_intra = rng.below(4) == 0;
    CyclePatchNetwork net(c, trial);
    EXPECT_EQ(net.params().count(), expected_count(c)) << to_json(c).dump();
  }
}

TEST(CyclePatch, ParameterCountWorkedExample) {
  CyclePatchConfig c;
  c.d1 = 16;
  c.d2 = 32;
  c.intra_layers = 2;
  c.inter_layers = 1;
  c.inter_hidden = 64;
  CyclePatchNetwork net(c);
  // 14416 embed + 2 * 1072 intra + 102464 inter input + 8320 inter block + 65 head
  EXPECT_EQ(net.params().count(), 14416u + 2144u + 102464u + 8320u + 65u);
}

TEST(CyclePatch, InvalidConfigsRejected) {
  CyclePatchConfig c;
  c.d1 = 1;
  EXPECT_THROW(CyclePatchNetwork{c}, ConfigError);
  c = CyclePatchConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(CyclePatchNetwork{c}, ConfigError);
  c = CyclePatchConfig{};
  c.inter_hidden = 1;
  EXPECT_THROW(CyclePatchNetwork{c}, ConfigError);
}

TEST(CyclePatch, SegmentGivesOneTokenPerUsableCycle) {
  const auto fleet = labeled_fleet(1, 5);
  for (int s : {1, 17, 100}) {
    const auto sample = prep::build_sample(fleet.records[0], s);
    const auto tokens = segment(sample);
    EXPECT_EQ(tokens.rows(), static_cast<std::size_t>(s));
    EXPECT_EQ(tokens.cols(), 900u);
    for (int c = 0; c < s; ++c) {
      for (int v = 0; v < 3; ++v) {
        for (int p = 0; p < 300; p += 37) {
          EXPECT_EQ(tokens(c, v * 300 + p), sample.at(v, c, p));
        }
      }
    }
  }
}

TEST(CyclePatch, MixedUsableCyclesInBatchRejected) {
  const auto fleet = labeled_fleet(1, 6);
  const auto a = prep::build_sample(fleet.records[0], 10);
  const auto b = prep::build_sample(fleet.records[0], 11);
  const std::vector<const prep::SampleTensor*> batch{&a, &b};
  CyclePatchNetwork net(small_config(), 1);
  EXPECT_THROW(net.forward(batch, {}), ShapeError);
}

TEST(CyclePatch, PrefixPropertyOutputIdentical) {
  const auto fleet = labeled_fleet(4, 7);
  Rng rng(2);
  auto cfg = small_config();
  cfg.ln_affine = true;
  for (auto inter : {InterKind::MlpStack, InterKind::None}) {
    cfg.inter = inter;
    CyclePatchNetwork net(cfg, 3);
    for (const auto& rec : fleet.records) {
      for (int trial = 0; trial < 5; ++trial) {
        const int s = 1 + static_cast<int>(rng.below(99));
        auto changed = rec;
        for (std::size_t k = static_cast<std::size_t>(s); k < changed.cycles.size(); ++k) {
          changed.cycles[k] = blp::testing::simple_cycle(changed.cycles[k].index, rng.uniform(0.3, 3.0));
        }
        const auto a = prep::build_sample(rec, s);
        const auto b = prep::build_sample(changed, s);
        EXPECT_EQ(predict_raw(net, {&a}), predict_raw(net, {&b}));
      }
    }
  }
}

TEST(CyclePatch, MeanPoolIgnoresCycleOrder) {
  const auto fleet = labeled_fleet(3, 8);
  auto cfg = small_config();
  cfg.inter = InterKind::None;
  CyclePatchNetwork pool(cfg, 4);
  cfg.inter = InterKind::MlpStack;
  CyclePatchNetwork stack(cfg, 4);
  for (const auto& rec : fleet.records) {
    const auto a = prep::build_sample(rec, 20);
    const auto b = prep::build_sample(swap_cycles(swap_cycles(rec, 0, 13), 4, 19), 20);
    const double pa = predict_raw(pool, {&a})[0];
    EXPECT_NEAR(predict_raw(pool, {&b})[0], pa, 1e-12 * std::max(1.0, std::abs(pa)));
    EXPECT_GT(std::abs(predict_raw(stack, {&b})[0] - predict_raw(stack, {&a})[0]), 1e-9);
  }
}

TEST(CyclePatch, IntraAblationSkipsBlocks) {
  const auto fleet = labeled_fleet(1, 9);
  const auto sample = prep::build_sample(fleet.records[0], 12);
  auto cfg = small_config();
  cfg.disable_intra = true;
  CyclePatchNetwork net(cfg, 5);
  for (const auto& [name, p] : net.params()) EXPECT_EQ(name.rfind("intra", 0), std::string::npos) << name;
  // without intra blocks H is exactly the embedding of the tokens
  const auto h = net.cycle_embeddings(sample);
  const auto expected =
      diff::affine_forward(segment(sample), net.params().at("embed.W").value, net.params().at("embed.b").value);
  EXPECT_EQ(h, expected);
}

TEST(CyclePatch, InterAblationMatchesMeanPool) {
  const auto fleet = labeled_fleet(2, 10);
  auto cfg = small_config();
  cfg.disable_inter = true;
  CyclePatchNetwork ablated(cfg, 6);
  cfg.disable_inter = false;
  cfg.inter = InterKind::None;
  CyclePatchNetwork pooled(cfg, 6);
  EXPECT_EQ(ablated.params().snapshot(), pooled.params().snapshot());
  for (const auto& rec : fleet.records) {
    const auto s = prep::build_sample(rec, 30);
    EXPECT_EQ(predict_raw(ablated, {&s}), predict_raw(pooled, {&s}));
  }
}

TEST(CyclePatch, ZeroHeadPredictsBias) {
  const auto fleet = labeled_fleet(3, 11);
  for (auto inter : {InterKind::MlpStack, InterKind::None}) {
    auto cfg = small_config();
    cfg.inter = inter;
    CyclePatchNetwork net(cfg, 7);
    net.params().at("head.W").value.fill(0.0);
    net.params().at("head.b").value.fill(0.731);
    net.scaler() = {500.0, 100.0};
    std::vector<prep::SampleTensor> samples;
    for (const auto& r : fleet.records) samples.push_back(prep::build_sample(r, 25));
    for (double p : predict(net, samples)) EXPECT_DOUBLE_EQ(p, 500.0 + 100.0 * 0.731);
  }
}

TEST(CyclePatch, BatchedEqualsSingle) {
  const auto fleet = labeled_fleet(5, 12);
  CyclePatchNetwork net(small_config(), 8);
  std::vector<prep::SampleTensor> samples;
  for (const auto& r : fleet.records) samples.push_back(prep::build_sample(r, 15));
  std::vector<const prep::SampleTensor*> all;
  for (const auto& s : samples) all.push_back(&s);
  const auto batched = predict_raw(net, all);
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_NEAR(predict_raw(net, {&samples[i]})[0], batched[i], 1e-12);
}

TEST(Mlp, ParameterCount) {
  MlpConfig c;
  c.hidden = 8;
  c.layers = 2;
  MlpNetwork net(c);
  EXPECT_EQ(net.params().count(), 90000u * 8 + 8 + 2 * block_count(8, 8, false) + 9);
}

TEST(Mlp, PaddingIsZeroAndPrefixHolds) {
  const auto fleet = labeled_fleet(2, 13);
  MlpConfig c;
  c.hidden = 8;
  c.input_norm = false;
  MlpNetwork net(c, 2);
  Rng rng(3);
  for (const auto& rec : fleet.records) {
    const auto a = prep::build_sample(rec, 40);
    std::vector<double> row(90000, 7.0);
    a.flat_cycle_major(row);
    for (std::size_t k = 40 * 900; k < row.size(); ++k) ASSERT_EQ(row[k], 0.0);
    auto changed = rec;
    for (std::size_t k = 40; k < changed.cycles.size(); ++k) {
      changed.cycles[k] = blp::testing::simple_cycle(changed.cycles[k].index, rng.uniform(0.5, 2.0));
    }
    const auto b = prep::build_sample(changed, 40);
    EXPECT_EQ(predict_raw(net, {&a}), predict_raw(net, {&b}));
  }
}

TEST(Mlp, CycleOrderMatters) {
  const auto fleet = labeled_fleet(1, 14);
  MlpConfig c;
  c.hidden = 8;
  c.input_norm = false;
  MlpNetwork net(c, 2);
  const auto a = prep::build_sample(fleet.records[0], 20);
  const auto b = prep::build_sample(swap_cycles(fleet.records[0], 0, 19), 20);
  EXPECT_GT(std::abs(predict_raw(net, {&a})[0] - predict_raw(net, {&b})[0]), 1e-9);
}

TEST(Dummy, PredictsTrainingMean) {
  EXPECT_EQ(dummy_fit_predict(std::vector<double>{100, 200, 300}), 200.0);
  EXPECT_EQ(dummy_fit_predict(std::vector<double>{412}), 412.0);
  EXPECT_THROW(dummy_fit_predict(std::vector<double>{}), DataError);
}

TEST(Checkpoint, NetworkRoundTripIsSelfDescribing) {
  const auto fleet = labeled_fleet(3, 15);
  std::vector<prep::SampleTensor> samples;
  for (const auto& r : fleet.records) samples.push_back(prep::build_sample(r, 50));
  auto cfg = small_config();
  cfg.ln_affine = true;
  cfg.input_norm = true;
  CyclePatchNetwork net(cfg, 9);
  net.input_norm() = InputNorm::fit(samples);
  net.scaler() = {612.5, 87.25};
  const auto bytes = encode_network(net);
  const auto back = decode_network(bytes);
  EXPECT_EQ(back->family(), "cpmlp");
  EXPECT_EQ(back->describe(), net.describe());
  EXPECT_EQ(predict(*back, samples), predict(net, samples));
  EXPECT_EQ(encode_network(*back), bytes);

  MlpConfig mc;
  mc.hidden = 4;
  MlpNetwork mlp(mc, 1);
  const auto mlp_back = decode_network(encode_network(mlp));
  EXPECT_EQ(mlp_back->family(), "mlp");
  EXPECT_EQ(mlp_back->params().snapshot(), mlp.params().snapshot());
}

TEST(Checkpoint, MismatchedShapesRejected) {
  CyclePatchNetwork net(small_config(), 1);
  auto header = checkpoint_header(net);
  auto values = net.params().snapshot();
  values["embed.W"] = diff::Tensor2D(3, 3);
  EXPECT_THROW(decode_network(diff::encode_checkpoint(header, values)), ShapeError);
  header["model"]["family"] = "transformer";
  EXPECT_THROW(decode_network(diff::encode_checkpoint(header, net.params().snapshot())), ConfigError);
}

TEST(Training, OverfitsThirtyTwoBatteries) {
  auto synth_cfg = blp::testing::noiseless(32, 21);
  const auto samples = blp::testing::fleet_samples(synth_cfg, {100});
  ASSERT_EQ(samples.size(), 32u);
  CyclePatchConfig c;
  c.d1 = 32;
  c.d2 = 32;
  c.intra_layers = 2;
  c.inter_hidden = 32;
  CyclePatchNetwork net(c, 1);
  eval::TrainConfig tc;
  tc.epochs = 200;
  tc.patience = 0;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  const auto result = eval::train_model(net, samples, samples, tc);
  const auto pred = predict(net, samples);
  const double m = eval::mape(eval::labels_of(samples), pred);
  EXPECT_LT(m, 0.05) << "best epoch " << result.best_epoch;
}
