#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "blp/ingest.hpp"
#include "blp/preprocess.hpp"
#include "blp/synth.hpp"
#include "common.hpp"

using namespace blp;
namespace fs = std::filesystem;
using blp::testing::linear_fade;
using blp::testing::simple_record;

// ---------------------------------------------------------------------------
// Standardized battery files
// ---------------------------------------------------------------------------

namespace {

const char* kMinimal = R"({
  "id": "cell-1",
  "condition": {"battery_format": "cylindrical", "anode": "graphite", "cathode": "lfp", "electrolyte": "",
                "charge_protocol": "1C", "discharge_protocol": "1C", "temperature": 25, "nominal_capacity": 1.1,
                "manufacturer": "acme"},
  "q0_mode": "nominal",
  "manual_exclusions": [],
  "cycles": [
    {"index": 1,
     "charge": {"t": [0, 3600], "v": [3.0, 3.6], "i": [1.0, 1.0]},
     "discharge": {"t": [0, 3600], "v": [3.5, 2.5], "i": [-1.0, -1.0]},
     "discharge_capacity": 1.0}
  ]
})";

}  // namespace

TEST(BatteryFile, MinimalFile) {
  const auto r = ingest::parse_battery(kMinimal);
  EXPECT_EQ(r.id, "cell-1");
  ASSERT_EQ(r.cycles.size(), 1u);
  EXPECT_EQ(r.condition.nominal_capacity, 1.1);
  EXPECT_EQ(r.condition.battery_format, BatteryFormat::Cylindrical);
  EXPECT_DOUBLE_EQ(r.cycles[0].discharge_points.back().cumulative_capacity, 1.0);
}

TEST(BatteryFile, DuplicateCycleIndexRejected) {
  const auto text = ingest::serialize_battery(simple_record("ok", {1.0}));
  EXPECT_NO_THROW(ingest::parse_battery(text));
  std::string bad = ingest::serialize_battery(simple_record("d", {1.0, 0.99}));
  const auto pos = bad.find("\"index\":2");
  ASSERT_NE(pos, std::string::npos) << bad.substr(0, 300);
  bad.replace(pos, 9, "\"index\":1");
  EXPECT_THROW(ingest::parse_battery(bad), ValidationError);
}

TEST(BatteryFile, ParseErrorsCarryLocus) {
  try {
    ingest::parse_battery("{\n\"id\": \"x\",\n  oops\n}", "f.json");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("f.json: line 3"), std::string::npos) << e.what();
  }
  std::string missing = kMinimal;
  missing.replace(missing.find("\"discharge_capacity\": 1.0"), 25, "\"capacity\": 1.0");
  try {
    ingest::parse_battery(missing, "g.json");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("cycles[0]"), std::string::npos) << e.what();
  }
}

TEST(BatteryFile, RoundTripIsCanonical) {
  auto cfg = blp::testing::noiseless(4, 17);
  cfg.noise = {0.005, 0.0005, 0.2};
  const auto fleet = synth::generate_fleet(cfg);
  for (const auto& rec : fleet.records) {
    const std::string once = ingest::serialize_battery(rec);
    const auto back = ingest::parse_battery(once);
    EXPECT_EQ(ingest::serialize_battery(back), once);
    EXPECT_EQ(back.cycles.size(), rec.cycles.size());
    // capacities survive at the 9-significant-digit format
    for (std::size_t k = 0; k < rec.cycles.size(); ++k) {
      ASSERT_NEAR(back.cycles[k].discharge_capacity, rec.cycles[k].discharge_capacity,
                  1e-8 * rec.cycles[k].discharge_capacity);
    }
  }
}

TEST(BatteryFile, ThousandCycleRecord) {
  const auto dir = blp::testing::scratch_dir("thousand");
  auto r = simple_record("long", linear_fade(1000, 2e-4));
  r.manual_exclusions = {5, 7};
  ingest::save_battery(r, dir / "a.json");
  ingest::save_battery(ingest::load_battery(dir / "a.json"), dir / "b.json");
  EXPECT_EQ(ingest::read_file(dir / "a.json"), ingest::read_file(dir / "b.json"));
  const auto back = ingest::load_battery(dir / "a.json");
  ASSERT_EQ(back.cycles.size(), 1000u);
  EXPECT_EQ(back.manual_exclusions, r.manual_exclusions);
  for (std::size_t k = 0; k < 1000; ++k) ASSERT_NEAR(back.cycles[k].discharge_capacity, r.cycles[k].discharge_capacity, 1e-8);
}

TEST(BatteryFile, UnwritablePath) {
  EXPECT_THROW(ingest::save_battery(simple_record("x", {1.0}), "/nonexistent-dir/x/y.json"), IoError);
  EXPECT_THROW(ingest::load_battery("/nonexistent-dir/none.json"), IoError);
}

TEST(Manifest, RoundTripAndRelativePaths) {
  const auto dir = blp::testing::scratch_dir("manifest");
  ingest::FleetManifest m;
  m.entries.push_back({dir / "a.json", ingest::DatasetTag::LiIon});
  m.entries.push_back({dir / "sub" / "b.json", ingest::DatasetTag::CALB});
  ingest::save_manifest(m, dir / "manifest.json");
  const auto back = ingest::load_manifest(dir / "manifest.json");
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(fs::weakly_canonical(back.entries[1].path), fs::weakly_canonical(dir / "sub" / "b.json"));
  EXPECT_EQ(back.entries[1].tag, ingest::DatasetTag::CALB);
  EXPECT_NE(ingest::read_file(dir / "manifest.json").find("\"sub/b.json\""), std::string::npos);
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

namespace {

std::vector<double> brute_median(const std::vector<double>& q, int window) {
  const int n = static_cast<int>(q.size()), h = window / 2;
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    std::vector<double> w;
    for (int k = i - h; k <= i + h; ++k) w.push_back(q[std::clamp(k, 0, n - 1)]);
    std::sort(w.begin(), w.end());
    out.push_back(w[h]);
  }
  return out;
}

}  // namespace

TEST(OutlierFilter, ConstantNothingRemoved) {
  const auto [out, rep] = ingest::filter_outlier_cycles(simple_record("c", std::vector<double>(30, 1.0)), {5, 0.1});
  EXPECT_TRUE(rep.removed_cycle_indices.empty());
  EXPECT_EQ(out.cycles.size(), 30u);
}

TEST(OutlierFilter, SingleSpikeRemoved) {
  auto q = std::vector<double>(30, 1.0);
  q[12] = 2.0;
  const auto rec = simple_record("s", q);
  const auto med = brute_median(q, 5);
  std::vector<int> expected;
  for (std::size_t k = 0; k < q.size(); ++k)
    if (std::abs(q[k] - med[k]) / med[k] > 0.1) expected.push_back(static_cast<int>(k + 1));
  const auto [out, rep] = ingest::filter_outlier_cycles(rec, {5, 0.1});
  EXPECT_EQ(expected, std::vector<int>{13});
  EXPECT_EQ(rep.removed_cycle_indices, expected);
  EXPECT_EQ(rep.removal_reasons.at(13), ingest::RemovalReason::MedianOutlier);
  EXPECT_EQ(out.cycles.size(), 29u);
}

TEST(OutlierFilter, SmoothFadeKept) {
  const auto q = linear_fade(40, 0.01);
  const auto med = brute_median(q, 21);
  double worst = 0;
  for (std::size_t k = 0; k < q.size(); ++k) worst = std::max(worst, std::abs(q[k] - med[k]) / med[k]);
  ASSERT_LT(worst, 0.1);
  const auto [out, rep] = ingest::filter_outlier_cycles(simple_record("f", q), {21, 0.1});
  EXPECT_TRUE(rep.removed_cycle_indices.empty());
}

TEST(OutlierFilter, ShortRecordUnchanged) {
  const auto rec = simple_record("short", {1.0, 3.0, 1.0});
  const auto [out, rep] = ingest::filter_outlier_cycles(rec, {5, 0.1});
  EXPECT_EQ(out, rec);
  EXPECT_TRUE(rep.removed_cycle_indices.empty());
}

TEST(OutlierFilter, BadParameters) {
  const auto rec = simple_record("p", std::vector<double>(10, 1.0));
  EXPECT_THROW(ingest::filter_outlier_cycles(rec, {4, 0.1}), DomainError);
  EXPECT_THROW(ingest::filter_outlier_cycles(rec, {1, 0.1}), DomainError);
  EXPECT_THROW(ingest::filter_outlier_cycles(rec, {5, 0.0}), DomainError);
}

TEST(OutlierFilter, RandomRecordProperties) {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    auto q = linear_fade(60 + static_cast<int>(rng.below(60)), rng.uniform(1e-4, 3e-3));
    for (auto& x : q)
      if (rng.uniform() < 0.05) x *= rng.uniform(0.3, 0.8);
    const auto rec = simple_record("r", q);
    const auto [once, rep] = ingest::filter_outlier_cycles(rec, {7, 0.1});
    // idempotent
    const auto [twice, rep2] = ingest::filter_outlier_cycles(once, {7, 0.1});
    EXPECT_TRUE(rep2.removed_cycle_indices.empty());
    // surviving cycles untouched and in order, SOH a subsequence
    std::size_t j = 0;
    for (const auto& c : once.cycles) {
      while (j < rec.cycles.size() && rec.cycles[j].index != c.index) ++j;
      ASSERT_LT(j, rec.cycles.size());
      EXPECT_EQ(rec.cycles[j], c);
    }
    EXPECT_EQ(once.cycles.size() + rep.removed_cycle_indices.size(), rec.cycles.size());
  }
}

TEST(Exclusions, FormationRptManual) {
  auto rec = simple_record("x", linear_fade(20, 1e-3));
  rec.formation_cycles = {1, 2};
  rec.rpt_cycles = {10};
  rec.manual_exclusions = {15};
  const auto [out, rep] = ingest::clean_record(rec, {});
  EXPECT_EQ(rep.removed_cycle_indices, (std::vector<int>{1, 2, 10, 15}));
  EXPECT_EQ(rep.removal_reasons.at(1), ingest::RemovalReason::Formation);
  EXPECT_EQ(rep.removal_reasons.at(10), ingest::RemovalReason::RPT);
  EXPECT_EQ(rep.removal_reasons.at(15), ingest::RemovalReason::Manual);
  EXPECT_EQ(out.cycles.size(), 16u);
  EXPECT_EQ(out.cycles.front().index, 3);
}

// ---------------------------------------------------------------------------
// Resampling and normalization
// ---------------------------------------------------------------------------

TEST(Resample, TwoPointHalf) {
  Cycle c = blp::testing::simple_cycle(1, 1.0, 2);
  c.charge_points = blp::testing::half_cycle(2, 100.0, 1.0, 3.0, 4.2);
  const auto rc = prep::resample_cycle(c);
  EXPECT_EQ(rc.voltage[0], 3.0);
  EXPECT_EQ(rc.voltage[149], 4.2);
  for (int k = 0; k < 150; ++k) EXPECT_NEAR(rc.voltage[k], 3.0 + 1.2 * k / 149.0, 1e-12);
}

TEST(Resample, UniformGridIsIdentity) {
  Cycle c = blp::testing::simple_cycle(1, 1.0, 150);
  Rng rng(4);
  for (auto& p : c.charge_points) p.voltage = rng.uniform(3, 4);
  const auto rc = prep::resample_cycle(c);
  for (int k = 0; k < 150; ++k) EXPECT_NEAR(rc.voltage[k], c.charge_points[k].voltage, 1e-12);
}

TEST(Resample, SineOracle) {
  Cycle c = blp::testing::simple_cycle(1, 1.0, 600);
  const double T = 3600.0;
  for (auto& p : c.discharge_points) p.voltage = 3.5 + 0.5 * std::sin(2 * M_PI * p.t / T);
  const auto rc = prep::resample_cycle(c);
  double worst = 0;
  for (int k = 0; k < 150; ++k) {
    const double t = T * k / 149.0;
    worst = std::max(worst, std::abs(rc.voltage[150 + k] - (3.5 + 0.5 * std::sin(2 * M_PI * t / T))));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Resample, TooFewPoints) {
  Cycle c = blp::testing::simple_cycle(4, 1.0, 2);
  c.discharge_points.resize(1);
  EXPECT_THROW(prep::resample_cycle(c), DataError);
}

TEST(Resample, AffineTimeInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Cycle c = blp::testing::simple_cycle(1, 1.0, 30);
    for (auto* half : {&c.charge_points, &c.discharge_points}) {
      double t = 0;
      for (auto& p : *half) {
        p.t = t;
        t += rng.uniform(1, 50);
        p.voltage = rng.uniform(2.5, 4.2);
      }
    }
    Cycle moved = c;
    const double shift = rng.uniform(-1e4, 1e4), scale = rng.uniform(0.1, 10);
    for (auto* half : {&moved.charge_points, &moved.discharge_points})
      for (auto& p : *half) p.t = shift + scale * p.t;
    const auto a = prep::resample_cycle(c), b = prep::resample_cycle(moved);
    for (int k = 0; k < 300; ++k) ASSERT_NEAR(a.voltage[k], b.voltage[k], 1e-9);
  }
}

TEST(Normalize, Examples) {
  prep::ResampledCycle rc;
  rc.voltage.fill(4.2);
  rc.capacity.fill(2.5);
  rc.current.fill(-5.0);
  const auto n = prep::normalize_cycle(rc, 2.5);
  for (int k = 0; k < 300; ++k) {
    EXPECT_EQ(n.voltage[k], 1.0);
    EXPECT_EQ(n.capacity[k], 1.0);
    EXPECT_EQ(n.current[k], -2.0);
  }
  EXPECT_EQ(prep::normalize_cycle(n, 1.0).voltage, n.voltage);
  EXPECT_THROW(prep::normalize_cycle(rc, 0.0), DomainError);
  prep::ResampledCycle zero;
  EXPECT_THROW(prep::normalize_cycle(zero, 1.0), DataError);
}

TEST(Normalize, MaxVoltageExactlyOneAndLinearScaling) {
  const auto fleet = synth::generate_fleet(blp::testing::noiseless(3, 2));
  for (const auto& rec : fleet.records) {
    const auto rc = prep::resample_cycle(rec.cycles[3]);
    const auto a = prep::normalize_cycle(rc, 1.0), b = prep::normalize_cycle(rc, 4.0);
    EXPECT_EQ(*std::max_element(a.voltage.begin(), a.voltage.end()), 1.0);
    for (int k = 0; k < 300; ++k) {
      EXPECT_NEAR(b.capacity[k] * 4.0, a.capacity[k], 1e-15);
      EXPECT_NEAR(b.current[k] * 4.0, a.current[k], 1e-15);
    }
  }
}

// ---------------------------------------------------------------------------
// Samples and datasets
// ---------------------------------------------------------------------------

namespace {

BatteryRecord labeled(int n_cycles, int label) {
  auto r = simple_record("L", linear_fade(n_cycles, 1e-4));
  r.life_label = label;
  return r;
}

double padding_abs_sum(const prep::SampleTensor& s) {
  double sum = 0;
  for (int v = 0; v < 3; ++v)
    for (int c = s.usable_cycles(); c < 100; ++c)
      for (int p = 0; p < 300; ++p) sum += std::abs(s.at(v, c, p));
  return sum;
}

}  // namespace

TEST(BuildSample, FullWindowHoldsAllPoints) {
  const auto s = prep::build_sample(labeled(120, 500), 100);
  const auto dense = s.dense();
  EXPECT_EQ(dense.size(), 90000u);
  std::size_t nonzero = 0;
  for (float x : dense) nonzero += x != 0.0f;
  EXPECT_GT(nonzero, 60000u);
  EXPECT_EQ(padding_abs_sum(s), 0.0);
}

TEST(BuildSample, SingleCycle) {
  const auto s = prep::build_sample(labeled(120, 500), 1);
  EXPECT_EQ(s.usable_cycles(), 1);
  EXPECT_EQ(padding_abs_sum(s), 0.0);
  float peak = 0;
  for (int p = 0; p < 300; ++p) peak = std::max(peak, s.at(1, 0, p));
  EXPECT_EQ(peak, 1.0f);
}

TEST(BuildSample, Errors) {
  EXPECT_THROW(prep::build_sample(labeled(50, 500), 60), DataError);
  EXPECT_THROW(prep::build_sample(labeled(120, 500), 101), DomainError);
  EXPECT_THROW(prep::build_sample(labeled(120, 500), 0), DomainError);
  EXPECT_THROW(prep::build_sample(labeled(120, 150), 150), DomainError);
  auto unlabeled = labeled(120, 500);
  unlabeled.life_label.reset();
  EXPECT_THROW(prep::build_sample(unlabeled, 10), DataError);
}

TEST(BuildSample, PaddingZeroForRandomRecords) {
  const auto samples = blp::testing::fleet_samples(blp::testing::noiseless(6, 31), {1, 7, 33, 64, 99});
  ASSERT_EQ(samples.size(), 30u);
  for (const auto& s : samples) EXPECT_EQ(padding_abs_sum(s), 0.0);
}

TEST(BuildSample, PrefixProperty) {
  const auto fleet = synth::generate_fleet(blp::testing::noiseless(3, 41));
  Rng rng(1);
  for (auto rec : fleet.records) {
    rec.life_label = 400;
    const int s = 1 + static_cast<int>(rng.below(99));
    const auto a = prep::build_sample(rec, s);
    auto changed = rec;
    for (std::size_t k = static_cast<std::size_t>(s); k < changed.cycles.size(); ++k) {
      changed.cycles[k] = blp::testing::simple_cycle(changed.cycles[k].index, 0.5);
    }
    const auto b = prep::build_sample(changed, s);
    EXPECT_EQ(a.dense(), b.dense());
  }
}

TEST(SampleTensor, WritesDetachFromSharedStorage) {
  const auto samples = blp::testing::fleet_samples(blp::testing::noiseless(1, 3), {10, 20});
  ASSERT_EQ(samples.size(), 2u);
  auto a = samples[0];
  a.set(0, 50, 10, 5.0f);
  EXPECT_EQ(samples[1].at(0, 5, 3), a.at(0, 5, 3));
  EXPECT_EQ(samples[0].at(0, 50, 10), 0.0f);
  EXPECT_EQ(a.at(0, 50, 10), 5.0f);
}

TEST(MakeDataset, CountsByEnumeration) {
  const auto cfg = blp::testing::noiseless(10, 5);
  const auto fleet = synth::generate_fleet(cfg);
  std::vector<int> s_values;
  for (int s = 10; s <= 100; s += 10) s_values.push_back(s);
  const auto samples = blp::testing::fleet_samples(cfg, s_values);
  std::size_t expected = 0;
  for (const auto& t : fleet.truth)
    for (int s : s_values) expected += t.expected.status == LabelStatus::Label && s < t.expected.cycle;
  EXPECT_EQ(samples.size(), expected);
  EXPECT_LE(samples.size(), 100u);
}

TEST(MakeDataset, EmptySValues) {
  EXPECT_THROW(blp::testing::fleet_samples(blp::testing::noiseless(2, 1), {}), ConfigError);
  EXPECT_THROW(blp::testing::fleet_samples(blp::testing::noiseless(2, 1), {0}), ConfigError);
}

TEST(MakeDataset, LabelOneFiftyGivesOneSample) {
  // SOH 0.80067 at cycle 149, 0.79933 at cycle 150
  auto r = simple_record("b150", linear_fade(200, 0.2 / 149.5));
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> fleet{{r, ingest::DatasetTag::Synthetic}};
  prep::DatasetOptions opt;
  opt.s_values = {100};
  const auto ds = prep::make_dataset(fleet, opt);
  ASSERT_EQ(ds.samples.size(), 1u);
  EXPECT_EQ(ds.samples[0].label(), 150);
}

TEST(MakeDataset, AboveBandSkippedAndLogged) {
  auto r = simple_record("high", linear_fade(300, 0.14 / 300));
  auto ok = simple_record("ok", linear_fade(300, 0.2 / 250));
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> fleet{{r, ingest::DatasetTag::Synthetic},
                                                                   {ok, ingest::DatasetTag::Synthetic}};
  prep::DatasetOptions opt;
  opt.s_values = {100};
  const auto ds = prep::make_dataset(fleet, opt);
  ASSERT_EQ(ds.skipped.size(), 1u);
  EXPECT_EQ(ds.skipped[0].battery_id, "high");
  EXPECT_NE(ds.skipped[0].reason.find("excluded_above_band"), std::string::npos) << ds.skipped[0].reason;
  EXPECT_EQ(ds.samples.size(), 1u);
  fleet.pop_back();
  EXPECT_THROW(prep::make_dataset(fleet, opt), ConfigError);
}

TEST(MakeDataset, CalbUsesNinetyPercent) {
  auto r = simple_record("calb", linear_fade(400, 0.1 / 200));
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> fleet{{r, ingest::DatasetTag::CALB}};
  prep::DatasetOptions opt;
  opt.s_values = {100};
  const auto ds = prep::make_dataset(fleet, opt);
  ASSERT_EQ(ds.samples.size(), 1u);
  EXPECT_NEAR(ds.samples[0].label(), 200, 1);
}

TEST(MakeDataset, DeterministicAcrossJobs) {
  const auto cfg = blp::testing::noiseless(8, 12);
  const auto fleet = synth::generate_fleet(cfg);
  std::vector<std::pair<BatteryRecord, ingest::DatasetTag>> tagged;
  for (const auto& r : fleet.records) tagged.emplace_back(r, ingest::DatasetTag::Synthetic);
  prep::DatasetOptions opt;
  opt.s_values = {5, 50};
  const auto a = prep::make_dataset(tagged, opt);
  opt.jobs = 3;
  const auto b = prep::make_dataset(tagged, opt);
  EXPECT_EQ(prep::encode_cache(a.samples), prep::encode_cache(b.samples));
}

TEST(Cache, RoundTripBitExact) {
  const auto dir = blp::testing::scratch_dir("cache");
  auto samples = blp::testing::fleet_samples(blp::testing::noiseless(5, 8), {3, 100});
  prep::save_cache(samples, dir / "s.blpt");
  const auto back = prep::load_cache(dir / "s.blpt");
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t k = 0; k < back.size(); ++k) {
    EXPECT_EQ(back[k].battery_id(), samples[k].battery_id());
    EXPECT_EQ(back[k].usable_cycles(), samples[k].usable_cycles());
    EXPECT_EQ(back[k].label(), samples[k].label());
    EXPECT_EQ(back[k].condition(), samples[k].condition());
    EXPECT_EQ(back[k].dense(), samples[k].dense());
  }
  EXPECT_EQ(prep::encode_cache(back), prep::encode_cache(samples));
  const auto bytes = ingest::read_file(dir / "s.blpt");
  EXPECT_EQ(bytes.substr(0, 4), "BLPT");
  std::size_t expected = 12;
  for (const auto& x : samples) expected += 4 + x.battery_id().size() + 2 + 4 + 90000 * 4;
  EXPECT_EQ(bytes.size(), expected);
}

TEST(Cache, CorruptInputsRejected) {
  const auto samples = blp::testing::fleet_samples(blp::testing::noiseless(1, 8), {3});
  const auto bytes = prep::encode_cache(samples);
  EXPECT_THROW(prep::decode_cache(bytes.substr(0, bytes.size() - 1)), ParseError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(prep::decode_cache(bad), ParseError);
}
