#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace memechain;
using memechain::testing::make_synthetic;
using memechain::testing::TempDir;

namespace {

PipelineResult result(const std::string& id, int pred, double score = -1, AblationConfig c = {}) {
  PipelineResult r;
  r.meme_id = id;
  r.prediction = pred;
  r.score = score < 0 ? pred : score;
  r.config = c;
  return r;
}

MetricsReport report_with_acc(AblationConfig c, double acc) {
  MetricsReport m;
  m.config = c;
  m.label = ablation_label(c);
  m.accuracy = acc;
  m.n = 1000;
  return m;
}

}  // namespace

TEST(Accuracy, Basics) {
  const LabelMap labels{{"a", 1}, {"b", 0}, {"c", 0}};
  std::vector<PipelineResult> rs{result("a", 1), result("b", 0), result("c", 1)};
  EXPECT_NEAR(accuracy(rs, labels), 2.0 / 3.0, 1e-15);
  std::reverse(rs.begin(), rs.end());
  EXPECT_NEAR(accuracy(rs, labels), 2.0 / 3.0, 1e-15);
  rs[0].prediction = 0;
  EXPECT_EQ(accuracy(rs, labels), 1.0);
  rs.push_back(result("zzz", 0));
  EXPECT_THROW(accuracy(rs, labels), MetricError);
}

TEST(Auc, HandCases) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
  // Pairs (0.8,0.6) (0.8,0.2) (0.6,0.6) (0.6,0.2): 1 + 1 + 0.5 + 1 = 3.5 of 4.
  EXPECT_EQ(auc(std::vector<double>{0.8, 0.6, 0.6, 0.2}, std::vector<int>{1, 0, 1, 0}), 0.875);
}

TEST(Auc, SingleClassIsAnError) {
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{0}), MetricError);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), MetricError);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), MetricError);
}

TEST(Auc, MatchesAllPairsOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 499;
    std::vector<double> s(n);
    std::vector<int> y(n);
    // Coarse scores on odd trials so ties are common.
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? double(rng() % 7) / 7.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      y[i] = int(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(auc(s, y), oracle::brute_auc(s, y), 1e-9);
  }
}

TEST(Auc, HardLabelsGiveBalancedAccuracy) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 300;
    std::vector<int> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = int(rng() % 2);
      p[i] = int(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    const std::vector<double> s(p.begin(), p.end());
    EXPECT_NEAR(auc(s, y), oracle::balanced_accuracy(p, y), 1e-12);
  }
}

TEST(Auc, ComplementSymmetry) {
  std::mt19937_64 rng(23);
  std::vector<double> s(200), flipped(200);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    s[i] = std::uniform_real_distribution<double>(0, 1)(rng);
    flipped[i] = 1.0 - s[i];
    y[i] = int(i % 3 == 0);
  }
  EXPECT_NEAR(auc(flipped, y), 1.0 - auc(s, y), 1e-12);
}

TEST(Evaluate, ConfusionAndUnparseable) {
  const LabelMap labels{{"a", 1}, {"b", 0}, {"c", 1}, {"d", 0}};
  std::vector<PipelineResult> rs{result("a", 1), result("b", 1), result("c", 0), result("d", 0),
                                 result("unlabeled", 1)};
  rs[3].unparseable = true;
  const auto m = evaluate(rs, labels, AblationConfig{});
  EXPECT_EQ(m.n, 4u);
  EXPECT_EQ(m.confusion, (Confusion{1, 1, 1, 1}));
  EXPECT_EQ(m.confusion.total(), m.n);
  EXPECT_EQ(m.accuracy, 0.5);
  EXPECT_EQ(m.unparseable_count, 1u);
  EXPECT_EQ(m.label, "full");
  ASSERT_TRUE(m.auc);
  EXPECT_EQ(*m.auc, 0.5);
  const auto one_class = evaluate(std::vector<PipelineResult>{result("a", 1)}, labels, AblationConfig{});
  EXPECT_FALSE(one_class.auc);
}

TEST(Report, Formatting) {
  EXPECT_EQ(detail::signed_tenths(85), "+8.5");
  EXPECT_EQ(detail::signed_tenths(-3), "-0.3");
  EXPECT_EQ(detail::signed_tenths(0), "0.0");
  EXPECT_EQ(detail::percent(0.6354), "63.5");
  EXPECT_EQ(detail::percent(std::nullopt), "n/a");
  const std::vector<MetricsReport> ms{report_with_acc({}, 0.75)};
  const auto csv = metrics_csv(ms);
  EXPECT_TRUE(csv.starts_with("config,epm,eie,cra,k,n,acc,auc,tp,fp,tn,fn,unparseable\nfull,1,1,1,5,1000,0.750000,,"));
  EXPECT_NE(metrics_markdown(ms).find("| full | x | x | x | 5 | 1000 | 75.0 | n/a |"), std::string::npos);
}

TEST(Ablation, GridRowOrderAndDelta) {
  const auto grid = ablation_grid();
  std::vector<MetricsReport> ms;
  // Deliberately shuffled.
  ms.push_back(report_with_acc(grid[5], 0.635));
  ms.push_back(report_with_acc(grid[2], 0.58));
  ms.push_back(report_with_acc(grid[0], 0.550));
  ms.push_back(report_with_acc(grid[4], 0.61));
  ms.push_back(report_with_acc(grid[1], 0.571));
  ms.push_back(report_with_acc(grid[3], 0.6));
  const auto rows = ablation_report(ms);
  const std::vector<std::string> order{"baseline", "epm", "eie", "eie+cra", "epm+eie", "full"};
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(rows[i].metrics.label, order[i]);
  EXPECT_EQ(rows[5].acc_cell(), "63.5 (+8.5)");
  EXPECT_EQ(rows[0].acc_cell(), "55.0 (0.0)");
  // Deltas agree with the printed values.
  for (const auto& r : rows) {
    const double printed = std::stod(detail::percent(r.metrics.accuracy));
    const double base = std::stod(detail::percent(rows[0].metrics.accuracy));
    EXPECT_EQ(r.delta_tenths, std::llround((printed - base) * 10));
  }
  const auto csv = ablation_csv(rows);
  EXPECT_NE(csv.find("full,1,1,1,5,1000,63.5,,0,+8.5\n"), std::string::npos);
  EXPECT_NE(ablation_markdown(rows).find("| 63.5 (+8.5) |"), std::string::npos);
}

TEST(Ablation, SingleRow) {
  const std::vector<MetricsReport> ms{report_with_acc({}, 0.4)};
  const auto rows = ablation_report(ms);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].delta_tenths, 0);
  EXPECT_EQ(rows[0].acc_cell(), "40.0 (0.0)");
}

TEST(Experiments, AblationAndSweepWithStub) {
  TempDir dir;
  const auto s = make_synthetic(20, 8);
  auto stub = std::make_shared<StubBackend>();
  LmmClient client(stub);
  CoePipeline pipe(s.corpus, client, &s.index, &s.text, &s.image);
  const auto grid = ablation_grid();
  const auto runs = run_ablation(pipe, grid, {}, dir.path());
  ASSERT_EQ(runs.size(), 6u);
  for (const auto& r : runs) {
    EXPECT_TRUE(std::filesystem::exists(dir / (r.metrics.label + ".jsonl")));
    EXPECT_EQ(r.metrics.n, 8u);
    EXPECT_EQ(r.metrics.accuracy, 0.5);  // everything answered negative
  }

  const std::vector<std::size_t> ks{1, 3, 5, 7};
  const auto a = k_sweep(pipe, ks, {}, {}, dir.path());
  const auto b = k_sweep(pipe, ks, {}, {});
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(k_sweep_csv(a), k_sweep_csv(b));
  EXPECT_TRUE(std::filesystem::exists(dir / "k7.jsonl"));
  std::istringstream in(k_sweep_csv(a));
  const auto points = read_k_sweep_csv(in);
  ASSERT_EQ(points.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(points[i].k, ks[i]);
    EXPECT_NEAR(points[i].acc, a[i].metrics.accuracy, 1e-6);
    ASSERT_TRUE(points[i].auc);
    EXPECT_NEAR(*points[i].auc, *a[i].metrics.auc, 1e-6);
    EXPECT_EQ(points[i].n, 8u);
  }
  std::istringstream bad("k,acc\n");
  EXPECT_THROW(read_k_sweep_csv(bad), std::invalid_argument);
  EXPECT_THROW(k_sweep(pipe, std::vector<std::size_t>{}, {}, {}), std::invalid_argument);
}
