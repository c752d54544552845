#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "atlas_match/identify.hpp"

using namespace atlas_match;

namespace {

std::vector<GrayImage> small_atlas(int k, int size = 64, std::uint64_t seed = 0) {
  AtlasSpec s;
  s.num_plates = k;
  s.image_size = size;
  s.seed = seed;
  return generate_atlas(s);
}

Network<float> random_net(int input = 64, std::uint64_t seed = 3) {
  Network<float> net(default_embed_net(input, 16));
  net.init_he(seed);
  return net;
}

// Straightforward recomputation: rank = number of keys strictly smaller plus
// equal keys at lower indices.
int naive_rank(const std::vector<double>& keys, int gt) {
  int r = 0;
  for (int i = 0; i < static_cast<int>(keys.size()); ++i) {
    if (keys[i] < keys[gt] || (keys[i] == keys[gt] && i < gt)) ++r;
  }
  return r;
}

std::vector<LabeledImage> as_queries(const std::vector<GrayImage>& imgs) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < static_cast<int>(imgs.size()); ++i) out.push_back({imgs[i], i, "q" + std::to_string(i)});
  return out;
}

}  // namespace

TEST(Index, OrderAndDefinition) {
  const auto plates = small_atlas(6);
  const auto net = random_net();
  const auto index = build_index(plates, net);
  ASSERT_EQ(index.size(), 6u);
  EXPECT_EQ(index.dim, 16u);
  for (int i = 0; i < 6; ++i) {
    const auto direct = net.infer(images_to_tensor<float>(std::vector<GrayImage>{plates[i]}));
    EXPECT_EQ(index.embeddings[i], std::vector<float>(direct.data().begin(), direct.data().end())) << i;
  }
  const auto again = build_index(plates, net);
  EXPECT_EQ(again.embeddings, index.embeddings);
  EXPECT_EQ(again.checkpoint_id, index.checkpoint_id);
  EXPECT_THROW(build_index(std::vector<GrayImage>{}, net), Error);
}

TEST(Ranking, PlateCopyRanksFirst) {
  const auto plates = small_atlas(10);
  const auto net = random_net();
  const auto index = build_index(plates, net);
  for (int j = 0; j < 10; ++j) {
    const auto r = rank_plates(index, plates[j], net, j);
    EXPECT_EQ(*r.ground_truth_rank, 0) << j;
    EXPECT_EQ(r.ranked.front(), j);
    EXPECT_EQ(r.distances.front(), 0.0);
    auto sorted = r.ranked;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_TRUE(std::is_sorted(r.distances.begin(), r.distances.end()));
  }
}

TEST(Ranking, TableRowExample) {
  // Ground truth 91, ranked head 92, 91, 93, 90, 94.
  std::vector<double> keys(132, 10.0);
  for (int i = 0; i < 132; ++i) keys[i] = 10.0 + i;
  keys[92] = 0.1;
  keys[91] = 0.2;
  keys[93] = 0.3;
  keys[90] = 0.4;
  keys[94] = 0.5;
  const auto r = rank_by_key(keys, 91);
  EXPECT_EQ(std::vector<int>(r.ranked.begin(), r.ranked.begin() + 5), (std::vector<int>{92, 91, 93, 90, 94}));
  EXPECT_EQ(*r.ground_truth_rank, 1);
  const int y = *r.ground_truth_rank;
  const auto rep = report_from_ranks(std::vector<int>{y});
  EXPECT_EQ(rep.top1, 0.0);
  EXPECT_EQ(rep.top3, 1.0);
}

TEST(Ranking, TiesGoToLowerIndex) {
  const auto r = rank_by_key(std::vector<double>{2.0, 1.0, 1.0, 0.5}, 2);
  EXPECT_EQ(r.ranked, (std::vector<int>{3, 1, 2, 0}));
  EXPECT_EQ(*r.ground_truth_rank, 2);
  EXPECT_THROW(rank_by_key(std::vector<double>{}), Error);
  EXPECT_THROW(rank_by_key(std::vector<double>{1.0}, 1), Error);
}

TEST(Ranking, InvariantUnderMonotoneTransform) {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> keys(40), mapped(40);
    for (auto& k : keys) k = std::floor(rng.uniform(0.0, 20.0)) * 0.25;  // deliberate ties
    for (std::size_t i = 0; i < keys.size(); ++i) mapped[i] = std::exp(3.0 * keys[i]) + 7.0;
    const int gt = static_cast<int>(rng.below(40));
    const auto a = rank_by_key(keys, gt), b = rank_by_key(mapped, gt);
    EXPECT_EQ(a.ranked, b.ranked);
    EXPECT_EQ(*a.ground_truth_rank, naive_rank(keys, gt));
  }
}

TEST(Metrics, WorkedExamples) {
  const auto r = report_from_ranks(std::vector<int>{2, 1, 0, 3});
  EXPECT_EQ(r.n, 4u);
  EXPECT_EQ(r.mae, 1.5);
  EXPECT_EQ(r.top1, 0.25);
  EXPECT_EQ(r.top3, 0.75);
  EXPECT_EQ(r.top5, 1.0);
  EXPECT_EQ(r.top10, 1.0);
  const auto perfect = report_from_ranks(std::vector<int>(12, 0));
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(perfect.top1, 1.0);
  EXPECT_THROW(report_from_ranks(std::vector<int>{}), Error);
}

TEST(Metrics, MatchNaiveOracleOnRandomRanks) {
  Rng rng(77);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(132));
    const auto r = report_from_ranks(y);
    double sum = 0;
    int h[4] = {0, 0, 0, 0};
    for (int v : y) {
      sum += v;
      h[0] += v < 1;
      h[1] += v < 3;
      h[2] += v < 5;
      h[3] += v < 10;
    }
    EXPECT_EQ(r.mae, sum / n);
    EXPECT_EQ(r.top1, h[0] / static_cast<double>(n));
    EXPECT_EQ(r.top3, h[1] / static_cast<double>(n));
    EXPECT_EQ(r.top5, h[2] / static_cast<double>(n));
    EXPECT_EQ(r.top10, h[3] / static_cast<double>(n));
    EXPECT_LE(r.top1, r.top3);
    EXPECT_LE(r.top5, r.top10);
  }
}

TEST(Evaluate, PerfectToyScoresZero) {
  const auto plates = small_atlas(12);
  const auto net = random_net();
  const auto index = build_index(plates, net);
  const auto q = as_queries(plates);
  const auto ev = evaluate(q, index, net);
  EXPECT_EQ(ev.report.mae, 0.0);
  EXPECT_EQ(ev.report.top1, 1.0);
  EXPECT_EQ(ev.rankings.size(), 12u);
  EXPECT_EQ(ev.rankings[4].query_id, "q4");
  EXPECT_THROW(evaluate(std::vector<LabeledImage>{}, index, net), Error);
}

TEST(Evaluate, ReportJsonFields) {
  const auto r = report_from_ranks(std::vector<int>{2, 1, 0, 3}, 0.25);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("mae").get<double>(), 1.5);
  EXPECT_EQ(j.at("inference_seconds").get<double>(), 0.25);
  EXPECT_FALSE(r.to_json(false).contains("inference_seconds"));
}

TEST(TrainLog, CsvFormat) {
  std::vector<TrainLogRow> log{{0, std::nan(""), 10.0}, {1, 0.5, std::nullopt}, {2, 0.25, 3.5}};
  EXPECT_EQ(format_train_log_csv(log), "iteration,loss,val1_mae\n0,,10\n1,0.5,\n2,0.25,3.5\n");
}

class Training : public ::testing::Test {
 protected:
  void SetUp() override {
    plates = small_atlas(16, 64, 2);
    Rng rng(5);
    for (int i = 0; i < 16; ++i) {
      const auto aug = random_augmentation(AugmentationRanges{}, rng);
      (i % 2 == 0 ? train : val).push_back({synthesize_slice(plates, i, aug, rng.next()), i, ""});
    }
  }

  TrainConfig config(int iterations) const {
    TrainConfig cfg;
    cfg.input_size = 64;
    cfg.embed_dim = 16;
    cfg.max_iterations = iterations;
    cfg.validate_every = 10;
    cfg.learning_rate = 1e-3;
    return cfg;
  }

  std::vector<GrayImage> plates;
  std::vector<LabeledImage> train, val;
};

TEST_F(Training, SameSeedSameCheckpoint) {
  for (LossKind loss : {LossKind::Triplet, LossKind::Contrastive}) {
    auto cfg = config(20);
    cfg.loss = loss;
    const auto a = train_identifier(plates, train, val, cfg);
    const auto b = train_identifier(plates, train, val, cfg);
    EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint)) << to_string(loss);
    EXPECT_EQ(format_train_log_csv(a.log), format_train_log_csv(b.log));
    EXPECT_EQ(a.iterations_run, 20);
    EXPECT_EQ(a.log.size(), 21u);
  }
}

TEST_F(Training, FlatValidationStopsEarly) {
  auto cfg = config(1000);
  cfg.learning_rate = 0.0;
  cfg.validate_every = 5;
  cfg.patience = 10;
  const auto r = train_identifier(plates, train, val, cfg);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.iterations_run, 15);
  EXPECT_EQ(r.best_iteration, 0);
}

TEST_F(Training, CheckpointIsBestValidation) {
  auto cfg = config(60);
  const auto r = train_identifier(plates, train, val, cfg);
  const auto net = r.checkpoint.network();
  const auto ev = evaluate(val, build_index(plates, net), net);
  EXPECT_EQ(ev.report.mae, r.best_val_mae);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& row : r.log)
    if (row.val_mae) best = std::min(best, *row.val_mae);
  EXPECT_EQ(best, r.best_val_mae);
  EXPECT_EQ(r.checkpoint.step, static_cast<std::uint64_t>(r.best_iteration));
}

TEST_F(Training, CosineDecayEndpoints) {
  auto cfg = config(20);
  const auto flat = train_identifier(plates, train, val, cfg);
  cfg.final_learning_rate = cfg.learning_rate;
  const auto same = train_identifier(plates, train, val, cfg);
  EXPECT_EQ(encode_checkpoint(flat.checkpoint), encode_checkpoint(same.checkpoint));
  cfg.final_learning_rate = 0.0;
  const auto decayed = train_identifier(plates, train, val, cfg);
  EXPECT_EQ(flat.log[1].loss, decayed.log[1].loss);
  EXPECT_NE(format_train_log_csv(flat.log), format_train_log_csv(decayed.log));
  cfg.final_learning_rate = -1.0;
  EXPECT_THROW(train_identifier(plates, train, val, cfg), Error);
}

TEST_F(Training, RejectsBadConfig) {
  auto cfg = config(10);
  cfg.batch_size = 7;
  EXPECT_THROW(train_identifier(plates, train, val, cfg), Error);
  cfg = config(10);
  EXPECT_THROW(train_identifier(plates, train, std::vector<LabeledImage>{}, cfg), Error);
}

TEST(TrainingProgress, LossDecreasesOverFiveHundredIterations) {
  AtlasSpec s;
  s.num_plates = 32;
  s.image_size = 64;
  const auto m = build_dataset(s, {32, 8, 0, 0}, {}, 0);
  const auto plates = generate_atlas(s);
  std::vector<LabeledImage> train, val;
  for (const auto& e : m.entries) {
    LabeledImage li{synthesize_slice(plates, e.plate, e.aug, e.seed), e.plate, e.path};
    (e.split == Split::Train ? train : val).push_back(std::move(li));
  }
  TrainConfig cfg;
  cfg.input_size = 64;
  cfg.max_iterations = 500;
  cfg.validate_every = 250;
  cfg.learning_rate = 1e-3;
  const auto r = train_identifier(plates, train, val, cfg);
  auto window = [&](int first) {
    double sum = 0;
    for (int i = first; i < first + 50; ++i) sum += r.log[i].loss;
    return sum / 50;
  };
  EXPECT_LT(window(451), window(1));
}
