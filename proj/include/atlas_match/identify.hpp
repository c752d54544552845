#pragma once

// Slice identification: embed every plate once, rank plates for a query by
// Euclidean distance in embedding space, and score rankings with MAE / TOP-n.
// Also hosts the Siamese training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlas_match/error.hpp"
#include "atlas_match/imagekit.hpp"
#include "atlas_match/metric.hpp"
#include "atlas_match/random.hpp"
#include "atlas_match/synthatlas.hpp"
#include "atlas_match/tensornet.hpp"

namespace atlas_match {

// Resizes `img` to the network's square input size.
inline GrayImage prepare_input(const GrayImage& img, int input_size) {
  return resize_bilinear(img, input_size, input_size);
}

// Embeds images with shared parameters (forward only), in chunks.
inline std::vector<std::vector<float>> embed_images(const Network<float>& net, std::span<const GrayImage> images,
                                                    std::size_t chunk = 16) {
  const int size = net.spec().in_height;
  require(net.spec().in_channels == 1 && net.spec().in_width == size, ErrorCode::ShapeMismatch,
          "embedding network must take square single-channel input");
  std::vector<std::vector<float>> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<GrayImage> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(prepare_input(images[i], size));
    const auto emb = net.infer(images_to_tensor<float>(batch));
    for (std::size_t b = 0; b < batch.size(); ++b) out.emplace_back(emb.row(b).begin(), emb.row(b).end());
  }
  return out;
}

inline std::uint64_t fingerprint(std::span<const float> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float f : params) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// Plate embeddings in plate order.
struct EmbeddingIndex {
  std::vector<std::vector<float>> embeddings;
  std::size_t dim = 0;
  std::uint64_t checkpoint_id = 0;

  std::size_t size() const noexcept { return embeddings.size(); }
};

inline EmbeddingIndex build_index(std::span<const GrayImage> plates, const Network<float>& net) {
  require(!plates.empty(), ErrorCode::IndexEmpty, "no plates to index");
  EmbeddingIndex index;
  index.embeddings = embed_images(net, plates);
  index.dim = index.embeddings.front().size();
  index.checkpoint_id = fingerprint(net.params());
  return index;
}

struct RankingResult {
  std::string query_id;
  std::vector<int> ranked;        // plate indices, best first
  std::vector<double> distances;  // ranking key per ranked entry (nondecreasing)
  std::optional<int> ground_truth_rank;
};

// Orders plates by ascending key, ties to the lower plate index. Shared by the
// embedding-distance and mutual-information identifiers.
inline RankingResult rank_by_key(std::span<const double> keys, std::optional<int> ground_truth = std::nullopt,
                                 std::string query_id = {}) {
  require(!keys.empty(), ErrorCode::IndexEmpty, "nothing to rank");
  RankingResult r;
  r.query_id = std::move(query_id);
  r.ranked.resize(keys.size());
  std::iota(r.ranked.begin(), r.ranked.end(), 0);
  std::stable_sort(r.ranked.begin(), r.ranked.end(), [&](int a, int b) { return keys[a] < keys[b]; });
  for (int p : r.ranked) r.distances.push_back(keys[p]);
  if (ground_truth) {
    require(*ground_truth >= 0 && *ground_truth < static_cast<int>(keys.size()), ErrorCode::InvalidArgument,
            "ground truth plate out of range");
    r.ground_truth_rank =
        static_cast<int>(std::find(r.ranked.begin(), r.ranked.end(), *ground_truth) - r.ranked.begin());
  }
  return r;
}

inline RankingResult rank_embedding(const EmbeddingIndex& index, std::span<const float> query,
                                    std::optional<int> ground_truth = std::nullopt, std::string query_id = {}) {
  if (index.size() == 0) fail(ErrorCode::IndexEmpty, "embedding index is empty");
  std::vector<double> d;
  d.reserve(index.size());
  for (const auto& e : index.embeddings) d.push_back(euclidean_distance<float>(std::span<const float>(e), query));
  return rank_by_key(d, ground_truth, std::move(query_id));
}

inline RankingResult rank_plates(const EmbeddingIndex& index, const GrayImage& slice, const Network<float>& net,
                                 std::optional<int> ground_truth = std::nullopt, std::string query_id = {}) {
  if (index.size() == 0) fail(ErrorCode::IndexEmpty, "embedding index is empty");
  const auto emb = embed_images(net, std::span<const GrayImage>(&slice, 1));
  require(emb.front().size() == index.dim, ErrorCode::ShapeMismatch, "query embedding length differs from index");
  return rank_embedding(index, emb.front(), ground_truth, std::move(query_id));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t n = 0;
  double mae = 0.0;  // mean 0-based rank of the ground-truth plate
  double top1 = 0.0, top3 = 0.0, top5 = 0.0, top10 = 0.0;  // fractions in [0, 1]
  double inference_seconds = 0.0;

  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j{{"n", n}, {"mae", mae}, {"top1", top1}, {"top3", top3}, {"top5", top5}, {"top10", top10}};
    if (with_timing) j["inference_seconds"] = inference_seconds;
    return j;
  }
};

inline EvalReport report_from_ranks(std::span<const int> ranks, double seconds = 0.0) {
  if (ranks.empty()) fail(ErrorCode::EmptyTestSet, "no ranked queries");
  EvalReport r;
  r.n = ranks.size();
  std::array<std::size_t, 4> hits{};
  constexpr std::array<int, 4> ns{1, 3, 5, 10};
  double sum = 0.0;
  for (int y : ranks) {
    require(y >= 0, ErrorCode::InvalidArgument, "ranks are 0-based");
    sum += y;
    for (std::size_t k = 0; k < ns.size(); ++k) hits[k] += y < ns[k] ? 1 : 0;
  }
  const double n = static_cast<double>(ranks.size());
  r.mae = sum / n;
  r.top1 = hits[0] / n;
  r.top3 = hits[1] / n;
  r.top5 = hits[2] / n;
  r.top10 = hits[3] / n;
  r.inference_seconds = seconds;
  return r;
}

struct LabeledImage {
  GrayImage image;
  int plate = 0;
  std::string id;
};

inline std::vector<LabeledImage> labeled_split(const Dataset& d, Split s) {
  std::vector<LabeledImage> out;
  for (std::size_t i : d.indices(s)) out.push_back({d.slices[i], d.manifest.entries[i].plate, d.manifest.entries[i].path});
  return out;
}

struct Evaluation {
  EvalReport report;
  std::vector<RankingResult> rankings;
};

// Embeds and ranks every query; the timer covers both.
inline Evaluation evaluate(std::span<const LabeledImage> queries, const EmbeddingIndex& index,
                           const Network<float>& net) {
  if (queries.empty()) fail(ErrorCode::EmptyTestSet, "no test slices");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GrayImage> imgs;
  for (const auto& q : queries) imgs.push_back(q.image);
  const auto emb = embed_images(net, imgs);
  Evaluation ev;
  std::vector<int> ranks;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    ev.rankings.push_back(rank_embedding(index, emb[i], queries[i].plate, queries[i].id));
    ranks.push_back(*ev.rankings.back().ground_truth_rank);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ev.report = report_from_ranks(ranks, secs);
  return ev;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class LossKind { Contrastive, Triplet };

constexpr std::string_view to_string(LossKind k) { return k == LossKind::Contrastive ? "contrastive" : "triplet"; }

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "contrastive") return LossKind::Contrastive;
  if (s == "triplet") return LossKind::Triplet;
  fail(ErrorCode::InvalidArgument, "unknown loss '" + std::string(s) + "'");
}

struct TrainConfig {
  LossKind loss = LossKind::Triplet;
  MiningMode mining = MiningMode::SemiHard;
  int batch_size = 16;
  std::optional<double> margin;  // defaults per loss
  int max_iterations = 10000;
  int patience = 2000;
  int validate_every = 250;
  double learning_rate = 1e-4;
  std::optional<double> final_learning_rate;  // cosine decay to this value over max_iterations
  std::uint64_t seed = 0;
  int input_size = 128;
  int embed_dim = 64;
  AugmentationRanges augmentation;
  double slice_probability = 0.5;  // chance to use a stored training slice when its plate has one
  int local_window = 0;            // triplet batches: plates drawn from this many neighbours (0 = off)
  double local_fraction = 0.5;     // share of batches drawn that way

  MarginConfig margin_config() const {
    if (margin) return {*margin};
    return loss == LossKind::Contrastive ? MarginConfig::contrastive() : MarginConfig::triplet();
  }
};

struct TrainLogRow {
  int iteration = 0;
  double loss = 0.0;
  std::optional<double> val_mae;
};

struct TrainResult {
  Checkpoint checkpoint;  // parameters at the best validation MAE
  std::vector<TrainLogRow> log;
  int best_iteration = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  int iterations_run = 0;
  bool early_stopped = false;
};

inline std::string format_train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "iteration,loss,val1_mae\n";
  char buf[96];
  for (const auto& r : log) {
    if (r.val_mae && std::isnan(r.loss)) {
      std::snprintf(buf, sizeof buf, "%d,,%.9g\n", r.iteration, *r.val_mae);
    } else if (r.val_mae) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.iteration, r.loss, *r.val_mae);
    } else {
      std::snprintf(buf, sizeof buf, "%d,%.9g,\n", r.iteration, r.loss);
    }
    out += buf;
  }
  return out;
}

namespace detail {

// Supplies augmented training views for each plate: a stored slice of that
// plate when one exists (with probability slice_probability) or a freshly
// synthesized partial slice of the plate.
class ViewSource {
 public:
  ViewSource(const std::vector<GrayImage>& plates, std::span<const LabeledImage> slices, const TrainConfig& cfg)
      : plates_(plates), cfg_(cfg), by_plate_(plates.size()) {
    for (std::size_t i = 0; i < slices.size(); ++i) {
      require(slices[i].plate >= 0 && slices[i].plate < static_cast<int>(plates.size()), ErrorCode::InvalidArgument,
              "training slice plate out of range");
      by_plate_[slices[i].plate].push_back(&slices[i].image);
    }
  }

  GrayImage slice_view(int plate, Rng& rng) const {
    const auto& stored = by_plate_[plate];
    if (!stored.empty() && rng.bernoulli(cfg_.slice_probability)) {
      return prepare_input(*stored[rng.below(stored.size())], cfg_.input_size);
    }
    return synthesized(plate, rng);
  }

  GrayImage plate_view(int plate, Rng& rng) const {
    if (rng.bernoulli(0.5)) return prepare_input(plates_[plate], cfg_.input_size);
    return synthesized(plate, rng);
  }

  GrayImage clean_plate(int plate) const { return prepare_input(plates_[plate], cfg_.input_size); }

 private:
  GrayImage synthesized(int plate, Rng& rng) const {
    const auto aug = random_augmentation(cfg_.augmentation, rng);
    return prepare_input(synthesize_slice(plates_, plate, aug, rng.next()), cfg_.input_size);
  }

  const std::vector<GrayImage>& plates_;
  const TrainConfig& cfg_;
  std::vector<std::vector<const GrayImage*>> by_plate_;
};

}  // namespace detail

using TrainProgress = std::function<void(const TrainLogRow&)>;

// Trains the embedding network with Adam, validating every `validate_every`
// iterations on `val` and stopping once validation MAE has not improved for
// more than `patience` iterations. Single-threaded and seed-deterministic.
inline TrainResult train_identifier(const std::vector<GrayImage>& plates, std::span<const LabeledImage> train,
                                    std::span<const LabeledImage> val, const TrainConfig& cfg,
                                    const TrainProgress& progress = {}) {
  require(plates.size() >= 2, ErrorCode::InvalidArgument, "training needs at least 2 plates");
  require(!train.empty() && !val.empty(), ErrorCode::EmptyTestSet, "training and validation sets must be nonempty");
  require(cfg.batch_size >= 4 && cfg.batch_size % 2 == 0, ErrorCode::InvalidArgument,
          "batch size must be even and >= 4");
  require(cfg.max_iterations >= 0 && cfg.validate_every >= 1 && cfg.patience >= 0, ErrorCode::InvalidArgument,
          "invalid iteration settings");
  require(cfg.learning_rate >= 0.0 && cfg.final_learning_rate.value_or(0.0) >= 0.0, ErrorCode::InvalidArgument,
          "learning rates must be non-negative");
  const auto margin = cfg.margin_config();
  margin.validate();

  Network<float> net(default_embed_net(cfg.input_size, cfg.embed_dim));
  net.init_he(derive_seed(cfg.seed, 1));
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  Rng rng(derive_seed(cfg.seed, 2));
  const int num_plates = static_cast<int>(plates.size());
  const detail::ViewSource views(plates, train, cfg);

  std::vector<int> item_plates;  // contrastive items: every plate, then every training slice
  for (int p = 0; p < num_plates; ++p) item_plates.push_back(p);
  for (const auto& s : train) item_plates.push_back(s.plate);
  PairSampler pairs(item_plates, num_plates, derive_seed(cfg.seed, 3));

  TrainResult result;
  result.checkpoint = Checkpoint::of(net, 0, cfg.seed);

  auto validate = [&]() {
    const auto index = build_index(plates, net);
    return evaluate(val, index, net).report.mae;
  };

  auto step = [&]() -> double {
    if (cfg.loss == LossKind::Contrastive) {
      std::vector<GrayImage> imgs;
      std::vector<bool> positive;
      const auto batch = pairs.take(static_cast<std::size_t>(cfg.batch_size));
      for (const auto& p : batch) {
        const int item_plate = item_plates[p.item];
        if (p.item < static_cast<std::size_t>(num_plates)) {
          imgs.push_back(views.slice_view(item_plate, rng));
        } else {
          imgs.push_back(prepare_input(train[p.item - num_plates].image, cfg.input_size));
        }
        positive.push_back(p.positive);
      }
      for (const auto& p : batch) imgs.push_back(views.clean_plate(p.plate));
      const auto emb = net.forward(images_to_tensor<float>(imgs));
      const std::size_t n = batch.size(), len = emb.dim(1);
      PairBatch<float> pb{Tensor<float>({n, len}), Tensor<float>({n, len}), positive};
      std::copy_n(emb.data().begin(), n * len, pb.fixed.data().begin());
      std::copy_n(emb.data().begin() + n * len, n * len, pb.moving.data().begin());
      const auto l = contrastive_loss(pb, margin);
      Tensor<float> g(emb.shape());
      std::copy(l.grad_fixed.data().begin(), l.grad_fixed.data().end(), g.data().begin());
      std::copy(l.grad_moving.data().begin(), l.grad_moving.data().end(), g.data().begin() + n * len);
      const auto grads = net.backward(g, false);
      adam_step<float>(adam, net.params(), grads.params);
      return l.loss;
    }
    for (int attempt = 0;; ++attempt) {
      const int classes = cfg.batch_size / 2;
      std::vector<int> chosen;
      if (classes <= num_plates) {
        // Draw the plates from a random window of neighbours some of the time
        // so that mining sees negatives close to the anchor.
        int lo = 0, span = num_plates;
        if (cfg.local_window >= classes && cfg.local_window < num_plates && rng.bernoulli(cfg.local_fraction)) {
          span = cfg.local_window;
          lo = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_plates - span + 1)));
        }
        std::vector<int> all(span);
        std::iota(all.begin(), all.end(), lo);
        for (int i = 0; i < classes; ++i) {
          const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(span - i)));
          std::swap(all[i], all[j]);
          chosen.push_back(all[i]);
        }
      } else {
        for (int i = 0; i < classes; ++i) chosen.push_back(static_cast<int>(rng.below(num_plates)));
      }
      std::vector<GrayImage> imgs;
      std::vector<int> labels;
      for (int c : chosen) {
        imgs.push_back(views.slice_view(c, rng));
        labels.push_back(c);
        imgs.push_back(views.plate_view(c, rng));
        labels.push_back(c);
      }
      const auto emb = net.forward(images_to_tensor<float>(imgs));
      TripletSet triplets;
      try {
        triplets = mine_triplets(emb, labels, cfg.mining, margin);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoValidTriplets) throw;
        if (attempt + 1 >= 100) throw;
        continue;
      }
      auto [loss, g] = batch_triplet_loss(emb, triplets, margin);
      const auto grads = net.backward(g, false);
      adam_step<float>(adam, net.params(), grads.params);
      return loss;
    }
  };

  result.best_val_mae = validate();
  result.log.push_back({0, std::numeric_limits<double>::quiet_NaN(), result.best_val_mae});
  if (progress) progress(result.log.back());
  int it = 0;
  while (it < cfg.max_iterations) {
    if (cfg.final_learning_rate) {
      const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.max_iterations));
      adam.learning_rate = *cfg.final_learning_rate + (cfg.learning_rate - *cfg.final_learning_rate) * f;
    }
    const double loss = step();
    ++it;
    TrainLogRow row{it, loss, std::nullopt};
    if (it % cfg.validate_every == 0 || it == cfg.max_iterations) {
      const double mae = validate();
      row.val_mae = mae;
      if (mae < result.best_val_mae) {
        result.best_val_mae = mae;
        result.best_iteration = it;
        result.checkpoint = Checkpoint::of(net, static_cast<std::uint64_t>(it), cfg.seed);
      }
    }
    result.log.push_back(row);
    if (progress && row.val_mae) progress(row);
    if (row.val_mae && it - result.best_iteration > cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  result.iterations_run = it;
  return result;
}

}  // namespace atlas_match
