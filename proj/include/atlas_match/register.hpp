#pragma once

// Mutual-information affine registration: a histogram MI estimator, a
// coarse-to-fine stochastic finite-difference optimizer, random
// hyperparameter search, the exhaustive MI identifier, and a CNN that
// regresses the six affine parameters directly.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "atlas_match/error.hpp"
#include "atlas_match/identify.hpp"
#include "atlas_match/imagekit.hpp"
#include "atlas_match/random.hpp"
#include "atlas_match/synthatlas.hpp"
#include "atlas_match/tensornet.hpp"

namespace atlas_match {

// ---------------------------------------------------------------------------
// Mutual information
// ---------------------------------------------------------------------------

struct JointHistogram {
  int bins = 32;
  std::vector<std::uint32_t> counts;  // row = fixed bin, column = moving bin
  std::uint64_t samples = 0;

  explicit JointHistogram(int b = 32) : bins(b) {
    require(bins >= 2, ErrorCode::InvalidArgument, "histogram needs at least 2 bins");
    counts.assign(static_cast<std::size_t>(bins) * bins, 0);
  }

  void add(int fixed_bin, int moving_bin) {
    ++counts[static_cast<std::size_t>(fixed_bin) * bins + moving_bin];
    ++samples;
  }
};

namespace detail {

// Entropy (nats) of a set of counts summing to `total`. The c*ln(c) terms are
// accumulated in 128-bit fixed point so the result does not depend on the
// order in which cells are visited.
template <typename Range>
double entropy_of_counts(const Range& counts, std::uint64_t total) {
  if (total == 0) return 0.0;
  constexpr double kScale = 0x1.0p60;
  __int128 acc = 0;
  int occupied = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    ++occupied;
    const double cd = static_cast<double>(c);
    acc += static_cast<__int128>(cd * std::log(cd) * kScale);
  }
  if (occupied <= 1) return 0.0;
  const double n = static_cast<double>(total);
  return std::log(n) - static_cast<double>(acc) / kScale / n;
}

}  // namespace detail

// MI = H(fixed) + H(moving) - H(fixed, moving), natural log, clamped at 0.
inline double mutual_information(const JointHistogram& h) {
  const std::size_t b = static_cast<std::size_t>(h.bins);
  std::vector<std::uint64_t> rows(b, 0), cols(b, 0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      rows[i] += h.counts[i * b + j];
      cols[j] += h.counts[i * b + j];
    }
  const double hf = detail::entropy_of_counts(rows, h.samples);
  const double hm = detail::entropy_of_counts(cols, h.samples);
  const double hj = detail::entropy_of_counts(h.counts, h.samples);
  return std::max(0.0, (hf + hm) - hj);
}

inline double entropy(const GrayImage& img, int bins = 32) {
  require(bins >= 2, ErrorCode::InvalidArgument, "histogram needs at least 2 bins");
  std::vector<std::uint64_t> c(bins, 0);
  for (float v : img.pixels()) ++c[intensity_bin(v, bins)];
  return detail::entropy_of_counts(c, img.size());
}

// Joint histogram over pixel pairs at `samples` (all pixels when empty).
inline JointHistogram joint_histogram(const GrayImage& fixed, const GrayImage& moving, int bins = 32,
                                      std::span<const std::uint32_t> samples = {}) {
  require(fixed.width() == moving.width() && fixed.height() == moving.height(), ErrorCode::DimensionMismatch,
          "mutual information needs equal dimensions");
  JointHistogram h(bins);
  const auto f = fixed.pixels(), m = moving.pixels();
  if (samples.empty()) {
    for (std::size_t i = 0; i < f.size(); ++i) h.add(intensity_bin(f[i], bins), intensity_bin(m[i], bins));
  } else {
    for (auto i : samples) {
      require(i < f.size(), ErrorCode::InvalidArgument, "sample index out of range");
      h.add(intensity_bin(f[i], bins), intensity_bin(m[i], bins));
    }
  }
  return h;
}

inline double mutual_information(const GrayImage& fixed, const GrayImage& moving, int bins = 32,
                                 std::span<const std::uint32_t> samples = {}) {
  return mutual_information(joint_histogram(fixed, moving, bins, samples));
}

// MI between `fixed` and `moving` warped by `t` into the fixed frame, using
// the pixel indices `samples` of the fixed image (all when empty). Returns 0
// for transforms too close to singular to invert.
class WarpedMi {
 public:
  WarpedMi(const GrayImage& fixed, const GrayImage& moving, int bins)
      : fixed_(fixed), moving_(moving), bins_(bins) {
    require(bins >= 2, ErrorCode::InvalidArgument, "histogram needs at least 2 bins");
    fixed_bins_.resize(fixed.size());
    for (std::size_t i = 0; i < fixed.size(); ++i) fixed_bins_[i] = static_cast<std::uint8_t>(intensity_bin(fixed.pixels()[i], bins));
    require(bins <= 256, ErrorCode::InvalidArgument, "at most 256 bins supported");
  }

  double operator()(const AffineTransform& t, std::span<const std::uint32_t> samples = {}) const {
    if (!t.finite() || std::abs(t.det()) < kSingularDet) return 0.0;
    const InverseMap inv(t, moving_.width(), moving_.height(), fixed_.width(), fixed_.height());
    JointHistogram h(bins_);
    const auto mp = moving_.pixels();
    const int fw = fixed_.width();
    auto add = [&](std::uint32_t idx) {
      const auto [sx, sy] = inv(static_cast<double>(idx % fw), static_cast<double>(idx / fw));
      const float v = sample_bilinear_zero(mp, moving_.width(), moving_.height(), sx, sy);
      h.add(fixed_bins_[idx], intensity_bin(clamp01(v), bins_));
    };
    if (samples.empty()) {
      for (std::uint32_t i = 0; i < fixed_.size(); ++i) add(i);
    } else {
      for (auto i : samples) add(i);
    }
    return mutual_information(h);
  }

  const GrayImage& fixed() const noexcept { return fixed_; }

 private:
  const GrayImage& fixed_;
  const GrayImage& moving_;
  int bins_;
  std::vector<std::uint8_t> fixed_bins_;
};

// ---------------------------------------------------------------------------
// Pyramid registration
// ---------------------------------------------------------------------------

enum class PyramidKind { Recursive, Shrinking, Smoothing };

constexpr std::string_view to_string(PyramidKind k) {
  switch (k) {
    case PyramidKind::Recursive: return "recursive";
    case PyramidKind::Shrinking: return "shrinking";
    case PyramidKind::Smoothing: return "smoothing";
  }
  return "recursive";
}

inline PyramidKind parse_pyramid_kind(std::string_view s) {
  for (PyramidKind k : {PyramidKind::Recursive, PyramidKind::Shrinking, PyramidKind::Smoothing}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorCode::InvalidArgument, "unknown pyramid kind '" + std::string(s) + "'");
}

struct PyramidConfig {
  int num_resolutions = 3;         // 1..7
  int max_iterations = 1000;       // per level
  int samples = 10000;             // spatial samples per iteration
  bool random_sample_region = false;
  PyramidKind pyramid = PyramidKind::Recursive;
  int bins = 32;
  double fd_delta = 0.01;          // central-difference step for all six parameters
  double step0 = 0.1;              // step = step0 / (1 + iteration / 100)
  // Sampled by the random search for protocol fidelity; the optimizer has no
  // counterpart for them.
  bool automatic_parameter_estimation = false;
  bool automatic_scales_estimation = false;

  void validate() const {
    require(num_resolutions >= 1 && num_resolutions <= 7, ErrorCode::InvalidArgument,
            "num_resolutions must be in 1..7");
    require(max_iterations >= 1, ErrorCode::InvalidArgument, "max_iterations must be >= 1");
    require(samples >= 1, ErrorCode::InvalidArgument, "samples must be >= 1");
    require(bins >= 2 && bins <= 256, ErrorCode::InvalidArgument, "bins must be in 2..256");
    require(fd_delta > 0.0 && step0 > 0.0, ErrorCode::InvalidArgument, "fd_delta and step0 must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"num_resolutions", num_resolutions},
            {"max_iterations", max_iterations},
            {"samples", samples},
            {"random_sample_region", random_sample_region},
            {"pyramid", to_string(pyramid)},
            {"bins", bins},
            {"automatic_parameter_estimation", automatic_parameter_estimation},
            {"automatic_scales_estimation", automatic_scales_estimation}};
  }
};

// Level 0 is the input; level l is l rounds of blur+decimate (recursive),
// decimate (shrinking) or blur (smoothing).
inline std::vector<GrayImage> build_pyramid(const GrayImage& img, int levels, PyramidKind kind) {
  std::vector<GrayImage> out{img};
  for (int l = 1; l < levels; ++l) {
    const GrayImage& prev = out.back();
    switch (kind) {
      case PyramidKind::Recursive: out.push_back(decimate2(binomial_blur5(prev))); break;
      case PyramidKind::Shrinking: out.push_back(decimate2(prev)); break;
      case PyramidKind::Smoothing: out.push_back(binomial_blur5(prev)); break;
    }
  }
  return out;
}

struct TracePoint {
  int level = 0;
  int iteration = 0;
  double sampled_mi = 0.0;  // MI on this iteration's samples after the step
  double best_mi = 0.0;     // best full-level MI so far on this level
};

struct RegistrationResult {
  AffineTransform transform;
  double final_mi = 0.0;  // full-image MI at `transform`
  std::vector<TracePoint> trace;
  double seconds = 0.0;

  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j{{"transform", transform.params()}, {"final_mi", final_mi}};
    if (with_timing) j["seconds"] = seconds;
    return j;
  }
};

namespace detail {

inline std::vector<std::uint32_t> draw_samples(int w, int h, int count, bool random_region, Rng& rng) {
  int x0 = 0, y0 = 0, rw = w, rh = h;
  if (random_region) {
    rw = std::max(1, w / 2);
    rh = std::max(1, h / 2);
    x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - rw + 1)));
    y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - rh + 1)));
  }
  std::vector<std::uint32_t> s;
  const std::size_t region = static_cast<std::size_t>(rw) * rh;
  if (static_cast<std::size_t>(count) >= region) {
    for (int y = y0; y < y0 + rh; ++y)
      for (int x = x0; x < x0 + rw; ++x) s.push_back(static_cast<std::uint32_t>(y * w + x));
    return s;
  }
  s.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int x = x0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(rw)));
    const int y = y0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(rh)));
    s.push_back(static_cast<std::uint32_t>(y * w + x));
  }
  return s;
}

}  // namespace detail

// Coarse-to-fine MI maximization over the six affine parameters. Each
// iteration estimates the gradient by central differences on a fresh random
// pixel sample and takes a normalized ascent step of length
// step0 / (1 + k / 100), k counting iterations across all levels. The best
// transform by full-level MI is kept per level and warm-starts the next; the
// result is the best of the identity and the per-level winners by full-image
// MI at the finest level.
inline RegistrationResult register_affine(const GrayImage& fixed, const GrayImage& moving, const PyramidConfig& cfg,
                                          std::uint64_t seed, const AffineTransform& initial = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  const auto fixed_pyr = build_pyramid(fixed, cfg.num_resolutions, cfg.pyramid);
  const auto moving_pyr = build_pyramid(moving, cfg.num_resolutions, cfg.pyramid);

  RegistrationResult result;
  std::vector<AffineTransform> candidates{AffineTransform::identity(), initial};
  std::array<double, 6> p = initial.params();
  long global_iter = 0;
  for (int level = cfg.num_resolutions - 1; level >= 0; --level) {
    const GrayImage& f = fixed_pyr[level];
    const WarpedMi mi(f, moving_pyr[level], cfg.bins);
    auto as_transform = [](const std::array<double, 6>& q) { return AffineTransform::from_params(q); };
    double best = mi(as_transform(p));
    std::array<double, 6> best_p = p;
    for (int it = 0; it < cfg.max_iterations; ++it, ++global_iter) {
      const auto samples = detail::draw_samples(f.width(), f.height(), cfg.samples, cfg.random_sample_region, rng);
      std::array<double, 6> g{};
      double norm = 0.0;
      for (int k = 0; k < 6; ++k) {
        auto hi = p, lo = p;
        hi[k] += cfg.fd_delta;
        lo[k] -= cfg.fd_delta;
        g[k] = (mi(as_transform(hi), samples) - mi(as_transform(lo), samples)) / (2.0 * cfg.fd_delta);
        norm += g[k] * g[k];
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        const double step = cfg.step0 / (1.0 + static_cast<double>(global_iter) / 100.0);
        auto next = p;
        for (int k = 0; k < 6; ++k) next[k] += step * g[k] / norm;
        if (std::abs(as_transform(next).det()) >= kSingularDet) p = next;
      }
      const double full = mi(as_transform(p));
      if (full > best) {
        best = full;
        best_p = p;
      }
      result.trace.push_back({level, it, mi(as_transform(p), samples), best});
    }
    p = best_p;
    candidates.push_back(as_transform(best_p));
  }

  const WarpedMi finest(fixed, moving, cfg.bins);
  result.final_mi = -1.0;
  for (const auto& c : candidates) {
    const double v = finest(c);
    if (v > result.final_mi) {
      result.final_mi = v;
      result.transform = c;
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Random hyperparameter search
// ---------------------------------------------------------------------------

inline PyramidConfig sample_pyramid_config(Rng& rng, const PyramidConfig& base = {}) {
  PyramidConfig c = base;
  c.automatic_parameter_estimation = rng.bernoulli(0.5);
  c.automatic_scales_estimation = rng.bernoulli(0.5);
  c.num_resolutions = 1 + static_cast<int>(rng.below(7));
  c.max_iterations = 200 * (1 + static_cast<int>(rng.below(15)));
  c.random_sample_region = rng.bernoulli(0.5);
  constexpr std::array<PyramidKind, 3> kinds{PyramidKind::Recursive, PyramidKind::Shrinking, PyramidKind::Smoothing};
  c.pyramid = kinds[rng.below(3)];
  return c;
}

struct TrialRecord {
  int trial = 0;
  PyramidConfig config;
  double final_mi = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j{{"trial", trial}, {"config", config.to_json()}, {"final_mi", final_mi}};
    if (with_timing) j["seconds"] = seconds;
    return j;
  }
};

struct SearchResult {
  RegistrationResult best;
  int best_trial = 0;
  std::vector<TrialRecord> trials;
};

// Draws `trials` configurations from the hyperparameter grids and keeps the
// registration with the highest final MI (earliest trial on ties).
inline SearchResult random_search(const GrayImage& fixed, const GrayImage& moving, int trials, std::uint64_t seed,
                                  const PyramidConfig& base = {}) {
  require(trials >= 1, ErrorCode::InvalidArgument, "random search needs at least one trial");
  Rng cfg_rng(derive_seed(seed, 0));
  SearchResult out;
  for (int k = 0; k < trials; ++k) {
    const PyramidConfig cfg = sample_pyramid_config(cfg_rng, base);
    auto r = register_affine(fixed, moving, cfg, derive_seed(seed, static_cast<std::uint64_t>(k) + 1));
    out.trials.push_back({k, cfg, r.final_mi, r.seconds});
    if (k == 0 || r.final_mi > out.best.final_mi) {
      out.best = std::move(r);
      out.best_trial = k;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive MI identification (baseline)
// ---------------------------------------------------------------------------

struct MiIdentification {
  RankingResult ranking;
  std::vector<double> plate_mi;  // final MI per plate, plate order
  double seconds = 0.0;
};

// Registers the slice against every plate and ranks plates by descending MI.
inline MiIdentification identify_by_mi(const GrayImage& slice, std::span<const GrayImage> plates,
                                       const PyramidConfig& cfg, std::uint64_t seed,
                                       std::optional<int> ground_truth = std::nullopt, std::string query_id = {}) {
  require(!plates.empty(), ErrorCode::IndexEmpty, "no plates to register against");
  const auto t0 = std::chrono::steady_clock::now();
  MiIdentification out;
  std::vector<double> keys;
  for (std::size_t i = 0; i < plates.size(); ++i) {
    const GrayImage moving = resize_bilinear(plates[i], slice.width(), slice.height());
    const auto r = register_affine(slice, moving, cfg, derive_seed(seed, i));
    out.plate_mi.push_back(r.final_mi);
    keys.push_back(-r.final_mi);
  }
  out.ranking = rank_by_key(keys, ground_truth, std::move(query_id));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline Evaluation evaluate_by_mi(std::span<const LabeledImage> queries, std::span<const GrayImage> plates,
                                 const PyramidConfig& cfg, std::uint64_t seed) {
  if (queries.empty()) fail(ErrorCode::EmptyTestSet, "no test slices");
  Evaluation ev;
  std::vector<int> ranks;
  double secs = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto r = identify_by_mi(queries[q].image, plates, cfg, derive_seed(seed, q), queries[q].plate, queries[q].id);
    secs += r.seconds;
    ranks.push_back(*r.ranking.ground_truth_rank);
    ev.rankings.push_back(std::move(r.ranking));
  }
  ev.report = report_from_ranks(ranks, secs);
  return ev;
}

// ---------------------------------------------------------------------------
// Affine regression network
// ---------------------------------------------------------------------------

// Packs (moving, fixed) into a [1, 2, S, S] tensor.
inline Tensor<float> pair_tensor(const GrayImage& moving, const GrayImage& fixed, int size) {
  const GrayImage m = resize_bilinear(moving, size, size), f = resize_bilinear(fixed, size, size);
  const std::size_t n = static_cast<std::size_t>(size) * size;
  Tensor<float> t({1, 2, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
  std::copy(m.pixels().begin(), m.pixels().end(), t.data().begin());
  std::copy(f.pixels().begin(), f.pixels().end(), t.data().begin() + n);
  return t;
}

inline AffineTransform predict_affine(const Network<float>& net, const GrayImage& moving, const GrayImage& fixed) {
  const auto& s = net.spec();
  if (s.in_channels != 2 || s.in_height != s.in_width || s.output_shape() != ActShape{6}) {
    fail(ErrorCode::ArchitectureMismatch, "regressor must map a 2-channel square pair to 6 outputs");
  }
  const auto out = net.infer(pair_tensor(moving, fixed, s.in_height));
  return {out[0], out[1], out[2], out[3], out[4], out[5]};
}

struct RegressorConfig {
  int input_size = 128;
  int pretrain_iterations = 3000;
  int finetune_iterations = 100;
  int pairs_per_iteration = 4;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  int bins = 32;
  double fd_delta = 0.01;
  // Random transforms for pre-training.
  double max_rotation_deg = 15.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation = 0.1;
  double max_crop = 0.1;  // light crop of the fixed image
};

inline AffineTransform random_registration_transform(const RegressorConfig& cfg, Rng& rng) {
  const double deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  const double s = rng.uniform(cfg.min_scale, cfg.max_scale);
  return AffineTransform::similarity(deg, s, rng.uniform(-cfg.max_translation, cfg.max_translation),
                                     rng.uniform(-cfg.max_translation, cfg.max_translation));
}

struct RegistrationPair {
  GrayImage moving;
  GrayImage fixed;
};

struct RegressorTrainLog {
  std::vector<double> pretrain_loss;  // mean -MI per iteration
  std::vector<double> finetune_loss;
  double finetune_initial_mi = 0.0;
  double finetune_best_mi = 0.0;
};

struct RegressorResult {
  Checkpoint checkpoint;
  RegressorTrainLog log;
};

namespace detail {

// Mean -MI over `pairs` after one Adam step on its finite-difference gradient.
inline double regressor_step(Network<float>& net, AdamState& adam, const std::vector<RegistrationPair>& pairs,
                             const RegressorConfig& cfg) {
  std::vector<float> grad_acc(net.params().size(), 0.0f);
  double loss = 0.0;
  for (const auto& pair : pairs) {
    const auto out = net.forward(pair_tensor(pair.moving, pair.fixed, cfg.input_size));
    std::array<double, 6> p{};
    for (int k = 0; k < 6; ++k) p[k] = out[k];
    const WarpedMi mi(pair.fixed, pair.moving, cfg.bins);
    loss -= mi(AffineTransform::from_params(p));
    Tensor<float> upstream({1, 6});
    for (int k = 0; k < 6; ++k) {
      auto hi = p, lo = p;
      hi[k] += cfg.fd_delta;
      lo[k] -= cfg.fd_delta;
      const double d = (mi(AffineTransform::from_params(hi)) - mi(AffineTransform::from_params(lo))) / (2.0 * cfg.fd_delta);
      upstream[k] = static_cast<float>(-d / static_cast<double>(pairs.size()));
    }
    const auto g = net.backward(upstream, false);
    for (std::size_t i = 0; i < grad_acc.size(); ++i) grad_acc[i] += g.params[i];
  }
  adam_step<float>(adam, net.params(), grad_acc);
  return loss / static_cast<double>(pairs.size());
}

inline double mean_pair_mi(const Network<float>& net, const std::vector<RegistrationPair>& pairs, int bins) {
  double acc = 0.0;
  for (const auto& p : pairs) {
    acc += WarpedMi(p.fixed, p.moving, bins)(predict_affine(net, p.moving, p.fixed));
  }
  return acc / static_cast<double>(pairs.size());
}

}  // namespace detail

// A pre-training pair: a plate as the moving image and a randomly transformed,
// lightly cropped copy of it as the fixed image.
inline RegistrationPair synthetic_registration_pair(const std::vector<GrayImage>& plates, const RegressorConfig& cfg,
                                                    Rng& rng, AffineTransform* truth = nullptr) {
  const auto& plate = plates[rng.below(plates.size())];
  const GrayImage moving = resize_bilinear(plate, cfg.input_size, cfg.input_size);
  const auto t = random_registration_transform(cfg, rng);
  if (truth) *truth = t;
  const GrayImage fixed = crop_and_pad(warp_affine(moving, t), rng.uniform(0.0, cfg.max_crop));
  return {moving, fixed};
}

// Stage 1 trains on synthetic pairs from the plates; stage 2 fine-tunes on
// `finetune_pairs` without extra transforms and keeps the parameters with the
// best mean MI on those pairs (the stage-1 result included). The loss is -MI
// of the warped moving image; its gradient w.r.t. the six predicted
// parameters comes from central differences and is back-propagated from the
// output layer.
inline RegressorResult train_regressor(const std::vector<GrayImage>& plates,
                                       const std::vector<RegistrationPair>& finetune_pairs,
                                       const RegressorConfig& cfg) {
  require(!plates.empty(), ErrorCode::InvalidArgument, "regressor pre-training needs plates");
  require(cfg.pairs_per_iteration >= 1, ErrorCode::InvalidArgument, "pairs_per_iteration must be >= 1");
  Network<float> net(default_regression_net(cfg.input_size));
  net.init_he(derive_seed(cfg.seed, 1));
  init_identity_head(net);
  AdamState adam;
  adam.learning_rate = cfg.learning_rate;
  Rng rng(derive_seed(cfg.seed, 2));
  RegressorResult result;

  for (int it = 0; it < cfg.pretrain_iterations; ++it) {
    std::vector<RegistrationPair> batch;
    for (int k = 0; k < cfg.pairs_per_iteration; ++k) batch.push_back(synthetic_registration_pair(plates, cfg, rng));
    result.log.pretrain_loss.push_back(detail::regressor_step(net, adam, batch, cfg));
  }

  std::uint64_t step = static_cast<std::uint64_t>(cfg.pretrain_iterations);
  if (!finetune_pairs.empty() && cfg.finetune_iterations > 0) {
    std::vector<RegistrationPair> resized;
    for (const auto& p : finetune_pairs) {
      resized.push_back({resize_bilinear(p.moving, cfg.input_size, cfg.input_size),
                         resize_bilinear(p.fixed, cfg.input_size, cfg.input_size)});
    }
    AdamState fine;
    fine.learning_rate = cfg.learning_rate;
    std::vector<float> best(net.params().begin(), net.params().end());
    double best_mi = detail::mean_pair_mi(net, resized, cfg.bins);
    result.log.finetune_initial_mi = best_mi;
    std::uint64_t best_step = step;
    for (int it = 0; it < cfg.finetune_iterations; ++it) {
      result.log.finetune_loss.push_back(detail::regressor_step(net, fine, resized, cfg));
      const double m = detail::mean_pair_mi(net, resized, cfg.bins);
      if (m > best_mi) {
        best_mi = m;
        best.assign(net.params().begin(), net.params().end());
        best_step = step + it + 1;
      }
    }
    net.set_params(best);
    result.log.finetune_best_mi = best_mi;
    step = best_step;
  }
  result.checkpoint = Checkpoint::of(net, step, cfg.seed);
  return result;
}

}  // namespace atlas_match
