#pragma once

// Contrastive and triplet losses with analytic gradients, triplet
// classification and in-batch mining, and pair sampling.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "atlas_match/error.hpp"
#include "atlas_match/random.hpp"
#include "atlas_match/tensornet.hpp"

namespace atlas_match {

struct MarginConfig {
  double m = 1.0;

  static MarginConfig contrastive() { return {1.0}; }
  static MarginConfig triplet() { return {0.5}; }

  void validate() const { require(std::isfinite(m) && m > 0.0, ErrorCode::InvalidArgument, "margin must be > 0"); }
};

template <typename T>
double euclidean_distance(std::span<const T> a, std::span<const T> b) {
  require(a.size() == b.size(), ErrorCode::LengthMismatch, "embedding lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double euclidean_distance(const std::vector<float>& a, const std::vector<float>& b) {
  return euclidean_distance<float>(std::span<const float>(a), std::span<const float>(b));
}

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

template <typename T = float>
struct PairBatch {
  Tensor<T> fixed;   // [B, L], h_F
  Tensor<T> moving;  // [B, L], h_M
  std::vector<bool> positive;
};

template <typename T = float>
struct PairLoss {
  double loss = 0.0;
  Tensor<T> grad_fixed;
  Tensor<T> grad_moving;
};

// Mean over the batch of 1/2 d^2 (positive) or 1/2 max(0, m - d)^2 (negative).
// The subgradient of d at d = 0 is taken as 0.
template <typename T>
PairLoss<T> contrastive_loss(const PairBatch<T>& batch, const MarginConfig& margin) {
  margin.validate();
  require(batch.fixed.rank() == 2 && batch.fixed.shape() == batch.moving.shape(), ErrorCode::LengthMismatch,
          "pair embeddings must both be [B, L]");
  const std::size_t n = batch.fixed.dim(0), len = batch.fixed.dim(1);
  require(batch.positive.size() == n && n >= 1, ErrorCode::LengthMismatch, "one label per pair required");
  PairLoss<T> out{0.0, Tensor<T>(batch.fixed.shape()), Tensor<T>(batch.moving.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    const auto hf = batch.fixed.row(b), hm = batch.moving.row(b);
    const double d = euclidean_distance<T>(hf, hm);
    double coeff = 0.0;  // dL/dh_F = coeff * (h_F - h_M)
    if (batch.positive[b]) {
      out.loss += 0.5 * d * d;
      coeff = 1.0;
    } else if (d < margin.m) {
      const double gap = margin.m - d;
      out.loss += 0.5 * gap * gap;
      coeff = d > 0.0 ? -gap / d : 0.0;
    }
    if (coeff == 0.0) continue;
    auto gf = out.grad_fixed.row(b), gm = out.grad_moving.row(b);
    for (std::size_t i = 0; i < len; ++i) {
      const double g = coeff * inv_n * (static_cast<double>(hf[i]) - hm[i]);
      gf[i] = static_cast<T>(g);
      gm[i] = static_cast<T>(-g);
    }
  }
  out.loss *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Triplet loss
// ---------------------------------------------------------------------------

struct TripletGrad {
  double loss = 0.0;
  std::vector<double> anchor, positive, negative;
};

// max(d(A, P) - d(A, N) + m, 0) with gradients; zero gradients when inactive.
template <typename T>
TripletGrad triplet_loss(std::span<const T> a, std::span<const T> p, std::span<const T> n,
                         const MarginConfig& margin) {
  margin.validate();
  require(a.size() == p.size() && a.size() == n.size(), ErrorCode::LengthMismatch, "embedding lengths differ");
  const double dap = euclidean_distance<T>(a, p), dan = euclidean_distance<T>(a, n);
  TripletGrad out;
  out.anchor.assign(a.size(), 0.0);
  out.positive.assign(a.size(), 0.0);
  out.negative.assign(a.size(), 0.0);
  const double raw = dap - dan + margin.m;
  if (raw <= 0.0) return out;
  out.loss = raw;
  const double ip = dap > 0.0 ? 1.0 / dap : 0.0, in = dan > 0.0 ? 1.0 / dan : 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double up = (static_cast<double>(a[i]) - p[i]) * ip;
    const double un = (static_cast<double>(a[i]) - n[i]) * in;
    out.anchor[i] = up - un;
    out.positive[i] = -up;
    out.negative[i] = un;
  }
  return out;
}

inline TripletGrad triplet_loss(const std::vector<float>& a, const std::vector<float>& p,
                                const std::vector<float>& n, const MarginConfig& margin) {
  return triplet_loss<float>(std::span<const float>(a), std::span<const float>(p), std::span<const float>(n), margin);
}

enum class TripletKind { Easy, SemiHard, Hard };
enum class MiningMode { SemiHard, Hard, All };

constexpr std::string_view to_string(MiningMode m) {
  switch (m) {
    case MiningMode::SemiHard: return "semi_hard";
    case MiningMode::Hard: return "hard";
    case MiningMode::All: return "all";
  }
  return "semi_hard";
}

inline MiningMode parse_mining_mode(std::string_view s) {
  for (MiningMode m : {MiningMode::SemiHard, MiningMode::Hard, MiningMode::All}) {
    if (to_string(m) == s) return m;
  }
  fail(ErrorCode::InvalidArgument, "unknown mining mode '" + std::string(s) + "'");
}

// Hard: the negative is closer than the positive. Semi-hard: the negative is
// no closer than the positive but the loss is still positive.
inline TripletKind classify_triplet(double dap, double dan, const MarginConfig& margin) {
  if (dan < dap) return TripletKind::Hard;
  if (dan < dap + margin.m) return TripletKind::SemiHard;
  return TripletKind::Easy;
}

struct Triplet {
  std::size_t anchor, positive, negative;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

using TripletSet = std::vector<Triplet>;

inline bool mining_keeps(MiningMode mode, TripletKind kind) {
  switch (mode) {
    case MiningMode::SemiHard: return kind == TripletKind::SemiHard;
    case MiningMode::Hard: return kind == TripletKind::Hard;
    case MiningMode::All: return kind != TripletKind::Easy;
  }
  return false;
}

// All (a, p, n) with label(a) == label(p), a != p, label(n) != label(a) whose
// kind matches `mode`, in lexicographic order.
template <typename T>
TripletSet mine_triplets(const Tensor<T>& embeddings, std::span<const int> labels, MiningMode mode,
                         const MarginConfig& margin) {
  margin.validate();
  require(embeddings.rank() == 2 && embeddings.dim(0) == labels.size(), ErrorCode::LengthMismatch,
          "one label per embedding row required");
  const std::size_t n = labels.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist[i * n + j] = dist[j * n + i] = euclidean_distance<T>(embeddings.row(i), embeddings.row(j));
  TripletSet out;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        if (mining_keeps(mode, classify_triplet(dist[a * n + p], dist[a * n + q], margin))) {
          out.push_back({a, p, q});
        }
      }
    }
  }
  if (out.empty()) fail(ErrorCode::NoValidTriplets, "no triplet in the batch matches the mining mode");
  return out;
}

// Mean triplet loss over `triplets` and its gradient w.r.t. every embedding row.
template <typename T>
std::pair<double, Tensor<T>> batch_triplet_loss(const Tensor<T>& embeddings, const TripletSet& triplets,
                                                const MarginConfig& margin) {
  require(!triplets.empty(), ErrorCode::NoValidTriplets, "empty triplet set");
  Tensor<T> grad(embeddings.shape());
  std::vector<double> acc(embeddings.size(), 0.0);
  const std::size_t len = embeddings.dim(1);
  double loss = 0.0;
  for (const auto& t : triplets) {
    const auto g = triplet_loss<T>(embeddings.row(t.anchor), embeddings.row(t.positive), embeddings.row(t.negative),
                                   margin);
    loss += g.loss;
    for (std::size_t i = 0; i < len; ++i) {
      acc[t.anchor * len + i] += g.anchor[i];
      acc[t.positive * len + i] += g.positive[i];
      acc[t.negative * len + i] += g.negative[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(triplets.size());
  for (std::size_t i = 0; i < acc.size(); ++i) grad[i] = static_cast<T>(acc[i] * inv);
  return {loss * inv, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Pair sampling
// ---------------------------------------------------------------------------

struct SampledPair {
  std::size_t item = 0;  // index into the training items
  int plate = 0;         // plate paired with the item
  bool positive = true;
};

// Endless stream alternating positive pairs (item, its ground-truth plate) and
// negative pairs (item, a uniformly drawn different plate).
class PairSampler {
 public:
  PairSampler(std::vector<int> item_plates, int num_plates, std::uint64_t seed)
      : plates_(std::move(item_plates)), num_plates_(num_plates), rng_(seed) {
    require(num_plates_ >= 2, ErrorCode::InvalidArgument, "pair sampling needs at least 2 plates");
    require(!plates_.empty(), ErrorCode::InvalidArgument, "pair sampling needs at least one item");
    for (int p : plates_) require(p >= 0 && p < num_plates_, ErrorCode::InvalidArgument, "item plate out of range");
  }

  SampledPair next() {
    SampledPair s;
    s.item = static_cast<std::size_t>(rng_.below(plates_.size()));
    s.positive = (emitted_++ % 2) == 0;
    const int gt = plates_[s.item];
    if (s.positive) {
      s.plate = gt;
    } else {
      int other = static_cast<int>(rng_.below(static_cast<std::uint64_t>(num_plates_ - 1)));
      if (other >= gt) ++other;
      s.plate = other;
    }
    return s;
  }

  std::vector<SampledPair> take(std::size_t n) {
    std::vector<SampledPair> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  std::vector<int> plates_;
  int num_plates_;
  Rng rng_;
  std::uint64_t emitted_ = 0;
};

}  // namespace atlas_match
