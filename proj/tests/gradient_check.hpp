#pragma once

// Analytic-versus-numeric gradient comparison shared by the unit tests and
// the acceptance runner. Analytic gradients come from the f32 network; the
// numeric side is a central difference on an f64 copy with the same values.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "atlas_match/metric.hpp"
#include "atlas_match/random.hpp"
#include "atlas_match/tensornet.hpp"

namespace gradcheck {

using namespace atlas_match;

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

struct Worst {
  double error = 0.0;
  std::string where;

  void update(double e, const std::string& w) {
    if (where.empty() || e > error) {
      error = e;
      where = w;
    }
  }
};

// Checks every parameter block (weights and biases per layer) and the input
// gradient of `spec` for loss = sum(r * output) with random r. The small step
// keeps perturbations from crossing ReLU and max-pool kinks.
inline Worst check_network(const NetworkSpec& spec, std::size_t batch, std::uint64_t seed, double delta = 1e-5) {
  Rng rng(seed);
  Network<float> netf(spec);
  netf.init_he(derive_seed(seed, 1));
  // Nonzero biases so every path is exercised.
  {
    std::vector<float> p(netf.params().begin(), netf.params().end());
    for (auto& v : p) v += static_cast<float>(0.05 * rng.normal());
    netf.set_params(p);
  }
  std::vector<std::size_t> in_shape{batch, static_cast<std::size_t>(spec.in_channels),
                                    static_cast<std::size_t>(spec.in_height), static_cast<std::size_t>(spec.in_width)};
  Tensor<float> xf(in_shape);
  for (std::size_t i = 0; i < xf.size(); ++i) xf[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto out = netf.forward(xf);
  Tensor<float> rf(out.shape());
  std::vector<double> r(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    rf[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    r[i] = rf[i];
  }
  const auto g = netf.backward(rf, true);

  Network<double> netd(spec);
  std::vector<double> pd(netf.params().begin(), netf.params().end());
  Tensor<double> xd(in_shape);
  for (std::size_t i = 0; i < xf.size(); ++i) xd[i] = xf[i];
  auto loss = [&](const std::vector<double>& params, const Tensor<double>& x) {
    netd.set_params(params);
    const auto o = netd.infer(x);
    double l = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) l += r[i] * o[i];
    return l;
  };

  Worst worst;
  const auto counts = spec.layer_param_counts();
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (counts[li] == 0) continue;
    const auto& l = spec.layers[li];
    const std::size_t n_bias = l.kind == LayerKind::Conv2d ? l.out_channels : l.out_dim;
    const std::size_t off = netf.param_offset(li), n_weights = counts[li] - n_bias;
    for (int part = 0; part < 2; ++part) {
      const std::size_t b = off + (part == 0 ? 0 : n_weights), e = b + (part == 0 ? n_weights : n_bias);
      std::vector<double> analytic, numeric;
      for (std::size_t i = b; i < e; ++i) {
        auto hi = pd, lo = pd;
        hi[i] += delta;
        lo[i] -= delta;
        numeric.push_back((loss(hi, xd) - loss(lo, xd)) / (2.0 * delta));
        analytic.push_back(g.params[i]);
      }
      worst.update(relative_error(analytic, numeric),
                   "layer " + std::to_string(li) + " " + std::string(to_string(l.kind)) + (part == 0 ? " weights" : " bias"));
    }
  }
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    auto hi = xd, lo = xd;
    hi[i] += delta;
    lo[i] -= delta;
    numeric.push_back((loss(pd, hi) - loss(pd, lo)) / (2.0 * delta));
    analytic.push_back(g.input[i]);
  }
  worst.update(relative_error(analytic, numeric), "input");
  return worst;
}

// Small networks that together exercise every layer kind, alone and chained.
inline std::vector<std::pair<std::string, NetworkSpec>> layer_suite() {
  std::vector<std::pair<std::string, NetworkSpec>> out;
  out.push_back({"conv2d", {2, 6, 6, {LayerSpec::conv2d(3, 3)}}});
  out.push_back({"conv2d_stride2", {2, 7, 7, {LayerSpec::conv2d(2, 3, 2)}}});
  out.push_back({"conv2d_1x1", {3, 4, 5, {LayerSpec::conv2d(2, 1)}}});
  out.push_back({"maxpool2", {2, 6, 8, {LayerSpec::maxpool2()}}});
  out.push_back({"relu", {1, 5, 5, {LayerSpec::relu()}}});
  out.push_back({"flatten", {2, 3, 3, {LayerSpec::flatten()}}});
  out.push_back({"dense", {1, 3, 4, {LayerSpec::flatten(), LayerSpec::dense(5)}}});
  out.push_back({"global_avg_pool", {3, 4, 4, {LayerSpec::global_avg_pool()}}});
  out.push_back({"chain", {1, 8, 8,
                           {LayerSpec::conv2d(4, 3), LayerSpec::relu(), LayerSpec::maxpool2(), LayerSpec::conv2d(4, 3),
                            LayerSpec::relu(), LayerSpec::global_avg_pool(), LayerSpec::dense(6), LayerSpec::relu(),
                            LayerSpec::dense(3)}}});
  out.push_back({"chain_flatten", {2, 8, 8,
                                   {LayerSpec::conv2d(3, 3, 2), LayerSpec::relu(), LayerSpec::maxpool2(),
                                    LayerSpec::flatten(), LayerSpec::dense(4)}}});
  NetworkSpec normalized{1, 6, 6, {LayerSpec::conv2d(2, 3), LayerSpec::relu(), LayerSpec::global_avg_pool()}};
  normalized.input_shift = 0.5;
  normalized.input_gain = 2.0;
  out.push_back({"input_norm", normalized});
  return out;
}

// Contrastive loss gradient versus central differences on random pairs.
inline double check_contrastive(std::uint64_t seed, double delta = 1e-3) {
  Rng rng(seed);
  const std::size_t n = 6, len = 5;
  PairBatch<double> pb{Tensor<double>({n, len}), Tensor<double>({n, len}), {}};
  for (std::size_t i = 0; i < n * len; ++i) {
    pb.fixed[i] = rng.normal() * 0.4;
    pb.moving[i] = rng.normal() * 0.4;
  }
  for (std::size_t i = 0; i < n; ++i) pb.positive.push_back(i % 2 == 0);
  const MarginConfig m = MarginConfig::contrastive();
  const auto l = contrastive_loss(pb, m);
  std::vector<double> analytic, numeric;
  for (int side = 0; side < 2; ++side) {
    for (std::size_t i = 0; i < n * len; ++i) {
      auto hi = pb, lo = pb;
      (side == 0 ? hi.fixed : hi.moving)[i] += delta;
      (side == 0 ? lo.fixed : lo.moving)[i] -= delta;
      numeric.push_back((contrastive_loss(hi, m).loss - contrastive_loss(lo, m).loss) / (2.0 * delta));
      analytic.push_back((side == 0 ? l.grad_fixed : l.grad_moving)[i]);
    }
  }
  return relative_error(analytic, numeric);
}

// Triplet loss gradient versus central differences. Even seeds draw close
// negatives (usually active), odd seeds distant ones (usually inactive).
inline double check_triplet(std::uint64_t seed, double delta = 1e-3) {
  Rng rng(seed);
  const std::size_t len = 6;
  std::vector<double> a(len), p(len), n(len);
  for (std::size_t i = 0; i < len; ++i) {
    a[i] = rng.normal();
    p[i] = a[i] + 0.3 * rng.normal();
    n[i] = a[i] + (seed % 2 == 0 ? 0.3 : 2.0) * rng.normal();
  }
  const MarginConfig m = MarginConfig::triplet();
  auto loss = [&](const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& z) {
    return triplet_loss<double>(std::span<const double>(x), std::span<const double>(y), std::span<const double>(z), m).loss;
  };
  const auto g = triplet_loss<double>(std::span<const double>(a), std::span<const double>(p), std::span<const double>(n), m);
  std::vector<double> analytic, numeric;
  std::vector<double>* vecs[3] = {&a, &p, &n};
  const std::vector<double>* grads[3] = {&g.anchor, &g.positive, &g.negative};
  for (int k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < len; ++i) {
      const double keep = (*vecs[k])[i];
      (*vecs[k])[i] = keep + delta;
      const double hi = loss(a, p, n);
      (*vecs[k])[i] = keep - delta;
      const double lo = loss(a, p, n);
      (*vecs[k])[i] = keep;
      numeric.push_back((hi - lo) / (2.0 * delta));
      analytic.push_back((*grads[k])[i]);
    }
  }
  return relative_error(analytic, numeric);
}

}  // namespace gradcheck
