#pragma once

// A small dense-tensor CNN engine: a fixed family of layers with forward and
// reverse-mode passes, Adam, and a binary checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "atlas_match/error.hpp"
#include "atlas_match/imagekit.hpp"
#include "atlas_match/random.hpp"

namespace atlas_match {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T = float>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == count(shape_), ErrorCode::ShapeMismatch, "tensor data length does not match shape");
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Row `i` of the leading axis.
  std::span<T> row(std::size_t i) {
    const std::size_t n = data_.size() / shape_.at(0);
    return std::span<T>(data_).subspan(i * n, n);
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t n = data_.size() / shape_.at(0);
    return std::span<const T>(data_).subspan(i * n, n);
  }

  void reshape(std::vector<std::size_t> shape) {
    require(count(shape) == data_.size(), ErrorCode::ShapeMismatch, "reshape changes element count");
    shape_ = std::move(shape);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

// Packs grayscale images into a [B, 1, H, W] tensor.
template <typename T = float>
Tensor<T> images_to_tensor(std::span<const GrayImage> images) {
  require(!images.empty(), ErrorCode::ShapeMismatch, "no images to pack");
  const std::size_t h = images[0].height(), w = images[0].width();
  Tensor<T> t({images.size(), 1, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    require(static_cast<std::size_t>(images[b].height()) == h && static_cast<std::size_t>(images[b].width()) == w,
            ErrorCode::ShapeMismatch, "images in a batch must share dimensions");
    std::copy(images[b].pixels().begin(), images[b].pixels().end(), t.row(b).begin());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

enum class LayerKind { Conv2d, MaxPool2, Relu, Flatten, Dense, GlobalAvgPool };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int out_channels = 0;  // conv2d
  int kernel = 0;        // conv2d, zero padding kernel/2
  int stride = 1;        // conv2d
  int out_dim = 0;       // dense

  static LayerSpec conv2d(int out_channels, int kernel, int stride = 1) {
    return {LayerKind::Conv2d, out_channels, kernel, stride, 0};
  }
  static LayerSpec maxpool2() { return {LayerKind::MaxPool2}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec dense(int out_dim) { return {LayerKind::Dense, 0, 0, 1, out_dim}; }
  static LayerSpec global_avg_pool() { return {LayerKind::GlobalAvgPool}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

constexpr std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Relu: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
  }
  return "relu";
}

inline LayerKind parse_layer_kind(std::string_view s) {
  for (LayerKind k : {LayerKind::Conv2d, LayerKind::MaxPool2, LayerKind::Relu, LayerKind::Flatten,
                      LayerKind::Dense, LayerKind::GlobalAvgPool}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorCode::ArchitectureMismatch, "unknown layer type '" + std::string(s) + "'");
}

// Per-sample activation shape: {C, H, W} for feature maps, {N} for vectors.
using ActShape = std::vector<std::size_t>;

struct NetworkSpec {
  int in_channels = 1;
  int in_height = 0;
  int in_width = 0;
  std::vector<LayerSpec> layers;
  // Fixed input normalization applied before the first layer: (x - shift) * gain.
  double input_shift = 0.0;
  double input_gain = 1.0;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  // Activation shapes: element 0 is the input, element i+1 the output of layer i.
  std::vector<ActShape> shapes() const {
    require(in_channels >= 1 && in_height >= 1 && in_width >= 1, ErrorCode::ShapeMismatch,
            "network input dimensions must be >= 1");
    std::vector<ActShape> out{{std::size_t(in_channels), std::size_t(in_height), std::size_t(in_width)}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const ActShape& s = out.back();
      const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + ")";
      switch (l.kind) {
        case LayerKind::Conv2d: {
          require(s.size() == 3, ErrorCode::ShapeMismatch, where + " needs a feature map");
          require(l.out_channels >= 1 && l.kernel >= 1 && l.stride >= 1, ErrorCode::ShapeMismatch,
                  where + " has invalid parameters");
          const long pad = l.kernel / 2;
          const long oh = (static_cast<long>(s[1]) + 2 * pad - l.kernel) / l.stride + 1;
          const long ow = (static_cast<long>(s[2]) + 2 * pad - l.kernel) / l.stride + 1;
          require(oh >= 1 && ow >= 1, ErrorCode::ShapeMismatch, where + " output is empty");
          out.push_back({std::size_t(l.out_channels), std::size_t(oh), std::size_t(ow)});
          break;
        }
        case LayerKind::MaxPool2:
          require(s.size() == 3 && s[1] >= 2 && s[2] >= 2, ErrorCode::ShapeMismatch,
                  where + " needs a feature map of at least 2x2");
          out.push_back({s[0], s[1] / 2, s[2] / 2});
          break;
        case LayerKind::Relu: out.push_back(s); break;
        case LayerKind::Flatten: out.push_back({Tensor<float>::count(s)}); break;
        case LayerKind::GlobalAvgPool:
          require(s.size() == 3, ErrorCode::ShapeMismatch, where + " needs a feature map");
          out.push_back({s[0]});
          break;
        case LayerKind::Dense:
          require(s.size() == 1, ErrorCode::ShapeMismatch, where + " needs a vector input");
          require(l.out_dim >= 1, ErrorCode::ShapeMismatch, where + " needs out_dim >= 1");
          out.push_back({std::size_t(l.out_dim)});
          break;
      }
    }
    return out;
  }

  ActShape output_shape() const { return shapes().back(); }

  // Number of weights and biases in each layer.
  std::vector<std::size_t> layer_param_counts() const {
    const auto sh = shapes();
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.kind == LayerKind::Conv2d) {
        counts.push_back(std::size_t(l.out_channels) * sh[i][0] * l.kernel * l.kernel + l.out_channels);
      } else if (l.kind == LayerKind::Dense) {
        counts.push_back(std::size_t(l.out_dim) * sh[i][0] + l.out_dim);
      } else {
        counts.push_back(0);
      }
    }
    return counts;
  }

  std::size_t param_count() const {
    const auto c = layer_param_counts();
    return std::accumulate(c.begin(), c.end(), std::size_t{0});
  }

  nlohmann::json to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
      nlohmann::json j{{"type", to_string(l.kind)}};
      if (l.kind == LayerKind::Conv2d) {
        j["out_channels"] = l.out_channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["padding"] = l.kernel / 2;
      } else if (l.kind == LayerKind::Dense) {
        j["out_dim"] = l.out_dim;
      }
      layers_json.push_back(std::move(j));
    }
    return {{"input", {in_channels, in_height, in_width}},
            {"input_norm", {{"shift", input_shift}, {"gain", input_gain}}},
            {"layers", std::move(layers_json)}};
  }

  static NetworkSpec from_json(const nlohmann::json& j) {
    NetworkSpec s;
    try {
      const auto& in = j.at("input");
      s.in_channels = in.at(0).get<int>();
      s.in_height = in.at(1).get<int>();
      s.in_width = in.at(2).get<int>();
      if (j.contains("input_norm")) {
        s.input_shift = j["input_norm"].at("shift").get<double>();
        s.input_gain = j["input_norm"].at("gain").get<double>();
      }
      for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.kind = parse_layer_kind(lj.at("type").get<std::string>());
        if (l.kind == LayerKind::Conv2d) {
          l.out_channels = lj.at("out_channels").get<int>();
          l.kernel = lj.at("kernel").get<int>();
          l.stride = lj.at("stride").get<int>();
        } else if (l.kind == LayerKind::Dense) {
          l.out_dim = lj.at("out_dim").get<int>();
        }
        s.layers.push_back(l);
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ArchitectureMismatch, std::string("malformed architecture description: ") + e.what());
    }
    return s;
  }
};

// Embedding network: four conv(3x3)+relu+maxpool blocks with 8/16/32/64
// channels, global average pooling, dense(128), relu, dense(L). Inputs in
// [0, 1] are first mapped to [-1, 1].
inline NetworkSpec default_embed_net(int input_size, int embed_dim = 64) {
  if (input_size != 64 && input_size != 128) {
    fail(ErrorCode::UnsupportedInputSize, "embedding net supports input sizes 64 and 128");
  }
  require(embed_dim >= 1, ErrorCode::InvalidArgument, "embedding dimension must be >= 1");
  NetworkSpec s{1, input_size, input_size, {}};
  s.input_shift = 0.5;
  s.input_gain = 2.0;
  for (int c : {8, 16, 32, 64}) {
    s.layers.push_back(LayerSpec::conv2d(c, 3));
    s.layers.push_back(LayerSpec::relu());
    s.layers.push_back(LayerSpec::maxpool2());
  }
  s.layers.push_back(LayerSpec::global_avg_pool());
  s.layers.push_back(LayerSpec::dense(128));
  s.layers.push_back(LayerSpec::relu());
  s.layers.push_back(LayerSpec::dense(embed_dim));
  return s;
}

// Affine regression network on a (moving, fixed) 2-channel pair: seven
// conv+relu+maxpool blocks, flatten, dense(256), relu, dense(6).
inline NetworkSpec default_regression_net(int input_size = 128) {
  if (input_size != 128 && input_size != 256) {
    fail(ErrorCode::UnsupportedInputSize, "regression net supports input sizes 128 and 256");
  }
  NetworkSpec s{2, input_size, input_size, {}};
  for (int c : {8, 16, 16, 32, 32, 32, 32}) {
    s.layers.push_back(LayerSpec::conv2d(c, 3));
    s.layers.push_back(LayerSpec::relu());
    s.layers.push_back(LayerSpec::maxpool2());
  }
  s.layers.push_back(LayerSpec::flatten());
  s.layers.push_back(LayerSpec::dense(256));
  s.layers.push_back(LayerSpec::relu());
  s.layers.push_back(LayerSpec::dense(6));
  return s;
}

// ---------------------------------------------------------------------------
// Layer kernels (one sample at a time)
// ---------------------------------------------------------------------------

namespace kernels {

inline long floor_div(long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline long ceil_div(long a, long b) { return -floor_div(-a, b); }

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t ic, h, w, oc, oh, ow;
  int k, stride;

  std::size_t rows() const { return ic * k * k; }
  std::size_t cols() const { return oh * ow; }

  // Output columns [lo, hi) whose tap kx lands inside the input row.
  std::pair<long, long> valid_x(int kx) const {
    const long pad = k / 2;
    const long lo = std::max<long>(0, ceil_div(pad - kx, stride));
    const long hi = std::min<long>(static_cast<long>(ow), floor_div(static_cast<long>(w) - 1 + pad - kx, stride) + 1);
    return {lo, std::max(lo, hi)};
  }
};

// col[(c * k + ky) * k + kx][oy * ow + ox] = in[c][oy*s + ky - pad][ox*s + kx - pad], zero padded.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const long pad = g.k / 2;
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.ic; ++c) {
    const T* src = in + c * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx, ++r) {
        T* dst = col + r * g.cols();
        const auto [lo, hi] = g.valid_x(kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          T* d = dst + oy * g.ow;
          const long iy = static_cast<long>(oy) * g.stride + ky - pad;
          if (iy < 0 || iy >= static_cast<long>(g.h) || hi <= lo) {
            std::fill(d, d + g.ow, T(0));
            continue;
          }
          std::fill(d, d + lo, T(0));
          std::fill(d + hi, d + g.ow, T(0));
          const T* s = src + iy * g.w;
          if (g.stride == 1) {
            std::copy(s + lo + kx - pad, s + hi + kx - pad, d + lo);
          } else {
            for (long ox = lo; ox < hi; ++ox) d[ox] = s[ox * g.stride + kx - pad];
          }
        }
      }
    }
  }
}

// Scatter-adds a column matrix back onto the input gradient.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* gin) {
  const long pad = g.k / 2;
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.ic; ++c) {
    T* dst = gin + c * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx, ++r) {
        const T* src = col + r * g.cols();
        const auto [lo, hi] = g.valid_x(kx);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + ky - pad;
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* s = src + oy * g.ow;
          T* d = dst + iy * g.w;
          for (long ox = lo; ox < hi; ++ox) d[ox * g.stride + kx - pad] += s[ox];
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(const T* in, const ConvGeometry& g, const T* weight, const T* bias, T* out,
                    std::vector<T>& scratch) {
  scratch.resize(g.rows() * g.cols());
  im2col(in, g, scratch.data());
  MatMap<T> o(out, g.oc, g.cols());
  o.noalias() = ConstMatMap<T>(weight, g.oc, g.rows()) * ConstMatMap<T>(scratch.data(), g.rows(), g.cols());
  for (std::size_t c = 0; c < g.oc; ++c) o.row(c).array() += bias[c];
}

// Accumulates into gw, gb and (when non-null) gin.
template <typename T>
void conv2d_backward(const T* in, const ConvGeometry& g, const T* weight, const T* gout, T* gw, T* gb, T* gin,
                     std::vector<T>& scratch) {
  scratch.resize(g.rows() * g.cols());
  im2col(in, g, scratch.data());
  ConstMatMap<T> go(gout, g.oc, g.cols());
  MatMap<T>(gw, g.oc, g.rows()).noalias() += go * ConstMatMap<T>(scratch.data(), g.rows(), g.cols()).transpose();
  // Plain loop: a vectorized reduction would sum in an alignment-dependent order.
  for (std::size_t c = 0; c < g.oc; ++c) {
    const T* row = gout + c * g.cols();
    T acc = 0;
    for (std::size_t i = 0; i < g.cols(); ++i) acc += row[i];
    gb[c] += acc;
  }
  if (gin) {
    MatMap<T> gcol(scratch.data(), g.rows(), g.cols());
    gcol.noalias() = ConstMatMap<T>(weight, g.oc, g.rows()).transpose() * go;
    col2im_add(scratch.data(), g, gin);
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <typename T = float>
struct Gradients {
  std::vector<T> params;  // same layout as Network::params()
  Tensor<T> input;        // gradient w.r.t. the forward input
};

template <typename T = float>
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    shapes_ = spec_.shapes();
    const auto counts = spec_.layer_param_counts();
    std::size_t off = 0;
    for (std::size_t c : counts) {
      offsets_.push_back(off);
      off += c;
    }
    params_.assign(off, T(0));
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<ActShape>& shapes() const noexcept { return shapes_; }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::size_t param_offset(std::size_t layer) const { return offsets_.at(layer); }

  void set_params(std::span<const T> p) {
    require(p.size() == params_.size(), ErrorCode::ShapeMismatch, "parameter vector length mismatch");
    std::copy(p.begin(), p.end(), params_.begin());
  }

  // He-normal weights (std sqrt(2 / fan_in)), zero biases.
  void init_he(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      std::size_t fan_in = 0, n_weights = 0, n_bias = 0;
      if (l.kind == LayerKind::Conv2d) {
        fan_in = shapes_[i][0] * l.kernel * l.kernel;
        n_weights = fan_in * l.out_channels;
        n_bias = l.out_channels;
      } else if (l.kind == LayerKind::Dense) {
        fan_in = shapes_[i][0];
        n_weights = fan_in * l.out_dim;
        n_bias = l.out_dim;
      } else {
        continue;
      }
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      T* p = params_.data() + offsets_[i];
      for (std::size_t k = 0; k < n_weights; ++k) p[k] = static_cast<T>(rng.normal() * sd);
      std::fill(p + n_weights, p + n_weights + n_bias, T(0));
    }
  }

  // Forward pass that records the activations backward() needs.
  Tensor<T> forward(const Tensor<T>& input) {
    cache_.emplace();
    return run(input, &*cache_);
  }

  // Forward pass without recorded state; safe to call concurrently.
  Tensor<T> infer(const Tensor<T>& input) const { return run(input, nullptr); }

  // Reverse pass for the most recent forward(). `input_grad = false` skips the
  // gradient w.r.t. the network input (Gradients::input is then all zero).
  Gradients<T> backward(const Tensor<T>& loss_grad, bool input_grad = true) const {
    if (!cache_) fail(ErrorCode::NoForwardState, "backward called before forward");
    const auto& acts = cache_->acts;
    const std::size_t batch = acts.front().dim(0);
    require(loss_grad.shape() == acts.back().shape(), ErrorCode::ShapeMismatch,
            "loss gradient must be shaped like the network output");
    Gradients<T> g;
    g.params.assign(params_.size(), T(0));
    Tensor<T> gout = loss_grad;
    for (std::size_t li = spec_.layers.size(); li-- > 0;) {
      const auto& l = spec_.layers[li];
      const Tensor<T>& in = acts[li];
      const ActShape& is = shapes_[li];
      const ActShape& os = shapes_[li + 1];
      Tensor<T> gin(in.shape());
      const std::size_t in_n = Tensor<T>::count(is), out_n = Tensor<T>::count(os);
      switch (l.kind) {
        case LayerKind::Conv2d: {
          const T* wt = params_.data() + offsets_[li];
          T* gw = g.params.data() + offsets_[li];
          T* gb = gw + std::size_t(l.out_channels) * is[0] * l.kernel * l.kernel;
          const bool skip_input = li == 0 && !input_grad;
          std::vector<T> scratch;
          for (std::size_t b = 0; b < batch; ++b) {
            kernels::conv2d_backward(in.data().data() + b * in_n, geometry(li), wt, gout.data().data() + b * out_n,
                                     gw, gb, skip_input ? nullptr : gin.data().data() + b * in_n, scratch);
          }
          break;
        }
        case LayerKind::MaxPool2: {
          const auto& arg = cache_->argmax[li];
          for (std::size_t i = 0; i < gout.size(); ++i) gin[arg[i]] += gout[i];
          break;
        }
        case LayerKind::Relu: {
          const Tensor<T>& out = acts[li + 1];
          for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = out[i] > T(0) ? gout[i] : T(0);
          break;
        }
        case LayerKind::Flatten:
          std::copy(gout.data().begin(), gout.data().end(), gin.data().begin());
          break;
        case LayerKind::GlobalAvgPool: {
          const std::size_t hw = is[1] * is[2];
          const T inv = T(1) / static_cast<T>(hw);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < is[0]; ++c) {
              const T v = gout[b * is[0] + c] * inv;
              T* dst = gin.data().data() + (b * is[0] + c) * hw;
              std::fill(dst, dst + hw, v);
            }
          break;
        }
        case LayerKind::Dense: {
          const std::size_t ni = is[0], no = os[0];
          const T* wt = params_.data() + offsets_[li];
          T* gw = g.params.data() + offsets_[li];
          T* gb = gw + no * ni;
          for (std::size_t b = 0; b < batch; ++b) {
            const T* x = in.data().data() + b * ni;
            const T* go = gout.data().data() + b * no;
            T* gi = gin.data().data() + b * ni;
            for (std::size_t o = 0; o < no; ++o) {
              const T gv = go[o];
              gb[o] += gv;
              const T* wrow = wt + o * ni;
              T* gwrow = gw + o * ni;
              for (std::size_t i = 0; i < ni; ++i) {
                gwrow[i] += gv * x[i];
                gi[i] += gv * wrow[i];
              }
            }
          }
          break;
        }
      }
      gout = std::move(gin);
    }
    if (input_grad && spec_.input_gain != 1.0) {
      const T gain = static_cast<T>(spec_.input_gain);
      for (auto& v : gout.data()) v *= gain;
    }
    g.input = std::move(gout);
    return g;
  }

 private:
  struct Cache {
    std::vector<Tensor<T>> acts;                    // input of each layer, then the output
    std::vector<std::vector<std::size_t>> argmax;  // maxpool routing per layer
  };

  kernels::ConvGeometry geometry(std::size_t li) const {
    const auto& l = spec_.layers[li];
    const ActShape& is = shapes_[li];
    const ActShape& os = shapes_[li + 1];
    return {is[0], is[1], is[2], os[0], os[1], os[2], l.kernel, l.stride};
  }

  static std::vector<std::size_t> batched(std::size_t batch, const ActShape& s) {
    std::vector<std::size_t> r{batch};
    r.insert(r.end(), s.begin(), s.end());
    return r;
  }

  Tensor<T> run(const Tensor<T>& input, Cache* cache) const {
    const ActShape& is0 = shapes_.front();
    require(input.rank() == 4 && input.dim(1) == is0[0] && input.dim(2) == is0[1] && input.dim(3) == is0[2],
            ErrorCode::ShapeMismatch, "input must be [B, C, H, W] matching the network input");
    const std::size_t batch = input.dim(0);
    require(batch >= 1, ErrorCode::ShapeMismatch, "batch must not be empty");
    check_finite(input, "input");
    Tensor<T> cur = input;
    if (spec_.input_shift != 0.0 || spec_.input_gain != 1.0) {
      const T shift = static_cast<T>(spec_.input_shift), gain = static_cast<T>(spec_.input_gain);
      for (auto& v : cur.data()) v = (v - shift) * gain;
    }
    if (cache) {
      cache->acts.clear();
      cache->argmax.assign(spec_.layers.size(), {});
    }
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
      const auto& l = spec_.layers[li];
      const ActShape& is = shapes_[li];
      const ActShape& os = shapes_[li + 1];
      const std::size_t in_n = Tensor<T>::count(is), out_n = Tensor<T>::count(os);
      Tensor<T> out(batched(batch, os));
      switch (l.kind) {
        case LayerKind::Conv2d: {
          const T* wt = params_.data() + offsets_[li];
          const T* bias = wt + std::size_t(l.out_channels) * is[0] * l.kernel * l.kernel;
          std::vector<T> scratch;
          for (std::size_t b = 0; b < batch; ++b) {
            kernels::conv2d_forward(cur.data().data() + b * in_n, geometry(li), wt, bias,
                                    out.data().data() + b * out_n, scratch);
          }
          break;
        }
        case LayerKind::MaxPool2: {
          std::vector<std::size_t> arg(out.size());
          const std::size_t ih = is[1], iw = is[2], oh = os[1], ow = os[2];
          for (std::size_t bc = 0; bc < batch * is[0]; ++bc) {
            const T* src = cur.data().data() + bc * ih * iw;
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t x = 0; x < ow; ++x) {
                std::size_t best = (2 * y) * iw + 2 * x;
                for (std::size_t cand : {(2 * y) * iw + 2 * x + 1, (2 * y + 1) * iw + 2 * x, (2 * y + 1) * iw + 2 * x + 1}) {
                  if (src[cand] > src[best]) best = cand;
                }
                const std::size_t oi = bc * oh * ow + y * ow + x;
                out[oi] = src[best];
                arg[oi] = bc * ih * iw + best;
              }
          }
          if (cache) cache->argmax[li] = std::move(arg);
          break;
        }
        case LayerKind::Relu:
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = cur[i] > T(0) ? cur[i] : T(0);
          break;
        case LayerKind::Flatten:
          std::copy(cur.data().begin(), cur.data().end(), out.data().begin());
          break;
        case LayerKind::GlobalAvgPool: {
          const std::size_t hw = is[1] * is[2];
          for (std::size_t bc = 0; bc < batch * is[0]; ++bc) {
            const T* src = cur.data().data() + bc * hw;
            T acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += src[i];
            out[bc] = acc / static_cast<T>(hw);
          }
          break;
        }
        case LayerKind::Dense: {
          const std::size_t ni = is[0], no = os[0];
          const T* wt = params_.data() + offsets_[li];
          const T* bias = wt + no * ni;
          for (std::size_t b = 0; b < batch; ++b) {
            const T* x = cur.data().data() + b * ni;
            for (std::size_t o = 0; o < no; ++o) {
              const T* wrow = wt + o * ni;
              T acc = 0;
              for (std::size_t i = 0; i < ni; ++i) acc += wrow[i] * x[i];
              out[b * no + o] = acc + bias[o];
            }
          }
          break;
        }
      }
      check_finite(out, "layer " + std::to_string(li) + " (" + std::string(to_string(l.kind)) + ")");
      if (cache) cache->acts.push_back(std::move(cur));
      cur = std::move(out);
    }
    if (cache) cache->acts.push_back(cur);
    return cur;
  }

  static void check_finite(const Tensor<T>& t, const std::string& where) {
    for (T v : t.data()) {
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteActivation, "non-finite value at " + where);
    }
  }

  NetworkSpec spec_;
  std::vector<ActShape> shapes_;
  std::vector<std::size_t> offsets_;
  std::vector<T> params_;
  std::optional<Cache> cache_;
};

// Zero final-layer weights with bias (1, 0, 0, 1, 0, 0): the untrained
// regressor predicts the identity transform.
template <typename T>
void init_identity_head(Network<T>& net) {
  const auto& layers = net.spec().layers;
  require(!layers.empty() && layers.back().kind == LayerKind::Dense && layers.back().out_dim == 6,
          ErrorCode::ArchitectureMismatch, "identity head needs a final dense(6) layer");
  const std::size_t li = layers.size() - 1;
  const std::size_t ni = net.shapes()[li][0];
  auto p = net.params().subspan(net.param_offset(li), 6 * ni + 6);
  std::fill(p.begin(), p.end(), T(0));
  p[6 * ni + 0] = T(1);
  p[6 * ni + 3] = T(1);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update. Moments are allocated on first use.
template <typename T>
void adam_step(AdamState& state, std::span<T> params, std::span<const T> grads) {
  require(params.size() == grads.size(), ErrorCode::ShapeMismatch, "params and grads differ in length");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require(state.m.size() == params.size() && state.v.size() == params.size(), ErrorCode::ShapeMismatch,
          "Adam moments differ in length from params");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1, vhat = state.v[i] / c2;
    params[i] = static_cast<T>(params[i] - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  NetworkSpec spec;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<float> params;

  Network<float> network() const {
    Network<float> net(spec);
    net.set_params(params);
    return net;
  }

  static Checkpoint of(const Network<float>& net, std::uint64_t step, std::uint64_t seed) {
    return {net.spec(), step, seed, std::vector<float>(net.params().begin(), net.params().end())};
  }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(U) || pos > in.size()) fail(ErrorCode::CorruptPayload, "checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

}  // namespace detail

// Layout: "AMCK", u32 version, u32 length + UTF-8 architecture JSON, u64 step,
// little-endian f32 parameters in layer order.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  require(ck.params.size() == ck.spec.param_count(), ErrorCode::CorruptPayload,
          "parameter count does not match architecture");
  auto arch = ck.spec.to_json();
  arch["seed"] = ck.seed;
  const std::string js = arch.dump();
  std::string out = "AMCK";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  detail::put_le<std::uint64_t>(out, ck.step);
  for (float f : ck.params) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::optional<NetworkSpec>& expected = std::nullopt) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "AMCK") != 0) fail(ErrorCode::CorruptPayload, "missing AMCK magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto len = detail::get_le<std::uint32_t>(bytes, pos);
  if (bytes.size() - pos < len) fail(ErrorCode::CorruptPayload, "architecture description truncated");
  nlohmann::json arch;
  try {
    arch = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptPayload, std::string("architecture JSON unreadable: ") + e.what());
  }
  pos += len;
  Checkpoint ck;
  ck.spec = NetworkSpec::from_json(arch);
  ck.seed = arch.value("seed", std::uint64_t{0});
  if (expected && !(*expected == ck.spec)) {
    fail(ErrorCode::ArchitectureMismatch, "checkpoint architecture differs from the expected network");
  }
  ck.step = detail::get_le<std::uint64_t>(bytes, pos);
  std::size_t n = 0;
  try {
    n = ck.spec.param_count();
  } catch (const Error& e) {
    fail(ErrorCode::ArchitectureMismatch, e.what());
  }
  if (bytes.size() - pos != n * 4) fail(ErrorCode::CorruptPayload, "payload length does not match architecture");
  ck.params.resize(n);
  for (std::size_t i = 0; i < n; ++i) ck.params[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkSpec>& expected = std::nullopt) {
  return decode_checkpoint(read_file_bytes(path), expected);
}

}  // namespace atlas_match
