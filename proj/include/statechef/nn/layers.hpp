#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/nn/tensor.hpp"
#include "statechef/rng.hpp"

namespace statechef::nn {

enum class ParamRole { weight, bias, bn_scale, bn_shift, bn_mean, bn_var };

/// Which part of the classifier a parameter belongs to; freeze scopes are
/// expressed in terms of these groups.
enum class ParamGroup { backbone, added, final_layer };

inline const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::bn_scale: return "bn_scale";
    case ParamRole::bn_shift: return "bn_shift";
    case ParamRole::bn_mean: return "bn_mean";
    case ParamRole::bn_var: return "bn_var";
  }
  return "?";
}

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::added: return "added";
    case ParamGroup::final_layer: return "final";
  }
  return "?";
}

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand
  ParamRole role = ParamRole::weight;
  ParamGroup group = ParamGroup::backbone;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, ParamRole r, T fill = T(0)) : name(std::move(n)), shape(std::move(s)), role(r) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, fill);
  }

  std::size_t size() const { return value.size(); }
  /// Running batch-norm statistics are buffers, not learnable parameters.
  bool learnable() const { return role != ParamRole::bn_mean && role != ParamRole::bn_var; }
  bool trainable() const { return learnable() && !frozen; }
  /// L2 regularization applies to convolution and dense kernels only.
  bool decays() const { return role == ParamRole::weight; }

  void zero_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    else std::fill(grad.begin(), grad.end(), T(0));
  }
};

/// Activations saved during a forward pass for the matching backward pass.
template <typename T>
struct Tape {
  std::unordered_map<const void*, std::vector<Tensor<T>>> saved;

  std::vector<Tensor<T>>& slot(const void* key) { return saved[key]; }
  const std::vector<Tensor<T>>& at(const void* key) const {
    auto it = saved.find(key);
    if (it == saved.end()) throw Error("backward pass without a recorded forward pass");
    return it->second;
  }
};

template <typename T>
struct Pass {
  bool training = false;
  Tape<T>* tape = nullptr;
};

template <typename T>
class Layer {
 public:
  using Visitor = std::function<void(Parameter<T>&)>;
  using ConstVisitor = std::function<void(const Parameter<T>&)>;

  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const = 0;
  /// Accumulates gradients of trainable parameters and returns dLoss/dInput.
  virtual Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) = 0;
  virtual void visit(const Visitor&) {}
  virtual void visit(const ConstVisitor&) const {}
  /// Folds batch statistics recorded on `tape` into running statistics.
  virtual void commit_statistics(const Tape<T>&) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual int activation_count() const { return 0; }
};

// ------------------------------------------------------------------ helpers

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajor<T>>;

template <typename T>
void he_normal(Parameter<T>& p, int fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.value) v = static_cast<T>(rng.normal() * sd);
}

template <typename T>
void glorot_uniform(Parameter<T>& p, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : p.value) v = static_cast<T>(rng.uniform(-limit, limit));
}

// ------------------------------------------------------------------- Conv2d

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias,
         Rng& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding),
        weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}, ParamRole::weight) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || padding < 0)
      throw DataError("conv '" + name + "': invalid geometry");
    he_normal(weight_, in_channels * kernel * kernel, rng);
    if (bias) bias_ = Parameter<T>(name + ".bias", {out_channels}, ParamRole::bias);
  }

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    if (x.c() != in_) throw DataError("conv: expected " + std::to_string(in_) + " input channels, got " + std::to_string(x.c()));
    const int ho = out_size(x.h()), wo = out_size(x.w());
    if (ho < 1 || wo < 1) throw DataError("conv: input " + shape_string(x.shape) + " too small");
    Tensor<T> y(x.n(), out_, ho, wo);
    const ConstMatMap<T> w(weight_.value.data(), out_, in_ * k_ * k_);
    std::vector<T> col;
    for (int i = 0; i < x.n(); ++i) {
      const T* cp = columns(x, i, col);
      const ConstMatMap<T> cm(cp, in_ * k_ * k_, ho * wo);
      MatMap<T> ym(y.sample(i), out_, ho * wo);
      ym.noalias() = w * cm;
      if (bias_) {
        for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_->value[static_cast<std::size_t>(o)];
      }
    }
    if (pass.tape) pass.tape->slot(this) = {x};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const Tensor<T>& x = tape.at(this)[0];
    const int ho = dy.h(), wo = dy.w();
    const int rows = in_ * k_ * k_;
    Tensor<T> dx(x.n(), x.c(), x.h(), x.w());
    const bool train_w = weight_.trainable();
    const bool train_b = bias_ && bias_->trainable();
    if (train_w && weight_.grad.size() != weight_.size()) weight_.zero_grad();
    if (train_b && bias_->grad.size() != bias_->size()) bias_->zero_grad();
    const ConstMatMap<T> w(weight_.value.data(), out_, rows);
    std::vector<T> col, dcol(static_cast<std::size_t>(rows) * ho * wo);
    for (int i = 0; i < x.n(); ++i) {
      const ConstMatMap<T> dym(dy.sample(i), out_, ho * wo);
      if (train_w) {
        const T* cp = columns(x, i, col);
        const ConstMatMap<T> cm(cp, rows, ho * wo);
        MatMap<T> gw(weight_.grad.data(), out_, rows);
        gw.noalias() += dym * cm.transpose();
      }
      if (train_b) {
        for (int o = 0; o < out_; ++o) bias_->grad[static_cast<std::size_t>(o)] += dym.row(o).sum();
      }
      if (is_pointwise()) {
        MatMap<T> dxm(dx.sample(i), in_, ho * wo);
        dxm.noalias() = w.transpose() * dym;
      } else {
        MatMap<T> dcm(dcol.data(), rows, ho * wo);
        dcm.noalias() = w.transpose() * dym;
        col2im(dcol.data(), x, dx.sample(i), ho, wo);
      }
    }
    return dx;
  }

  void visit(const typename Layer<T>::Visitor& f) override {
    f(weight_);
    if (bias_) f(*bias_);
  }
  void visit(const typename Layer<T>::ConstVisitor& f) const override {
    f(weight_);
    if (bias_) f(*bias_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  bool is_pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  const T* columns(const Tensor<T>& x, int i, std::vector<T>& col) const {
    if (is_pointwise()) return x.sample(i);
    const int ho = out_size(x.h()), wo = out_size(x.w());
    col.assign(static_cast<std::size_t>(in_) * k_ * k_ * ho * wo, T(0));
    const T* src = x.sample(i);
    std::size_t row = 0;
    for (int c = 0; c < in_; ++c) {
      const T* plane = src + static_cast<std::size_t>(c) * x.plane();
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++row) {
          T* dst = col.data() + row * static_cast<std::size_t>(ho) * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < x.w()) dst[oy * wo + ox] = plane[iy * x.w() + ix];
            }
          }
        }
      }
    }
    return col.data();
  }

  void col2im(const T* dcol, const Tensor<T>& x, T* dx, int ho, int wo) const {
    std::size_t row = 0;
    for (int c = 0; c < in_; ++c) {
      T* plane = dx + static_cast<std::size_t>(c) * x.plane();
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++row) {
          const T* src = dcol + row * static_cast<std::size_t>(ho) * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < x.w()) plane[iy * x.w() + ix] += src[oy * wo + ox];
            }
          }
        }
      }
    }
  }

  int in_, out_, k_, stride_, pad_;
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
};

// -------------------------------------------------------------- BatchNorm2d

/// Batch normalization. Batch statistics are used only when the pass is a
/// training pass and the layer is trainable; a frozen layer normalizes with
/// its running statistics and never updates them.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  BatchNorm2d(const std::string& name, int channels)
      : channels_(channels),
        scale_(name + ".gamma", {channels}, ParamRole::bn_scale, T(1)),
        shift_(name + ".beta", {channels}, ParamRole::bn_shift, T(0)),
        mean_(name + ".running_mean", {channels}, ParamRole::bn_mean, T(0)),
        var_(name + ".running_var", {channels}, ParamRole::bn_var, T(1)) {}

  bool uses_batch_statistics(const Pass<T>& pass) const { return pass.training && !scale_.frozen; }

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    if (x.c() != channels_) throw DataError("batch norm: channel mismatch");
    const bool batch = uses_batch_statistics(pass);
    const std::size_t hw = x.plane();
    const double count = static_cast<double>(x.n()) * static_cast<double>(hw);
    // stats row layout: [mode, mean[C], var[C], inv_std[C]]
    Tensor<T> stats(1, 1, 1, 1 + 3 * channels_);
    stats.data[0] = batch ? T(1) : T(0);
    Tensor<T> xhat(x.n(), x.c(), x.h(), x.w());
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    for (int c = 0; c < channels_; ++c) {
      double mean = 0, var = 0;
      if (batch) {
        if (count < 1) throw DataError("batch norm: empty batch in training mode");
        for (int i = 0; i < x.n(); ++i) {
          const T* p = x.sample(i) + c * hw;
          for (std::size_t k = 0; k < hw; ++k) mean += p[k];
        }
        mean /= count;
        for (int i = 0; i < x.n(); ++i) {
          const T* p = x.sample(i) + c * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            const double d = p[k] - mean;
            var += d * d;
          }
        }
        var /= count;
      } else {
        mean = mean_.value[static_cast<std::size_t>(c)];
        var = var_.value[static_cast<std::size_t>(c)];
      }
      const T inv_std = static_cast<T>(1.0 / std::sqrt(var + kEpsilon));
      const T m = static_cast<T>(mean);
      const T g = scale_.value[static_cast<std::size_t>(c)];
      const T b = shift_.value[static_cast<std::size_t>(c)];
      stats.data[1 + c] = m;
      stats.data[1 + channels_ + c] = static_cast<T>(var);
      stats.data[1 + 2 * channels_ + c] = inv_std;
      for (int i = 0; i < x.n(); ++i) {
        const T* p = x.sample(i) + c * hw;
        T* xh = xhat.sample(i) + c * hw;
        T* q = y.sample(i) + c * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          xh[k] = (p[k] - m) * inv_std;
          q[k] = g * xh[k] + b;
        }
      }
    }
    if (pass.tape) {
      auto& slot = pass.tape->slot(this);
      slot.clear();
      slot.push_back(std::move(xhat));
      slot.push_back(std::move(stats));
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const auto& saved = tape.at(this);
    const Tensor<T>& xhat = saved[0];
    const Tensor<T>& stats = saved[1];
    const bool batch = stats.data[0] != T(0);
    const std::size_t hw = dy.plane();
    const double count = static_cast<double>(dy.n()) * static_cast<double>(hw);
    const bool train = scale_.trainable();
    if (train) {
      if (scale_.grad.size() != scale_.size()) scale_.zero_grad();
      if (shift_.grad.size() != shift_.size()) shift_.zero_grad();
    }
    Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
    for (int c = 0; c < channels_; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.sample(i) + c * hw;
        const T* xh = xhat.sample(i) + c * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          sum_dy += g[k];
          sum_dy_xhat += static_cast<double>(g[k]) * xh[k];
        }
      }
      if (train) {
        scale_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
        shift_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
      }
      const T gamma = scale_.value[static_cast<std::size_t>(c)];
      const T inv_std = stats.data[1 + 2 * channels_ + c];
      for (int i = 0; i < dy.n(); ++i) {
        const T* g = dy.sample(i) + c * hw;
        const T* xh = xhat.sample(i) + c * hw;
        T* d = dx.sample(i) + c * hw;
        if (batch) {
          const T a = static_cast<T>(sum_dy / count);
          const T b = static_cast<T>(sum_dy_xhat / count);
          for (std::size_t k = 0; k < hw; ++k) d[k] = gamma * inv_std * (g[k] - a - xh[k] * b);
        } else {
          for (std::size_t k = 0; k < hw; ++k) d[k] = gamma * inv_std * g[k];
        }
      }
    }
    return dx;
  }

  void commit_statistics(const Tape<T>& tape) override {
    auto it = tape.saved.find(this);
    if (it == tape.saved.end()) return;
    const Tensor<T>& stats = it->second[1];
    if (stats.data[0] == T(0)) return;
    const Tensor<T>& xhat = it->second[0];
    const double count = static_cast<double>(xhat.n()) * static_cast<double>(xhat.plane());
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    for (int c = 0; c < channels_; ++c) {
      auto& rm = mean_.value[static_cast<std::size_t>(c)];
      auto& rv = var_.value[static_cast<std::size_t>(c)];
      rm = static_cast<T>((1 - kMomentum) * rm + kMomentum * stats.data[1 + c]);
      rv = static_cast<T>((1 - kMomentum) * rv + kMomentum * stats.data[1 + channels_ + c] * unbias);
    }
  }

  void visit(const typename Layer<T>::Visitor& f) override {
    f(scale_);
    f(shift_);
    f(mean_);
    f(var_);
  }
  void visit(const typename Layer<T>::ConstVisitor& f) const override {
    f(scale_);
    f(shift_);
    f(mean_);
    f(var_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

 private:
  int channels_;
  Parameter<T> scale_, shift_, mean_, var_;
};

// --------------------------------------------------------------------- ReLU

template <typename T>
class Relu final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    Tensor<T> y = x;
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
    if (pass.tape) pass.tape->slot(this) = {y};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const Tensor<T>& y = tape.at(this)[0];
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(y.data[i] > T(0))) dx.data[i] = T(0);
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }
  int activation_count() const override { return 1; }
};

// ---------------------------------------------------------------- MaxPool2d

template <typename T>
class MaxPool2d final : public Layer<T> {
 public:
  MaxPool2d(int kernel, int stride, int padding) : k_(kernel), stride_(stride), pad_(padding) {}

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    const int ho = (x.h() + 2 * pad_ - k_) / stride_ + 1;
    const int wo = (x.w() + 2 * pad_ - k_) / stride_ + 1;
    if (ho < 1 || wo < 1) throw DataError("max pool: input " + shape_string(x.shape) + " too small");
    Tensor<T> y(x.n(), x.c(), ho, wo);
    Tensor<T> arg(x.n(), x.c(), ho, wo);
    for (int i = 0; i < x.n(); ++i) {
      for (int c = 0; c < x.c(); ++c) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T best = -std::numeric_limits<T>::infinity();
            int best_idx = -1;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= x.w()) continue;
                const T v = x.at(i, c, iy, ix);
                if (best_idx < 0 || v > best) {
                  best = v;
                  best_idx = iy * x.w() + ix;
                }
              }
            }
            y.at(i, c, oy, ox) = best;
            arg.at(i, c, oy, ox) = static_cast<T>(best_idx);
          }
        }
      }
    }
    if (pass.tape) {
      Tensor<T> in_shape;
      in_shape.shape = x.shape;
      pass.tape->slot(this) = {std::move(arg), std::move(in_shape)};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const auto& saved = tape.at(this);
    const Tensor<T>& arg = saved[0];
    const auto& s = saved[1].shape;
    Tensor<T> dx(s[0], s[1], s[2], s[3]);
    for (int i = 0; i < dy.n(); ++i)
      for (int c = 0; c < dy.c(); ++c) {
        T* plane = dx.sample(i) + c * dx.plane();
        for (int oy = 0; oy < dy.h(); ++oy)
          for (int ox = 0; ox < dy.w(); ++ox)
            plane[static_cast<int>(arg.at(i, c, oy, ox))] += dy.at(i, c, oy, ox);
      }
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2d>(*this); }

 private:
  int k_, stride_, pad_;
};

// ------------------------------------------------------------ GlobalAvgPool

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    Tensor<T> y(x.n(), x.c(), 1, 1);
    const std::size_t hw = x.plane();
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* p = x.sample(i) + c * hw;
        double s = 0;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
        y.at(i, c, 0, 0) = static_cast<T>(s / static_cast<double>(hw));
      }
    if (pass.tape) {
      Tensor<T> in_shape;
      in_shape.shape = x.shape;
      pass.tape->slot(this) = {std::move(in_shape)};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const auto& s = tape.at(this)[0].shape;
    Tensor<T> dx(s[0], s[1], s[2], s[3]);
    const std::size_t hw = dx.plane();
    const T scale = T(1) / static_cast<T>(hw);
    for (int i = 0; i < s[0]; ++i)
      for (int c = 0; c < s[1]; ++c) {
        T* p = dx.sample(i) + c * hw;
        const T g = dy.at(i, c, 0, 0) * scale;
        for (std::size_t k = 0; k < hw; ++k) p[k] = g;
      }
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

// -------------------------------------------------------------------- Dense

/// Fully connected layer producing logits, N×out×1×1.
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(const std::string& name, int in_features, int out_features, Rng& rng)
      : in_(in_features), out_(out_features),
        weight_(name + ".weight", {out_features, in_features}, ParamRole::weight),
        bias_(name + ".bias", {out_features}, ParamRole::bias) {
    if (in_features < 1 || out_features < 1) throw DataError("dense '" + name + "': invalid size");
    glorot_uniform(weight_, in_features, out_features, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    if (static_cast<int>(x.sample_size()) != in_)
      throw DataError("dense: expected " + std::to_string(in_) + " features, got " + std::to_string(x.sample_size()));
    Tensor<T> y(x.n(), out_, 1, 1);
    if (x.n() > 0) {
      const ConstMatMap<T> xm(x.data.data(), x.n(), in_);
      const ConstMatMap<T> w(weight_.value.data(), out_, in_);
      MatMap<T> ym(y.data.data(), x.n(), out_);
      ym.noalias() = xm * w.transpose();
      for (int i = 0; i < x.n(); ++i)
        for (int o = 0; o < out_; ++o) ym(i, o) += bias_.value[static_cast<std::size_t>(o)];
    }
    if (pass.tape) pass.tape->slot(this) = {x};
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    const Tensor<T>& x = tape.at(this)[0];
    Tensor<T> dx(x.n(), x.c(), x.h(), x.w());
    if (x.n() == 0) return dx;
    const ConstMatMap<T> xm(x.data.data(), x.n(), in_);
    const ConstMatMap<T> dym(dy.data.data(), x.n(), out_);
    if (weight_.trainable()) {
      if (weight_.grad.size() != weight_.size()) weight_.zero_grad();
      MatMap<T> gw(weight_.grad.data(), out_, in_);
      gw.noalias() += dym.transpose() * xm;
    }
    if (bias_.trainable()) {
      if (bias_.grad.size() != bias_.size()) bias_.zero_grad();
      for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += dym.col(o).sum();
    }
    const ConstMatMap<T> w(weight_.value.data(), out_, in_);
    MatMap<T> dxm(dx.data.data(), x.n(), in_);
    dxm.noalias() = dym * w;
    return dx;
  }

  void visit(const typename Layer<T>::Visitor& f) override {
    f(weight_);
    f(bias_);
  }
  void visit(const typename Layer<T>::ConstVisitor& f) const override {
    f(weight_);
    f(bias_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Parameter<T> weight_, bias_;
};

// --------------------------------------------------------------- composites

/// Convolution, batch normalization and (optionally) ReLU.
template <typename T>
class ConvBnRelu final : public Layer<T> {
 public:
  ConvBnRelu(const std::string& name, int in, int out, int kernel, int stride, bool relu, Rng& rng)
      : conv_(name + ".conv", in, out, kernel, stride, kernel / 2, false, rng), bn_(name + ".bn", out), relu_(relu) {}

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    Tensor<T> y = bn_.forward(conv_.forward(x, pass), pass);
    return relu_ ? act_.forward(y, pass) : y;
  }
  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    Tensor<T> g = relu_ ? act_.backward(dy, tape) : dy;
    return conv_.backward(bn_.backward(g, tape), tape);
  }
  void commit_statistics(const Tape<T>& tape) override { bn_.commit_statistics(tape); }
  void visit(const typename Layer<T>::Visitor& f) override {
    conv_.visit(f);
    bn_.visit(f);
  }
  void visit(const typename Layer<T>::ConstVisitor& f) const override {
    conv_.visit(f);
    bn_.visit(f);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ConvBnRelu>(*this); }
  int activation_count() const override { return relu_ ? 1 : 0; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  Relu<T> act_;
  bool relu_;
};

/// Residual bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, plus a
/// projection shortcut when the shape changes. `depth` < 3 keeps only the
/// first one or two convolution units, for cuts that fall inside a block.
template <typename T>
class Bottleneck final : public Layer<T> {
 public:
  Bottleneck(const std::string& name, int in, int mid, int out, int stride, int depth, Rng& rng)
      : depth_(depth),
        reduce_(name + ".conv1", in, mid, 1, 1, true, rng),
        spatial_(name + ".conv2", mid, mid, 3, stride, true, rng),
        expand_(name + ".conv3", mid, out, 1, 1, false, rng) {
    if (depth < 1 || depth > 3) throw DataError("bottleneck depth must be 1..3");
    if (depth == 3 && (in != out || stride != 1)) project_.emplace(name + ".shortcut", in, out, 1, stride, false, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Pass<T> pass) const override {
    Tensor<T> a = reduce_.forward(x, pass);
    if (depth_ == 1) return a;
    Tensor<T> b = spatial_.forward(a, pass);
    if (depth_ == 2) return b;
    Tensor<T> c = expand_.forward(b, pass);
    const Tensor<T> s = project_ ? project_->forward(x, pass) : x;
    if (!s.same_shape(c)) throw Error("bottleneck: shortcut shape mismatch");
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += s.data[i];
    return out_.forward(c, pass);
  }

  Tensor<T> backward(const Tensor<T>& dy, const Tape<T>& tape) override {
    if (depth_ == 1) return reduce_.backward(dy, tape);
    if (depth_ == 2) return reduce_.backward(spatial_.backward(dy, tape), tape);
    Tensor<T> dsum = out_.backward(dy, tape);
    Tensor<T> dx = reduce_.backward(spatial_.backward(expand_.backward(dsum, tape), tape), tape);
    const Tensor<T> ds = project_ ? project_->backward(dsum, tape) : dsum;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
  }

  void commit_statistics(const Tape<T>& tape) override {
    reduce_.commit_statistics(tape);
    spatial_.commit_statistics(tape);
    expand_.commit_statistics(tape);
    if (project_) project_->commit_statistics(tape);
  }
  void visit(const typename Layer<T>::Visitor& f) override {
    reduce_.visit(f);
    if (depth_ >= 2) spatial_.visit(f);
    if (depth_ == 3) {
      expand_.visit(f);
      if (project_) project_->visit(f);
    }
  }
  void visit(const typename Layer<T>::ConstVisitor& f) const override {
    reduce_.visit(f);
    if (depth_ >= 2) spatial_.visit(f);
    if (depth_ == 3) {
      expand_.visit(f);
      if (project_) project_->visit(f);
    }
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Bottleneck>(*this); }
  int activation_count() const override { return depth_; }

 private:
  int depth_;
  ConvBnRelu<T> reduce_, spatial_, expand_;
  std::optional<ConvBnRelu<T>> project_;
  Relu<T> out_;
};

}  // namespace statechef::nn
