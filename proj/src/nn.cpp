#include "ckd/nn.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace ckd {

namespace {

void he_normal_init(Tensor& w, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& x : w.vec()) x = static_cast<float>(std * rng.normal());
}

void require_4d(const Tensor& x, const char* who) {
  if (x.rank() != 4) throw ShapeError(fmt::format("{}: expected NCHW input, got {}", who, x.shape_str()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, bool bias, Rng& rng,
               bool depthwise)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      k_(ksize),
      stride_(stride),
      pad_(pad),
      has_bias_(bias),
      depthwise_(depthwise),
      weight_(depthwise ? std::vector<int>{out_ch, 1, ksize, ksize}
                        : std::vector<int>{out_ch, in_ch, ksize, ksize}) {
  if (depthwise_ && out_ch_ != in_ch_) {
    throw ShapeError(fmt::format("depthwise conv requires out_ch == in_ch, got {} vs {}", out_ch, in_ch));
  }
  const int fan_in = depthwise_ ? k_ * k_ : in_ch_ * k_ * k_;
  he_normal_init(weight_.value, fan_in, rng);
  if (has_bias_) {
    bias_ = std::make_unique<Param>(std::vector<int>{out_ch_});
  }
}

std::pair<int, int> Conv2d::out_hw(const Tensor& x) const {
  const int oh = (x.dim(2) + 2 * pad_ - k_) / stride_ + 1;
  const int ow = (x.dim(3) + 2 * pad_ - k_) / stride_ + 1;
  return {oh, ow};
}

void Conv2d::im2col_chunk(const Tensor& x, int n0, int n1, Mat& cols) const {
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto [oh, ow] = out_hw(x);
  const int ckk = C * k_ * k_;
  cols.resize(ckk, static_cast<std::int64_t>(n1 - n0) * oh * ow);
  for (int n = n0; n < n1; ++n) {
    const float* xp = x.data() + static_cast<std::int64_t>(n) * C * H * W;
    std::int64_t j = static_cast<std::int64_t>(n - n0) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int xcol = 0; xcol < ow; ++xcol, ++j) {
        float* col = cols.data() + j * ckk;
        const int h0 = y * stride_ - pad_;
        const int w0 = xcol * stride_ - pad_;
        for (int c = 0; c < C; ++c) {
          const float* plane = xp + static_cast<std::int64_t>(c) * H * W;
          for (int kh = 0; kh < k_; ++kh) {
            const int h = h0 + kh;
            for (int kw = 0; kw < k_; ++kw) {
              const int w = w0 + kw;
              *col++ = (h >= 0 && h < H && w >= 0 && w < W) ? plane[h * W + w] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void Conv2d::col2im_chunk(const Mat& dcols, int n0, int n1, Tensor& dx) const {
  const int C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const auto [oh, ow] = out_hw(dx);
  const int ckk = C * k_ * k_;
  for (int n = n0; n < n1; ++n) {
    float* dxp = dx.data() + static_cast<std::int64_t>(n) * C * H * W;
    std::int64_t j = static_cast<std::int64_t>(n - n0) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int xcol = 0; xcol < ow; ++xcol, ++j) {
        const float* col = dcols.data() + j * ckk;
        const int h0 = y * stride_ - pad_;
        const int w0 = xcol * stride_ - pad_;
        for (int c = 0; c < C; ++c) {
          float* plane = dxp + static_cast<std::int64_t>(c) * H * W;
          for (int kh = 0; kh < k_; ++kh) {
            const int h = h0 + kh;
            for (int kw = 0; kw < k_; ++kw, ++col) {
              const int w = w0 + kw;
              if (h >= 0 && h < H && w >= 0 && w < W) plane[h * W + w] += *col;
            }
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool /*train*/) {
  require_4d(x, "Conv2d");
  if (x.dim(1) != in_ch_) {
    throw ShapeError(fmt::format("Conv2d: expected {} input channels, got {}", in_ch_, x.dim(1)));
  }
  x_ = x;
  const int N = x.dim(0);
  const auto [oh, ow] = out_hw(x);
  Tensor y({N, out_ch_, oh, ow});

  if (depthwise_) {
    const int H = x.dim(2), W = x.dim(3);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < out_ch_; ++c) {
        const float* plane = x.data() + (static_cast<std::int64_t>(n) * in_ch_ + c) * H * W;
        const float* wk = weight_.value.data() + static_cast<std::int64_t>(c) * k_ * k_;
        const float b = has_bias_ ? bias_->value[c] : 0.0f;
        float* out = y.data() + (static_cast<std::int64_t>(n) * out_ch_ + c) * oh * ow;
        for (int yy = 0; yy < oh; ++yy) {
          for (int xx = 0; xx < ow; ++xx) {
            const int h0 = yy * stride_ - pad_, w0 = xx * stride_ - pad_;
            float acc = b;
            for (int kh = 0; kh < k_; ++kh) {
              const int h = h0 + kh;
              if (h < 0 || h >= H) continue;
              for (int kw = 0; kw < k_; ++kw) {
                const int w = w0 + kw;
                if (w < 0 || w >= W) continue;
                acc += plane[h * W + w] * wk[kh * k_ + kw];
              }
            }
            out[yy * ow + xx] = acc;
          }
        }
      }
    }
    return y;
  }

  const int ckk = in_ch_ * k_ * k_;
  auto w2 = weight_.value.as_matrix(ckk, out_ch_);  // column-major view of (out, ckk) row-major
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  const int chunk = std::max<int>(1, static_cast<int>(4'000'000 / std::max<std::int64_t>(1, ckk * ohw)));
  Mat cols, out2;
  for (int n0 = 0; n0 < N; n0 += chunk) {
    const int n1 = std::min(N, n0 + chunk);
    im2col_chunk(x, n0, n1, cols);
    out2.noalias() = cols.transpose() * w2;  // (chunk*ohw, out)
    for (int n = n0; n < n1; ++n) {
      for (int co = 0; co < out_ch_; ++co) {
        const float* src = out2.data() + static_cast<std::int64_t>(co) * out2.rows() + (n - n0) * ohw;
        float* dst = y.data() + (static_cast<std::int64_t>(n) * out_ch_ + co) * ohw;
        if (has_bias_) {
          const float b = bias_->value[co];
          for (std::int64_t s = 0; s < ohw; ++s) dst[s] = src[s] + b;
        } else {
          std::copy(src, src + ohw, dst);
        }
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const int N = x_.dim(0);
  const auto [oh, ow] = out_hw(x_);
  Tensor dx(x_.shape());

  if (depthwise_) {
    const int H = x_.dim(2), W = x_.dim(3);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < out_ch_; ++c) {
        const float* plane = x_.data() + (static_cast<std::int64_t>(n) * in_ch_ + c) * H * W;
        const float* g = dy.data() + (static_cast<std::int64_t>(n) * out_ch_ + c) * oh * ow;
        float* dplane = dx.data() + (static_cast<std::int64_t>(n) * in_ch_ + c) * H * W;
        const float* wk = weight_.value.data() + static_cast<std::int64_t>(c) * k_ * k_;
        float* dwk = weight_.grad.data() + static_cast<std::int64_t>(c) * k_ * k_;
        double dbias = 0.0;
        for (int yy = 0; yy < oh; ++yy) {
          for (int xx = 0; xx < ow; ++xx) {
            const float go = g[yy * ow + xx];
            dbias += go;
            const int h0 = yy * stride_ - pad_, w0 = xx * stride_ - pad_;
            for (int kh = 0; kh < k_; ++kh) {
              const int h = h0 + kh;
              if (h < 0 || h >= H) continue;
              for (int kw = 0; kw < k_; ++kw) {
                const int w = w0 + kw;
                if (w < 0 || w >= W) continue;
                dwk[kh * k_ + kw] += go * plane[h * W + w];
                dplane[h * W + w] += go * wk[kh * k_ + kw];
              }
            }
          }
        }
        if (has_bias_) bias_->grad[c] += static_cast<float>(dbias);
      }
    }
    return dx;
  }

  const int ckk = in_ch_ * k_ * k_;
  auto w2 = weight_.value.as_matrix(ckk, out_ch_);
  auto dw2 = weight_.grad.as_matrix(ckk, out_ch_);
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  const int chunk = std::max<int>(1, static_cast<int>(4'000'000 / std::max<std::int64_t>(1, ckk * ohw)));
  Mat cols, dout2, dcols;
  for (int n0 = 0; n0 < N; n0 += chunk) {
    const int n1 = std::min(N, n0 + chunk);
    dout2.resize(static_cast<std::int64_t>(n1 - n0) * ohw, out_ch_);
    for (int n = n0; n < n1; ++n) {
      for (int co = 0; co < out_ch_; ++co) {
        const float* src = dy.data() + (static_cast<std::int64_t>(n) * out_ch_ + co) * ohw;
        float* dst = dout2.data() + static_cast<std::int64_t>(co) * dout2.rows() + (n - n0) * ohw;
        std::copy(src, src + ohw, dst);
      }
    }
    im2col_chunk(x_, n0, n1, cols);
    dw2.noalias() += cols * dout2;
    if (has_bias_) {
      for (int co = 0; co < out_ch_; ++co) {
        double s = 0.0;
        const float* col = dout2.data() + static_cast<std::int64_t>(co) * dout2.rows();
        for (std::int64_t r = 0; r < dout2.rows(); ++r) s += col[r];
        bias_->grad[co] += static_cast<float>(s);
      }
    }
    dcols.noalias() = w2 * dout2.transpose();
    col2im_chunk(dcols, n0, n1, dx);
  }
  return dx;
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  if (bias_) out.push_back(bias_.get());
}

void Conv2d::collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".weight", &weight_.value});
  if (bias_) out.push_back({prefix + ".bias", &bias_->value});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_({channels}),
      beta_({channels}),
      running_mean_({channels}),
      running_var_({channels}) {
  gamma_.value.fill(1.0f);
  running_var_.fill(1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  require_4d(x, "BatchNorm2d");
  if (x.dim(1) != channels_) {
    throw ShapeError(fmt::format("BatchNorm2d: expected {} channels, got {}", channels_, x.dim(1)));
  }
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const std::int64_t m = static_cast<std::int64_t>(N) * hw;
  Tensor y(x.shape());
  trained_forward_ = train;

  if (train) {
    xhat_ = Tensor(x.shape());
    invstd_.assign(channels_, 0.0f);
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = x.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        for (std::int64_t s = 0; s < hw; ++s) {
          sum += p[s];
          sq += static_cast<double>(p[s]) * p[s];
        }
      }
      const double mean = sum / static_cast<double>(m);
      const double var = sq / static_cast<double>(m) - mean * mean;
      const double inv = 1.0 / std::sqrt(var + eps_);
      invstd_[c] = static_cast<float>(inv);
      running_mean_[c] = static_cast<float>((1.0 - momentum_) * running_mean_[c] + momentum_ * mean);
      // unbiased running variance, matching common framework practice
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_var_[c] = static_cast<float>((1.0 - momentum_) * running_var_[c] + momentum_ * unbiased);
      const float g = gamma_.value[c], b = beta_.value[c], mu = static_cast<float>(mean);
      const float inv_f = static_cast<float>(inv);
      for (int n = 0; n < N; ++n) {
        const float* p = x.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        float* xh = xhat_.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        float* yp = y.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        for (std::int64_t s = 0; s < hw; ++s) {
          xh[s] = (p[s] - mu) * inv_f;
          yp[s] = g * xh[s] + b;
        }
      }
    }
  } else {
    for (int c = 0; c < channels_; ++c) {
      const float inv = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_));
      const float g = gamma_.value[c], b = beta_.value[c], mu = running_mean_[c];
      for (int n = 0; n < N; ++n) {
        const float* p = x.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        float* yp = y.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
        for (std::int64_t s = 0; s < hw; ++s) yp[s] = g * (p[s] - mu) * inv + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  if (!trained_forward_) {
    throw Error("BatchNorm2d::backward called after an eval-mode forward");
  }
  const int N = dy.dim(0), H = dy.dim(2), W = dy.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const double m = static_cast<double>(N) * hw;
  Tensor dx(dy.shape());
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      const float* g = dy.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
      const float* xh = xhat_.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
      for (std::int64_t s = 0; s < hw; ++s) {
        sum_dy += g[s];
        sum_dy_xhat += static_cast<double>(g[s]) * xh[s];
      }
    }
    gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
    beta_.grad[c] += static_cast<float>(sum_dy);
    const double gamma = gamma_.value[c];
    const double k = gamma * invstd_[c] / m;
    for (int n = 0; n < N; ++n) {
      const float* g = dy.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
      const float* xh = xhat_.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
      float* d = dx.data() + (static_cast<std::int64_t>(n) * channels_ + c) * hw;
      for (std::int64_t s = 0; s < hw; ++s) {
        d[s] = static_cast<float>(k * (m * g[s] - sum_dy - xh[s] * sum_dy_xhat));
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm2d::collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".gamma", &gamma_.value});
  out.push_back({prefix + ".beta", &beta_.value});
  out.push_back({prefix + ".running_mean", &running_mean_});
  out.push_back({prefix + ".running_var", &running_var_});
}

// ---------------------------------------------------------------------------
// Activations

Tensor ReLU::forward(const Tensor& x, bool /*train*/) {
  Tensor y(x.shape());
  const float* p = x.data();
  float* q = y.data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) q[i] = p[i] > 0.0f ? p[i] : 0.0f;
  y_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  const std::int64_t n = dy.size();
  for (std::int64_t i = 0; i < n; ++i) dx[i] = y_[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

Tensor Sigmoid::forward(const Tensor& x, bool /*train*/) {
  Tensor y(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
  y_ = y;
  return y;
}

Tensor Sigmoid::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  const std::int64_t n = dy.size();
  for (std::int64_t i = 0; i < n; ++i) dx[i] = dy[i] * y_[i] * (1.0f - y_[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in_features, int out_features, bool bias, Rng& rng)
    : in_(in_features), out_(out_features), weight_({out_features, in_features}) {
  const double std = std::sqrt(1.0 / in_features);
  for (auto& x : weight_.value.vec()) x = static_cast<float>(std * rng.normal());
  if (bias) bias_ = std::make_unique<Param>(std::vector<int>{out_});
}

Tensor Linear::forward(const Tensor& x, bool /*train*/) {
  if (x.rank() != 2 || x.dim(1) != in_) {
    throw ShapeError(fmt::format("Linear: expected (N, {}), got {}", in_, x.shape_str()));
  }
  x_ = x;
  const int N = x.dim(0);
  Tensor y({N, out_});
  auto xm = x.as_matrix(in_, N);            // x^T, column-major
  auto w2 = weight_.value.as_matrix(in_, out_);
  auto ym = y.as_matrix(out_, N);
  ym.noalias() = w2.transpose() * xm;
  if (bias_) {
    for (int n = 0; n < N; ++n) {
      float* row = y.data() + static_cast<std::int64_t>(n) * out_;
      for (int o = 0; o < out_; ++o) row[o] += bias_->value[o];
    }
  }
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const int N = dy.dim(0);
  Tensor dx({N, in_});
  auto dym = dy.as_matrix(out_, N);
  auto xm = x_.as_matrix(in_, N);
  auto w2 = weight_.value.as_matrix(in_, out_);
  auto dw2 = weight_.grad.as_matrix(in_, out_);
  auto dxm = dx.as_matrix(in_, N);
  dw2.noalias() += xm * dym.transpose();
  dxm.noalias() = w2 * dym;
  if (bias_) {
    for (int o = 0; o < out_; ++o) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) s += dy[static_cast<std::int64_t>(n) * out_ + o];
      bias_->grad[o] += static_cast<float>(s);
    }
  }
  return dx;
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  if (bias_) out.push_back(bias_.get());
}

void Linear::collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".weight", &weight_.value});
  if (bias_) out.push_back({prefix + ".bias", &bias_->value});
}

// ---------------------------------------------------------------------------
// Pooling / resize

Tensor GlobalAvgPool::forward(const Tensor& x, bool /*train*/) {
  require_4d(x, "GlobalAvgPool");
  in_shape_ = x.shape();
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor y({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      double s = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      y[static_cast<std::int64_t>(n) * C + c] = static_cast<float>(s / static_cast<double>(hw));
    }
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const int N = in_shape_[0], C = in_shape_[1];
  const std::int64_t hw = static_cast<std::int64_t>(in_shape_[2]) * in_shape_[3];
  const float scale = 1.0f / static_cast<float>(hw);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float g = dy[static_cast<std::int64_t>(n) * C + c] * scale;
      float* p = dx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = g;
    }
  }
  return dx;
}

namespace {
struct LerpWeights {
  int lo, hi;
  float wlo, whi;
};

std::vector<LerpWeights> bilinear_axis(int in_size, int out_size) {
  std::vector<LerpWeights> w(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::max(0.0, std::min(src, static_cast<double>(in_size - 1)));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_size - 1);
    const float frac = static_cast<float>(src - lo);
    w[static_cast<std::size_t>(o)] = {lo, hi, 1.0f - frac, frac};
  }
  return w;
}
}  // namespace

Tensor BilinearResize::forward(const Tensor& x, bool /*train*/) {
  require_4d(x, "BilinearResize");
  in_shape_ = x.shape();
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto wy = bilinear_axis(H, out_h_);
  const auto wx = bilinear_axis(W, out_w_);
  Tensor y({N, C, out_h_, out_w_});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      float* q = y.data() + (static_cast<std::int64_t>(n) * C + c) * out_h_ * out_w_;
      for (int oy = 0; oy < out_h_; ++oy) {
        const auto& a = wy[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w_; ++ox) {
          const auto& b = wx[static_cast<std::size_t>(ox)];
          q[oy * out_w_ + ox] = a.wlo * (b.wlo * p[a.lo * W + b.lo] + b.whi * p[a.lo * W + b.hi]) +
                                a.whi * (b.wlo * p[a.hi * W + b.lo] + b.whi * p[a.hi * W + b.hi]);
        }
      }
    }
  }
  return y;
}

Tensor BilinearResize::backward(const Tensor& dy) {
  const int N = in_shape_[0], C = in_shape_[1], H = in_shape_[2], W = in_shape_[3];
  const auto wy = bilinear_axis(H, out_h_);
  const auto wx = bilinear_axis(W, out_w_);
  Tensor dx(in_shape_);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      float* d = dx.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      const float* g = dy.data() + (static_cast<std::int64_t>(n) * C + c) * out_h_ * out_w_;
      for (int oy = 0; oy < out_h_; ++oy) {
        const auto& a = wy[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w_; ++ox) {
          const auto& b = wx[static_cast<std::size_t>(ox)];
          const float go = g[oy * out_w_ + ox];
          d[a.lo * W + b.lo] += a.wlo * b.wlo * go;
          d[a.lo * W + b.hi] += a.wlo * b.whi * go;
          d[a.hi * W + b.lo] += a.whi * b.wlo * go;
          d[a.hi * W + b.hi] += a.whi * b.whi * go;
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Sequential

Layer* Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  layers_.emplace_back(std::move(name), std::move(layer));
  return layers_.back().second.get();
}

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& [name, layer] : layers_) h = layer->forward(h, train);
  return h;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor g = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->second->backward(g);
  return g;
}

void Sequential::collect_params(std::vector<Param*>& out) {
  for (auto& [name, layer] : layers_) layer->collect_params(out);
}

void Sequential::collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (auto& [name, layer] : layers_) layer->collect_tensors(prefix + "." + name, out);
}

// ---------------------------------------------------------------------------
// Batched classification heads

double softmax_xent_batch(const Tensor& logits, const std::vector<int>& labels, Tensor& dlogits) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw ArgumentError(fmt::format("label count {} != batch size {}", labels.size(), N));
  }
  dlogits = Tensor({N, K});
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* z = logits.data() + static_cast<std::int64_t>(n) * K;
    float* d = dlogits.data() + static_cast<std::int64_t>(n) * K;
    const float zmax = *std::max_element(z, z + K);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k]) - zmax);
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= K) throw ArgumentError(fmt::format("label {} out of range [0, {})", label, K));
    loss += -(static_cast<double>(z[label]) - zmax - std::log(denom));
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(static_cast<double>(z[k]) - zmax) / denom;
      d[k] = static_cast<float>((p - (k == label ? 1.0 : 0.0)) / N);
    }
  }
  return loss / N;
}

double top1_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (N == 0) throw ArgumentError("top1_accuracy: empty batch");
  int correct = 0;
  for (int n = 0; n < N; ++n) {
    const float* z = logits.data() + static_cast<std::int64_t>(n) * K;
    int best = 0;
    for (int k = 1; k < K; ++k) {
      if (z[k] > z[best]) best = k;
    }
    if (best == labels[static_cast<std::size_t>(n)]) ++correct;
  }
  return static_cast<double>(correct) / N;
}

void softened_softmax_batch(const Tensor& logits, double tau, Tensor& probs) {
  const int N = logits.dim(0), K = logits.dim(1);
  probs = Tensor({N, K});
  for (int n = 0; n < N; ++n) {
    const float* z = logits.data() + static_cast<std::int64_t>(n) * K;
    float* p = probs.data() + static_cast<std::int64_t>(n) * K;
    double zmax = -1e300;
    for (int k = 0; k < K; ++k) zmax = std::max(zmax, static_cast<double>(z[k]) / tau);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k]) / tau - zmax);
    for (int k = 0; k < K; ++k) {
      p[k] = static_cast<float>(std::exp(static_cast<double>(z[k]) / tau - zmax) / denom);
    }
  }
}

}  // namespace ckd
