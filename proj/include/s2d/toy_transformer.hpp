#pragma once

// A small pre-norm causal transformer with seed-generated weights. It stands
// in for a frozen language model: deterministic, cheap enough for exhaustive
// finite-difference checks, and deep enough to place the steering layer
// strictly below the pooled layers.
//
// Block l (rows are token positions):
//   a  = rmsnorm(h; g1)
//   h1 = h + softmax_causal(a Wq^T (a Wk^T)^T / sqrt(d)) (a Wv^T) Wo^T
//   b  = rmsnorm(h1; g2)
//   h2 = h1 + silu(b W1^T) W2^T

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <vector>

#include "observer.hpp"

namespace s2d {

struct ToyTransformerConfig {
  int layers = 6;
  int dim = 32;
  int vocab = 64;
  int mlp_mult = 4;
  std::uint64_t seed = 42;
};

class ToyTransformer final : public Observer {
public:
  explicit ToyTransformer(ToyTransformerConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.layers < 1 || cfg_.dim < 2 || cfg_.vocab < 1 || cfg_.mlp_mult < 1)
      throw ConfigError("toy transformer: layers >= 1, dim >= 2, vocab >= 1, mlp_mult >= 1 required");
    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<double> normal;
    const int d = cfg_.dim;
    const int h = d * cfg_.mlp_mult;
    auto gaussian = [&](int rows, int cols, double scale) {
      Matrix m(rows, cols);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * normal(rng);
      return m;
    };
    auto gain = [&](int n) {
      Vector g(n);
      for (int i = 0; i < n; ++i) g[i] = 1.0 + 0.1 * normal(rng);
      return g;
    };
    embedding_ = gaussian(cfg_.vocab, d, 1.0);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_out = 1.0 / std::sqrt(static_cast<double>(h));
    blocks_.reserve(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
      Block b;
      b.g1 = gain(d);
      b.wq = gaussian(d, d, s);
      b.wk = gaussian(d, d, s);
      b.wv = gaussian(d, d, s);
      b.wo = gaussian(d, d, s);
      b.g2 = gain(d);
      b.w1 = gaussian(h, d, s);
      b.w2 = gaussian(d, h, s_out);
      blocks_.push_back(std::move(b));
    }
  }

  int dim() const override { return cfg_.dim; }
  int layers() const override { return cfg_.layers; }
  int vocab() const { return cfg_.vocab; }
  const ToyTransformerConfig& config() const { return cfg_; }

  HiddenStates hidden_states(const TokenSeq& x, const SteeringVector& v,
                             const ExtractionConfig& cfg) const override {
    return forward(x, v, cfg, nullptr);
  }

  UnitVector steered_repr(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const override {
    const HiddenStates hs = forward(x, v, cfg, nullptr);
    return detail::normalize_pooled(detail::pooled_mean(hs, cfg));
  }

  Vector vjp_v(const TokenSeq& x, const SteeringVector& v, const Vector& u,
               const ExtractionConfig& cfg) const override {
    return linearize(x, v, cfg).pullback(u);
  }

  Linearization linearize(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const override {
    auto tape = std::make_shared<Tape>();
    const HiddenStates hs = forward(x, v, cfg, tape.get());
    const Vector m = detail::pooled_mean(hs, cfg);
    UnitVector f = detail::normalize_pooled(m);
    const int n_tok = pooled_token_count(cfg.token_fraction, x.size());
    const auto T = static_cast<Eigen::Index>(x.size());
    auto pull = [this, tape, m, f, cfg, n_tok, T](const Vector& u) -> Vector {
      require_same_dim(u.size(), cfg_.dim, "vjp_v cotangent");
      return backward(*tape, detail::normalize_pullback(m, f, u), cfg, n_tok, T);
    };
    return {std::move(f), std::move(pull)};
  }

  /// Checksum of every weight; the observer is immutable so this never changes after construction.
  std::uint64_t weights_checksum() const {
    std::uint64_t h = detail::fnv1a(embedding_.data(), static_cast<std::size_t>(embedding_.size()));
    auto mix = [&h](const auto& m) { h = detail::fnv1a(m.data(), static_cast<std::size_t>(m.size()), h); };
    for (const auto& b : blocks_) {
      mix(b.g1), mix(b.wq), mix(b.wk), mix(b.wv), mix(b.wo), mix(b.g2), mix(b.w1), mix(b.w2);
    }
    return h;
  }

private:
  static constexpr double kRmsEps = 1e-6;

  struct Block {
    Vector g1, g2;
    Matrix wq, wk, wv, wo, w1, w2;
  };

  struct BlockCache {
    Matrix in;
    Vector r1;
    Matrix a, q, k, val, p, c;
    Matrix h1;
    Vector r2;
    Matrix b, z;
  };

  struct Tape {
    std::vector<BlockCache> blocks; // blocks[l - 1] for block l
  };

  static double silu(double z) { return z * sigmoid(z); }
  static double silu_grad(double z) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
  }

  static Matrix rmsnorm(const Matrix& h, const Vector& g, Vector& r) {
    const auto d = static_cast<double>(h.cols());
    r = ((h.array().square().rowwise().sum() / d) + kRmsEps).sqrt().matrix();
    Matrix y = h;
    for (Eigen::Index t = 0; t < h.rows(); ++t) y.row(t) = h.row(t).cwiseProduct(g.transpose()) / r[t];
    return y;
  }

  static Matrix rmsnorm_back(const Matrix& h, const Vector& g, const Vector& r, const Matrix& dy) {
    const auto d = static_cast<double>(h.cols());
    Matrix dh(h.rows(), h.cols());
    for (Eigen::Index t = 0; t < h.rows(); ++t) {
      const auto gdy = dy.row(t).cwiseProduct(g.transpose());
      const double proj = gdy.dot(h.row(t));
      dh.row(t) = gdy / r[t] - h.row(t) * (proj / (d * r[t] * r[t] * r[t]));
    }
    return dh;
  }

  Matrix embed(const TokenSeq& x) const {
    const auto T = static_cast<Eigen::Index>(x.size());
    const int d = cfg_.dim;
    Matrix h(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
      h.row(t) = embedding_.row(x.ids[static_cast<std::size_t>(t)]);
      // sinusoidal positions
      for (int i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
        h(t, i) += (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
      }
    }
    return h;
  }

  Matrix block_forward(const Block& blk, const Matrix& h, BlockCache* cache) const {
    const auto T = h.rows();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.dim));
    Vector r1, r2;
    Matrix a = rmsnorm(h, blk.g1, r1);
    Matrix q = a * blk.wq.transpose();
    Matrix k = a * blk.wk.transpose();
    Matrix val = a * blk.wv.transpose();
    Matrix p = Matrix::Zero(T, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index s = 0; s <= t; ++s) {
        p(t, s) = q.row(t).dot(k.row(s)) * inv_sqrt_d;
        mx = std::max(mx, p(t, s));
      }
      double sum = 0.0;
      for (Eigen::Index s = 0; s <= t; ++s) {
        p(t, s) = std::exp(p(t, s) - mx);
        sum += p(t, s);
      }
      p.row(t).head(t + 1) /= sum;
    }
    Matrix c = p * val;
    Matrix h1 = h + c * blk.wo.transpose();
    Matrix b = rmsnorm(h1, blk.g2, r2);
    Matrix z = b * blk.w1.transpose();
    Matrix out = h1 + z.unaryExpr([](double e) { return silu(e); }) * blk.w2.transpose();
    if (cache) {
      cache->in = h;
      cache->r1 = std::move(r1);
      cache->a = std::move(a);
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->val = std::move(val);
      cache->p = std::move(p);
      cache->c = std::move(c);
      cache->h1 = std::move(h1);
      cache->r2 = std::move(r2);
      cache->b = std::move(b);
      cache->z = std::move(z);
    }
    return out;
  }

  /// Cotangent of the block input given the cotangent of its output.
  Matrix block_backward(const Block& blk, const BlockCache& cc, const Matrix& d_out) const {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.dim));
    // MLP branch
    const Matrix d_act = d_out * blk.w2;
    const Matrix d_z = d_act.cwiseProduct(cc.z.unaryExpr([](double e) { return silu_grad(e); }));
    const Matrix d_b = d_z * blk.w1;
    const Matrix d_h1 = d_out + rmsnorm_back(cc.h1, blk.g2, cc.r2, d_b);
    // attention branch
    const Matrix d_c = d_h1 * blk.wo;
    const Matrix d_val = cc.p.transpose() * d_c;
    Matrix d_s = d_c * cc.val.transpose();
    const auto T = d_s.rows();
    for (Eigen::Index t = 0; t < T; ++t) {
      double inner = 0.0;
      for (Eigen::Index s = 0; s <= t; ++s) inner += cc.p(t, s) * d_s(t, s);
      for (Eigen::Index s = 0; s < T; ++s) d_s(t, s) = s <= t ? cc.p(t, s) * (d_s(t, s) - inner) : 0.0;
    }
    const Matrix d_q = d_s * cc.k * inv_sqrt_d;
    const Matrix d_k = d_s.transpose() * cc.q * inv_sqrt_d;
    const Matrix d_a = d_q * blk.wq + d_k * blk.wk + d_val * blk.wv;
    return d_h1 + rmsnorm_back(cc.in, blk.g1, cc.r1, d_a);
  }

  HiddenStates forward(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg, Tape* tape) const {
    detail::check_tokens(x, static_cast<std::size_t>(cfg_.vocab));
    detail::check_steering(v, cfg_.dim);
    cfg.check(cfg_.layers);
    HiddenStates hs;
    hs.by_layer.reserve(static_cast<std::size_t>(cfg_.layers));
    if (tape) tape->blocks.resize(static_cast<std::size_t>(cfg_.layers));
    Matrix h = embed(x);
    for (int l = 1; l <= cfg_.layers; ++l) {
      // Blocks below the steering layer do not depend on v, so only later blocks need a tape.
      BlockCache* cache = (tape && l > cfg.steer_layer) ? &tape->blocks[static_cast<std::size_t>(l - 1)] : nullptr;
      h = block_forward(blocks_[static_cast<std::size_t>(l - 1)], h, cache);
      if (l == cfg.steer_layer) h.rowwise() += v.transpose();
      hs.by_layer.push_back(h);
    }
    return hs;
  }

  Vector backward(const Tape& tape, const Vector& d_mean, const ExtractionConfig& cfg, int n_tok,
                  Eigen::Index T) const {
    const int L = cfg_.layers;
    const Vector d_pooled = d_mean / static_cast<double>(cfg.layer_count * n_tok);
    const int first_pooled = L - cfg.layer_count + 1;
    auto add_direct = [&](Matrix& g, int l) {
      if (l >= first_pooled) g.bottomRows(n_tok).rowwise() += d_pooled.transpose();
    };
    Matrix g = Matrix::Zero(T, cfg_.dim);
    add_direct(g, L);
    for (int l = L; l > cfg.steer_layer; --l) {
      g = block_backward(blocks_[static_cast<std::size_t>(l - 1)], tape.blocks[static_cast<std::size_t>(l - 1)], g);
      add_direct(g, l - 1);
    }
    // v is added to every position of the steering layer's output.
    return g.colwise().sum().transpose();
  }

  ToyTransformerConfig cfg_;
  Matrix embedding_;
  std::vector<Block> blocks_;
};

} // namespace s2d
