#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sessionbert/common.hpp"
#include "sessionbert/tokenizer.hpp"

namespace sessionbert {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_len = 64;
  int vocab_size = 0;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  // Label-space widths of the classification heads.
  int num_services = 0;
  int num_pages = 0;

  void validate() const {
    if (num_layers < 1) throw ValidationError("num_layers", "must be >= 1");
    if (num_heads < 1) throw ValidationError("num_heads", "must be >= 1");
    if (d_model < 1 || d_model % num_heads != 0)
      throw ValidationError("d_model", "must be a positive multiple of num_heads");
    if (d_ff < 1) throw ValidationError("d_ff", "must be >= 1");
    if (max_len < 8) throw ValidationError("max_len", "must be >= 8");
    if (vocab_size <= static_cast<int>(Vocabulary::num_special()))
      throw ValidationError("vocab_size", "must exceed the special-token count");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout", "must be in [0,1)");
    if (num_services < 1) throw ValidationError("num_services", "must be >= 1");
    if (num_pages < 1) throw ValidationError("num_pages", "must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TrainMode { PretrainMlm, FinetuneMultitask, FinetuneService, FinetunePage };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::PretrainMlm: return "pretrain_mlm";
    case TrainMode::FinetuneMultitask: return "finetune_multitask";
    case TrainMode::FinetuneService: return "finetune_service";
    case TrainMode::FinetunePage: return "finetune_page";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (auto m : {TrainMode::PretrainMlm, TrainMode::FinetuneMultitask, TrainMode::FinetuneService,
                 TrainMode::FinetunePage})
    if (to_string(m) == s) return m;
  throw ValidationError("mode", "unknown training mode " + std::string(s));
}

template <typename S>
struct LayerParams {
  // No key bias: it adds the same constant to every logit of a query's
  // softmax, so it never changes the output and its gradient is zero.
  Mat<S> wq, bq, wk, wv, bv, wo, bo;
  Mat<S> ln1_g, ln1_b;
  Mat<S> w1, b1, w2, b2;
  Mat<S> ln2_g, ln2_b;
};

// All trainable tensors. Vectors are stored as 1 x n matrices so that every
// tensor can be visited uniformly.
template <typename S>
struct ModelParams {
  Mat<S> tok_emb, pos_emb, emb_ln_g, emb_ln_b;
  std::vector<LayerParams<S>> layers;
  Mat<S> mlm_w, mlm_b;
  Mat<S> service_w, service_b;
  Mat<S> page_w, page_b;

  // Visits (name, tensor) in a fixed order. Names carry the head prefix
  // ("mlm.", "service.", "page.") used for mode gating.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("embed.tok"), self.tok_emb);
    f(std::string("embed.pos"), self.pos_emb);
    f(std::string("embed.ln_g"), self.emb_ln_g);
    f(std::string("embed.ln_b"), self.emb_ln_b);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "wq", L.wq); f(p + "bq", L.bq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv); f(p + "bv", L.bv);
      f(p + "wo", L.wo); f(p + "bo", L.bo);
      f(p + "ln1_g", L.ln1_g); f(p + "ln1_b", L.ln1_b);
      f(p + "w1", L.w1); f(p + "b1", L.b1);
      f(p + "w2", L.w2); f(p + "b2", L.b2);
      f(p + "ln2_g", L.ln2_g); f(p + "ln2_b", L.ln2_b);
    }
    f(std::string("mlm.w"), self.mlm_w);
    f(std::string("mlm.b"), self.mlm_b);
    f(std::string("service.w"), self.service_w);
    f(std::string("service.b"), self.service_b);
    f(std::string("page.w"), self.page_w);
    f(std::string("page.b"), self.page_b);
  }

  template <typename F> void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F> void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  // Shapes implied by a config, zero-filled; LayerNorm gains set to 1.
  static ModelParams zeros(const ModelConfig& c) {
    ModelParams p;
    const int d = c.d_model, f = c.d_ff, v = c.vocab_size;
    auto z = [](int r, int k) { return Mat<S>::Zero(r, k); };
    p.tok_emb = z(v, d);
    p.pos_emb = z(c.max_len, d);
    p.emb_ln_g = Mat<S>::Ones(1, d);
    p.emb_ln_b = z(1, d);
    p.layers.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& L : p.layers) {
      L.wq = z(d, d); L.bq = z(1, d);
      L.wk = z(d, d);
      L.wv = z(d, d); L.bv = z(1, d);
      L.wo = z(d, d); L.bo = z(1, d);
      L.ln1_g = Mat<S>::Ones(1, d); L.ln1_b = z(1, d);
      L.w1 = z(d, f); L.b1 = z(1, f);
      L.w2 = z(f, d); L.b2 = z(1, d);
      L.ln2_g = Mat<S>::Ones(1, d); L.ln2_b = z(1, d);
    }
    p.mlm_w = z(d, v); p.mlm_b = z(1, v);
    p.service_w = z(d, c.num_services); p.service_b = z(1, c.num_services);
    p.page_w = z(d, c.num_pages); p.page_b = z(1, c.num_pages);
    return p;
  }

  // Weight matrices ~ N(0, 0.02^2); biases zero; LayerNorm gains one.
  static ModelParams init(const ModelConfig& c, Rng& rng, double stddev = 0.02) {
    ModelParams p = zeros(c);
    p.for_each([&](const std::string& name, Mat<S>& t) {
      const auto leaf = name.substr(name.rfind('.') + 1);
      if (leaf != "tok" && leaf != "pos" && leaf[0] != 'w') return;
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng.normal() * stddev);
    });
    return p;
  }

  void set_zero() {
    for_each([](const std::string&, Mat<S>& t) { t.setZero(); });
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.layers.resize(layers.size());
    std::vector<const Mat<S>*> src;
    for_each([&](const std::string&, const Mat<S>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Mat<T>& t) { t = src[i++]->template cast<T>(); });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Mat<S>& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<S>& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }
};

// Parameter groups a mode trains: the encoder always, plus its head(s).
inline bool trains(TrainMode mode, std::string_view name) {
  const bool mlm = name.starts_with("mlm."), svc = name.starts_with("service."),
             page = name.starts_with("page.");
  switch (mode) {
    case TrainMode::PretrainMlm: return !svc && !page;
    case TrainMode::FinetuneMultitask: return !mlm;
    case TrainMode::FinetuneService: return !mlm && !page;
    case TrainMode::FinetunePage: return !mlm && !svc;
  }
  return false;
}

// One training/evaluation example. mlm_labels may be empty for fine-tuning;
// service/page are label indices or -1.
struct Example {
  std::vector<TokenId> input_ids;
  std::vector<int> attention_mask;
  std::vector<TokenId> mlm_labels;
  int service = -1;
  int page = -1;
};

namespace nn {

template <typename S>
struct LayerNormCache {
  Mat<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, LayerNormCache<S>& cache) {
  constexpr S kEps = S(1e-5);
  const auto n = x.rows();
  const auto d = static_cast<S>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  Mat<S> y(n, x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).sum() / d;
    const S var = (x.row(i).array() - mean).square().sum() / d;
    const S rstd = S(1) / std::sqrt(var + kEps);
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
  return y;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& g, const LayerNormCache<S>& cache,
                           Mat<S>* dg, Mat<S>* db) {
  const auto n = dy.rows();
  const auto d = static_cast<S>(dy.cols());
  if (dg) dg->row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  if (db) db->row(0) += dy.colwise().sum();
  Mat<S> dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = (dy.row(i).array() * g.row(0).array()).eval();
    const S m1 = dxhat.sum() / d;
    const S m2 = (dxhat * cache.xhat.row(i).array()).sum() / d;
    dx.row(i) = (cache.rstd(i) * (dxhat - m1 - cache.xhat.row(i).array() * m2)).matrix();
  }
  return dx;
}

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2))));
}

template <typename S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::sqrt(S(2))));
  const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * S(3.14159265358979323846));
  return cdf + x * pdf;
}

// Row-wise log-softmax.
template <typename S>
Mat<S> log_softmax(const Mat<S>& z) {
  Mat<S> out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const S m = z.row(i).maxCoeff();
    const S lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  return out;
}

// Affine head + mean cross-entropy scaled by `scale` (so that several calls
// can share one normalizer). Accumulates dW, db and returns dX.
template <typename S>
S linear_cross_entropy(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b, std::span<const int> labels,
                       S scale, Mat<S>* dw, Mat<S>* db, Mat<S>* dx) {
  Mat<S> z = x * w;
  z.rowwise() += b.row(0);
  const Mat<S> lp = log_softmax(z);
  S loss = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw std::out_of_range("label id out of range");
    loss -= lp(i, y);
  }
  if (dw || db || dx) {
    Mat<S> dz = lp.array().exp();
    for (Eigen::Index i = 0; i < z.rows(); ++i) dz(i, labels[static_cast<std::size_t>(i)]) -= S(1);
    dz *= scale;
    if (dw) dw->noalias() += x.transpose() * dz;
    if (db) db->row(0) += dz.colwise().sum();
    if (dx) dx->noalias() = dz * w.transpose();
  }
  return loss * scale;
}

}  // namespace nn

// Activations of one forward pass kept for backprop.
template <typename S>
struct ForwardCache {
  struct Layer {
    Mat<S> input, q, k, v, ctx;
    std::vector<Mat<S>> probs;  // per head, n x n
    Mat<S> attn_drop;           // dropout scale per element (empty when off)
    nn::LayerNormCache<S> ln1;
    Mat<S> h1;                  // output of LN1
    Mat<S> ff_pre, ff_act;
    Mat<S> ff_drop;
    nn::LayerNormCache<S> ln2;
  };
  std::vector<TokenId> ids;
  std::vector<int> key_mask;
  nn::LayerNormCache<S> emb_ln;
  Mat<S> emb_drop;
  std::vector<Layer> layers;
  Mat<S> output;
};

namespace detail {
template <typename S>
Mat<S> dropout_mask(Eigen::Index r, Eigen::Index c, double p, Rng& rng) {
  Mat<S> m(r, c);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(p) ? S(0) : keep;
  return m;
}
}  // namespace detail

// Post-LN transformer encoder over the given rows. Keys with key_mask == 0
// are excluded from every softmax. Dropout is active iff dropout_rng is set.
template <typename S>
Mat<S> encoder_forward(const ModelParams<S>& P, const ModelConfig& cfg, std::span<const TokenId> ids,
                       std::span<const int> key_mask, ForwardCache<S>* cache, Rng* dropout_rng) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  const int d = cfg.d_model, heads = cfg.num_heads, dh = d / heads;
  if (n == 0 || n > cfg.max_len) throw std::invalid_argument("encoder_forward: bad sequence length");
  if (std::none_of(key_mask.begin(), key_mask.end(), [](int m) { return m != 0; }))
    throw std::invalid_argument("encoder_forward: all-pad input");
  const bool drop = dropout_rng && cfg.dropout > 0.0;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Mat<S> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("token id out of range");
    x.row(i) = P.tok_emb.row(id) + P.pos_emb.row(i);
  }
  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  c.ids.assign(ids.begin(), ids.end());
  c.key_mask.assign(key_mask.begin(), key_mask.end());
  c.layers.resize(P.layers.size());
  Mat<S> h = nn::layer_norm(x, P.emb_ln_g, P.emb_ln_b, c.emb_ln);
  if (drop) {
    c.emb_drop = detail::dropout_mask<S>(n, d, cfg.dropout, *dropout_rng);
    h.array() *= c.emb_drop.array();
  } else {
    c.emb_drop.resize(0, 0);
  }

  for (std::size_t l = 0; l < P.layers.size(); ++l) {
    const auto& L = P.layers[l];
    auto& lc = c.layers[l];
    lc.input = h;
    lc.q = h * L.wq; lc.q.rowwise() += L.bq.row(0);
    lc.k = h * L.wk;
    lc.v = h * L.wv; lc.v.rowwise() += L.bv.row(0);
    lc.ctx.resize(n, d);
    lc.probs.resize(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = lc.q.middleCols(hd * dh, dh);
      const auto kh = lc.k.middleCols(hd * dh, dh);
      Mat<S> s = (qh * kh.transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        S m = -std::numeric_limits<S>::infinity();
        for (Eigen::Index j = 0; j < n; ++j)
          if (key_mask[static_cast<std::size_t>(j)]) m = std::max(m, s(i, j));
        S sum = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const S e = key_mask[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - m) : S(0);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      lc.ctx.middleCols(hd * dh, dh).noalias() = s * lc.v.middleCols(hd * dh, dh);
      lc.probs[static_cast<std::size_t>(hd)] = std::move(s);
    }
    Mat<S> a = lc.ctx * L.wo;
    a.rowwise() += L.bo.row(0);
    if (drop) {
      lc.attn_drop = detail::dropout_mask<S>(n, d, cfg.dropout, *dropout_rng);
      a.array() *= lc.attn_drop.array();
    } else {
      lc.attn_drop.resize(0, 0);
    }
    lc.h1 = nn::layer_norm(Mat<S>(h + a), L.ln1_g, L.ln1_b, lc.ln1);
    lc.ff_pre = lc.h1 * L.w1;
    lc.ff_pre.rowwise() += L.b1.row(0);
    lc.ff_act = lc.ff_pre.unaryExpr([](S v) { return nn::gelu(v); });
    Mat<S> f = lc.ff_act * L.w2;
    f.rowwise() += L.b2.row(0);
    if (drop) {
      lc.ff_drop = detail::dropout_mask<S>(n, d, cfg.dropout, *dropout_rng);
      f.array() *= lc.ff_drop.array();
    } else {
      lc.ff_drop.resize(0, 0);
    }
    h = nn::layer_norm(Mat<S>(lc.h1 + f), L.ln2_g, L.ln2_b, lc.ln2);
  }
  c.output = h;
  return h;
}

// Backprop of d(loss)/d(output) through the encoder; accumulates into G.
template <typename S>
void encoder_backward(const ModelParams<S>& P, const ModelConfig& cfg, const ForwardCache<S>& c,
                      Mat<S> dh, ModelParams<S>& G) {
  const auto n = dh.rows();
  const int d = cfg.d_model, heads = cfg.num_heads, dh_size = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh_size));
  for (std::size_t l = P.layers.size(); l-- > 0;) {
    const auto& L = P.layers[l];
    auto& GL = G.layers[l];
    const auto& lc = c.layers[l];

    Mat<S> dr2 = nn::layer_norm_backward(dh, L.ln2_g, lc.ln2, &GL.ln2_g, &GL.ln2_b);
    Mat<S> df = dr2;
    if (lc.ff_drop.size()) df.array() *= lc.ff_drop.array();
    GL.w2.noalias() += lc.ff_act.transpose() * df;
    GL.b2.row(0) += df.colwise().sum();
    Mat<S> dact = df * L.w2.transpose();
    Mat<S> dpre = dact.cwiseProduct(lc.ff_pre.unaryExpr([](S v) { return nn::gelu_grad(v); }));
    GL.w1.noalias() += lc.h1.transpose() * dpre;
    GL.b1.row(0) += dpre.colwise().sum();
    Mat<S> dh1 = dr2;
    dh1.noalias() += dpre * L.w1.transpose();

    Mat<S> dr1 = nn::layer_norm_backward(dh1, L.ln1_g, lc.ln1, &GL.ln1_g, &GL.ln1_b);
    Mat<S> da = dr1;
    if (lc.attn_drop.size()) da.array() *= lc.attn_drop.array();
    GL.wo.noalias() += lc.ctx.transpose() * da;
    GL.bo.row(0) += da.colwise().sum();
    Mat<S> dctx = da * L.wo.transpose();

    Mat<S> dq(n, d), dk(n, d), dv(n, d);
    for (int hd = 0; hd < heads; ++hd) {
      const auto& p = lc.probs[static_cast<std::size_t>(hd)];
      const auto dctx_h = dctx.middleCols(hd * dh_size, dh_size);
      Mat<S> dp = dctx_h * lc.v.middleCols(hd * dh_size, dh_size).transpose();
      dv.middleCols(hd * dh_size, dh_size).noalias() = p.transpose() * dctx_h;
      Mat<S> ds = p.cwiseProduct(dp);
      const Eigen::Matrix<S, Eigen::Dynamic, 1> rows = ds.rowwise().sum();
      ds -= p.cwiseProduct(rows.replicate(1, n));
      ds *= scale;
      dq.middleCols(hd * dh_size, dh_size).noalias() = ds * lc.k.middleCols(hd * dh_size, dh_size);
      dk.middleCols(hd * dh_size, dh_size).noalias() =
          ds.transpose() * lc.q.middleCols(hd * dh_size, dh_size);
    }
    GL.wq.noalias() += lc.input.transpose() * dq;
    GL.bq.row(0) += dq.colwise().sum();
    GL.wk.noalias() += lc.input.transpose() * dk;
    GL.wv.noalias() += lc.input.transpose() * dv;
    GL.bv.row(0) += dv.colwise().sum();
    dh = dr1;
    dh.noalias() += dq * L.wq.transpose();
    dh.noalias() += dk * L.wk.transpose();
    dh.noalias() += dv * L.wv.transpose();
  }
  if (c.emb_drop.size()) dh.array() *= c.emb_drop.array();
  Mat<S> dx = nn::layer_norm_backward(dh, P.emb_ln_g, c.emb_ln, &G.emb_ln_g, &G.emb_ln_b);
  for (Eigen::Index i = 0; i < n; ++i) {
    G.tok_emb.row(c.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    G.pos_emb.row(i) += dx.row(i);
  }
}

// Number of leading positions that must be computed: the real prefix when
// the mask is prefix-shaped, else the whole sequence. Outputs on real rows
// do not depend on trailing pad rows, since pads never act as keys.
inline std::size_t active_length(std::span<const int> mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  for (std::size_t i = n; i < mask.size(); ++i)
    if (mask[i]) return mask.size();
  return n;
}

// Mean of final hidden states over real (mask == 1) rows.
template <typename S>
Mat<S> mean_pool(const Mat<S>& h, std::span<const int> mask) {
  Mat<S> pooled = Mat<S>::Zero(1, h.cols());
  S count = 0;
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    if (mask[static_cast<std::size_t>(i)]) {
      pooled += h.row(i);
      count += 1;
    }
  return pooled / count;
}

struct LossBreakdown {
  double total = 0;
  double mlm = 0;
  double service = 0;
  double page = 0;
};

// Loss of a batch under `mode`; accumulates gradients into *grads when given
// (only parameters the mode trains receive nonzero gradient).
//   MLM:       mean cross-entropy over all labeled positions of the batch.
//   multitask: mean CE of the service head + mean CE of the page head, both
//              on the mean-pooled representation.
template <typename S>
LossBreakdown compute_loss(const ModelParams<S>& P, const ModelConfig& cfg, std::span<const Example> batch,
                           TrainMode mode, ModelParams<S>* grads, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
  const bool use_mlm = mode == TrainMode::PretrainMlm;
  const bool use_svc = mode == TrainMode::FinetuneMultitask || mode == TrainMode::FinetuneService;
  const bool use_page = mode == TrainMode::FinetuneMultitask || mode == TrainMode::FinetunePage;

  std::size_t total_labeled = 0;
  if (use_mlm) {
    for (const auto& ex : batch)
      for (auto y : ex.mlm_labels)
        if (y != kIgnoreLabel) ++total_labeled;
    if (total_labeled == 0) throw std::invalid_argument("compute_loss: no MLM labels in batch");
  }
  for (const auto& ex : batch) {
    if (use_svc && (ex.service < 0 || ex.service >= cfg.num_services))
      throw std::out_of_range("service label out of range");
    if (use_page && (ex.page < 0 || ex.page >= cfg.num_pages))
      throw std::out_of_range("page label out of range");
  }
  const S mlm_scale = use_mlm ? S(1) / static_cast<S>(total_labeled) : S(0);
  const S ex_scale = S(1) / static_cast<S>(batch.size());

  LossBreakdown out;
  ForwardCache<S> cache;
  for (const auto& ex : batch) {
    const std::size_t n = active_length(ex.attention_mask);
    std::span<const TokenId> ids(ex.input_ids.data(), n);
    std::span<const int> mask(ex.attention_mask.data(), n);
    const Mat<S> h = encoder_forward(P, cfg, ids, mask, grads ? &cache : nullptr, dropout_rng);
    Mat<S> dh;
    if (grads) dh = Mat<S>::Zero(h.rows(), h.cols());

    if (use_mlm) {
      std::vector<int> rows, labels;
      for (std::size_t i = 0; i < n; ++i)
        if (ex.mlm_labels[i] != kIgnoreLabel) {
          rows.push_back(static_cast<int>(i));
          labels.push_back(ex.mlm_labels[i]);
        }
      if (!rows.empty()) {
        Mat<S> x(static_cast<Eigen::Index>(rows.size()), h.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = h.row(rows[r]);
        Mat<S> dx;
        const S l = nn::linear_cross_entropy<S>(x, P.mlm_w, P.mlm_b, labels, mlm_scale,
                                                grads ? &grads->mlm_w : nullptr,
                                                grads ? &grads->mlm_b : nullptr, grads ? &dx : nullptr);
        out.mlm += static_cast<double>(l);
        if (grads)
          for (std::size_t r = 0; r < rows.size(); ++r) dh.row(rows[r]) += dx.row(static_cast<Eigen::Index>(r));
      }
    }
    if (use_svc || use_page) {
      const Mat<S> pooled = mean_pool(h, mask);
      Mat<S> dpooled = Mat<S>::Zero(1, h.cols());
      auto head = [&](const Mat<S>& w, const Mat<S>& b, int label, Mat<S>* gw, Mat<S>* gb) {
        const int y[1] = {label};
        Mat<S> dx;
        const S l = nn::linear_cross_entropy<S>(pooled, w, b, y, ex_scale, gw, gb, grads ? &dx : nullptr);
        if (grads) dpooled += dx;
        return static_cast<double>(l);
      };
      if (use_svc)
        out.service += head(P.service_w, P.service_b, ex.service, grads ? &grads->service_w : nullptr,
                            grads ? &grads->service_b : nullptr);
      if (use_page)
        out.page += head(P.page_w, P.page_b, ex.page, grads ? &grads->page_w : nullptr,
                         grads ? &grads->page_b : nullptr);
      if (grads) {
        const S inv = S(1) / static_cast<S>(std::count(mask.begin(), mask.end(), 1));
        for (Eigen::Index i = 0; i < h.rows(); ++i)
          if (mask[static_cast<std::size_t>(i)]) dh.row(i) += dpooled * inv;
      }
    }
    if (grads) encoder_backward(P, cfg, cache, std::move(dh), *grads);
  }
  out.total = out.mlm + out.service + out.page;
  return out;
}

// Parameters plus Adam moments and the label spaces the heads predict over.
template <typename S>
struct ModelState {
  ModelConfig config;
  ModelParams<S> params;
  ModelParams<S> adam_m;
  ModelParams<S> adam_v;
  std::int64_t step = 0;
  std::vector<std::string> services;
  std::vector<std::string> pages;

  static ModelState create(const ModelConfig& cfg, std::vector<std::string> services,
                           std::vector<std::string> pages) {
    cfg.validate();
    if (static_cast<int>(services.size()) != cfg.num_services)
      throw ValidationError("num_services", "does not match the service label space");
    if (static_cast<int>(pages.size()) != cfg.num_pages)
      throw ValidationError("num_pages", "does not match the page label space");
    ModelState s;
    s.config = cfg;
    Rng rng(cfg.seed);
    s.params = ModelParams<S>::init(cfg, rng);
    s.adam_m = ModelParams<S>::zeros(cfg);
    s.adam_m.set_zero();
    s.adam_v = s.adam_m;
    s.services = std::move(services);
    s.pages = std::move(pages);
    return s;
  }

  int service_index(const std::string& id) const { return index_of(services, id); }
  int page_index(const std::string& id) const { return index_of(pages, id); }

 private:
  static int index_of(const std::vector<std::string>& v, const std::string& id) {
    auto it = std::find(v.begin(), v.end(), id);
    return it == v.end() ? -1 : static_cast<int>(it - v.begin());
  }
};

// Final-layer hidden states for a full encoding, [max_len x d_model].
template <typename S>
Mat<S> forward_encoder(const Encoding& enc, const ModelState<S>& state) {
  return encoder_forward<S>(state.params, state.config, enc.input_ids, enc.attention_mask, nullptr, nullptr);
}

// Mean-pooled final hidden state over the real prefix; dropout off.
template <typename S>
Mat<S> pooled_representation(const Encoding& enc, const ModelState<S>& state) {
  const std::size_t n = active_length(enc.attention_mask);
  std::span<const TokenId> ids(enc.input_ids.data(), n);
  std::span<const int> mask(enc.attention_mask.data(), n);
  return mean_pool(encoder_forward<S>(state.params, state.config, ids, mask, nullptr, nullptr), mask);
}

}  // namespace sessionbert
