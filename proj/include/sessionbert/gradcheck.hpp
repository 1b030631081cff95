#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sessionbert/model.hpp"

namespace sessionbert {

struct GradCheckReport {
  double max_rel_error = 0;
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Elementwise |a - n| / max(|a|, |n|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Small deterministic batch covering MLM labels and both head labels, with a
// padded tail on every example.
inline std::vector<Example> grad_check_batch(const ModelConfig& cfg, std::uint64_t seed, std::size_t size = 3) {
  Rng rng(seed);
  const auto specials = static_cast<TokenId>(Vocabulary::num_special());
  std::vector<Example> batch;
  for (std::size_t b = 0; b < size; ++b) {
    Example ex;
    const auto n = static_cast<std::size_t>(cfg.max_len);
    const std::size_t real = n - 1 - b % 3;
    ex.input_ids.assign(n, token_id::kPad);
    ex.attention_mask.assign(n, 0);
    ex.mlm_labels.assign(n, kIgnoreLabel);
    ex.input_ids[0] = token_id::kCls;
    for (std::size_t i = 1; i < real; ++i)
      ex.input_ids[i] = specials + static_cast<TokenId>(rng.below(static_cast<std::size_t>(cfg.vocab_size - specials)));
    ex.input_ids[real - 1] = token_id::kSep;
    for (std::size_t i = 0; i < real; ++i) ex.attention_mask[i] = 1;
    for (std::size_t i = 1; i + 1 < real; i += 2) {
      ex.mlm_labels[i] = ex.input_ids[i];
      if (rng.bernoulli(0.5)) ex.input_ids[i] = token_id::kMask;
    }
    ex.service = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.num_services)));
    ex.page = static_cast<int>(rng.below(static_cast<std::size_t>(cfg.num_pages)));
    batch.push_back(std::move(ex));
  }
  return batch;
}

// Compares backprop gradients of compute_loss with central differences
// (step h) on every entry of every tensor the mode trains. Double precision,
// dropout off.
inline GradCheckReport grad_check(ModelConfig cfg, TrainMode mode, std::uint64_t seed = 7, double h = 1e-5) {
  cfg.dropout = 0.0;
  cfg.validate();
  Rng rng(seed);
  // Larger than the default init so that attention and LayerNorm are away
  // from their near-linear regime.
  ModelParams<double> params = ModelParams<double>::init(cfg, rng, 0.5);
  params.for_each([&](const std::string&, Mat<double>& t) {
    if (t.rows() == 1)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.1 * rng.normal();
  });
  const auto batch = grad_check_batch(cfg, seed + 1);
  ModelParams<double> grads = ModelParams<double>::zeros(cfg);
  grads.set_zero();
  compute_loss<double>(params, cfg, batch, mode, &grads);

  std::vector<Mat<double>*> g;
  grads.for_each([&](const std::string&, Mat<double>& t) { g.push_back(&t); });
  GradCheckReport report;
  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Mat<double>& t) {
    Mat<double>& ga = *g[idx++];
    if (!trains(mode, name)) {
      report.per_tensor.emplace_back(name, ga.cwiseAbs().maxCoeff());  // must be exactly zero
      report.max_rel_error = std::max(report.max_rel_error, report.per_tensor.back().second);
      return;
    }
    double worst = 0;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double up = compute_loss<double>(params, cfg, batch, mode, nullptr).total;
      t.data()[i] = saved - h;
      const double down = compute_loss<double>(params, cfg, batch, mode, nullptr).total;
      t.data()[i] = saved;
      worst = std::max(worst, relative_error(ga.data()[i], (up - down) / (2 * h)));
    }
    report.per_tensor.emplace_back(name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  });
  return report;
}

// Default tiny configuration for grad_check.
inline ModelConfig tiny_grad_check_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.max_len = 10;
  c.vocab_size = static_cast<int>(Vocabulary::num_special()) + 9;
  c.num_services = 5;
  c.num_pages = 7;
  c.dropout = 0.0;
  return c;
}

// One affine layer + softmax cross-entropy over `rows` inputs, against
// central differences. Returns the max elementwise relative error over W, b.
inline double grad_check_linear(std::uint64_t seed, int rows = 4, int in = 6, int classes = 5, double h = 1e-5) {
  Rng rng(seed);
  Mat<double> x(rows, in), w(in, classes), b(1, classes);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = 0.1 * rng.normal();
  std::vector<int> labels;
  for (int r = 0; r < rows; ++r) labels.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(classes))));
  const double scale = 1.0 / rows;
  Mat<double> dw = Mat<double>::Zero(in, classes), db = Mat<double>::Zero(1, classes);
  nn::linear_cross_entropy<double>(x, w, b, labels, scale, &dw, &db, nullptr);
  double worst = 0;
  auto check = [&](Mat<double>& p, const Mat<double>& g) {
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double up = nn::linear_cross_entropy<double>(x, w, b, labels, scale, nullptr, nullptr, nullptr);
      p.data()[i] = saved - h;
      const double down = nn::linear_cross_entropy<double>(x, w, b, labels, scale, nullptr, nullptr, nullptr);
      p.data()[i] = saved;
      worst = std::max(worst, relative_error(g.data()[i], (up - down) / (2 * h)));
    }
  };
  check(w, dw);
  check(b, db);
  return worst;
}

}  // namespace sessionbert
