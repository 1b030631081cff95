#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sessionbert/corpus.hpp"
#include "sessionbert/model.hpp"
#include "sessionbert/tokenizer.hpp"

namespace sessionbert {

struct TrainConfig {
  int epochs = 3;
  double learning_rate = 2e-5;
  // Small batches: at this learning rate each Adam step moves a weight by
  // roughly lr, so the step count is what limits three epochs.
  int batch_size = 4;
  TrainMode mode = TrainMode::PretrainMlm;
  std::uint64_t seed = 0;
  double mask_rate = 0.15;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs", "must be >= 1");
    if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate", "must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ValidationError("mask_rate", "must be in (0,1]");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;  // NaN when no validation data
};

template <typename S>
struct TrainResult {
  ModelState<S> state;
  std::vector<EpochMetrics> epochs;
  double initial_val_loss = 0;  // before the first update; NaN without validation data
  std::size_t skipped_single_activity = 0;
};

// Session with its final activity removed from the activity list; context
// blocks are kept as recorded.
inline SessionRecord without_final_activity(const SessionRecord& r) {
  SessionRecord out = r;
  out.activities.pop_back();
  return out;
}

// Fine-tuning example: input hides the final activity, labels are its
// (service, page). Returns false for single-activity sessions.
template <typename S>
bool make_finetune_example(const SessionRecord& r, const Vocabulary& vocab, const ModelState<S>& state,
                           Example& ex) {
  if (r.activities.size() < 2) return false;
  const auto& last = r.activities.back();
  ex = {};
  auto enc = encode(flatten_session(without_final_activity(r)), vocab,
                    static_cast<std::size_t>(state.config.max_len));
  ex.input_ids = std::move(enc.input_ids);
  ex.attention_mask = std::move(enc.attention_mask);
  ex.service = state.service_index(last.service);
  ex.page = state.page_index(last.page);
  if (ex.service < 0) throw ValidationError("activities", "service " + last.service + " not in label space");
  if (ex.page < 0) throw ValidationError("activities", "page " + last.page + " not in label space");
  return true;
}

inline std::vector<Encoding> encode_records(const std::vector<SessionRecord>& records,
                                            const Vocabulary& vocab, std::size_t max_len) {
  std::vector<Encoding> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode(flatten_session(r), vocab, max_len));
  return out;
}

inline Example mlm_example(const Encoding& enc, std::size_t vocab_size, Rng& rng, double mask_rate) {
  auto m = mask_for_mlm(enc, vocab_size, rng, mask_rate);
  return Example{std::move(m.input_ids), std::move(m.attention_mask), std::move(m.label_ids), -1, -1};
}

// Fixed-seed MLM instances for validation and reporting.
inline std::vector<Example> mlm_eval_set(const std::vector<SessionRecord>& records, const Vocabulary& vocab,
                                         std::size_t max_len, std::uint64_t seed, double mask_rate = 0.15) {
  Rng rng(seed);
  std::vector<Example> out;
  for (const auto& enc : encode_records(records, vocab, max_len)) {
    if (std::none_of(enc.input_ids.begin(), enc.input_ids.end(), [](TokenId t) { return is_maskable(t); }))
      continue;
    out.push_back(mlm_example(enc, vocab.size(), rng, mask_rate));
  }
  return out;
}

template <typename S>
std::vector<Example> finetune_set(const std::vector<SessionRecord>& records, const Vocabulary& vocab,
                                  const ModelState<S>& state, std::size_t* skipped = nullptr) {
  std::vector<Example> out;
  std::size_t skip = 0;
  for (const auto& r : records) {
    Example ex;
    if (make_finetune_example(r, vocab, state, ex))
      out.push_back(std::move(ex));
    else
      ++skip;
  }
  if (skipped) *skipped = skip;
  return out;
}

// Adam update of the parameters `mode` trains.
template <typename S>
void adam_step(ModelState<S>& state, const ModelParams<S>& grads, const TrainConfig& tc, TrainMode mode) {
  ++state.step;
  const double b1 = tc.beta1, b2 = tc.beta2;
  const S c1 = static_cast<S>(1.0 - std::pow(b1, static_cast<double>(state.step)));
  const S c2 = static_cast<S>(1.0 - std::pow(b2, static_cast<double>(state.step)));
  const S lr = static_cast<S>(tc.learning_rate), eps = static_cast<S>(tc.epsilon);
  std::vector<Mat<S>*> p, m, v;
  std::vector<const Mat<S>*> g;
  std::vector<bool> on;
  state.params.for_each([&](const std::string& name, Mat<S>& t) {
    p.push_back(&t);
    on.push_back(trains(mode, name));
  });
  state.adam_m.for_each([&](const std::string&, Mat<S>& t) { m.push_back(&t); });
  state.adam_v.for_each([&](const std::string&, Mat<S>& t) { v.push_back(&t); });
  grads.for_each([&](const std::string&, const Mat<S>& t) { g.push_back(&t); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!on[i]) continue;
    m[i]->array() = static_cast<S>(b1) * m[i]->array() + static_cast<S>(1 - b1) * g[i]->array();
    v[i]->array() = static_cast<S>(b2) * v[i]->array() + static_cast<S>(1 - b2) * g[i]->array().square();
    p[i]->array() -= lr * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps);
  }
  if (!state.params.all_finite()) throw NumericalError("non-finite parameter after update " + std::to_string(state.step));
}

template <typename S>
double mean_loss(const ModelState<S>& state, const std::vector<Example>& data, TrainMode mode,
                 int batch_size = 64) {
  if (data.empty()) return std::nan("");
  // MLM loss is normalized per labeled token, so batch results are weighted
  // by their label counts; head losses per example.
  double sum = 0, weight = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size() - i);
    std::span<const Example> batch(data.data() + i, n);
    double w = static_cast<double>(n);
    if (mode == TrainMode::PretrainMlm) {
      w = 0;
      for (const auto& ex : batch)
        for (auto y : ex.mlm_labels) w += y != kIgnoreLabel;
    }
    sum += compute_loss<S>(state.params, state.config, batch, mode, nullptr).total * w;
    weight += w;
  }
  return sum / weight;
}

// Mini-batch Adam over `train_data` (shuffled each epoch). For MLM, masks
// are re-drawn every epoch from the encodings.
template <typename S>
TrainResult<S> train_examples(ModelState<S> state, const std::function<std::vector<Example>(Rng&)>& make_epoch,
                              const std::vector<Example>& val_data, const TrainConfig& tc,
                              const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  tc.validate();
  TrainResult<S> result;
  Rng rng(tc.seed);
  Rng drop_rng = rng.fork();
  result.initial_val_loss = mean_loss(state, val_data, tc.mode);
  ModelParams<S> grads = ModelParams<S>::zeros(state.config);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<Example> data = make_epoch(rng);
    if (data.empty()) throw std::invalid_argument("train: empty training set");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    std::vector<Example> batch;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(tc.batch_size)) {
      batch.clear();
      for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(tc.batch_size)); ++j)
        batch.push_back(std::move(data[order[j]]));
      if (tc.mode == TrainMode::PretrainMlm &&
          std::none_of(batch.begin(), batch.end(), [](const Example& e) {
            return std::any_of(e.mlm_labels.begin(), e.mlm_labels.end(), [](TokenId t) { return t != kIgnoreLabel; });
          }))
        continue;
      grads.set_zero();
      loss_sum += compute_loss<S>(state.params, state.config, batch, tc.mode, &grads, &drop_rng).total;
      ++batches;
      adam_step(state, grads, tc, tc.mode);
    }
    EpochMetrics m{epoch + 1, batches ? loss_sum / static_cast<double>(batches) : std::nan(""),
                   mean_loss(state, val_data, tc.mode)};
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.state = std::move(state);
  return result;
}

// Trains `init` on `train` according to tc.mode. Fine-tuning inputs drop the
// final activity, which becomes the (service, page) target; single-activity
// sessions are skipped and counted.
template <typename S>
TrainResult<S> train(const std::vector<SessionRecord>& train_records, const std::vector<SessionRecord>& val_records,
                     const Vocabulary& vocab, ModelState<S> init, const TrainConfig& tc,
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  tc.validate();
  if (train_records.empty()) throw std::invalid_argument("train: empty training set");
  if (static_cast<std::size_t>(init.config.vocab_size) != vocab.size())
    throw ValidationError("vocab_size", "model and vocabulary disagree");
  const auto max_len = static_cast<std::size_t>(init.config.max_len);
  if (tc.mode == TrainMode::PretrainMlm) {
    auto encodings = encode_records(train_records, vocab, max_len);
    std::erase_if(encodings, [](const Encoding& e) {
      return std::none_of(e.input_ids.begin(), e.input_ids.end(), [](TokenId t) { return is_maskable(t); });
    });
    const auto val = mlm_eval_set(val_records, vocab, max_len, tc.seed ^ 0x5eedULL, tc.mask_rate);
    const std::size_t vsize = vocab.size();
    auto make_epoch = [&](Rng& rng) {
      std::vector<Example> out;
      out.reserve(encodings.size());
      for (const auto& e : encodings) out.push_back(mlm_example(e, vsize, rng, tc.mask_rate));
      return out;
    };
    return train_examples<S>(std::move(init), make_epoch, val, tc, on_epoch);
  }
  std::size_t skipped = 0;
  auto data = finetune_set(train_records, vocab, init, &skipped);
  if (data.empty()) throw std::invalid_argument("train: no session has two or more activities");
  const auto val = finetune_set(val_records, vocab, init);
  auto make_epoch = [&](Rng&) { return data; };
  auto result = train_examples<S>(std::move(init), make_epoch, val, tc, on_epoch);
  result.skipped_single_activity = skipped;
  return result;
}

template <typename S>
TrainResult<S> train(const std::vector<SessionRecord>& train_records, const std::vector<SessionRecord>& val_records,
                     const Vocabulary& vocab, const ModelConfig& mc, std::vector<std::string> services,
                     std::vector<std::string> pages, const TrainConfig& tc,
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  return train<S>(train_records, val_records, vocab, ModelState<S>::create(mc, std::move(services), std::move(pages)),
                  tc, on_epoch);
}

enum class Head { Service, Page };

struct Prediction {
  std::string label;
  int index = 0;
  double probability = 0;
};

// Full softmax over one head for an already encoded input.
template <typename S>
std::vector<double> head_probabilities(const Encoding& enc, const ModelState<S>& state, Head head) {
  const Mat<S> pooled = pooled_representation(enc, state);
  const auto& w = head == Head::Service ? state.params.service_w : state.params.page_w;
  const auto& b = head == Head::Service ? state.params.service_b : state.params.page_b;
  Mat<S> z = pooled * w;
  z += b;
  const Mat<S> lp = nn::log_softmax(z);
  std::vector<double> p(static_cast<std::size_t>(lp.cols()));
  for (Eigen::Index j = 0; j < lp.cols(); ++j) p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(lp(0, j)));
  return p;
}

// Top-k labels by probability (ties by label index). k beyond the label
// space returns the whole space.
inline std::vector<Prediction> rank_probabilities(const std::vector<double>& p,
                                                  const std::vector<std::string>& labels, std::size_t k) {
  if (k == 0) throw ValidationError("k", "must be >= 1");
  std::vector<int> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
  idx.resize(std::min(k, idx.size()));
  std::vector<Prediction> out;
  for (int i : idx) out.push_back({labels[static_cast<std::size_t>(i)], i, p[static_cast<std::size_t>(i)]});
  return out;
}

// Next-activity prediction from a whole session.
template <typename S>
std::vector<Prediction> predict_topk(const SessionRecord& session, const ModelState<S>& state,
                                     const Vocabulary& vocab, std::size_t k, Head head) {
  const auto enc = encode(flatten_session(session), vocab, static_cast<std::size_t>(state.config.max_len));
  return rank_probabilities(head_probabilities(enc, state, head),
                            head == Head::Service ? state.services : state.pages, k);
}

// Argmax predictions of a head over prepared fine-tuning examples.
template <typename S>
std::vector<int> predict_labels(const ModelState<S>& state, const std::vector<Example>& data, Head head) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    Encoding enc{ex.input_ids, ex.attention_mask};
    const auto p = head_probabilities(enc, state, head);
    out.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
  return out;
}

// Top-1 accuracy of the MLM head over labeled positions.
template <typename S>
double mlm_accuracy(const ModelState<S>& state, const std::vector<Example>& data) {
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data) {
    const std::size_t n = active_length(ex.attention_mask);
    const Mat<S> h = encoder_forward<S>(state.params, state.config, std::span(ex.input_ids.data(), n),
                                        std::span(ex.attention_mask.data(), n), nullptr, nullptr);
    for (std::size_t i = 0; i < n; ++i) {
      if (ex.mlm_labels[i] == kIgnoreLabel) continue;
      Mat<S> z = h.row(static_cast<Eigen::Index>(i)) * state.params.mlm_w;
      z += state.params.mlm_b;
      Eigen::Index best = 0;
      z.row(0).maxCoeff(&best);
      hit += best == ex.mlm_labels[i];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace sessionbert
