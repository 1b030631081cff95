#pragma once

// Small generated corpus and a quickly fine-tuned model shared by the tests.

#include "sessionbert/corpus.hpp"
#include "sessionbert/training.hpp"

namespace sessionbert::testing {

struct Fixture {
  Corpus corpus;
  CorpusSplit split;
  Vocabulary vocab;
  ModelConfig mc;

  explicit Fixture(std::size_t users = 40) {
    GeneratorConfig g;
    g.num_users = users;
    corpus = generate_corpus(g);
    split = split_corpus(corpus.records);
    std::vector<std::vector<std::string>> seqs;
    for (const auto& r : split.train) seqs.push_back(flatten_session(r));
    vocab = build_vocabulary(seqs);
    mc.num_layers = 1;
    mc.num_heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.max_len = 64;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.num_services = static_cast<int>(corpus.catalog.size());
    mc.num_pages = static_cast<int>(corpus.catalog.page_ids().size());
    mc.seed = 3;
  }

  ModelState<float> fresh() const {
    return ModelState<float>::create(mc, corpus.catalog.service_ids(), corpus.catalog.page_ids());
  }
};

inline const Fixture& fixture() {
  static const Fixture f;
  return f;
}

// Parameters trained for a few epochs on the fixture; shared by tests that
// only read it.
inline const ModelState<float>& finetuned() {
  static const ModelState<float> s = [] {
    const auto& f = fixture();
    TrainConfig tc;
    tc.mode = TrainMode::FinetuneMultitask;
    tc.learning_rate = 1e-3;
    tc.batch_size = 8;
    tc.seed = 5;
    return train<float>(f.split.train, f.split.val, f.vocab, f.fresh(), tc).state;
  }();
  return s;
}

}  // namespace sessionbert::testing
