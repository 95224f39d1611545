#pragma once

// Shared fixtures for the model-level suites: tiny configurations sized for
// finite-difference checks, random batch builders, and an independent
// decode-score reconstruction.

#include <cmath>
#include <vector>

#include "paml/rng.hpp"
#include "paml/seqmodel.hpp"

namespace pamltest {

// 188 parameters; small enough for exhaustive finite differences.
inline paml::ModelConfig tiny_config(int vocab_size = 6) {
  paml::ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.embed_dim = 4;
  cfg.model_dim = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.ffn_dim = 4;
  cfg.max_context = 8;
  return cfg;
}

// A batch of (context, target) rows over the non-reserved tail of the
// vocabulary, shaped like the real dialogue pairs: BOS ... SEP | ... EOS.
inline paml::DialogueBatch random_batch(const paml::ModelConfig& cfg, int rows,
                                        int ctx_words, int tgt_words,
                                        paml::Rng& rng) {
  paml::DialogueBatch batch;
  batch.name = "test batch";
  const int lo = paml::Vocabulary::kReservedCount;
  const int hi = cfg.vocab_size;
  auto word = [&] {
    return static_cast<paml::TokenId>(
        lo + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(hi - lo))));
  };
  for (int r = 0; r < rows; ++r) {
    paml::TokenSequence ctx{paml::Vocabulary::kBos};
    for (int i = 0; i < ctx_words; ++i) ctx.push_back(word());
    ctx.push_back(paml::Vocabulary::kSep);
    paml::TokenSequence tgt;
    for (int i = 0; i < tgt_words; ++i) tgt.push_back(word());
    tgt.push_back(paml::Vocabulary::kEos);
    batch.push(std::move(ctx), std::move(tgt));
  }
  return batch;
}

// Length-normalized log-probability of a decoded hypothesis, recomputed from
// scratch with forward(); mirrors the decoder's scoring contract (EOS is a
// scored step unless the hypothesis was cut off at max_len).
inline double normalized_logprob(const paml::ModelConfig& cfg,
                                 const paml::ParamVector& theta,
                                 const paml::TokenSequence& context,
                                 const paml::TokenSequence& gen, int max_len) {
  paml::TokenSequence ctx = context.empty()
                                ? paml::TokenSequence{paml::Vocabulary::kBos}
                                : context;
  const bool ended_by_eos = static_cast<int>(gen.size()) < max_len;
  paml::TokenSequence tgt = gen;
  if (ended_by_eos) tgt.push_back(paml::Vocabulary::kEos);
  if (tgt.empty()) return 0.0;

  paml::DialogueBatch b;
  b.push(ctx, tgt);
  const auto probs = paml::forward(cfg, theta, b);
  double score = 0.0;
  const std::size_t ctx_len = ctx.size();
  for (std::size_t j = 0; j < tgt.size(); ++j) {
    const std::size_t pos = ctx_len - 1 + j;
    score += std::log(probs[0][pos][static_cast<std::size_t>(tgt[j])]);
  }
  return score / static_cast<double>(tgt.size());
}

}  // namespace pamltest
