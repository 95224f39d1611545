#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "paml/episodes.hpp"
#include "paml/metatrain.hpp"
#include "paml/seqmodel.hpp"

namespace paml {

// ---------------------------------------------------------------------------
// NLI
// ---------------------------------------------------------------------------

enum class NliLabel : int { Contradicts = -1, Neutral = 0, Entails = 1 };

// Pluggable entailment backend: plain utterance words in, label out. Must be
// deterministic and total over valid inputs. The desk-scale backend is the
// rule oracle below; a learned scorer can be swapped in without touching the
// evaluation code.
using NliFn =
    std::function<NliLabel(const std::vector<std::string>& utterance_words,
                           const PersonaFact& fact)>;

// Rule oracle over the synthetic grammar: Entails when the utterance contains
// the fact attribute's trigger phrase followed by the matching value,
// Contradicts when the trigger is followed by a different value from that
// attribute's domain, Neutral otherwise. Unknown attributes are Neutral with
// a logged warning.
NliLabel rule_nli(const std::vector<std::string>& utterance_words,
                  const PersonaFact& fact);
NliLabel rule_nli(const TokenSequence& utterance, const PersonaFact& fact,
                  const Vocabulary& vocab);
NliFn rule_nli_fn();

// C(u): the sum of NLI labels of the utterance against every persona fact.
// Bounded by the fact count in absolute value.
int consistency_C(const TokenSequence& utterance, const PersonaTask& persona,
                  const NliFn& nli, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

// Corpus-level BLEU in [0, 100]: n-grams up to 4, brevity penalty, and
// add-one smoothing on zero n-gram counts (p_n = 1/(t_n+1) when no n-gram of
// order n matches). Orders with no hypothesis n-grams at all are excluded
// from the geometric mean; an entirely empty hypothesis corpus scores 0.
double bleu(const std::vector<TokenSequence>& hypotheses,
            const std::vector<TokenSequence>& references);

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

// Test-time adaptation: `steps` SGD updates at rate `alpha` on the episode
// support set, from the same initial parameters for every episode.
struct AdaptSpec {
  double alpha = 0.01;
  int steps = 5;
};

struct EvalDecodeCfg {
  int beam_width = 5;
  int max_response = 32;
  bool use_persona = false;  // prepend persona sentences to every context
};

// One result row; k is the shot count (-1 = full leave-one-out support,
// 0 = no adaptation).
struct EvalResult {
  std::string setting;
  int k = -1;
  double ppl = 0.0;       // mean per-episode perplexity on gold responses
  double bleu = 0.0;      // corpus BLEU of decoded responses
  double mean_c = 0.0;    // mean consistency of decoded responses
  long episodes = 0;

  bool operator==(const EvalResult&) const = default;
};

struct EvalReport {
  std::vector<EvalResult> rows;
  // CSV columns: setting,k,ppl,bleu,C,episodes
  void save_csv(const std::string& path) const;
  std::string table() const;
};

// Optionally collected decode transcripts, dumped as JSON lines.
struct TranscriptEntry {
  int persona_id = 0;
  int episode = 0;
  std::string context;
  std::string gold;
  std::string hypothesis;
  int c = 0;
};
void save_transcripts(const std::vector<TranscriptEntry>& entries,
                      const std::string& path);

// The leave-one-out protocol over every test task: for each held-out
// dialogue, optionally adapt on the remaining dialogues (never leaking
// adaptation across episodes), decode every system turn of the query given
// gold history, and aggregate perplexity (teacher-forced), corpus BLEU, and
// mean C. mode = nullopt is the zero-shot setting; adapt with alpha = 0
// reproduces it exactly.
EvalResult evaluate_setting(const ModelConfig& cfg, const ParamVector& theta,
                            const std::vector<PersonaTask>& test_tasks,
                            const std::optional<AdaptSpec>& mode,
                            const NliFn& nli, const Vocabulary& vocab,
                            const EvalDecodeCfg& decode_cfg,
                            const std::string& setting_name,
                            std::vector<TranscriptEntry>* transcripts = nullptr);

// The shot sweep: the same leave-one-out episodes are re-evaluated with each
// episode's support truncated to k dialogues (episodes with fewer keep all
// they have). Episodes and the truncation seed are shared across k values so
// the curves are paired; k = 0 equals the zero-shot setting exactly.
std::vector<EvalResult> kshot_sweep(const ModelConfig& cfg,
                                    const ParamVector& theta,
                                    const std::vector<PersonaTask>& test_tasks,
                                    const std::vector<int>& ks,
                                    const AdaptSpec& adapt, const NliFn& nli,
                                    const Vocabulary& vocab,
                                    const EvalDecodeCfg& decode_cfg,
                                    const std::string& setting_name,
                                    std::uint64_t seed);

}  // namespace paml
