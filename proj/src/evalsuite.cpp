#include "paml/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "paml/rng.hpp"

namespace paml {

using nlohmann::json;

// ---------------------------------------------------------------------------
// rule NLI
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

const GrammarAttribute* find_attribute(const std::string& name) {
  for (const GrammarAttribute& a : synthetic_grammar())
    if (a.name == name) return &a;
  return nullptr;
}

}  // namespace

NliLabel rule_nli(const std::vector<std::string>& utterance_words,
                  const PersonaFact& fact) {
  const GrammarAttribute* attr = find_attribute(fact.attribute);
  if (attr == nullptr) {
    warn("rule_nli: unknown attribute '" + fact.attribute + "'");
    return NliLabel::Neutral;
  }
  const std::vector<std::string> trigger = split_words(attr->trigger);
  if (trigger.empty() || utterance_words.size() <= trigger.size())
    return NliLabel::Neutral;
  for (std::size_t i = 0; i + trigger.size() < utterance_words.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < trigger.size(); ++j) {
      if (utterance_words[i + j] != trigger[j]) {
        match = false;
        break;
      }
    }
    if (!match) continue;
    const std::string& next = utterance_words[i + trigger.size()];
    if (next == fact.value) return NliLabel::Entails;
    for (const std::string& v : attr->values)
      if (next == v) return NliLabel::Contradicts;
  }
  return NliLabel::Neutral;
}

NliLabel rule_nli(const TokenSequence& utterance, const PersonaFact& fact,
                  const Vocabulary& vocab) {
  return rule_nli(vocab.words(utterance), fact);
}

NliFn rule_nli_fn() {
  return [](const std::vector<std::string>& words, const PersonaFact& fact) {
    return rule_nli(words, fact);
  };
}

int consistency_C(const TokenSequence& utterance, const PersonaTask& persona,
                  const NliFn& nli, const Vocabulary& vocab) {
  const std::vector<std::string> words = vocab.words(utterance);
  int c = 0;
  for (const PersonaFact& fact : persona.facts)
    c += static_cast<int>(nli(words, fact));
  return c;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

double bleu(const std::vector<TokenSequence>& hypotheses,
            const std::vector<TokenSequence>& references) {
  if (hypotheses.empty() || hypotheses.size() != references.size())
    throw InvalidHyperparameter(
        "bleu: hypothesis and reference lists must be equal-length and non-empty");
  constexpr int kMaxOrder = 4;
  long match[kMaxOrder] = {0, 0, 0, 0};
  long total[kMaxOrder] = {0, 0, 0, 0};
  long hyp_len = 0, ref_len = 0;

  using Gram = std::vector<TokenId>;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const TokenSequence& hyp = hypotheses[i];
    const TokenSequence& ref = references[i];
    hyp_len += static_cast<long>(hyp.size());
    ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      std::map<Gram, long> ref_counts;
      for (std::size_t s = 0; s + n <= ref.size(); ++s)
        ref_counts[Gram(ref.begin() + s, ref.begin() + s + n)]++;
      std::map<Gram, long> hyp_counts;
      for (std::size_t s = 0; s + n <= hyp.size(); ++s)
        hyp_counts[Gram(hyp.begin() + s, hyp.begin() + s + n)]++;
      for (const auto& [gram, count] : hyp_counts) {
        total[n - 1] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          match[n - 1] += std::min(count, it->second);  // clipped
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_sum = 0.0;
  int orders = 0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (total[n] == 0) continue;  // hypotheses too short for this order
    const double p =
        match[n] > 0
            ? static_cast<double>(match[n]) / static_cast<double>(total[n])
            : 1.0 / static_cast<double>(total[n] + 1);  // add-one on zero
    log_sum += std::log(p);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double geo = std::exp(log_sum / static_cast<double>(orders));
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) /
                               static_cast<double>(hyp_len));
  return 100.0 * bp * geo;
}

// ---------------------------------------------------------------------------
// report IO
// ---------------------------------------------------------------------------

void EvalReport::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open report for write: " + path);
  out << "setting,k,ppl,bleu,C,episodes\n";
  char line[256];
  for (const EvalResult& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%d,%.6g,%.6g,%.6g,%ld\n",
                  r.setting.c_str(), r.k, r.ppl, r.bleu, r.mean_c, r.episodes);
    out << line;
  }
}

std::string EvalReport::table() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %5s %10s %8s %8s %9s\n", "setting",
                "k", "ppl", "bleu", "C", "episodes");
  out << line;
  for (const EvalResult& r : rows) {
    std::snprintf(line, sizeof(line), "%-24s %5d %10.3f %8.3f %8.4f %9ld\n",
                  r.setting.c_str(), r.k, r.ppl, r.bleu, r.mean_c, r.episodes);
    out << line;
  }
  return out.str();
}

void save_transcripts(const std::vector<TranscriptEntry>& entries,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open transcript file for write: " + path);
  for (const TranscriptEntry& e : entries) {
    json rec;
    rec["persona_id"] = e.persona_id;
    rec["episode"] = e.episode;
    rec["context"] = e.context;
    rec["gold"] = e.gold;
    rec["hypothesis"] = e.hypothesis;
    rec["C"] = e.c;
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

namespace {

struct EpisodeRef {
  const PersonaTask* task;
  Episode episode;
  int index;  // episode index within its task
};

// Evaluation core shared by evaluate_setting and kshot_sweep: adapt (or not)
// per episode from the same theta, decode every system turn of the query
// dialogues with gold history, and aggregate.
EvalResult evaluate_episodes(const ModelConfig& cfg, const ParamVector& theta,
                             const std::vector<EpisodeRef>& episodes,
                             const std::optional<AdaptSpec>& mode,
                             const NliFn& nli, const Vocabulary& vocab,
                             const EvalDecodeCfg& dc,
                             const std::string& setting_name,
                             std::vector<TranscriptEntry>* transcripts) {
  const NllLoss loss(cfg);
  std::vector<TokenSequence> hyps, refs;
  double ppl_sum = 0.0;
  long c_sum = 0, c_count = 0, episode_count = 0;

  for (const EpisodeRef& er : episodes) {
    const PersonaTask& task = *er.task;
    const std::vector<std::string>* persona =
        dc.use_persona ? &task.fact_sentences : nullptr;
    const std::string tag = "persona=" + std::to_string(task.persona_id) +
                            ",episode=" + std::to_string(er.index);

    ParamVector adapted = theta;
    if (mode && !er.episode.support.empty()) {
      const DialogueBatch support =
          to_training_batch(er.episode.support, vocab, cfg.max_context,
                            persona, "support[" + tag + "]");
      adapted = fine_tune(loss, theta, support, mode->alpha, mode->steps);
    }

    const DialogueBatch query = to_training_batch(
        er.episode.query, vocab, cfg.max_context, persona, "query[" + tag + "]");
    ppl_sum += perplexity(cfg, adapted, query);

    for (const Dialogue& dialogue : er.episode.query) {
      for (int j = 1; j < dialogue.size(); j += 2) {
        const TokenSequence ctx =
            context_for_turn(dialogue, j, vocab, cfg.max_context, persona,
                             dc.max_response + 1);
        const TokenSequence hyp =
            decode(cfg, adapted, ctx, dc.beam_width, dc.max_response);
        const TokenSequence& gold =
            dialogue.utterances[static_cast<std::size_t>(j)];
        const int c = consistency_C(hyp, task, nli, vocab);
        hyps.push_back(hyp);
        refs.push_back(gold);
        c_sum += c;
        ++c_count;
        if (transcripts != nullptr)
          transcripts->push_back({task.persona_id, er.index,
                                  vocab.decode(ctx), vocab.decode(gold),
                                  vocab.decode(hyp), c});
      }
    }
    ++episode_count;
  }

  EvalResult out;
  out.setting = setting_name;
  out.k = mode ? -1 : 0;
  out.episodes = episode_count;
  if (episode_count > 0)
    out.ppl = ppl_sum / static_cast<double>(episode_count);
  if (!hyps.empty()) out.bleu = bleu(hyps, refs);
  if (c_count > 0)
    out.mean_c = static_cast<double>(c_sum) / static_cast<double>(c_count);
  return out;
}

std::vector<EpisodeRef> leave_one_out_refs(
    const std::vector<PersonaTask>& test_tasks) {
  std::vector<const PersonaTask*> ordered;
  for (const PersonaTask& t : test_tasks) ordered.push_back(&t);
  std::sort(ordered.begin(), ordered.end(),
            [](const PersonaTask* a, const PersonaTask* b) {
              return a->persona_id < b->persona_id;
            });
  std::vector<EpisodeRef> refs;
  for (const PersonaTask* t : ordered) {
    std::vector<Episode> eps = leave_one_out_episodes(*t);
    for (std::size_t i = 0; i < eps.size(); ++i)
      refs.push_back({t, std::move(eps[i]), static_cast<int>(i)});
  }
  return refs;
}

}  // namespace

EvalResult evaluate_setting(const ModelConfig& cfg, const ParamVector& theta,
                            const std::vector<PersonaTask>& test_tasks,
                            const std::optional<AdaptSpec>& mode,
                            const NliFn& nli, const Vocabulary& vocab,
                            const EvalDecodeCfg& decode_cfg,
                            const std::string& setting_name,
                            std::vector<TranscriptEntry>* transcripts) {
  if (test_tasks.empty())
    throw EmptyDataset("evaluate_setting: no test tasks");
  const std::vector<EpisodeRef> refs = leave_one_out_refs(test_tasks);
  return evaluate_episodes(cfg, theta, refs, mode, nli, vocab, decode_cfg,
                           setting_name, transcripts);
}

std::vector<EvalResult> kshot_sweep(const ModelConfig& cfg,
                                    const ParamVector& theta,
                                    const std::vector<PersonaTask>& test_tasks,
                                    const std::vector<int>& ks,
                                    const AdaptSpec& adapt, const NliFn& nli,
                                    const Vocabulary& vocab,
                                    const EvalDecodeCfg& decode_cfg,
                                    const std::string& setting_name,
                                    std::uint64_t seed) {
  if (test_tasks.empty()) throw EmptyDataset("kshot_sweep: no test tasks");
  if (ks.empty()) throw InvalidHyperparameter("kshot_sweep: ks is empty");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 0) throw InvalidHyperparameter("kshot_sweep: k must be >= 0");
    if (i > 0 && ks[i] <= ks[i - 1])
      throw InvalidHyperparameter("kshot_sweep: ks must be sorted ascending");
  }

  // the same episodes, paired across every k
  const std::vector<EpisodeRef> base = leave_one_out_refs(test_tasks);
  std::vector<EvalResult> rows;
  for (int k : ks) {
    std::vector<EpisodeRef> truncated;
    truncated.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      const EpisodeRef& er = base[i];
      // per-episode stream reseeded identically for every k, so curves pair
      Rng er_rng(substream_seed(seed, "kshot") ^ (0x9e3779b97f4a7c15ULL * i));
      const int kk =
          std::min(k, static_cast<int>(er.episode.support.size()));
      EpisodeRef tr{er.task, truncate_support(er.episode, kk, er_rng), er.index};
      truncated.push_back(std::move(tr));
    }
    std::optional<AdaptSpec> mode;
    if (k > 0) mode = adapt;
    EvalResult row =
        evaluate_episodes(cfg, theta, truncated, mode, nli, vocab, decode_cfg,
                          setting_name, nullptr);
    row.k = k;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace paml
