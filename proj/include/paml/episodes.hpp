#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "paml/rng.hpp"
#include "paml/seqmodel.hpp"

namespace paml {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Alternating user/system utterances; even indices are the user, odd the
// system speaker (the persona owner). At least one full exchange.
struct Dialogue {
  std::vector<TokenSequence> utterances;

  int size() const { return static_cast<int>(utterances.size()); }
  bool is_system_turn(int i) const { return i % 2 == 1; }
};

struct PersonaFact {
  std::string attribute;
  std::string value;
  bool operator==(const PersonaFact&) const = default;
};

// One persona: its machine-readable facts, their rendered sentences, and the
// dialogues produced by that persona. Attributes are unique within a task.
struct PersonaTask {
  int persona_id = 0;
  std::vector<PersonaFact> facts;
  std::vector<std::string> fact_sentences;
  std::vector<Dialogue> dialogues;
};

// Persona-level split: the same persona never appears in two splits, so test
// personas are unseen at training time.
struct MetaDataset {
  std::vector<PersonaTask> train;
  std::vector<PersonaTask> valid;
  std::vector<PersonaTask> test;
  Vocabulary vocab;

  std::size_t task_count() const {
    return train.size() + valid.size() + test.size();
  }
  // Throws if persona ids collide across splits or the dataset is empty.
  void validate() const;
};

// One adaptation unit: dialogues to adapt on and dialogues to score on.
// Support and query are disjoint and, unless truncated to 0 shots, non-empty.
struct Episode {
  int persona_id = 0;
  std::vector<Dialogue> support;
  std::vector<Dialogue> query;
};

// ---------------------------------------------------------------------------
// Synthetic grammar
// ---------------------------------------------------------------------------

// A persona attribute: the system-side trigger phrase that expresses it, the
// user question that solicits it, and its closed value domain.
struct GrammarAttribute {
  std::string name;
  std::string trigger;   // response prefix, e.g. "my pet is a"
  std::string question;  // user prompt, e.g. "do you have a pet"
  std::vector<std::string> values;
};

// The fixed attribute/value grammar behind the synthetic corpus and the rule
// NLI oracle. Every attribute has at least 8 values; triggers are pairwise
// distinct and never occur in neutral exchanges.
const std::vector<GrammarAttribute>& synthetic_grammar();

// Persona-neutral (user, system) exchanges; the system side never contains a
// trigger phrase or a grammar value.
const std::vector<std::pair<std::string, std::string>>& neutral_exchanges();

// "my pet is a" + " " + "turtle"
std::string render_fact_sentence(const GrammarAttribute& attr,
                                 const std::string& value);

// ---------------------------------------------------------------------------
// Corpus construction and IO
// ---------------------------------------------------------------------------

// Template-generated persona meta-dataset. Personas draw facts_per_persona
// distinct attributes with random values; identical fact sets are rejected.
// Per-persona dialogue counts are drawn around the given mean (minimum 2).
// Deterministic given the seed. Splits are persona-level with the given
// fractions (train and test are never empty).
MetaDataset generate_synthetic_corpus(int n_personas, int facts_per_persona,
                                      double dialogues_per_persona_mean,
                                      std::uint64_t seed,
                                      double train_fraction = 0.7,
                                      double valid_fraction = 0.1);

// One JSON record per line: {persona_id, split, facts, fact_sentences,
// dialogues}; dialogues are arrays of utterance strings. UTF-8.
void save_corpus(const MetaDataset& data, const std::string& path);
MetaDataset load_corpus(const std::string& path);

// Persona-chat-format loader. Line format, with <n> restarting at 1 for each
// dialogue:
//   <n> your persona: <sentence>
//   <n> <user utterance>\t<system utterance>
// Dialogues are grouped into one task per exact persona-description set;
// groups with fewer than 2 dialogues are dropped (count reported via a
// warning). All tasks are placed in the train split; use
// load_personachat_splits to assemble a full dataset from per-split files.
MetaDataset load_personachat(const std::string& path);
MetaDataset load_personachat_splits(const std::string& train_path,
                                    const std::string& valid_path,
                                    const std::string& test_path);

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

// Uniform without-replacement persona sample; each picked task's dialogues
// are partitioned randomly into support (ceil(fraction*k), clamped to keep
// at least one query dialogue) and query. Tasks with fewer than 2 dialogues
// are skipped with a warning.
std::vector<Episode> sample_meta_batch(const std::vector<PersonaTask>& split,
                                       int batch_size, double support_fraction,
                                       Rng& rng);

// The test protocol: k episodes for a k-dialogue task, episode j holding out
// dialogue j as the query and adapting on all the others.
std::vector<Episode> leave_one_out_episodes(const PersonaTask& task);

// Reduces the support set to a uniformly chosen k_shots-subset (original
// order kept). k_shots = 0 means no adaptation; k_shots beyond the support
// size clamps with a warning.
Episode truncate_support(const Episode& episode, int k_shots, Rng& rng);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// One training row per system turn: context = BOS [persona sentences <psep>]
// (utterance <sep>)* and target = utterance EOS. When a row would exceed the
// context window, the oldest history utterances are dropped first.
DialogueBatch to_training_batch(const std::vector<Dialogue>& dialogues,
                                const Vocabulary& vocab, int max_context,
                                const std::vector<std::string>* persona_sentences,
                                std::string name);

// The decoding context for the system turn at utterance index `turn` of a
// dialogue (gold history), built exactly like the training contexts.
// reserve_len positions are left free for the generated continuation.
TokenSequence context_for_turn(const Dialogue& dialogue, int turn,
                               const Vocabulary& vocab, int max_context,
                               const std::vector<std::string>* persona_sentences,
                               int reserve_len);

}  // namespace paml
