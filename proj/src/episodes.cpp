#include "paml/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "paml/errors.hpp"

namespace paml {

using nlohmann::json;

// ---------------------------------------------------------------------------
// grammar tables
// ---------------------------------------------------------------------------

const std::vector<GrammarAttribute>& synthetic_grammar() {
  static const std::vector<GrammarAttribute> grammar = {
      {"pet", "my pet is a", "do you have a pet",
       {"dog", "cat", "turtle", "parrot", "hamster", "rabbit", "ferret",
        "goldfish"}},
      {"hobby", "my hobby is", "what is your hobby",
       {"chess", "painting", "hiking", "knitting", "fishing", "photography",
        "gardening", "archery"}},
      {"sport", "my favorite sport is", "what sport do you like",
       {"soccer", "tennis", "frisbee", "cricket", "volleyball", "badminton",
        "rowing", "curling"}},
      {"drink", "my favorite drink is", "what do you like to drink",
       {"coffee", "tea", "lemonade", "cocoa", "cider", "juice", "soda",
        "milk"}},
      {"food", "my favorite food is", "what is your favorite food",
       {"pizza", "sushi", "pasta", "tacos", "curry", "pancakes", "dumplings",
        "salad"}},
      {"color", "my favorite color is", "what is your favorite color",
       {"red", "blue", "green", "yellow", "purple", "silver", "teal",
        "crimson"}},
      {"job", "i work as a", "what do you do for work",
       {"teacher", "nurse", "farmer", "baker", "pilot", "plumber", "barber",
        "tailor"}},
      {"music", "i mostly listen to", "what music do you like",
       {"jazz", "rock", "blues", "folk", "opera", "techno", "reggae",
        "country"}},
  };
  return grammar;
}

const std::vector<std::pair<std::string, std::string>>& neutral_exchanges() {
  static const std::vector<std::pair<std::string, std::string>> neutral = {
      {"hi there", "hello nice to meet you"},
      {"how are you today", "i am doing great thanks"},
      {"how is the weather", "it is quite lovely outside"},
      {"did you sleep well", "yes i slept very well"},
      {"are you busy later", "not really just relaxing"},
      {"what time is it", "it is getting late i think"},
  };
  return neutral;
}

std::string render_fact_sentence(const GrammarAttribute& attr,
                                 const std::string& value) {
  return attr.trigger + " " + value;
}

// ---------------------------------------------------------------------------
// MetaDataset
// ---------------------------------------------------------------------------

void MetaDataset::validate() const {
  if (task_count() == 0) throw EmptyDataset("meta-dataset has no tasks");
  std::set<int> seen;
  auto check = [&](const std::vector<PersonaTask>& tasks) {
    for (const PersonaTask& t : tasks) {
      if (!seen.insert(t.persona_id).second)
        throw GenerationError("persona id " + std::to_string(t.persona_id) +
                              " appears in more than one split");
    }
  };
  check(train);
  check(valid);
  check(test);
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

namespace {

struct TextDialogue {
  std::vector<std::string> utterances;
};

struct TextPersona {
  int persona_id = 0;
  std::vector<PersonaFact> facts;
  std::vector<std::string> fact_sentences;
  std::vector<TextDialogue> dialogues;
};

void collect_words(const std::string& text, std::set<std::string>& words) {
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.insert(w);
}

Vocabulary build_vocab(const std::vector<TextPersona>& personas) {
  std::set<std::string> words;
  for (const TextPersona& p : personas) {
    for (const std::string& s : p.fact_sentences) collect_words(s, words);
    for (const TextDialogue& d : p.dialogues)
      for (const std::string& u : d.utterances) collect_words(u, words);
  }
  Vocabulary vocab;
  for (const std::string& w : words) vocab.add(w);
  return vocab;
}

PersonaTask tokenize_persona(const TextPersona& p, const Vocabulary& vocab) {
  PersonaTask task;
  task.persona_id = p.persona_id;
  task.facts = p.facts;
  task.fact_sentences = p.fact_sentences;
  for (const TextDialogue& d : p.dialogues) {
    Dialogue dlg;
    for (const std::string& u : d.utterances)
      dlg.utterances.push_back(vocab.encode(u));
    task.dialogues.push_back(std::move(dlg));
  }
  return task;
}

// number of distinct fact sets available to the generator
double grammar_capacity(int facts_per_persona) {
  const auto& grammar = synthetic_grammar();
  const int a = static_cast<int>(grammar.size());
  if (facts_per_persona > a) return 0.0;
  // C(a, f) * min_domain^f is a lower bound; domains all have >= 8 values
  double combos = 1.0;
  for (int i = 0; i < facts_per_persona; ++i)
    combos *= static_cast<double>(a - i) / static_cast<double>(i + 1);
  for (int i = 0; i < facts_per_persona; ++i) combos *= 8.0;
  return combos;
}

TextDialogue make_dialogue(const TextPersona& persona, Rng& rng) {
  const auto& neutral = neutral_exchanges();
  std::vector<std::pair<std::string, std::string>> exchanges;

  // a couple of fact-soliciting turns plus occasional distractors
  const int m = static_cast<int>(persona.facts.size());
  int n_facts = std::min(m, 2 + (rng.next_double() < 0.5 ? 1 : 0));
  std::vector<std::size_t> fact_idx =
      rng.sample_indices(static_cast<std::size_t>(m),
                         static_cast<std::size_t>(n_facts));
  const auto& grammar = synthetic_grammar();
  for (std::size_t fi : fact_idx) {
    const PersonaFact& fact = persona.facts[fi];
    const GrammarAttribute* attr = nullptr;
    for (const auto& g : grammar)
      if (g.name == fact.attribute) attr = &g;
    exchanges.emplace_back(attr->question,
                           render_fact_sentence(*attr, fact.value));
  }
  if (rng.next_double() < 0.4) {
    const std::size_t ni = 1 + rng.next_below(neutral.size() - 1);
    exchanges.push_back(neutral[ni]);
  }
  rng.shuffle(exchanges);
  if (rng.next_double() < 0.5) exchanges.insert(exchanges.begin(), neutral[0]);

  TextDialogue d;
  for (const auto& [user, system] : exchanges) {
    d.utterances.push_back(user);
    d.utterances.push_back(system);
  }
  return d;
}

}  // namespace

MetaDataset generate_synthetic_corpus(int n_personas, int facts_per_persona,
                                      double dialogues_per_persona_mean,
                                      std::uint64_t seed,
                                      double train_fraction,
                                      double valid_fraction) {
  if (n_personas < 3)
    throw GenerationError("n_personas must be >= 3");
  if (facts_per_persona < 1)
    throw GenerationError("facts_per_persona must be >= 1");
  const auto& grammar = synthetic_grammar();
  if (facts_per_persona > static_cast<int>(grammar.size()))
    throw GenerationError("facts_per_persona exceeds the " +
                          std::to_string(grammar.size()) +
                          " grammar attributes");
  if (static_cast<double>(n_personas) > grammar_capacity(facts_per_persona))
    throw GenerationError("grammar exhausted: " + std::to_string(n_personas) +
                          " personas exceed the distinct fact combinations");

  Rng rng(seed);
  std::set<std::string> seen_fact_sets;
  std::vector<TextPersona> personas;
  long attempts = 0;
  const long max_attempts = 1000L * n_personas + 10000L;
  while (static_cast<int>(personas.size()) < n_personas) {
    if (++attempts > max_attempts)
      throw GenerationError("grammar exhausted while sampling distinct personas");
    std::vector<std::size_t> attr_idx = rng.sample_indices(
        grammar.size(), static_cast<std::size_t>(facts_per_persona));
    TextPersona p;
    p.persona_id = static_cast<int>(personas.size());
    std::string key;
    for (std::size_t ai : attr_idx) {
      const GrammarAttribute& attr = grammar[ai];
      const std::string& value =
          attr.values[rng.next_below(attr.values.size())];
      p.facts.push_back({attr.name, value});
      p.fact_sentences.push_back(render_fact_sentence(attr, value));
      key += attr.name + "=" + value + ";";
    }
    if (!seen_fact_sets.insert(key).second) continue;

    const double raw = dialogues_per_persona_mean + 1.2 * rng.next_gaussian();
    const int n_dialogues = std::max(2, static_cast<int>(std::llround(raw)));
    for (int d = 0; d < n_dialogues; ++d)
      p.dialogues.push_back(make_dialogue(p, rng));
    personas.push_back(std::move(p));
  }

  // persona-level split
  std::vector<int> order(static_cast<std::size_t>(n_personas));
  for (int i = 0; i < n_personas; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  int n_train = std::max(
      1, static_cast<int>(std::llround(train_fraction * n_personas)));
  int n_valid =
      static_cast<int>(std::llround(valid_fraction * n_personas));
  if (n_train + n_valid >= n_personas) n_valid = std::max(0, n_personas - n_train - 1);
  if (n_train + n_valid >= n_personas) n_train = n_personas - n_valid - 1;

  const Vocabulary vocab = build_vocab(personas);
  MetaDataset data;
  data.vocab = vocab;
  auto split_of = [&](int pos) -> std::vector<PersonaTask>& {
    if (pos < n_train) return data.train;
    if (pos < n_train + n_valid) return data.valid;
    return data.test;
  };
  for (int pos = 0; pos < n_personas; ++pos)
    split_of(pos).push_back(
        tokenize_persona(personas[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])], vocab));
  auto by_id = [](const PersonaTask& a, const PersonaTask& b) {
    return a.persona_id < b.persona_id;
  };
  std::sort(data.train.begin(), data.train.end(), by_id);
  std::sort(data.valid.begin(), data.valid.end(), by_id);
  std::sort(data.test.begin(), data.test.end(), by_id);
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// corpus IO
// ---------------------------------------------------------------------------

namespace {

json task_to_json(const PersonaTask& task, const Vocabulary& vocab,
                  const char* split) {
  json rec;
  rec["persona_id"] = task.persona_id;
  rec["split"] = split;
  json facts = json::array();
  for (const PersonaFact& f : task.facts)
    facts.push_back(json::array({f.attribute, f.value}));
  rec["facts"] = std::move(facts);
  rec["fact_sentences"] = task.fact_sentences;
  json dialogues = json::array();
  for (const Dialogue& d : task.dialogues) {
    json utts = json::array();
    for (const TokenSequence& u : d.utterances) utts.push_back(vocab.decode(u));
    dialogues.push_back(std::move(utts));
  }
  rec["dialogues"] = std::move(dialogues);
  return rec;
}

}  // namespace

void save_corpus(const MetaDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open corpus file for write: " + path);
  for (const PersonaTask& t : data.train)
    out << task_to_json(t, data.vocab, "train").dump() << '\n';
  for (const PersonaTask& t : data.valid)
    out << task_to_json(t, data.vocab, "valid").dump() << '\n';
  for (const PersonaTask& t : data.test)
    out << task_to_json(t, data.vocab, "test").dump() << '\n';
}

MetaDataset load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file: " + path);

  struct Raw {
    TextPersona persona;
    std::string split;
  };
  std::vector<Raw> raws;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("corpus line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    try {
      Raw raw;
      raw.persona.persona_id = rec.at("persona_id").get<int>();
      raw.split = rec.at("split").get<std::string>();
      for (const auto& f : rec.at("facts"))
        raw.persona.facts.push_back(
            {f.at(0).get<std::string>(), f.at(1).get<std::string>()});
      raw.persona.fact_sentences =
          rec.at("fact_sentences").get<std::vector<std::string>>();
      for (const auto& d : rec.at("dialogues")) {
        TextDialogue td;
        for (const auto& u : d) td.utterances.push_back(u.get<std::string>());
        raw.persona.dialogues.push_back(std::move(td));
      }
      raws.push_back(std::move(raw));
    } catch (const json::exception& e) {
      throw ParseError("corpus line " + std::to_string(line_no) + ": " +
                       e.what());
    }
  }
  if (raws.empty()) throw EmptyDataset("corpus file is empty: " + path);

  std::vector<TextPersona> all;
  all.reserve(raws.size());
  for (const Raw& r : raws) all.push_back(r.persona);
  const Vocabulary vocab = build_vocab(all);

  MetaDataset data;
  data.vocab = vocab;
  for (const Raw& r : raws) {
    PersonaTask task = tokenize_persona(r.persona, vocab);
    if (r.split == "train")
      data.train.push_back(std::move(task));
    else if (r.split == "valid")
      data.valid.push_back(std::move(task));
    else if (r.split == "test")
      data.test.push_back(std::move(task));
    else
      throw ParseError("corpus: unknown split '" + r.split + "'");
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// persona-chat loader
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kPersonaPrefix = "your persona: ";

struct RawDialogue {
  std::vector<std::string> persona;  // description sentences
  std::vector<std::string> utterances;
};

}  // namespace

MetaDataset load_personachat(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path);

  std::vector<RawDialogue> dialogues;
  RawDialogue current;
  bool has_current = false;
  int prev_n = 0;

  std::string line;
  int line_no = 0;
  auto flush = [&] {
    if (has_current) {
      if (current.utterances.empty())
        throw ParseError("dialogue ending before line " +
                         std::to_string(line_no) + " has no turns");
      dialogues.push_back(std::move(current));
      current = RawDialogue{};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos)
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected '<n> <text>'");
    int n = 0;
    try {
      std::size_t used = 0;
      n = std::stoi(line.substr(0, sp), &used);
      if (used != sp) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": malformed line number");
    }
    if (n <= prev_n) flush();
    prev_n = n;
    has_current = true;

    const std::string rest = line.substr(sp + 1);
    if (rest.rfind(kPersonaPrefix, 0) == 0) {
      current.persona.push_back(rest.substr(std::string(kPersonaPrefix).size()));
      continue;
    }
    const std::size_t tab = rest.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= rest.size())
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected '<user>\\t<system>' turn");
    current.utterances.push_back(rest.substr(0, tab));
    current.utterances.push_back(rest.substr(tab + 1));
  }
  ++line_no;
  flush();
  if (dialogues.empty()) throw EmptyDataset("no dialogues in " + path);

  // group by the exact persona-description set
  std::vector<TextPersona> personas;
  std::map<std::string, std::size_t> group_of;
  for (const RawDialogue& d : dialogues) {
    std::vector<std::string> sorted_persona = d.persona;
    std::sort(sorted_persona.begin(), sorted_persona.end());
    std::string key;
    for (const std::string& s : sorted_persona) key += s + "\n";
    auto it = group_of.find(key);
    if (it == group_of.end()) {
      it = group_of.emplace(key, personas.size()).first;
      TextPersona p;
      p.persona_id = static_cast<int>(personas.size());
      p.fact_sentences = d.persona;
      personas.push_back(std::move(p));
    }
    TextDialogue td;
    td.utterances = d.utterances;
    personas[it->second].dialogues.push_back(std::move(td));
  }

  std::size_t dropped = 0;
  std::vector<TextPersona> kept;
  for (TextPersona& p : personas) {
    if (p.dialogues.size() < 2) {
      ++dropped;
      continue;
    }
    p.persona_id = static_cast<int>(kept.size());
    kept.push_back(std::move(p));
  }
  if (dropped > 0)
    warn(std::to_string(dropped) +
         " persona group(s) with fewer than 2 dialogues dropped from " + path);
  if (kept.empty())
    throw EmptyDataset("no persona group in " + path + " has >= 2 dialogues");

  MetaDataset data;
  data.vocab = build_vocab(kept);
  for (const TextPersona& p : kept)
    data.train.push_back(tokenize_persona(p, data.vocab));
  data.validate();
  return data;
}

MetaDataset load_personachat_splits(const std::string& train_path,
                                    const std::string& valid_path,
                                    const std::string& test_path) {
  MetaDataset tr = load_personachat(train_path);
  MetaDataset va = load_personachat(valid_path);
  MetaDataset te = load_personachat(test_path);

  // re-key persona ids across splits and rebuild one shared vocabulary
  std::vector<TextPersona> all;
  auto absorb = [&](std::vector<PersonaTask>& tasks, const Vocabulary& vocab) {
    for (PersonaTask& t : tasks) {
      TextPersona p;
      p.persona_id = static_cast<int>(all.size());
      p.facts = t.facts;
      p.fact_sentences = t.fact_sentences;
      for (const Dialogue& d : t.dialogues) {
        TextDialogue td;
        for (const TokenSequence& u : d.utterances)
          td.utterances.push_back(vocab.decode(u));
        p.dialogues.push_back(std::move(td));
      }
      all.push_back(std::move(p));
    }
  };
  const std::size_t n_train = tr.train.size();
  const std::size_t n_valid = va.train.size();
  absorb(tr.train, tr.vocab);
  absorb(va.train, va.vocab);
  absorb(te.train, te.vocab);

  MetaDataset data;
  data.vocab = build_vocab(all);
  for (std::size_t i = 0; i < all.size(); ++i) {
    PersonaTask task = tokenize_persona(all[i], data.vocab);
    if (i < n_train)
      data.train.push_back(std::move(task));
    else if (i < n_train + n_valid)
      data.valid.push_back(std::move(task));
    else
      data.test.push_back(std::move(task));
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// episode sampling
// ---------------------------------------------------------------------------

std::vector<Episode> sample_meta_batch(const std::vector<PersonaTask>& split,
                                       int batch_size, double support_fraction,
                                       Rng& rng) {
  if (!(support_fraction > 0.0 && support_fraction < 1.0))
    throw InvalidHyperparameter("support_fraction must be in (0, 1)");
  if (batch_size < 1 || batch_size > static_cast<int>(split.size()))
    throw InvalidHyperparameter("batch_size must be in [1, split size]");

  const std::vector<std::size_t> picks =
      rng.sample_indices(split.size(), static_cast<std::size_t>(batch_size));
  std::vector<Episode> episodes;
  episodes.reserve(picks.size());
  for (std::size_t pi : picks) {
    const PersonaTask& task = split[pi];
    const int k = static_cast<int>(task.dialogues.size());
    if (k < 2) {
      warn("persona " + std::to_string(task.persona_id) +
           " has fewer than 2 dialogues; skipped");
      continue;
    }
    std::vector<std::size_t> order(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
    rng.shuffle(order);
    int s = static_cast<int>(
        std::ceil(support_fraction * static_cast<double>(k)));
    s = std::max(1, std::min(s, k - 1));
    Episode ep;
    ep.persona_id = task.persona_id;
    for (int i = 0; i < k; ++i) {
      const Dialogue& d = task.dialogues[order[static_cast<std::size_t>(i)]];
      if (i < s)
        ep.support.push_back(d);
      else
        ep.query.push_back(d);
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

std::vector<Episode> leave_one_out_episodes(const PersonaTask& task) {
  const int k = static_cast<int>(task.dialogues.size());
  if (k < 2)
    throw InsufficientDialogues("persona " + std::to_string(task.persona_id) +
                                " has " + std::to_string(k) +
                                " dialogue(s); leave-one-out needs >= 2");
  std::vector<Episode> episodes(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    Episode& ep = episodes[static_cast<std::size_t>(j)];
    ep.persona_id = task.persona_id;
    for (int i = 0; i < k; ++i) {
      if (i == j)
        ep.query.push_back(task.dialogues[static_cast<std::size_t>(i)]);
      else
        ep.support.push_back(task.dialogues[static_cast<std::size_t>(i)]);
    }
  }
  return episodes;
}

Episode truncate_support(const Episode& episode, int k_shots, Rng& rng) {
  if (k_shots < 0)
    throw InvalidHyperparameter("k_shots must be >= 0");
  const int s = static_cast<int>(episode.support.size());
  if (k_shots > s) {
    warn("k_shots " + std::to_string(k_shots) + " exceeds the support size " +
         std::to_string(s) + "; clamped");
    k_shots = s;
  }
  if (k_shots == s) return episode;
  Episode out;
  out.persona_id = episode.persona_id;
  out.query = episode.query;
  const std::vector<std::size_t> keep = rng.sample_indices(
      static_cast<std::size_t>(s), static_cast<std::size_t>(k_shots));
  for (std::size_t i : keep) out.support.push_back(episode.support[i]);
  return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

namespace {

TokenSequence persona_prefix(const std::vector<std::string>& sentences,
                             const Vocabulary& vocab) {
  TokenSequence out;
  for (const std::string& s : sentences) {
    const TokenSequence toks = vocab.encode(s);
    out.insert(out.end(), toks.begin(), toks.end());
    out.push_back(Vocabulary::kPersonaSep);
  }
  return out;
}

// BOS [persona <psep>]* (utterance <sep>)^turn, tail-trimmed to the window
TokenSequence assemble_context(const Dialogue& dialogue, int turn,
                               const Vocabulary& vocab, int max_context,
                               const std::vector<std::string>* persona,
                               int reserve_len) {
  TokenSequence ctx{Vocabulary::kBos};
  if (persona != nullptr) {
    const TokenSequence p = persona_prefix(*persona, vocab);
    ctx.insert(ctx.end(), p.begin(), p.end());
  }
  for (int i = 0; i < turn; ++i) {
    const TokenSequence& u = dialogue.utterances[static_cast<std::size_t>(i)];
    ctx.insert(ctx.end(), u.begin(), u.end());
    ctx.push_back(Vocabulary::kSep);
  }
  const int budget = max_context - reserve_len;
  if (static_cast<int>(ctx.size()) > budget) {
    // keep BOS plus the most recent tokens
    const std::size_t keep = static_cast<std::size_t>(std::max(1, budget - 1));
    TokenSequence trimmed{Vocabulary::kBos};
    trimmed.insert(trimmed.end(), ctx.end() - static_cast<std::ptrdiff_t>(keep),
                   ctx.end());
    return trimmed;
  }
  return ctx;
}

}  // namespace

TokenSequence context_for_turn(const Dialogue& dialogue, int turn,
                               const Vocabulary& vocab, int max_context,
                               const std::vector<std::string>* persona_sentences,
                               int reserve_len) {
  return assemble_context(dialogue, turn, vocab, max_context,
                          persona_sentences, reserve_len);
}

DialogueBatch to_training_batch(const std::vector<Dialogue>& dialogues,
                                const Vocabulary& vocab, int max_context,
                                const std::vector<std::string>* persona_sentences,
                                std::string name) {
  DialogueBatch batch;
  batch.name = std::move(name);
  for (const Dialogue& d : dialogues) {
    for (int j = 1; j < d.size(); j += 2) {
      TokenSequence tgt = d.utterances[static_cast<std::size_t>(j)];
      tgt.push_back(Vocabulary::kEos);
      TokenSequence ctx =
          assemble_context(d, j, vocab, max_context, persona_sentences,
                           static_cast<int>(tgt.size()));
      batch.push(std::move(ctx), std::move(tgt));
    }
  }
  return batch;
}

}  // namespace paml
