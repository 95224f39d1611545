#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "paml/evalsuite.hpp"
#include "test_util.hpp"

using namespace paml;
using namespace pamltest;

namespace {

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// id sequences straight from integers; bleu needs no vocabulary
TokenSequence seq(std::initializer_list<int> ids) { return TokenSequence(ids); }

}  // namespace

// ---------------------------------------------------------------------------
// rule NLI
// ---------------------------------------------------------------------------

TEST_CASE("rule_nli on the canonical pet examples") {
  const PersonaFact fact{"pet", "turtle"};
  CHECK(rule_nli(words_of("my pet is a turtle"), fact) == NliLabel::Entails);
  CHECK(rule_nli(words_of("my pet is a dog"), fact) == NliLabel::Contradicts);
  CHECK(rule_nli(words_of("i like walking in the park"), fact) ==
        NliLabel::Neutral);
  // value mentioned without the trigger phrase stays neutral
  CHECK(rule_nli(words_of("the turtle is fast"), fact) == NliLabel::Neutral);
  // trigger followed by a non-domain word stays neutral
  CHECK(rule_nli(words_of("my pet is a robot"), fact) == NliLabel::Neutral);
}

TEST_CASE("rule_nli handles unknown attributes as neutral") {
  CHECK(rule_nli(words_of("my pet is a turtle"), {"spaceship", "red"}) ==
        NliLabel::Neutral);
}

TEST_CASE("rule_nli agrees with the brute-force grammar label table") {
  // every (attribute, value) response surface against every (attribute,
  // value) fact, plus all neutral responses: labels are known by construction
  long checked = 0;
  for (const GrammarAttribute& ua : synthetic_grammar()) {
    for (const std::string& uv : ua.values) {
      const auto words = words_of(render_fact_sentence(ua, uv));
      for (const GrammarAttribute& fa : synthetic_grammar()) {
        for (const std::string& fv : fa.values) {
          NliLabel expected = NliLabel::Neutral;
          if (ua.name == fa.name)
            expected = (uv == fv) ? NliLabel::Entails : NliLabel::Contradicts;
          CHECK(rule_nli(words, {fa.name, fv}) == expected);
          ++checked;
        }
      }
    }
  }
  for (const auto& [user, system] : neutral_exchanges()) {
    for (const GrammarAttribute& fa : synthetic_grammar()) {
      for (const std::string& fv : fa.values) {
        CHECK(rule_nli(words_of(system), {fa.name, fv}) == NliLabel::Neutral);
        CHECK(rule_nli(words_of(user), {fa.name, fv}) == NliLabel::Neutral);
        ++checked;
      }
    }
  }
  CHECK(checked > 4000);  // exhaustive, not a sample
}

// ---------------------------------------------------------------------------
// consistency
// ---------------------------------------------------------------------------

TEST_CASE("consistency_C sums labels across persona facts") {
  MetaDataset data = generate_synthetic_corpus(3, 1, 3.0, 3);
  Vocabulary& vocab = data.vocab;
  for (const char* w : {"my", "pet", "is", "a", "turtle", "dog", "chess",
                        "hobby", "soup"})
    vocab.add(w);

  PersonaTask persona;
  persona.facts = {{"pet", "turtle"}, {"hobby", "chess"}, {"sport", "tennis"},
                   {"color", "red"}};

  const NliFn nli = rule_nli_fn();
  SUBCASE("neutral to all facts") {
    const TokenSequence u = vocab.encode("soup is a dog");
    CHECK(consistency_C(u, persona, nli, vocab) == 0);
  }
  SUBCASE("entails one fact") {
    const TokenSequence u = vocab.encode("my pet is a turtle");
    CHECK(consistency_C(u, persona, nli, vocab) == 1);
  }
  SUBCASE("contradicts one fact") {
    const TokenSequence u = vocab.encode("my pet is a dog");
    CHECK(consistency_C(u, persona, nli, vocab) == -1);
  }
  SUBCASE("mixed labels add up") {
    // entails pet and hobby, contradicts nothing, neutral to the rest
    const TokenSequence u =
        vocab.encode("my pet is a turtle my hobby is chess");
    CHECK(consistency_C(u, persona, nli, vocab) == 2);
  }
}

TEST_CASE("|C| is bounded by the fact count") {
  const MetaDataset data = generate_synthetic_corpus(6, 3, 4.0, 17);
  // a vocabulary covering the whole grammar, not just this corpus
  Vocabulary vocab;
  for (const GrammarAttribute& a : synthetic_grammar()) {
    for (const std::string& w : words_of(a.trigger)) vocab.add(w);
    for (const std::string& v : a.values) vocab.add(v);
  }
  const NliFn nli = rule_nli_fn();
  Rng rng(23);
  for (const PersonaTask& task : data.train) {
    const int m = static_cast<int>(task.facts.size());
    // random utterances assembled from random grammar surface forms
    for (int i = 0; i < 20; ++i) {
      const auto& grammar = synthetic_grammar();
      const GrammarAttribute& a = grammar[rng.next_below(grammar.size())];
      const std::string& v = a.values[rng.next_below(a.values.size())];
      const TokenSequence u = vocab.encode(render_fact_sentence(a, v));
      const int c = consistency_C(u, task, nli, vocab);
      CHECK(std::abs(c) <= m);
    }
  }
}

TEST_CASE("gold responses of a generated corpus never contradict their persona") {
  for (int facts : {1, 4}) {
    const MetaDataset data =
        generate_synthetic_corpus(8, facts, 6.0, 400 + facts);
    const NliFn nli = rule_nli_fn();
    std::vector<const PersonaTask*> tasks;
    for (const auto& t : data.train) tasks.push_back(&t);
    for (const auto& t : data.valid) tasks.push_back(&t);
    for (const auto& t : data.test) tasks.push_back(&t);
    for (const PersonaTask* task : tasks) {
      for (const Dialogue& d : task->dialogues) {
        for (int j = 1; j < d.size(); j += 2) {
          const int c = consistency_C(d.utterances[static_cast<std::size_t>(j)],
                                      *task, nli, data.vocab);
          CHECK(c >= 0);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

TEST_CASE("bleu of identical corpora is 100") {
  const std::vector<TokenSequence> x{seq({5, 6, 7, 8, 9}), seq({7, 7, 8})};
  CHECK(bleu(x, x) == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("bleu matches a hand-counted two-sentence example") {
  // h1 = "the cat sat on the mat"  r1 = "the cat is on the mat"
  // h2 = "a quick brown fox"       r2 = "the quick brown fox jumps"
  // ids: the=1 cat=2 sat=3 on=4 mat=5 is=6 a=7 quick=8 brown=9 fox=10
  //      jumps=11
  const std::vector<TokenSequence> hyps{seq({1, 2, 3, 4, 1, 5}),
                                        seq({7, 8, 9, 10})};
  const std::vector<TokenSequence> refs{seq({1, 2, 6, 4, 1, 5}),
                                        seq({1, 8, 9, 10, 11})};
  // hand-counted clipped matches / totals:
  //   1-grams 8/10, 2-grams 5/8, 3-grams 2/6, 4-grams 0/4 -> smoothed 1/5
  //   lengths: hyp 10, ref 11 -> brevity exp(1 - 11/10)
  const double expected = 100.0 * std::exp(1.0 - 11.0 / 10.0) *
                          std::pow(0.8 * 0.625 * (2.0 / 6.0) * 0.2, 0.25);
  CHECK(bleu(hyps, refs) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero overlap scores the smoothed floor, not zero") {
  SUBCASE("single pair, hand-evaluated") {
    // 8 hypothesis tokens, none matching: totals 8,7,6,5, all smoothed
    const std::vector<TokenSequence> hyps{seq({1, 2, 3, 4, 5, 6, 7, 8})};
    const std::vector<TokenSequence> refs{seq({11, 12, 13, 14, 15, 16, 17, 18})};
    const double expected =
        100.0 * std::pow((1.0 / 9.0) * (1.0 / 8.0) * (1.0 / 7.0) * (1.0 / 6.0),
                         0.25);
    const double got = bleu(hyps, refs);
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
    CHECK(got > 0.0);
  }
  SUBCASE("a 40-pair corpus falls below 1.0") {
    std::vector<TokenSequence> hyps, refs;
    for (int i = 0; i < 40; ++i) {
      TokenSequence h, r;
      for (int j = 0; j < 12; ++j) {
        h.push_back(100 + j);
        r.push_back(200 + j);
      }
      hyps.push_back(h);
      refs.push_back(r);
    }
    const double got = bleu(hyps, refs);
    CHECK(got > 0.0);
    CHECK(got < 1.0);
  }
}

TEST_CASE("bleu is invariant to pair order and handles empty hypotheses") {
  const std::vector<TokenSequence> hyps{seq({1, 2, 3}), seq({4, 5}),
                                        seq({6, 7, 8, 9})};
  const std::vector<TokenSequence> refs{seq({1, 2, 4}), seq({4, 5}),
                                        seq({6, 8, 8, 9})};
  const double forward = bleu(hyps, refs);
  const std::vector<TokenSequence> hyps_r{hyps[2], hyps[0], hyps[1]};
  const std::vector<TokenSequence> refs_r{refs[2], refs[0], refs[1]};
  CHECK(bleu(hyps_r, refs_r) == doctest::Approx(forward).epsilon(1e-12));

  const std::vector<TokenSequence> empty_h{TokenSequence{}};
  const std::vector<TokenSequence> some_r{seq({1, 2, 3})};
  CHECK(bleu(empty_h, some_r) == 0.0);

  CHECK_THROWS_AS(bleu({}, {}), InvalidHyperparameter);
  CHECK_THROWS_AS(bleu(hyps, some_r), InvalidHyperparameter);
}

// ---------------------------------------------------------------------------
// evaluation protocol
// ---------------------------------------------------------------------------

namespace {

struct EvalFixture {
  MetaDataset data;
  ModelConfig cfg;
  ParamVector theta;
  EvalDecodeCfg dc;

  EvalFixture() : data(generate_synthetic_corpus(6, 2, 3.0, 777, 0.5, 0.0)) {
    cfg.vocab_size = data.vocab.size();
    cfg.embed_dim = 8;
    cfg.model_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_context = 96;
    theta = init_params(cfg, 2024);
    dc.beam_width = 2;
    dc.max_response = 8;
  }
};

}  // namespace

TEST_CASE("adapt with alpha = 0 reproduces the zero-shot report exactly") {
  EvalFixture fx;
  const NliFn nli = rule_nli_fn();
  const EvalResult zero =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, std::nullopt, nli,
                       fx.data.vocab, fx.dc, "s");
  AdaptSpec a0{0.0, 5};
  EvalResult adapt0 = evaluate_setting(fx.cfg, fx.theta, fx.data.test, a0, nli,
                                       fx.data.vocab, fx.dc, "s");
  adapt0.k = zero.k;  // modes label k differently; numbers must agree exactly
  CHECK(adapt0 == zero);
}

TEST_CASE("episode count is the sum of per-task dialogue counts") {
  EvalFixture fx;
  const EvalResult r =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, std::nullopt,
                       rule_nli_fn(), fx.data.vocab, fx.dc, "s");
  long expect = 0;
  for (const PersonaTask& t : fx.data.test)
    expect += static_cast<long>(t.dialogues.size());
  CHECK(r.episodes == expect);
  CHECK(r.ppl >= 1.0);
}

TEST_CASE("adaptation changes the report when alpha > 0") {
  EvalFixture fx;
  const NliFn nli = rule_nli_fn();
  const EvalResult zero =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, std::nullopt, nli,
                       fx.data.vocab, fx.dc, "s");
  const EvalResult tuned =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, AdaptSpec{0.1, 5}, nli,
                       fx.data.vocab, fx.dc, "s");
  CHECK(tuned.ppl != zero.ppl);
  CHECK(tuned.ppl < zero.ppl);  // adapting on same-persona dialogues helps
}

TEST_CASE("kshot: k = 0 equals the zero-shot setting and curves are paired") {
  EvalFixture fx;
  const NliFn nli = rule_nli_fn();
  const EvalResult zero =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, std::nullopt, nli,
                       fx.data.vocab, fx.dc, "s");
  const std::vector<int> ks{0, 1, 3};
  const AdaptSpec adapt{0.05, 3};
  const auto rows =
      kshot_sweep(fx.cfg, fx.theta, fx.data.test, ks, adapt, nli,
                  fx.data.vocab, fx.dc, "s", 99);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].k == 0);
  CHECK(rows[0].ppl == zero.ppl);
  CHECK(rows[0].bleu == zero.bleu);
  CHECK(rows[0].mean_c == zero.mean_c);
  CHECK(rows[0].episodes == zero.episodes);

  // same seed, same rows (paired and reproducible)
  const auto again =
      kshot_sweep(fx.cfg, fx.theta, fx.data.test, ks, adapt, nli,
                  fx.data.vocab, fx.dc, "s", 99);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i] == again[i]);

  CHECK_THROWS_AS(kshot_sweep(fx.cfg, fx.theta, fx.data.test, {3, 1}, adapt,
                              nli, fx.data.vocab, fx.dc, "s", 99),
                  InvalidHyperparameter);
}

TEST_CASE("report CSV format and transcripts") {
  EvalFixture fx;
  std::vector<TranscriptEntry> transcripts;
  const EvalResult r =
      evaluate_setting(fx.cfg, fx.theta, fx.data.test, std::nullopt,
                       rule_nli_fn(), fx.data.vocab, fx.dc, "dialogue",
                       &transcripts);
  EvalReport report;
  report.rows = {r};

  namespace fs = std::filesystem;
  const std::string csv = (fs::temp_directory_path() / "paml_report.csv").string();
  report.save_csv(csv);
  std::ifstream in(csv);
  std::string header, row;
  REQUIRE(std::getline(in, header));
  CHECK(header == "setting,k,ppl,bleu,C,episodes");
  REQUIRE(std::getline(in, row));
  CHECK(row.rfind("dialogue,0,", 0) == 0);
  std::remove(csv.c_str());

  CHECK(!transcripts.empty());
  const std::string tpath =
      (fs::temp_directory_path() / "paml_transcripts.jsonl").string();
  save_transcripts(transcripts, tpath);
  std::ifstream tin(tpath);
  std::string first;
  REQUIRE(std::getline(tin, first));
  CHECK(first.find("\"hypothesis\"") != std::string::npos);
  std::remove(tpath.c_str());

  CHECK(!report.table().empty());
}
