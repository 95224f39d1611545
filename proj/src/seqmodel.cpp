#include "paml/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "paml/rng.hpp"
#include "transformer_core.hpp"

namespace paml {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {
const char* const kReservedTokens[] = {"<pad>", "<bos>", "<eos>", "<sep>",
                                       "<psep>"};
}

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t);
}

TokenId Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const TokenId id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

TokenId Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw ParseError("unknown token: " + token);
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return ids_.count(token) != 0;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size()) throw ShapeError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(const std::string& text) const {
  TokenSequence out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(id_of(w));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& seq) const {
  std::string out;
  for (TokenId id : seq) {
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::vector<std::string> Vocabulary::words(const TokenSequence& seq) const {
  std::vector<std::string> out;
  for (TokenId id : seq)
    if (id >= kReservedCount) out.push_back(token(id));
  return out;
}

void Vocabulary::save(std::ostream& out) const {
  for (const auto& t : tokens_) out << t << '\n';
}

void Vocabulary::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open vocabulary file for write: " + path);
  save(out);
}

Vocabulary Vocabulary::load(std::istream& in) {
  Vocabulary v;
  std::string line;
  int idx = 0;
  while (std::getline(in, line)) {
    if (idx < kReservedCount) {
      if (line != kReservedTokens[idx])
        throw ParseError("vocabulary line " + std::to_string(idx + 1) +
                         ": expected reserved token " +
                         std::string(kReservedTokens[idx]));
    } else {
      if (line.empty())
        throw ParseError("vocabulary line " + std::to_string(idx + 1) +
                         ": empty token");
      v.add(line);
    }
    ++idx;
  }
  if (idx < kReservedCount) throw ParseError("vocabulary file truncated");
  return v;
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocabulary file: " + path);
  return load(in);
}

// ---------------------------------------------------------------------------
// ModelConfig / layout / init
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (model_dim < 1) throw ConfigError("model_dim must be >= 1");
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (model_dim % heads != 0)
    throw ConfigError("model_dim must be divisible by heads");
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
  if (max_context < 2) throw ConfigError("max_context must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError("dropout must be in [0, 1)");
}

ParamLayout make_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto E = static_cast<std::size_t>(cfg.embed_dim);
  const auto D = static_cast<std::size_t>(cfg.model_dim);
  const auto F = static_cast<std::size_t>(cfg.ffn_dim);
  const auto C = static_cast<std::size_t>(cfg.max_context);

  ParamLayout L;
  std::size_t off = 0;
  L.tok_emb = off;
  off += V * E;
  L.pos_emb = off;
  off += C * D;
  L.has_proj = (cfg.embed_dim != cfg.model_dim);
  L.in_proj = off;
  if (L.has_proj) off += E * D;
  L.layer0 = off;
  // relative offsets within one layer block
  std::size_t rel = 0;
  L.ln1 = rel;
  rel += D;
  L.wq = rel;
  rel += D * D;
  L.wk = rel;
  rel += D * D;
  L.wv = rel;
  rel += D * D;
  L.wo = rel;
  rel += D * D;
  L.ln2 = rel;
  rel += D;
  L.w1 = rel;
  rel += D * F;
  L.w2 = rel;
  rel += F * D;
  L.per_layer = rel;
  off += static_cast<std::size_t>(cfg.layers) * rel;
  L.lnf = off;
  off += D;
  L.head = off;
  off += D * V;
  L.total = off;
  return L;
}

std::size_t param_count(const ModelConfig& cfg) { return make_layout(cfg).total; }

namespace {

void fill_uniform(Rng& rng, double bound, double* dst, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i)
    dst[i] = rng.next_uniform(-bound, bound);
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  const ParamLayout L = make_layout(cfg);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto E = static_cast<std::size_t>(cfg.embed_dim);
  const auto D = static_cast<std::size_t>(cfg.model_dim);
  const auto F = static_cast<std::size_t>(cfg.ffn_dim);
  const auto C = static_cast<std::size_t>(cfg.max_context);

  ParamVector theta(L.total, 0.0);
  Rng rng(seed);
  fill_uniform(rng, 0.08, theta.data() + L.tok_emb, V * E);
  fill_uniform(rng, 0.08, theta.data() + L.pos_emb, C * D);
  if (L.has_proj)
    fill_uniform(rng, glorot_bound(E, D), theta.data() + L.in_proj, E * D);
  for (int l = 0; l < cfg.layers; ++l) {
    double* lp = theta.data() + L.layer_base(l);
    for (std::size_t d = 0; d < D; ++d) lp[L.ln1 + d] = 1.0;
    fill_uniform(rng, glorot_bound(D, D), lp + L.wq, D * D);
    fill_uniform(rng, glorot_bound(D, D), lp + L.wk, D * D);
    fill_uniform(rng, glorot_bound(D, D), lp + L.wv, D * D);
    fill_uniform(rng, glorot_bound(D, D), lp + L.wo, D * D);
    for (std::size_t d = 0; d < D; ++d) lp[L.ln2 + d] = 1.0;
    fill_uniform(rng, glorot_bound(D, F), lp + L.w1, D * F);
    fill_uniform(rng, glorot_bound(F, D), lp + L.w2, F * D);
  }
  for (std::size_t d = 0; d < D; ++d) theta[L.lnf + d] = 1.0;
  fill_uniform(rng, glorot_bound(D, V), theta.data() + L.head, D * V);
  return theta;
}

// ---------------------------------------------------------------------------
// batch validation and the loss driver
// ---------------------------------------------------------------------------

namespace {

struct FlatRow {
  TokenSequence toks;  // context ++ target
  int ctx_len = 0;
};

std::vector<FlatRow> flatten_batch(const ModelConfig& cfg,
                                   const DialogueBatch& batch) {
  std::vector<FlatRow> rows;
  rows.reserve(static_cast<std::size_t>(batch.rows()));
  for (int r = 0; r < batch.rows(); ++r) {
    const TokenSequence& ctx = batch.context[static_cast<std::size_t>(r)];
    const TokenSequence& tgt = batch.target[static_cast<std::size_t>(r)];
    if (ctx.empty())
      throw ShapeError("row " + std::to_string(r) + " of " + batch.describe() +
                       " has an empty context");
    if (tgt.empty())
      throw ShapeError("row " + std::to_string(r) + " of " + batch.describe() +
                       " has an empty target");
    FlatRow row;
    row.toks = ctx;
    row.toks.insert(row.toks.end(), tgt.begin(), tgt.end());
    row.ctx_len = static_cast<int>(ctx.size());
    if (static_cast<int>(row.toks.size()) > cfg.max_context)
      throw ShapeError("row " + std::to_string(r) + " of " + batch.describe() +
                       " is longer than the context window (" +
                       std::to_string(row.toks.size()) + " > " +
                       std::to_string(cfg.max_context) + ")");
    for (TokenId id : row.toks)
      if (id < 0 || id >= cfg.vocab_size)
        throw ShapeError("token id " + std::to_string(id) +
                         " outside the vocabulary in " + batch.describe());
    rows.push_back(std::move(row));
  }
  return rows;
}

long count_scored_tokens(const std::vector<FlatRow>& rows) {
  long n = 0;
  for (const FlatRow& row : rows)
    for (std::size_t j = static_cast<std::size_t>(row.ctx_len);
         j < row.toks.size(); ++j)
      if (row.toks[j] != Vocabulary::kPad) ++n;
  return n;
}

void check_theta(const ParamLayout& L, std::size_t theta_size) {
  if (theta_size != L.total)
    throw ShapeError("parameter vector length " + std::to_string(theta_size) +
                     " does not match the configuration (expected " +
                     std::to_string(L.total) + ")");
}

// One pass over the batch: mean nll per scored token, optionally with the
// parameter gradient. The same code runs on double and Dual scalars.
template <class S>
std::pair<S, std::vector<S>> nll_pass(const ModelConfig& cfg,
                                      const ParamLayout& L,
                                      const std::vector<S>& params,
                                      const DialogueBatch& batch,
                                      const detail::DropoutSpec& drop,
                                      bool want_grad) {
  const std::vector<FlatRow> rows = flatten_batch(cfg, batch);
  const long n_tok = count_scored_tokens(rows);
  if (n_tok == 0)
    throw EmptyTargetError("no scorable target tokens in " + batch.describe());
  const double inv_n = 1.0 / static_cast<double>(n_tok);
  const int D = cfg.model_dim, V = cfg.vocab_size;

  S loss = S(0.0);
  std::vector<S> grad;
  if (want_grad) grad.assign(L.total, S(0.0));

  std::vector<S> lg(static_cast<std::size_t>(V));
  std::vector<S> dlg(static_cast<std::size_t>(V));
  detail::RowCache<S> rc;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const FlatRow& row = rows[r];
    const int n = static_cast<int>(row.toks.size());
    detail::forward_trunk(cfg, L, params.data(), row.toks.data(), n, drop,
                          static_cast<std::uint64_t>(r), rc);
    std::vector<S> dnf;
    if (want_grad) dnf.assign(static_cast<std::size_t>(n) * D, S(0.0));
    for (int j = row.ctx_len; j < n; ++j) {
      const TokenId tgt = row.toks[static_cast<std::size_t>(j)];
      if (tgt == Vocabulary::kPad) continue;
      const int t = j - 1;
      detail::logits_at(cfg, L, params.data(), rc, t, lg.data());
      const S lse = detail::logsumexp(lg.data(), V);
      loss += (lse - lg[static_cast<std::size_t>(tgt)]) * inv_n;
      if (want_grad) {
        for (int v = 0; v < V; ++v) {
          S p = detail::s_exp(lg[static_cast<std::size_t>(v)] - lse);
          if (v == tgt) p = p - 1.0;
          dlg[static_cast<std::size_t>(v)] = p * inv_n;
        }
        detail::vec_mat_bwd(&rc.nf[static_cast<std::size_t>(t) * D],
                            params.data() + L.head, dlg.data(), D, V,
                            &dnf[static_cast<std::size_t>(t) * D],
                            grad.data() + L.head);
      }
    }
    if (want_grad)
      detail::backward_trunk(cfg, L, params.data(), row.toks.data(), drop,
                             static_cast<std::uint64_t>(r), rc, dnf,
                             grad.data());
  }
  return {loss, std::move(grad)};
}

std::vector<Dual> to_dual(const ParamVector& theta, const ParamVector& tangent) {
  std::vector<Dual> out(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    out[i] = Dual(theta[i], tangent[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// public evaluation API
// ---------------------------------------------------------------------------

ForwardProbs forward(const ModelConfig& cfg, const ParamVector& theta,
                     const DialogueBatch& batch) {
  const ParamLayout L = make_layout(cfg);
  check_theta(L, theta.size());
  const std::vector<FlatRow> rows = flatten_batch(cfg, batch);
  const int V = cfg.vocab_size;

  ForwardProbs probs(rows.size());
  detail::DropoutSpec no_drop;
  detail::RowCache<double> rc;
  std::vector<double> lg(static_cast<std::size_t>(V));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const FlatRow& row = rows[r];
    const int n = static_cast<int>(row.toks.size());
    detail::forward_trunk(cfg, L, theta.data(), row.toks.data(), n, no_drop,
                          static_cast<std::uint64_t>(r), rc);
    probs[r].resize(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
      detail::logits_at(cfg, L, theta.data(), rc, t, lg.data());
      const double lse = detail::logsumexp(lg.data(), V);
      auto& row_probs = probs[r][static_cast<std::size_t>(t)];
      row_probs.resize(static_cast<std::size_t>(V));
      for (int v = 0; v < V; ++v)
        row_probs[static_cast<std::size_t>(v)] =
            std::exp(lg[static_cast<std::size_t>(v)] - lse);
    }
  }
  return probs;
}

double nll_loss(const ModelConfig& cfg, const ParamVector& theta,
                const DialogueBatch& batch) {
  const ParamLayout L = make_layout(cfg);
  check_theta(L, theta.size());
  detail::DropoutSpec no_drop;
  return nll_pass<double>(cfg, L, theta, batch, no_drop, false).first;
}

double perplexity(const ModelConfig& cfg, const ParamVector& theta,
                  const DialogueBatch& batch) {
  return std::exp(nll_loss(cfg, theta, batch));
}

// ---------------------------------------------------------------------------
// decoding
// ---------------------------------------------------------------------------

namespace {

struct Hypothesis {
  TokenSequence gen;
  double score = 0.0;  // cumulative log-probability of emitted tokens
  int steps = 0;       // number of scored emissions (EOS included)
};

double normalized_score(const Hypothesis& h) {
  return h.score / static_cast<double>(std::max(1, h.steps));
}

// next-token log-probabilities for the window of the last max_context tokens
void next_logprobs(const ModelConfig& cfg, const ParamLayout& L,
                   const ParamVector& theta, const TokenSequence& input,
                   std::vector<double>& out) {
  const int V = cfg.vocab_size;
  TokenSequence window;
  const TokenSequence* in = &input;
  if (static_cast<int>(input.size()) > cfg.max_context) {
    window.assign(input.end() - cfg.max_context, input.end());
    in = &window;
  }
  for (TokenId id : *in)
    if (id < 0 || id >= V)
      throw ShapeError("token id " + std::to_string(id) +
                       " outside the vocabulary in decode context");
  detail::DropoutSpec no_drop;
  detail::RowCache<double> rc;
  detail::forward_trunk(cfg, L, theta.data(), in->data(),
                        static_cast<int>(in->size()), no_drop, 0, rc);
  out.resize(static_cast<std::size_t>(V));
  detail::logits_at(cfg, L, theta.data(), rc, static_cast<int>(in->size()) - 1,
                    out.data());
  const double lse = detail::logsumexp(out.data(), V);
  for (int v = 0; v < V; ++v) out[static_cast<std::size_t>(v)] -= lse;
}

}  // namespace

TokenSequence decode(const ModelConfig& cfg, const ParamVector& theta,
                     const TokenSequence& context, int beam_width,
                     int max_len) {
  const ParamLayout L = make_layout(cfg);
  check_theta(L, theta.size());
  if (beam_width < 1) throw InvalidHyperparameter("beam_width must be >= 1");
  if (max_len < 1) return {};

  // an empty context cannot seed the model; stand in a BOS marker
  TokenSequence base = context;
  if (base.empty()) base.push_back(Vocabulary::kBos);

  std::vector<Hypothesis> beams(1);
  std::vector<Hypothesis> finished;

  struct Candidate {
    double score;
    TokenId tok;
    int hyp;
  };
  std::vector<Candidate> cands;
  std::vector<double> logp;

  for (int step = 0; step < max_len && !beams.empty(); ++step) {
    cands.clear();
    for (std::size_t h = 0; h < beams.size(); ++h) {
      TokenSequence input = base;
      input.insert(input.end(), beams[h].gen.begin(), beams[h].gen.end());
      next_logprobs(cfg, L, theta, input, logp);
      for (int v = 0; v < cfg.vocab_size; ++v)
        cands.push_back({beams[h].score + logp[static_cast<std::size_t>(v)],
                         static_cast<TokenId>(v), static_cast<int>(h)});
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.tok != b.tok) return a.tok < b.tok;
      return a.hyp < b.hyp;
    });
    std::vector<Hypothesis> next;
    int taken = 0;
    for (const Candidate& c : cands) {
      if (taken >= beam_width) break;
      ++taken;
      Hypothesis h = beams[static_cast<std::size_t>(c.hyp)];
      h.score = c.score;
      h.steps += 1;
      if (c.tok == Vocabulary::kEos) {
        finished.push_back(std::move(h));
      } else {
        h.gen.push_back(c.tok);
        next.push_back(std::move(h));
      }
    }
    beams = std::move(next);
  }
  for (Hypothesis& h : beams) finished.push_back(std::move(h));

  const Hypothesis* best = nullptr;
  for (const Hypothesis& h : finished) {
    if (best == nullptr) {
      best = &h;
      continue;
    }
    const double a = normalized_score(h), b = normalized_score(*best);
    if (a > b ||
        (a == b && std::lexicographical_compare(h.gen.begin(), h.gen.end(),
                                                best->gen.begin(),
                                                best->gen.end()))) {
      best = &h;
    }
  }
  return best ? best->gen : TokenSequence{};
}

// ---------------------------------------------------------------------------
// NllLoss
// ---------------------------------------------------------------------------

double NllLoss::value(const ParamVector& theta, const DialogueBatch& batch) const {
  const ParamLayout L = make_layout(cfg_);
  check_theta(L, theta.size());
  detail::DropoutSpec drop{dropout_rate_, mask_seed_};
  return nll_pass<double>(cfg_, L, theta, batch, drop, false).first;
}

std::pair<double, ParamVector> NllLoss::value_and_gradient(
    const ParamVector& theta, const DialogueBatch& batch) const {
  const ParamLayout L = make_layout(cfg_);
  check_theta(L, theta.size());
  detail::DropoutSpec drop{dropout_rate_, mask_seed_};
  auto [loss, grad] = nll_pass<double>(cfg_, L, theta, batch, drop, true);
  return {loss, std::move(grad)};
}

ParamVector NllLoss::hessian_vector(const ParamVector& theta,
                                    const DialogueBatch& batch,
                                    const ParamVector& v) const {
  const ParamLayout L = make_layout(cfg_);
  check_theta(L, theta.size());
  if (v.size() != theta.size())
    throw ShapeError("hessian_vector: direction length mismatch");
  detail::DropoutSpec drop{dropout_rate_, mask_seed_};
  auto [loss, grad] = nll_pass<Dual>(cfg_, L, to_dual(theta, v), batch, drop, true);
  (void)loss;
  ParamVector hv(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) hv[i] = grad[i].tan;
  return hv;
}

}  // namespace paml
