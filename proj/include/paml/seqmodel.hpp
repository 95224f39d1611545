#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "paml/diffcore.hpp"
#include "paml/errors.hpp"

namespace paml {

using TokenId = int;
using TokenSequence = std::vector<TokenId>;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Dense 0-based token <-> id map. The five reserved tokens occupy fixed ids
// 0..4, in this order: PAD, BOS, EOS, SEP, PERSONA-SEP. Serialized as one
// token per line, line number = id, reserved tokens first.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kPersonaSep = 4;
  static constexpr int kReservedCount = 5;

  Vocabulary();

  // Adds a token if absent; returns its id either way.
  TokenId add(const std::string& token);

  // Throws ParseError for unknown tokens.
  TokenId id_of(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::string& token(TokenId id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  // Whitespace tokenization against this vocabulary.
  TokenSequence encode(const std::string& text) const;
  // Space-joined surface form; reserved tokens render as their markers.
  std::string decode(const TokenSequence& seq) const;
  // Like decode but with reserved tokens dropped (for transcripts/BLEU text).
  std::vector<std::string> words(const TokenSequence& seq) const;

  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;
  static Vocabulary load(std::istream& in);
  static Vocabulary load_file(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 32;
  int model_dim = 32;
  int layers = 2;
  int heads = 2;
  int ffn_dim = 64;
  int max_context = 128;
  double dropout = 0.0;

  // Throws ConfigError on violation (head divisibility, context >= 2, ...).
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Closed-form parameter count for a configuration:
//   V*E (token emb) + C*D (pos emb) + [E != D] E*D (input projection)
//   + L * (4*D*D + 2*D*F + 2*D)  (attention, feed-forward, two norm gains)
//   + D (final norm) + D*V (output head)
std::size_t param_count(const ModelConfig& cfg);

// Offsets of each weight block inside the flat parameter vector. Matrices
// are row-major with shape (input_dim x output_dim).
struct ParamLayout {
  std::size_t tok_emb = 0;   // vocab x embed
  std::size_t pos_emb = 0;   // max_context x dim
  std::size_t in_proj = 0;   // embed x dim, present only when embed != dim
  bool has_proj = false;
  std::size_t layer0 = 0;    // base offset of the first layer block
  std::size_t per_layer = 0; // stride between consecutive layer blocks
  // Offsets relative to a layer base:
  std::size_t ln1 = 0, wq = 0, wk = 0, wv = 0, wo = 0, ln2 = 0, w1 = 0, w2 = 0;
  std::size_t lnf = 0;       // final norm gain (dim)
  std::size_t head = 0;      // dim x vocab
  std::size_t total = 0;

  std::size_t layer_base(int l) const { return layer0 + static_cast<std::size_t>(l) * per_layer; }
};

ParamLayout make_layout(const ModelConfig& cfg);

// Deterministic scaled-uniform initialization: Glorot-uniform bounds
// sqrt(6/(fan_in+fan_out)) for matrices, U(-0.08, 0.08) for embedding
// tables, norm gains exactly 1. Same (config, seed) gives the identical
// vector on every platform.
ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

// Next-token training/eval data: rows of (context, target). Rows are padded
// to a common length with PAD when laid out for the model; PAD positions
// never contribute to the loss.
struct DialogueBatch {
  std::vector<TokenSequence> context;  // per row, non-empty
  std::vector<TokenSequence> target;   // per row, non-empty
  std::string name;                    // label used in error messages

  int rows() const { return static_cast<int>(context.size()); }
  bool empty() const { return context.empty(); }
  void push(TokenSequence ctx, TokenSequence tgt) {
    context.push_back(std::move(ctx));
    target.push_back(std::move(tgt));
  }
  std::string describe() const { return name.empty() ? "batch" : name; }
};

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

// Next-token probability distributions, probs[row][pos][token_id]; position
// p is conditioned on tokens 0..p of that row (causal). Row r has
// context[r].size() + target[r].size() positions.
using ForwardProbs = std::vector<std::vector<std::vector<double>>>;

ForwardProbs forward(const ModelConfig& cfg, const ParamVector& theta,
                     const DialogueBatch& batch);

// Mean negative log-probability per non-PAD target token; >= 0.
// Throws EmptyTargetError when the batch has no scorable target tokens.
double nll_loss(const ModelConfig& cfg, const ParamVector& theta,
                const DialogueBatch& batch);

// exp(nll_loss); >= 1.
double perplexity(const ModelConfig& cfg, const ParamVector& theta,
                  const DialogueBatch& batch);

// Beam-search decoding (beam_width 1 == greedy). Emits tokens after the
// given context until EOS or max_len and returns the finished hypothesis
// with the highest length-normalized log-probability, EOS excluded. Ties
// break toward the lowest token id. If context plus generated tokens exceed
// the context window, the oldest tokens are dropped from the model input.
TokenSequence decode(const ModelConfig& cfg, const ParamVector& theta,
                     const TokenSequence& context, int beam_width, int max_len);

inline TokenSequence decode_greedy(const ModelConfig& cfg,
                                   const ParamVector& theta,
                                   const TokenSequence& context, int max_len) {
  return decode(cfg, theta, context, 1, max_len);
}

// ---------------------------------------------------------------------------
// The training objective
// ---------------------------------------------------------------------------

// nll_loss bound to a configuration as a LossFn, the object both optimization
// loops differentiate. Dropout, when configured with a nonzero rate, uses a
// fixed mask seed so the loss stays a pure (and differentiable) function of
// theta; evaluation paths always construct this with dropout disabled.
class NllLoss final : public LossFn<DialogueBatch> {
 public:
  explicit NllLoss(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }
  NllLoss(ModelConfig cfg, double dropout_rate, std::uint64_t mask_seed)
      : cfg_(std::move(cfg)), dropout_rate_(dropout_rate), mask_seed_(mask_seed) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }

  double value(const ParamVector& theta, const DialogueBatch& batch) const override;
  std::pair<double, ParamVector> value_and_gradient(
      const ParamVector& theta, const DialogueBatch& batch) const override;
  ParamVector hessian_vector(const ParamVector& theta, const DialogueBatch& batch,
                             const ParamVector& v) const override;

 private:
  ModelConfig cfg_;
  double dropout_rate_ = 0.0;
  std::uint64_t mask_seed_ = 0;
};

}  // namespace paml
