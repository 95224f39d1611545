#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "paml/diffcore.hpp"
#include "paml/episodes.hpp"
#include "paml/seqmodel.hpp"

namespace paml {

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

// Defaults: SGD inner rate 0.01, Adam outer rate 0.0003, persona batches of
// 16, one exactly-differentiated inner step. See the README for how the
// committed experiment configs depart from these.
struct HyperParams {
  double alpha = 0.01;        // inner-loop SGD rate
  double beta = 0.0003;       // outer-loop Adam rate
  int inner_steps = 1;        // t
  int meta_batch_size = 16;   // personas per outer step (dialogues for joint)
  int outer_steps = 100;
  GradMode grad_mode = GradMode::SecondOrder;
  int warmup_steps = 200;     // linear ramp of beta from 0
  std::optional<double> clip_norm = 1.0;  // outer-gradient global-norm clip
  double support_fraction = 0.75;         // support share per sampled episode
  std::uint64_t seed = 0;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  ParamVector m;  // first moments
  ParamVector v;  // second moments
  long step = 0;

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  static AdamState zeros(std::size_t n) {
    return AdamState{ParamVector(n, 0.0), ParamVector(n, 0.0), 0};
  }
};

// One bias-corrected Adam update; inputs are untouched, the updated vector
// and state are returned.
std::pair<ParamVector, AdamState> adam_step(const ParamVector& theta,
                                            const ParamVector& grad,
                                            const AdamState& state, double lr);

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

struct TrainRecord {
  long step = 0;
  double meta_loss = 0.0;        // mean query loss after adaptation
  double pre_adapt_loss = 0.0;   // mean support loss at theta
  double post_adapt_loss = 0.0;  // mean support loss at the adapted theta
  double grad_norm = 0.0;        // outer gradient norm before clipping
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  // CSV columns: step,meta_loss,pre_adapt_loss,post_adapt_loss,grad_norm,seconds
  void save_csv(const std::string& path) const;
};

// ---------------------------------------------------------------------------
// Inner loop
// ---------------------------------------------------------------------------

// `steps` plain SGD updates of the loss over one fixed batch. The input
// vector is never mutated. alpha = 0 or steps = 0 returns the input as-is.
// A non-finite loss aborts with the failing step index in the message.
template <class Batch>
ParamVector inner_adapt(const LossFn<Batch>& loss, const ParamVector& theta,
                        const Batch& batch, double alpha, int steps) {
  if (alpha < 0.0) throw InvalidHyperparameter("inner_adapt: alpha must be >= 0");
  if (steps < 0) throw InvalidHyperparameter("inner_adapt: steps must be >= 0");
  ParamVector current = theta;
  if (alpha == 0.0 || steps == 0) return current;
  for (int s = 0; s < steps; ++s) {
    try {
      auto [l, g] = value_and_grad(loss, current, batch);
      (void)l;
      axpy(-alpha, g, current);
    } catch (const NonFiniteLoss& e) {
      throw NonFiniteLoss(std::string(e.what()) + " (inner step " +
                          std::to_string(s) + ")");
    }
    if (!all_finite(current))
      throw NonFiniteLoss("parameters non-finite after inner step " +
                          std::to_string(s));
  }
  return current;
}

// The test-time procedure applied to any initialization; identical contract
// and implementation to inner_adapt, named for the evaluation protocol.
template <class Batch>
ParamVector fine_tune(const LossFn<Batch>& loss, const ParamVector& theta,
                      const Batch& support, double alpha, int steps) {
  return inner_adapt(loss, theta, support, alpha, steps);
}

// ---------------------------------------------------------------------------
// Meta-gradient
// ---------------------------------------------------------------------------

struct MetaGradient {
  ParamVector grad;               // d(query loss) / d theta
  double query_loss = 0.0;        // at the adapted parameters
  double support_loss_before = 0.0;
  double support_loss_after = 0.0;
};

// Adapt on the support batch, evaluate the query loss at the adapted
// parameters, and differentiate back to theta. With inner_steps > 1 the
// final step is differentiated exactly and earlier steps are treated
// first-order (their Jacobian taken as identity). A null support batch means
// 0-shot: the plain query gradient at theta.
template <class TrainBatch, class ValidBatch>
MetaGradient meta_gradient_batches(const LossFn<TrainBatch>& f_train,
                                   const LossFn<ValidBatch>& f_valid,
                                   const ParamVector& theta,
                                   const TrainBatch* support,
                                   const ValidBatch& query,
                                   const HyperParams& hp) {
  MetaGradient out;
  if (support == nullptr) {
    auto [ql, qg] = value_and_grad(f_valid, theta, query);
    out.query_loss = ql;
    out.grad = std::move(qg);
    return out;
  }
  out.support_loss_before = f_train.value(theta, *support);
  ParamVector pre = theta;
  if (hp.inner_steps > 1)
    pre = inner_adapt(f_train, theta, *support, hp.alpha, hp.inner_steps - 1);
  StepThroughResult res = grad_through_step_ex(f_train, f_valid, pre, *support,
                                               query, hp.alpha, hp.grad_mode);
  out.support_loss_after = f_train.value(res.adapted, *support);
  out.query_loss = res.query_loss;
  out.grad = std::move(res.grad);
  return out;
}

// Episode-level wrapper over the model objective; batches are built from the
// episode's dialogues without any persona conditioning.
MetaGradient meta_gradient(const NllLoss& loss, const ParamVector& theta,
                           const Episode& episode, const Vocabulary& vocab,
                           const HyperParams& hp);

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

// The meta-training loop: sample a persona batch, accumulate per-episode
// meta-gradients (an exact sum, in ascending persona-id order), clip, and
// apply an Adam step with linearly warmed-up beta. Fully deterministic given
// hp.seed; outer_steps = 0 returns the initialization.
std::pair<ParamVector, TrainLog> paml_train(const MetaDataset& meta,
                                            const ModelConfig& config,
                                            const HyperParams& hp);

// Standard pooled mini-batch training over all training dialogues, the
// non-meta baseline. Each step draws meta_batch_size dialogues from a
// per-epoch shuffle; with use_persona the owning persona's sentences are
// prepended to every context.
std::pair<ParamVector, TrainLog> joint_train(const MetaDataset& meta,
                                             const ModelConfig& config,
                                             const HyperParams& hp,
                                             bool use_persona);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// One JSON header line (format, config, training mode, step, parameter
// count) followed by the raw little-endian 64-bit float parameter block.
struct Checkpoint {
  ModelConfig config;
  std::string mode;  // "paml" | "joint" | "joint_persona" | "init"
  long step = 0;
  ParamVector theta;

  void ensure_matches(const ModelConfig& cfg) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace paml
