#include "paml/metatrain.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "paml/rng.hpp"

namespace paml {

using nlohmann::json;

// ---------------------------------------------------------------------------
// HyperParams
// ---------------------------------------------------------------------------

void HyperParams::validate() const {
  if (!(alpha > 0.0)) throw InvalidHyperparameter("alpha must be > 0");
  if (!(beta > 0.0)) throw InvalidHyperparameter("beta must be > 0");
  if (inner_steps < 1) throw InvalidHyperparameter("inner_steps must be >= 1");
  if (meta_batch_size < 1)
    throw InvalidHyperparameter("meta_batch_size must be >= 1");
  if (outer_steps < 0) throw InvalidHyperparameter("outer_steps must be >= 0");
  if (warmup_steps < 0) throw InvalidHyperparameter("warmup_steps must be >= 0");
  if (clip_norm && !(*clip_norm > 0.0))
    throw InvalidHyperparameter("clip_norm must be > 0 when set");
  if (!(support_fraction > 0.0 && support_fraction < 1.0))
    throw InvalidHyperparameter("support_fraction must be in (0, 1)");
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

std::pair<ParamVector, AdamState> adam_step(const ParamVector& theta,
                                            const ParamVector& grad,
                                            const AdamState& state, double lr) {
  if (grad.size() != theta.size() || state.m.size() != theta.size() ||
      state.v.size() != theta.size())
    throw ShapeError("adam_step: shape mismatch");
  AdamState next = state;
  next.step = state.step + 1;
  ParamVector out = theta;
  const double b1 = AdamState::kBeta1, b2 = AdamState::kBeta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(next.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(next.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    next.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
    next.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = next.m[i] / bc1;
    const double vhat = next.v[i] / bc2;
    out[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::kEps);
  }
  return {std::move(out), std::move(next)};
}

// ---------------------------------------------------------------------------
// TrainLog
// ---------------------------------------------------------------------------

void TrainLog::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open train log for write: " + path);
  out << "step,meta_loss,pre_adapt_loss,post_adapt_loss,grad_norm,seconds\n";
  char line[256];
  for (const TrainRecord& r : records) {
    std::snprintf(line, sizeof(line), "%ld,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.step,
                  r.meta_loss, r.pre_adapt_loss, r.post_adapt_loss, r.grad_norm,
                  r.seconds);
    out << line;
  }
}

// ---------------------------------------------------------------------------
// meta-gradient over an episode
// ---------------------------------------------------------------------------

MetaGradient meta_gradient(const NllLoss& loss, const ParamVector& theta,
                           const Episode& episode, const Vocabulary& vocab,
                           const HyperParams& hp) {
  hp.validate();
  const int window = loss.config().max_context;
  const std::string tag = "persona=" + std::to_string(episode.persona_id);
  const DialogueBatch query = to_training_batch(
      episode.query, vocab, window, nullptr, "query[" + tag + "]");
  if (episode.support.empty())
    return meta_gradient_batches<DialogueBatch, DialogueBatch>(
        loss, loss, theta, nullptr, query, hp);
  const DialogueBatch support = to_training_batch(
      episode.support, vocab, window, nullptr, "support[" + tag + "]");
  return meta_gradient_batches(loss, loss, theta, &support, query, hp);
}

// ---------------------------------------------------------------------------
// training drivers
// ---------------------------------------------------------------------------

namespace {

double warmup_factor(int step, int warmup_steps) {
  if (warmup_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step + 1) /
                           static_cast<double>(warmup_steps));
}

void clip_gradient(ParamVector& g, const std::optional<double>& clip) {
  if (!clip) return;
  const double norm = global_norm(g);
  if (norm > *clip && norm > 0.0) {
    const double s = *clip / norm;
    for (double& x : g) x *= s;
  }
}

double elapsed_seconds(std::chrono::steady_clock::time_point from) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - from)
      .count();
}

}  // namespace

std::pair<ParamVector, TrainLog> paml_train(const MetaDataset& meta,
                                            const ModelConfig& config,
                                            const HyperParams& hp) {
  hp.validate();
  config.validate();
  if (meta.train.empty())
    throw EmptyDataset("paml_train: the training split is empty");

  ParamVector theta = init_params(config, substream_seed(hp.seed, "init"));
  TrainLog log;
  if (hp.outer_steps == 0) return {std::move(theta), std::move(log)};

  Rng sample_rng(substream_seed(hp.seed, "meta-sample"));
  Rng dropout_rng(substream_seed(hp.seed, "dropout"));
  const NllLoss train_loss(config);  // inner loop runs without dropout
  AdamState state = AdamState::zeros(theta.size());
  const int batch_size =
      std::min(hp.meta_batch_size, static_cast<int>(meta.train.size()));

  for (int step = 0; step < hp.outer_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Episode> episodes =
        sample_meta_batch(meta.train, batch_size, hp.support_fraction, sample_rng);
    if (episodes.empty())
      throw EmptyDataset("paml_train: no usable episodes at step " +
                         std::to_string(step));

    // Eq-style outer gradient: the exact SUM over episodes, accumulated in
    // ascending persona-id order (sample_meta_batch returns them sorted).
    ParamVector g_sum(theta.size(), 0.0);
    double query_sum = 0.0, pre_sum = 0.0, post_sum = 0.0;
    for (const Episode& ep : episodes) {
      MetaGradient mg;
      if (config.dropout > 0.0) {
        const NllLoss query_loss(config, config.dropout, dropout_rng.next_u64());
        const DialogueBatch support = to_training_batch(
            ep.support, meta.vocab, config.max_context, nullptr,
            "support[persona=" + std::to_string(ep.persona_id) + "]");
        const DialogueBatch query = to_training_batch(
            ep.query, meta.vocab, config.max_context, nullptr,
            "query[persona=" + std::to_string(ep.persona_id) + "]");
        mg = ep.support.empty()
                 ? meta_gradient_batches<DialogueBatch, DialogueBatch>(
                       train_loss, query_loss, theta, nullptr, query, hp)
                 : meta_gradient_batches(train_loss, query_loss, theta,
                                         &support, query, hp);
      } else {
        mg = meta_gradient(train_loss, theta, ep, meta.vocab, hp);
      }
      axpy(1.0, mg.grad, g_sum);
      query_sum += mg.query_loss;
      pre_sum += mg.support_loss_before;
      post_sum += mg.support_loss_after;
    }
    const double n = static_cast<double>(episodes.size());
    const double raw_norm = global_norm(g_sum);
    clip_gradient(g_sum, hp.clip_norm);
    const double lr = hp.beta * warmup_factor(step, hp.warmup_steps);
    auto [next_theta, next_state] = adam_step(theta, g_sum, state, lr);
    theta = std::move(next_theta);
    state = std::move(next_state);
    if (!all_finite(theta))
      throw NonFiniteLoss("parameters non-finite after outer step " +
                          std::to_string(step));
    log.records.push_back({step, query_sum / n, pre_sum / n, post_sum / n,
                           raw_norm, elapsed_seconds(t0)});
  }
  return {std::move(theta), std::move(log)};
}

std::pair<ParamVector, TrainLog> joint_train(const MetaDataset& meta,
                                             const ModelConfig& config,
                                             const HyperParams& hp,
                                             bool use_persona) {
  hp.validate();
  config.validate();
  if (meta.train.empty())
    throw EmptyDataset("joint_train: the training split is empty");

  ParamVector theta = init_params(config, substream_seed(hp.seed, "init"));
  TrainLog log;
  if (hp.outer_steps == 0) return {std::move(theta), std::move(log)};

  // pooled dialogues across personas
  struct Ref {
    std::size_t task;
    std::size_t dialogue;
  };
  std::vector<Ref> pool;
  for (std::size_t ti = 0; ti < meta.train.size(); ++ti)
    for (std::size_t di = 0; di < meta.train[ti].dialogues.size(); ++di)
      pool.push_back({ti, di});
  if (pool.empty()) throw EmptyDataset("joint_train: no dialogues to train on");

  Rng shuffle_rng(substream_seed(hp.seed, "joint-shuffle"));
  Rng dropout_rng(substream_seed(hp.seed, "dropout"));
  AdamState state = AdamState::zeros(theta.size());
  std::vector<Ref> order;
  std::size_t cursor = 0;

  for (int step = 0; step < hp.outer_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cursor >= order.size()) {  // next epoch
      order = pool;
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    // batches never span an epoch, so an epoch is ceil(pool/batch) batches
    const std::size_t take = std::min(static_cast<std::size_t>(hp.meta_batch_size),
                                      order.size() - cursor);
    DialogueBatch batch;
    batch.name = "joint batch, step " + std::to_string(step);
    for (std::size_t i = 0; i < take; ++i) {
      const Ref ref = order[cursor++];
      const PersonaTask& task = meta.train[ref.task];
      const DialogueBatch rows = to_training_batch(
          {task.dialogues[ref.dialogue]}, meta.vocab, config.max_context,
          use_persona ? &task.fact_sentences : nullptr, batch.name);
      for (int r = 0; r < rows.rows(); ++r)
        batch.push(rows.context[static_cast<std::size_t>(r)],
                   rows.target[static_cast<std::size_t>(r)]);
    }
    const NllLoss loss = config.dropout > 0.0
                             ? NllLoss(config, config.dropout,
                                       dropout_rng.next_u64())
                             : NllLoss(config);
    auto [batch_loss, grad] = value_and_grad(loss, theta, batch);
    const double raw_norm = global_norm(grad);
    clip_gradient(grad, hp.clip_norm);
    const double lr = hp.beta * warmup_factor(step, hp.warmup_steps);
    auto [next_theta, next_state] = adam_step(theta, grad, state, lr);
    theta = std::move(next_theta);
    state = std::move(next_state);
    if (!all_finite(theta))
      throw NonFiniteLoss("parameters non-finite after step " +
                          std::to_string(step));
    log.records.push_back({step, batch_loss, batch_loss, batch_loss, raw_norm,
                           elapsed_seconds(t0)});
  }
  return {std::move(theta), std::move(log)};
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& cfg) {
  return json{{"vocab_size", cfg.vocab_size}, {"embed_dim", cfg.embed_dim},
              {"model_dim", cfg.model_dim},   {"layers", cfg.layers},
              {"heads", cfg.heads},           {"ffn_dim", cfg.ffn_dim},
              {"max_context", cfg.max_context}, {"dropout", cfg.dropout}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.max_context = j.at("max_context").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  return cfg;
}

constexpr const char* kCheckpointFormat = "paml-checkpoint-v1";

std::uint64_t to_le_bits(double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  if constexpr (std::endian::native == std::endian::big) {
    bits = __builtin_bswap64(bits);
  }
  return bits;
}

double from_le_bits(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    bits = __builtin_bswap64(bits);
  }
  double x;
  std::memcpy(&x, &bits, sizeof(x));
  return x;
}

}  // namespace

void Checkpoint::ensure_matches(const ModelConfig& cfg) const {
  if (!(config == cfg))
    throw CheckpointError(
        "checkpoint configuration does not match the experiment configuration");
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open checkpoint for write: " + path);
  json header;
  header["format"] = kCheckpointFormat;
  header["config"] = config_to_json(ckpt.config);
  header["mode"] = ckpt.mode;
  header["step"] = ckpt.step;
  header["params"] = ckpt.theta.size();
  out << header.dump() << '\n';
  for (double x : ckpt.theta) {
    const std::uint64_t bits = to_le_bits(x);
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw CheckpointError("short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw CheckpointError("checkpoint has no header: " + path);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw CheckpointError("bad checkpoint header: " + std::string(e.what()));
  }
  Checkpoint ckpt;
  try {
    if (header.at("format").get<std::string>() != kCheckpointFormat)
      throw CheckpointError("unknown checkpoint format");
    ckpt.config = config_from_json(header.at("config"));
    ckpt.mode = header.at("mode").get<std::string>();
    ckpt.step = header.at("step").get<long>();
    const auto n = header.at("params").get<std::size_t>();
    ckpt.theta.resize(n);
  } catch (const json::exception& e) {
    throw CheckpointError("bad checkpoint header: " + std::string(e.what()));
  }
  if (ckpt.theta.size() != param_count(ckpt.config))
    throw CheckpointError(
        "checkpoint parameter count does not match its configuration");
  for (double& x : ckpt.theta) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
    if (!in) throw CheckpointError("checkpoint parameter block truncated");
    x = from_le_bits(bits);
  }
  return ckpt;
}

}  // namespace paml
