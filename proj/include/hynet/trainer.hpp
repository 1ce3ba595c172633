#pragma once

// End-to-end training: minibatch loop, dual-loss backpropagation with
// gradient routing (objective loss into all parameters, regularizer loss into
// the regularized stage only), a single combined Adam step per batch, and
// CSV train logs.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "hynet/common.hpp"
#include "hynet/dataset.hpp"
#include "hynet/mmd.hpp"
#include "hynet/model.hpp"
#include "hynet/nn.hpp"
#include "hynet/objectives.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

enum class ObjectiveKind { JS, DV, EB, CE };

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "js") return ObjectiveKind::JS;
  if (s == "dv") return ObjectiveKind::DV;
  if (s == "eb") return ObjectiveKind::EB;
  if (s == "ce") return ObjectiveKind::CE;
  throw ConfigurationError(msg("unknown objective '", s,
                               "' (known: js, dv, eb, ce)"));
}
inline std::string objective_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::JS: return "js";
    case ObjectiveKind::DV: return "dv";
    case ObjectiveKind::EB: return "eb";
    case ObjectiveKind::CE: return "ce";
  }
  return "?";
}

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::JS;
  double beta = 0.0;    // regularizer coefficient; 0 disables the second pass
  double lr = 0.001;
  std::size_t epochs = 20;
  std::size_t batch_size = 250;
  double sigma2 = 1.0;
  std::uint64_t seed = 1;
  std::vector<std::string> regularized_layers{"fr2"};
};

struct EpochStats {
  std::size_t epoch;
  double loss_o;
  double loss_r;
  double train_acc;
  std::size_t skipped_terms;
  double seconds;
};

struct TrainLog {
  std::vector<EpochStats> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError(msg("cannot write train log ", path));
    os << "epoch,loss_o,loss_r,train_acc,skipped_terms,seconds\n";
    char buf[160];
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.6f,%zu,%.3f\n", e.epoch,
                    e.loss_o, e.loss_r, e.train_acc, e.skipped_terms,
                    e.seconds);
      os << buf;
    }
  }
};

namespace detail {

inline Tensor objective_loss(ObjectiveKind kind, const PairScores& scores) {
  switch (kind) {
    case ObjectiveKind::JS: return js_objective(scores);
    case ObjectiveKind::DV: return dv_objective(scores);
    // CE over softmax of the score rows is algebraically the energy-based
    // loss; training both through the stable log-partition form.
    case ObjectiveKind::EB:
    case ObjectiveKind::CE: return eb_objective(scores);
  }
  throw ConfigurationError("objective_loss: bad kind");
}

inline std::size_t count_correct(const Tensor& scores,
                                 const std::vector<std::size_t>& labels) {
  std::size_t n = scores.size(0), m = scores.size(1), correct = 0;
  const auto& v = scores.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (v[i * m + j] > v[i * m + best]) best = j;
    if (best == labels[i]) ++correct;
  }
  return correct;
}

inline void abort_with_score_stats(const char* stage, const Tensor& scores) {
  double lo = scores.data()[0], hi = lo, sum = 0.0;
  for (double v : scores.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  throw TrainingError(msg(stage, ": non-finite loss; score stats min=", lo,
                          " max=", hi,
                          " mean=", sum / double(scores.numel())));
}

}  // namespace detail

struct StepResult {
  double loss_o = 0.0;
  double loss_r = 0.0;
  std::size_t skipped_terms = 0;
  std::size_t correct = 0;
};

// One optimization step of the conditional model: shared forward, objective
// backward through everything, regularizer backward stopped at the trunk
// boundary (so only the regularized-stage parameters see it), one Adam step
// on the accumulated gradients.
inline StepResult train_step(ConditionalClassifier& model, const Batch& batch,
                             const TrainConfig& cfg) {
  auto params = model.parameters();
  zero_grads(params);

  TapeScope scope;
  ConditionalForward fwd = model.forward(batch.x);
  PairScores scores = PairScores::from_grid(fwd.scores, batch.labels);
  Tensor loss_o = detail::objective_loss(cfg.objective, scores);
  if (!std::isfinite(loss_o.item()))
    detail::abort_with_score_stats("train_step", fwd.scores);

  StepResult r;
  r.loss_o = loss_o.item();
  r.correct = detail::count_correct(fwd.scores, batch.labels);

  Tensor loss_r;
  if (cfg.beta > 0.0) {
    Tensor total;
    for (const std::string& layer : cfg.regularized_layers) {
      const Tensor& reps = (layer == "fr1") ? fwd.reps1
                         : (layer == "fr2") ? fwd.reps2
                         : throw ConfigurationError(
                               msg("unknown regularized layer '", layer, "'"));
      RegularizerResult reg = regularization_loss(
          reps, batch.labels, model.num_classes(), cfg.beta, cfg.sigma2);
      r.skipped_terms += reg.skipped_terms;
      total = total.defined() ? add(total, reg.loss) : reg.loss;
    }
    loss_r = total;
    r.loss_r = loss_r.item();
    if (!std::isfinite(r.loss_r))
      detail::abort_with_score_stats("train_step[regularizer]", fwd.scores);
  }

  scope.tape.backward(loss_o);
  if (cfg.beta > 0.0) {
    scope.tape.reset();
    scope.tape.backward(loss_r, {fwd.trunk});
  }
  adam_step(params, cfg.lr);
  return r;
}

// One optimization step of a softmax-head model (baseline or substitute):
// plain cross-entropy in its stable log-partition form.
inline StepResult train_step(ScoringModel& model, const Batch& batch,
                             const TrainConfig& cfg) {
  auto params = model.parameters();
  zero_grads(params);

  TapeScope scope;
  Tensor logits = model.score_rows(batch.x);
  PairScores scores = PairScores::from_grid(logits, batch.labels);
  Tensor loss = eb_objective(scores);
  if (!std::isfinite(loss.item()))
    detail::abort_with_score_stats("train_step", logits);

  StepResult r;
  r.loss_o = loss.item();
  r.correct = detail::count_correct(logits, batch.labels);

  scope.tape.backward(loss);
  adam_step(params, cfg.lr);
  return r;
}

// Full training run: seeded shuffles, fixed batch size with remainder drop,
// per-epoch stats. Progress lines go to `progress` when non-null.
template <class ModelT>
TrainLog train(ModelT& model, const Dataset& data, const TrainConfig& cfg,
               std::ostream* progress = nullptr) {
  if (cfg.batch_size < model.num_classes() && progress)
    *progress << "warning: batch size " << cfg.batch_size
              << " below class count " << model.num_classes()
              << "; regularizer class groups will be sparse\n";
  TrainLog log;
  model.set_train(true);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    BatchPlan plan = epoch_batches(data, cfg.batch_size, cfg.seed, epoch);
    double sum_o = 0.0, sum_r = 0.0;
    std::size_t correct = 0, skipped = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      StepResult r = train_step(model, plan.get(b), cfg);
      sum_o += r.loss_o;
      sum_r += r.loss_r;
      correct += r.correct;
      skipped += r.skipped_terms;
    }
    double secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    EpochStats es{epoch,
                  sum_o / double(plan.size()),
                  sum_r / double(plan.size()),
                  double(correct) / double(plan.size() * cfg.batch_size),
                  skipped,
                  secs};
    log.epochs.push_back(es);
    if (progress) {
      *progress << "epoch " << epoch << " loss_o " << es.loss_o << " loss_r "
                << es.loss_r << " acc " << es.train_acc << " (" << es.seconds
                << "s)\n";
      progress->flush();
    }
  }
  model.set_train(false);
  return log;
}

// Evaluation accuracy over a dataset in eval mode, shard by shard.
inline double accuracy(ScoringModel& model, const Dataset& data,
                       std::size_t shard = 250) {
  model.set_train(false);
  std::size_t correct = 0, n = data.size();
  std::size_t hw = data.images.size(2) * data.images.size(3);
  for (std::size_t start = 0; start < n; start += shard) {
    std::size_t len = std::min(shard, n - start);
    Tensor x = Tensor::from(
        {len, 1, data.images.size(2), data.images.size(3)},
        std::vector<double>(data.images.data().begin() + start * hw,
                            data.images.data().begin() + (start + len) * hw));
    auto pred = model.predict(x);
    for (std::size_t i = 0; i < len; ++i)
      if (pred[i] == data.labels[start + i]) ++correct;
  }
  return double(correct) / double(n);
}

}  // namespace hynet
