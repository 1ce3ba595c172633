#pragma once

// Model architectures: the label-hypothesis-conditioned classifier, the
// plain CNN baseline, and the LeNet-style substitute used as the black-box
// gradient source.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hynet/common.hpp"
#include "hynet/nn.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

// Common surface for training, attacks, and evaluation. score_rows returns
// one score per label per sample — raw logits for softmax models, pair scores
// T(x, y_j) for the conditional model — and prediction is the row argmax with
// ties broken toward the smallest label index.
class ScoringModel {
 public:
  virtual ~ScoringModel() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual Tensor score_rows(const Tensor& x) = 0;
  virtual std::vector<Parameter*> parameters() = 0;
  virtual void set_train(bool train_mode) = 0;
  virtual std::vector<std::pair<std::string, std::vector<double>*>> buffers() {
    return {};
  }

  void set_trainable(bool trainable) {
    for (Parameter* p : parameters()) p->value.set_requires_grad(trainable);
  }

  std::vector<std::size_t> predict(const Tensor& x) {
    Tensor s = score_rows(x);
    std::size_t n = s.size(0), m = s.size(1);
    std::vector<std::size_t> out(n);
    const auto& v = s.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j)
        if (v[i * m + j] > v[i * m + best]) best = j;
      out[i] = best;
    }
    return out;
  }

  // Sum of gradient-accumulation touches across all parameters — zero when no
  // backward pass has flowed into this model (black-box audit).
  std::uint64_t backward_touch_total() {
    std::uint64_t t = 0;
    for (Parameter* p : parameters()) t += p->value.node()->backward_touch;
    return t;
  }
};

// ---------------------------------------------------------------------------
// Shared convolutional trunk: two stride-2 4x4 conv blocks (32 then 64
// filters), each followed by batchnorm and ReLU; 28x28 -> 14x14 -> 7x7.
// ---------------------------------------------------------------------------

struct ConvTrunk {
  Conv conv1, conv2;
  BatchNorm2d bn1, bn2;

  ConvTrunk() = default;
  explicit ConvTrunk(Rng& rng)
      : conv1("conv1", 1, 32, 4, 2, 1, rng),
        conv2("conv2", 32, 64, 4, 2, 1, rng),
        bn1("bn1", 32),
        bn2("bn2", 64) {}

  // [B,1,28,28] -> flattened [B, 3136]
  Tensor operator()(const Tensor& x) {
    Tensor h1 = relu(bn1(conv1(x)));
    Tensor h2 = relu(bn2(conv2(h1)));
    std::size_t b = h2.size(0);
    std::size_t feat = h2.size(1) * h2.size(2) * h2.size(3);
    return reshape(h2, {b, feat});
  }

  std::size_t out_features() const { return 64 * 7 * 7; }

  std::vector<Parameter*> params() {
    return {&conv1.kernel, &conv1.bias, &bn1.gamma, &bn1.beta,
            &conv2.kernel, &conv2.bias, &bn2.gamma, &bn2.beta};
  }
  void set_train(bool t) {
    bn1.train_mode = t;
    bn2.train_mode = t;
  }
  std::vector<std::pair<std::string, std::vector<double>*>> buffers() {
    return {{"bn1.running_mean", &bn1.running_mean},
            {"bn1.running_var", &bn1.running_var},
            {"bn2.running_mean", &bn2.running_mean},
            {"bn2.running_var", &bn2.running_var}};
  }
};

// ---------------------------------------------------------------------------
// ConditionalClassifier: score every (sample, label-hypothesis) pair.
// ---------------------------------------------------------------------------

// Forward pieces exposed for the trainer: the scores grid, the regularized
// hidden activations, and the trunk output node (the boundary gradient
// routing stops at).
struct ConditionalForward {
  Tensor scores;  // [B, M]
  Tensor reps1;   // [B·M, 512] — first f_r layer output (post-ReLU)
  Tensor reps2;   // [B·M, 256] — second f_r layer output (post-ReLU), default
  Tensor trunk;   // [B, 3136]  — concat boundary / stop node
};

class ConditionalClassifier : public ScoringModel {
 public:
  ConditionalClassifier(std::size_t num_classes, Rng& rng)
      : m_(num_classes),
        trunk_(rng),
        fr1_("fr1", trunk_.out_features() + num_classes, 512, rng, "he"),
        fr2_("fr2", 512, 256, rng, "he"),
        fc1_("fc1", 256, 128, rng, "he"),
        fc2_("fc2", 128, 1, rng, "glorot") {}

  std::string kind() const override { return "conditional"; }
  std::size_t num_classes() const override { return m_; }

  // Scores for all M label hypotheses per sample. The first f_r layer acts on
  // rows [h_i ; onehot(y_j)]; by linearity of the layer this equals
  // (W_x·h_i + b) + column_j(W_y), which is how the pair grid is expanded —
  // one trunk pass per sample, pair rows materialized from the 512-wide
  // stage onward. score_all_literal below is the direct concat form used as
  // the re-execution oracle in tests.
  ConditionalForward forward(const Tensor& x) {
    std::size_t feat = trunk_.out_features();
    ConditionalForward f;
    f.trunk = trunk_(x);  // [B, 3136]
    Tensor wx = narrow(fr1_.weight.value, 1, 0, feat);
    Tensor wy = narrow(fr1_.weight.value, 1, feat, m_);
    Tensor per_sample = linear(f.trunk, wx, fr1_.bias.value);  // [B, 512]
    Tensor per_label = transpose2d(wy);                        // [M, 512]
    Tensor z1 = cross_add(per_sample, per_label);              // [B·M, 512]
    f.reps1 = relu(z1);
    f.reps2 = relu(fr2_(f.reps1));                             // [B·M, 256]
    Tensor h3 = relu(fc1_(f.reps2));                           // [B·M, 128]
    Tensor t = fc2_(h3);                                       // [B·M, 1]
    f.scores = reshape(t, {x.size(0), m_});
    return f;
  }

  Tensor score_rows(const Tensor& x) override { return forward(x).scores; }

  // Identical computation via explicit broadcast-repeat + one-hot concat +
  // full-width dense. Used by tests as the independent re-execution path.
  Tensor score_all_literal(const Tensor& x) {
    std::size_t b = x.size(0);
    Tensor h = trunk_(x);                        // [B, 3136]
    Tensor hrep = broadcast_repeat(h, m_);       // [B, M, 3136]
    Tensor hrows = reshape(hrep, {b * m_, trunk_.out_features()});
    std::vector<double> oh(b * m_ * m_, 0.0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < m_; ++j) oh[(i * m_ + j) * m_ + j] = 1.0;
    Tensor onehot = Tensor::from({b * m_, m_}, std::move(oh));
    Tensor pairs = concat({hrows, onehot}, 1);   // [B·M, 3136+M]
    Tensor h1 = relu(fr1_(pairs));
    Tensor h2 = relu(fr2_(h1));
    Tensor h3 = relu(fc1_(h2));
    return reshape(fc2_(h3), {b, m_});
  }

  // Per-(sample, hypothesis) activations of a regularized-stage layer.
  Tensor hidden_reps(const Tensor& x, const std::string& which = "fr2") {
    ConditionalForward f = forward(x);
    std::size_t b = x.size(0);
    if (which == "fr1") return reshape(f.reps1, {b, m_, std::size_t{512}});
    if (which == "fr2") return reshape(f.reps2, {b, m_, std::size_t{256}});
    throw ConfigurationError(msg("hidden_reps: unknown layer id '", which,
                                 "' (known: fr1, fr2)"));
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> ps = trunk_.params();
    for (Parameter* p : fr1_.params()) ps.push_back(p);
    for (Parameter* p : fr2_.params()) ps.push_back(p);
    for (Parameter* p : fc1_.params()) ps.push_back(p);
    for (Parameter* p : fc2_.params()) ps.push_back(p);
    return ps;
  }

  // The regularized stage θ_r: the two dense layers of f_r.
  std::vector<Parameter*> regularized_parameters() {
    return {&fr1_.weight, &fr1_.bias, &fr2_.weight, &fr2_.bias};
  }
  // Parameters outside θ_r (must receive exactly zero regularizer gradient).
  std::vector<Parameter*> unregularized_parameters() {
    std::vector<Parameter*> ps = trunk_.params();
    for (Parameter* p : fc1_.params()) ps.push_back(p);
    for (Parameter* p : fc2_.params()) ps.push_back(p);
    return ps;
  }

  void set_train(bool t) override { trunk_.set_train(t); }
  std::vector<std::pair<std::string, std::vector<double>*>> buffers()
      override {
    return trunk_.buffers();
  }

  Dense& fr1() { return fr1_; }

 private:
  std::size_t m_;
  ConvTrunk trunk_;
  Dense fr1_, fr2_;  // f_r: the regularized stage
  Dense fc1_, fc2_;  // f_c: the head
};

// ---------------------------------------------------------------------------
// BaselineClassifier: same trunk and dense widths, softmax head of width M.
// ---------------------------------------------------------------------------

class BaselineClassifier : public ScoringModel {
 public:
  BaselineClassifier(std::size_t num_classes, Rng& rng)
      : m_(num_classes),
        trunk_(rng),
        fc1_("fc1", trunk_.out_features(), 512, rng, "he"),
        fc2_("fc2", 512, 256, rng, "he"),
        fc3_("fc3", 256, 128, rng, "he"),
        head_("head", 128, num_classes, rng, "glorot") {}

  std::string kind() const override { return "baseline"; }
  std::size_t num_classes() const override { return m_; }

  Tensor logits(const Tensor& x) {
    Tensor h = trunk_(x);
    h = relu(fc1_(h));
    h = relu(fc2_(h));
    h = relu(fc3_(h));
    return head_(h);  // [B, M]
  }
  Tensor probs(const Tensor& x) { return softmax_rows(logits(x)); }
  Tensor score_rows(const Tensor& x) override { return logits(x); }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> ps = trunk_.params();
    for (Dense* d : {&fc1_, &fc2_, &fc3_, &head_})
      for (Parameter* p : d->params()) ps.push_back(p);
    return ps;
  }
  void set_train(bool t) override { trunk_.set_train(t); }
  std::vector<std::pair<std::string, std::vector<double>*>> buffers()
      override {
    return trunk_.buffers();
  }

 private:
  std::size_t m_;
  ConvTrunk trunk_;
  Dense fc1_, fc2_, fc3_, head_;
};

// ---------------------------------------------------------------------------
// LeNet-style substitute: conv 5x5 ×6 → pool → conv 5x5 ×16 → pool →
// dense 120/84/M. Independent architecture; the black-box gradient source.
// ---------------------------------------------------------------------------

class LeNetSubstitute : public ScoringModel {
 public:
  LeNetSubstitute(std::size_t num_classes, Rng& rng)
      : m_(num_classes),
        conv1_("sub_conv1", 1, 6, 5, 1, 0, rng),
        conv2_("sub_conv2", 6, 16, 5, 1, 0, rng),
        fc1_("sub_fc1", 16 * 4 * 4, 120, rng, "he"),
        fc2_("sub_fc2", 120, 84, rng, "he"),
        head_("sub_head", 84, num_classes, rng, "glorot") {}

  std::string kind() const override { return "substitute"; }
  std::size_t num_classes() const override { return m_; }

  Tensor logits(const Tensor& x) {
    Tensor h = maxpool2d(relu(conv1_(x)), 2);   // 28→24→12
    h = maxpool2d(relu(conv2_(h)), 2);          // 12→8→4
    std::size_t b = h.size(0);
    h = reshape(h, {b, std::size_t{16 * 4 * 4}});
    h = relu(fc1_(h));
    h = relu(fc2_(h));
    return head_(h);
  }
  Tensor score_rows(const Tensor& x) override { return logits(x); }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> ps;
    for (Conv* c : {&conv1_, &conv2_})
      for (Parameter* p : c->params()) ps.push_back(p);
    for (Dense* d : {&fc1_, &fc2_, &head_})
      for (Parameter* p : d->params()) ps.push_back(p);
    return ps;
  }
  void set_train(bool) override {}  // no batchnorm anywhere

 private:
  std::size_t m_;
  Conv conv1_, conv2_;
  Dense fc1_, fc2_, head_;
};

}  // namespace hynet
