#pragma once

// Objectives, AdamW and the training driver.
//
//   clm            logits at i predict token i+1
//   multi_token m  pass k feeds the previous pass's last hidden state back
//                  through the blocks; its logits at i predict token i+k;
//                  the m per-pass mean losses are summed
//   many_token p   positions >= p get the learned placeholder input and
//                  predict their own token in one pass
//   bidirectional  logits at i predict token i (which the model never sees)
//   autoencoder    reconstruct every token from the bottleneck
//
// Pad targets are always ignored.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mixlab/checkpoint.hpp"
#include "mixlab/model.hpp"
#include "mixlab/random.hpp"

namespace mixlab {

enum class Objective { clm, multi_token, many_token, bidirectional, autoencoder };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::clm: return "clm";
    case Objective::multi_token: return "multi_token";
    case Objective::many_token: return "many_token";
    case Objective::bidirectional: return "bidirectional";
    case Objective::autoencoder: return "autoencoder";
  }
  return "?";
}

struct TrainConfig {
  Objective objective = Objective::clm;
  std::size_t multi_token_m = 1;
  std::size_t prefix_len = 1;
  std::size_t batch_size = 8;
  std::size_t steps = 100;
  // Micro-batches whose gradients are summed (and averaged) per update.
  std::size_t accumulate = 1;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  bool clip_grad = true;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  // 0 evaluates only after the final step.
  std::size_t eval_every = 0;
  // Caps the eval sequences scored at each evaluation; 0 scores all.
  std::size_t eval_limit = 0;
  // When set, checkpoints are written here at each evaluation.
  std::string out_dir;

  void validate(const ModelConfig& mc) const {
    if (steps < 1) throw ConfigError("steps must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (accumulate < 1) throw ConfigError("accumulate must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (objective == Objective::multi_token && (multi_token_m < 1 || multi_token_m > 4))
      throw ConfigError("multi-token m must lie in [1, 4]");
    if (objective == Objective::multi_token && multi_token_m >= mc.n_ctx) throw ConfigError("multi-token m must be below n_ctx");
    if (objective == Objective::many_token && (prefix_len < 1 || prefix_len >= mc.n_ctx))
      throw ConfigError("prefix_len must lie in [1, n_ctx)");
    const bool causal = mc.family == Family::masked_mixer || mc.family == Family::transformer;
    const bool ok = (objective == Objective::clm || objective == Objective::multi_token || objective == Objective::many_token)
                        ? causal
                        : objective == Objective::bidirectional ? is_bidirectional(mc.family) : is_autoencoder(mc.family);
    if (!ok) throw ConfigError("objective " + to_string(objective) + " does not apply to family " + to_string(mc.family));
  }
};

// ---------------------------------------------------------------------------
// Targets and losses

// Row-stacked targets where row i of sequence b is ids[b][i + shift], or
// pad when out of range. Positions before `from` are ignored.
inline std::vector<int> shifted_targets(const Batch& batch, std::size_t shift, int pad_id, std::size_t from = 0) {
  std::vector<int> t(batch.ids.size(), pad_id);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t i = from; i + shift < batch.n_ctx; ++i) t[b * batch.n_ctx + i] = batch.ids[b * batch.n_ctx + i + shift];
  return t;
}

template <class T>
Tensor<T> multi_token_loss(const Model<T>& m, const Batch& batch, std::size_t passes) {
  const ModelConfig& c = m.config;
  const auto pad = batch.pad_mask(c.pad_id);
  Tensor<T> x = embedding(batch.ids, m["wte"]);
  Tensor<T> total;
  for (std::size_t k = 1; k <= passes; ++k) {
    x = run_stack(m, "blocks", x, MaskDirection::forward, pad).back();
    const auto targets = shifted_targets(batch, k, c.pad_id);
    Tensor<T> loss = cross_entropy(matmul(x, m["lm_head"]), targets, c.pad_id);
    total = total.defined() ? add(total, loss) : loss;
  }
  return total;
}

template <class T>
Tensor<T> objective_loss(const Model<T>& m, const Batch& batch, const TrainConfig& cfg) {
  const int pad = m.config.pad_id;
  switch (cfg.objective) {
    case Objective::clm: return cross_entropy(forward(m, batch).logits, shifted_targets(batch, 1, pad), pad);
    case Objective::multi_token: return multi_token_loss(m, batch, cfg.multi_token_m);
    case Objective::many_token:
      return cross_entropy(many_token_forward(m, batch, cfg.prefix_len).logits, shifted_targets(batch, 0, pad, cfg.prefix_len), pad);
    case Objective::bidirectional:
    case Objective::autoencoder: return cross_entropy(forward(m, batch).logits, shifted_targets(batch, 0, pad), pad);
  }
  throw ConfigError("unknown objective");
}

// ---------------------------------------------------------------------------
// Optimizer

// Decoupled weight decay: p <- p - lr * wd * p, then the bias-corrected
// Adam step. Parameters without a gradient are left untouched.
template <class T>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParamTable<T>& params, double lr) {
    ++t_;
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p.numel(), T(0));
        v_.emplace_back(p.numel(), T(0));
      }
    }
    const T b1 = T(beta1_), b2 = T(beta2_);
    const T c1 = T(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const T c2 = T(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    const T decay = T(1.0 - lr * wd_);
    std::size_t idx = 0;
    for (auto& [name, p] : params) {
      auto& m = m_[idx];
      auto& v = v_[idx];
      ++idx;
      if (!p.requires_grad() || !p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        w[i] = w[i] * decay - T(lr) * mhat / (std::sqrt(vhat) + T(eps_));
      }
    }
  }

  std::size_t steps_taken() const { return t_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Linear decay to zero: eta * (1 - step / steps), step counted from 0.
inline double linear_lr(double eta, std::size_t step, std::size_t steps) {
  return eta * (1.0 - static_cast<double>(step) / static_cast<double>(steps));
}

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamTable<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  const double coef = max_norm / (norm + 1e-6);
  if (coef < 1.0) {
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      T* g = p.node()->grad.data();
      for (std::size_t i = 0; i < p.numel(); ++i) g[i] *= static_cast<T>(coef);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Driver

struct MetricRow {
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t tokens_seen = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double lr = 0.0;
  std::size_t tokens_seen = 0;
};

struct TrainReport {
  std::vector<TrainRecord> records;  // one per evaluation
  std::vector<MetricRow> metrics;    // every train step plus every evaluation
  std::string checkpoint;            // final checkpoint path, empty without out_dir

  double first_train_loss() const {
    for (const auto& r : metrics)
      if (r.split == "train") return r.loss;
    return std::nan("");
  }
  double final_eval_loss() const { return records.empty() ? std::nan("") : records.back().eval_loss; }
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,split,loss,lr,tokens_seen\n";
  for (const auto& r : rows) os << r.step << ',' << r.split << ',' << r.loss << ',' << r.lr << ',' << r.tokens_seen << '\n';
  return os.str();
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << metrics_csv(rows);
}

// Deterministic batch stream: the index order is shuffled by seed once per
// pass over the data and consumed sequentially without replacement.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    if (n == 0) throw InputError("training split is empty");
    reshuffle();
  }
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline std::vector<TokenSequence> select(const std::vector<TokenSequence>& seqs, const std::vector<std::size_t>& idx) {
  std::vector<TokenSequence> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(seqs[i]);
  return out;
}

// Mean objective over eval sequences, batched like training.
template <class T>
double evaluate(const Model<T>& m, const std::vector<TokenSequence>& eval, const TrainConfig& cfg) {
  NoGradGuard no_grad;
  const std::size_t n = cfg.eval_limit ? std::min(cfg.eval_limit, eval.size()) : eval.size();
  if (n == 0) throw InputError("evaluation split is empty");
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    std::vector<TokenSequence> part(eval.begin() + static_cast<std::ptrdiff_t>(start),
                                    eval.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + cfg.batch_size)));
    try {
      total += static_cast<double>(objective_loss(m, make_batch(part, m.config), cfg).item());
      ++batches;
    } catch (const EmptyLossError&) {
    }
  }
  if (batches == 0) throw EmptyLossError();
  return total / static_cast<double>(batches);
}

namespace detail {

template <class T>
std::vector<std::vector<T>> snapshot(const Model<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& [name, p] : m.params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

template <class T>
void restore(Model<T>& m, const std::vector<std::vector<T>>& snap) {
  std::size_t i = 0;
  for (auto& [name, p] : m.params) {
    auto w = p.mutable_data();
    std::copy(snap[i].begin(), snap[i].end(), w.begin());
    ++i;
  }
}

inline std::size_t content_tokens(const Batch& b, int pad_id) {
  std::size_t n = 0;
  for (int t : b.ids) n += t != pad_id;
  return n;
}

}  // namespace detail

// Trains in place. A non-finite loss or gradient restores the parameters of
// the last evaluation, saves them (with out_dir) and throws NumericError.
template <class T>
TrainReport train(Model<T>& model, const CorpusSplit& corpus, const TrainConfig& cfg) {
  cfg.validate(model.config);
  if (corpus.eval.empty()) throw InputError("evaluation split is empty");
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  model.set_trainable(true);
  AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  BatchStream stream(corpus.train.size(), cfg.seed);
  TrainReport report;
  auto last_good = detail::snapshot(model);
  std::size_t tokens = 0;

  auto fail = [&](std::size_t step, const std::string& what) {
    detail::restore(model, last_good);
    std::string msg = what + " at step " + std::to_string(step);
    if (!cfg.out_dir.empty()) {
      const std::string path = cfg.out_dir + "/last_good.ckpt";
      save_checkpoint(model, path);
      msg += "; last good parameters saved to " + path;
    }
    throw NumericError(msg);
  };

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const double lr = linear_lr(cfg.lr, step - 1, cfg.steps);
    model.zero_grad();
    double step_loss = 0.0;
    for (std::size_t micro = 0; micro < cfg.accumulate; ++micro) {
      const Batch batch = make_batch(select(corpus.train, stream.next(cfg.batch_size)), model.config);
      tokens += detail::content_tokens(batch, model.config.pad_id);
      Tensor<T> loss = objective_loss(model, batch, cfg);
      if (!std::isfinite(static_cast<double>(loss.item()))) fail(step, "non-finite loss");
      step_loss += static_cast<double>(loss.item()) / static_cast<double>(cfg.accumulate);
      if (cfg.accumulate > 1) loss = scale(loss, T(1) / T(cfg.accumulate));
      backward(loss);
    }
    for (const auto& [name, p] : model.params)
      if (p.has_grad())
        for (T g : p.grad())
          if (!std::isfinite(static_cast<double>(g))) fail(step, "non-finite gradient in " + name);
    if (cfg.clip_grad) clip_grad_norm(model.params, cfg.clip_norm);
    opt.step(model.params, lr);
    report.metrics.push_back({step, "train", step_loss, lr, tokens});

    const bool eval_now = step == cfg.steps || (cfg.eval_every && step % cfg.eval_every == 0);
    if (!eval_now) continue;
    const double eval_loss = evaluate(model, corpus.eval, cfg);
    if (!std::isfinite(eval_loss)) fail(step, "non-finite eval loss");
    last_good = detail::snapshot(model);
    report.metrics.push_back({step, "eval", eval_loss, lr, tokens});
    report.records.push_back({step, step_loss, eval_loss, lr, tokens});
    if (!cfg.out_dir.empty()) {
      const std::string path = cfg.out_dir + (step == cfg.steps ? std::string("/final.ckpt") : "/step_" + std::to_string(step) + ".ckpt");
      save_checkpoint(model, path);
      if (step == cfg.steps) report.checkpoint = path;
    }
  }
  model.zero_grad();
  if (!cfg.out_dir.empty()) write_metrics_csv(report.metrics, cfg.out_dir + "/metrics.csv");
  return report;
}

template <class T>
TrainReport train_clm(Model<T>& m, const CorpusSplit& corpus, TrainConfig cfg) {
  cfg.objective = Objective::clm;
  return train(m, corpus, cfg);
}

template <class T>
TrainReport train_multi_token(Model<T>& m, const CorpusSplit& corpus, TrainConfig cfg) {
  cfg.objective = Objective::multi_token;
  return train(m, corpus, cfg);
}

template <class T>
TrainReport train_many_token(Model<T>& m, const CorpusSplit& corpus, TrainConfig cfg) {
  cfg.objective = Objective::many_token;
  return train(m, corpus, cfg);
}

template <class T>
TrainReport train_bidirectional(Model<T>& m, const CorpusSplit& corpus, TrainConfig cfg) {
  cfg.objective = Objective::bidirectional;
  return train(m, corpus, cfg);
}

template <class T>
TrainReport train_autoencoder(Model<T>& m, const CorpusSplit& corpus, TrainConfig cfg) {
  cfg.objective = Objective::autoencoder;
  return train(m, corpus, cfg);
}

}  // namespace mixlab
