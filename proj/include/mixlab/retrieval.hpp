#pragma once

// Retrieval over sequence embeddings.
//
// Indirect training: a retrieval mixer scores c candidate embeddings
// against a query embedding placed in row 0; the embedding model stays
// frozen. Direct training: InfoNCE on cosine similarities back-propagates
// into the embedding model itself. Inference ranks targets by cosine
// similarity, computed in batch as X^ Y^T on unit rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mixlab/model.hpp"
#include "mixlab/random.hpp"
#include "mixlab/training.hpp"

namespace mixlab {

// ---------------------------------------------------------------------------
// Embedding extraction

template <class T>
struct EmbeddedSequences {
  Tensor<T> rows;                    // one row per kept sequence
  std::vector<std::size_t> kept;     // input index of each row
  std::vector<std::string> skipped;  // one message per dropped input
};

// Embeds sequences in batches without gradient. Sequences with fewer than
// two non-pad tokens are skipped and reported.
template <class T>
EmbeddedSequences<T> embed_sequences(const Model<T>& model, const std::vector<TokenSequence>& seqs, std::size_t batch_size = 32) {
  NoGradGuard no_grad;
  EmbeddedSequences<T> out;
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].content_length(model.config.pad_id) < 2) {
      out.skipped.push_back("sequence " + std::to_string(i) + " has fewer than two non-pad tokens");
      continue;
    }
    ok.push_back(i);
  }
  std::vector<T> data;
  for (std::size_t start = 0; start < ok.size(); start += batch_size) {
    std::vector<TokenSequence> part;
    for (std::size_t j = start; j < std::min(ok.size(), start + batch_size); ++j) part.push_back(seqs[ok[j]]);
    const Tensor<T> e = extract_embeddings(model, make_batch(part, model.config));
    data.insert(data.end(), e.data().begin(), e.data().end());
  }
  out.rows = Tensor<T>::matrix(ok.size(), model.config.d_model, std::move(data));
  out.kept = std::move(ok);
  return out;
}

// Paired query/target embeddings: row i of x and row i of y belong together.
template <class T>
struct EmbeddingStore {
  Tensor<T> x;
  Tensor<T> y;
  std::string source;
  std::vector<std::string> skipped;

  std::size_t size() const { return x.defined() ? x.rows() : 0; }
};

inline TokenSequence encode_text(const std::string& text, const ModelConfig& cfg) {
  return pad_to(ByteTokenizer::tokenize(text), cfg.n_ctx, cfg.padding_side, cfg.pad_id);
}

// Pairs where either side is skipped are dropped from both tables.
template <class T>
EmbeddingStore<T> embed_corpus(const Model<T>& model, const std::vector<TextPair>& pairs, const std::string& source = "") {
  std::vector<TokenSequence> q, t;
  for (const auto& p : pairs) {
    q.push_back(encode_text(p.query, model.config));
    t.push_back(encode_text(p.target, model.config));
  }
  EmbeddedSequences<T> eq = embed_sequences(model, q), et = embed_sequences(model, t);
  std::vector<std::size_t> qi(pairs.size(), std::string::npos), ti(pairs.size(), std::string::npos);
  for (std::size_t r = 0; r < eq.kept.size(); ++r) qi[eq.kept[r]] = r;
  for (std::size_t r = 0; r < et.kept.size(); ++r) ti[et.kept[r]] = r;
  std::vector<std::size_t> qr, tr;
  EmbeddingStore<T> store;
  store.source = source;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (qi[i] == std::string::npos || ti[i] == std::string::npos) {
      store.skipped.push_back("pair " + std::to_string(i) + " dropped: too short to embed");
      continue;
    }
    qr.push_back(qi[i]);
    tr.push_back(ti[i]);
  }
  NoGradGuard no_grad;
  store.x = gather_rows(eq.rows, qr).detach();
  store.y = gather_rows(et.rows, tr).detach();
  return store;
}

// ---------------------------------------------------------------------------
// Batch sampling

struct CandidateDraw {
  std::size_t match = 0;                // index n of the true pair
  std::size_t m = 0;                    // slot holding the true target, 1 <= m < c
  std::vector<std::size_t> candidates;  // slot j >= 1 holds target candidates[j]; slot 0 unused
};

// Negatives are drawn without replacement from every target except n;
// the true target then overwrites slot m, drawn uniformly from [1, c).
inline CandidateDraw draw_candidates(std::size_t n, std::size_t pool, std::size_t c, Rng& rng) {
  if (c < 2) throw ConfigError("retrieval context c must be at least 2");
  if (n >= pool) throw InputError("match index " + std::to_string(n) + " outside pool of " + std::to_string(pool));
  if (c - 1 > pool - 1)
    throw InputError("cannot draw " + std::to_string(c - 1) + " negatives from " + std::to_string(pool - 1) + " non-matching targets");
  std::vector<double> weights(pool, 1.0);
  weights[n] = 0.0;
  const std::vector<std::size_t> r = multinomial_sample(weights, c - 1, rng);
  CandidateDraw d;
  d.match = n;
  d.candidates.assign(c, n);
  for (std::size_t j = 1; j < c; ++j) d.candidates[j] = r[j - 1];
  d.m = rng.uniform_index(1, c);
  d.candidates[d.m] = n;
  return d;
}

template <class T>
struct RetrievalBatch {
  Tensor<T> a;               // c x d: query then candidates
  std::vector<int> q;        // one-hot label
  std::size_t m = 0;
  CandidateDraw draw;
};

template <class T>
RetrievalBatch<T> sample_retrieval_batch(const EmbeddingStore<T>& store, std::size_t n, std::size_t c, Rng& rng) {
  RetrievalBatch<T> b;
  b.draw = draw_candidates(n, store.size(), c, rng);
  b.m = b.draw.m;
  const std::size_t d = store.x.cols();
  std::vector<T> a(c * d);
  std::copy_n(store.x.data().begin() + static_cast<std::ptrdiff_t>(n * d), d, a.begin());
  for (std::size_t j = 1; j < c; ++j)
    std::copy_n(store.y.data().begin() + static_cast<std::ptrdiff_t>(b.draw.candidates[j] * d), d,
                a.begin() + static_cast<std::ptrdiff_t>(j * d));
  b.a = Tensor<T>::matrix(c, d, std::move(a));
  b.q.assign(c, 0);
  b.q[b.m] = 1;
  return b;
}

// ---------------------------------------------------------------------------
// Indirect training

struct IndirectConfig {
  std::size_t c = 32;
  std::size_t batch_size = 64;
  std::size_t steps = 200;
  double lr = 1e-4;
  double weight_decay = 0.01;
  bool clip_grad = true;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::size_t eval_batches = 8;
};

template <class T>
Tensor<T> indirect_loss(const Model<T>& model, const std::vector<RetrievalBatch<T>>& batches) {
  std::vector<Tensor<T>> rows;
  std::vector<int> labels;
  for (const auto& b : batches) {
    rows.push_back(b.a);
    labels.push_back(static_cast<int>(b.m));
  }
  return cross_entropy(retrieval_mixer_forward(model, concat_rows(rows)).logits, labels, -1);
}

template <class T>
std::vector<RetrievalBatch<T>> draw_batches(const EmbeddingStore<T>& store, const std::vector<std::size_t>& idx, std::size_t c, Rng& rng) {
  std::vector<RetrievalBatch<T>> out;
  for (std::size_t n : idx) out.push_back(sample_retrieval_batch(store, n, c, rng));
  return out;
}

// Fixed, seeded evaluation batches drawn from the held-out store.
template <class T>
double indirect_eval_loss(const Model<T>& model, const EmbeddingStore<T>& eval, const IndirectConfig& cfg) {
  NoGradGuard no_grad;
  Rng rng(cfg.seed ^ 0xe7a1u);
  double total = 0.0;
  for (std::size_t b = 0; b < cfg.eval_batches; ++b) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) idx.push_back(rng.uniform_index(0, eval.size()));
    total += static_cast<double>(indirect_loss(model, draw_batches(eval, idx, cfg.c, rng)).item());
  }
  return total / static_cast<double>(cfg.eval_batches);
}

// Only the retrieval model's parameters change; the stores are constants.
template <class T>
TrainReport train_indirect(Model<T>& model, const EmbeddingStore<T>& train, const EmbeddingStore<T>& eval, const IndirectConfig& cfg) {
  if (model.config.family != Family::retrieval_mixer) throw ConfigError("indirect training needs a retrieval_mixer");
  if (model.config.n_ctx != cfg.c) throw ConfigError("retrieval context c differs from the model's n_ctx");
  if (cfg.steps < 1 || cfg.batch_size < 1) throw ConfigError("steps and batch_size must be positive");
  if (eval.size() < cfg.c) throw InputError("eval store smaller than the retrieval context");
  model.set_trainable(true);
  AdamW<T> opt(0.9, 0.999, 1e-8, cfg.weight_decay);
  BatchStream stream(train.size(), cfg.seed);
  Rng rng(cfg.seed + 1);
  TrainReport report;
  std::size_t seen = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const double lr = linear_lr(cfg.lr, step - 1, cfg.steps);
    model.zero_grad();
    Tensor<T> loss = indirect_loss(model, draw_batches(train, stream.next(cfg.batch_size), cfg.c, rng));
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite retrieval loss at step " + std::to_string(step));
    backward(loss);
    if (cfg.clip_grad) clip_grad_norm(model.params, 1.0);
    opt.step(model.params, lr);
    seen += cfg.batch_size;
    report.metrics.push_back({step, "train", static_cast<double>(loss.item()), lr, seen});
    if (step == cfg.steps || (cfg.eval_every && step % cfg.eval_every == 0)) {
      const double e = indirect_eval_loss(model, eval, cfg);
      report.metrics.push_back({step, "eval", e, lr, seen});
      report.records.push_back({step, static_cast<double>(loss.item()), e, lr, seen});
    }
  }
  model.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// InfoNCE

// -log f+ / (f+ + sum f_i) with f = exp(cos / tau), evaluated in log space:
// log1p(sum exp(s_i - s+)) when s+ is the largest score, log-sum-exp
// otherwise. Vectors must be nonzero.
inline double infonce_loss(std::span<const double> q, std::span<const double> pos, const std::vector<std::vector<double>>& negs,
                           double tau) {
  if (!(tau > 0.0)) throw ConfigError("InfoNCE temperature must be positive");
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    if (!(s > 0.0)) throw InputError("InfoNCE: zero-norm vector");
    return std::sqrt(s);
  };
  auto cosine = [&](std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("InfoNCE: vector lengths differ");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot / (norm(a) * norm(b));
  };
  const double sp = cosine(q, pos) / tau;
  std::vector<double> s;
  for (const auto& n : negs) s.push_back(cosine(q, n) / tau);
  const double mx = s.empty() ? sp : std::max(sp, *std::max_element(s.begin(), s.end()));
  if (mx == sp) {
    double acc = 0.0;
    for (double x : s) acc += std::exp(x - sp);
    return std::log1p(acc);
  }
  double acc = std::exp(sp - mx);
  for (double x : s) acc += std::exp(x - mx);
  return mx + std::log(acc) - sp;
}

// Batched InfoNCE on tensors. q is B x d; cand is (B * K) x d where each
// block of K rows holds the positive first and K-1 negatives. Returns the
// mean loss over the B queries.
template <class T>
Tensor<T> infonce_loss(const Tensor<T>& q, const Tensor<T>& cand, T tau) {
  if (!(tau > T(0))) throw ConfigError("InfoNCE temperature must be positive");
  if (q.rank() != 2 || cand.rank() != 2 || q.cols() != cand.cols() || cand.rows() % q.rows() != 0)
    throw DimensionError("InfoNCE: queries " + shape_str(q.shape()) + " do not match candidates " + shape_str(cand.shape()));
  const std::size_t b = q.rows(), k = cand.rows() / b, d = q.cols();
  std::vector<std::size_t> rep;
  for (std::size_t i = 0; i < b; ++i) rep.insert(rep.end(), k, i);
  const Tensor<T> prod = mul(gather_rows(normalize_rows(q), std::move(rep)), normalize_rows(cand));
  const Tensor<T> cos = reshape(matmul(prod, Tensor<T>::matrix(d, 1, std::vector<T>(d, T(1)))), {b, k});
  return cross_entropy(scale(cos, T(1) / tau), std::vector<int>(b, 0), -1);
}

struct InfoNCEConfig {
  double tau = 0.02;
  // One matching and thirty non-matching targets per query.
  std::size_t negatives = 30;
  std::size_t accumulate = 4;
  std::size_t steps = 100;
  double lr = 1e-4;
  double weight_decay = 0.01;
  bool clip_grad = true;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::size_t eval_queries = 32;
};

template <class T>
struct PairSequences {
  std::vector<TokenSequence> queries;
  std::vector<TokenSequence> targets;

  std::size_t size() const { return queries.size(); }
};

template <class T>
PairSequences<T> encode_pairs(const std::vector<TextPair>& pairs, const ModelConfig& cfg) {
  PairSequences<T> out;
  for (const auto& p : pairs) {
    out.queries.push_back(encode_text(p.query, cfg));
    out.targets.push_back(encode_text(p.target, cfg));
  }
  return out;
}

// Loss for query n against its target and the sampled negatives, embedding
// all 1 + (1 + negatives) sequences in one batch.
template <class T>
Tensor<T> infonce_step_loss(const Model<T>& model, const PairSequences<T>& pairs, std::size_t n, const std::vector<std::size_t>& negs,
                            T tau) {
  std::vector<TokenSequence> seqs{pairs.queries[n], pairs.targets[n]};
  for (std::size_t j : negs) seqs.push_back(pairs.targets[j]);
  const Tensor<T> e = extract_embeddings(model, make_batch(seqs, model.config));
  return infonce_loss(slice_rows(e, 0, 1), slice_rows(e, 1, seqs.size() - 1), tau);
}

template <class T>
double infonce_eval_loss(const Model<T>& model, const PairSequences<T>& eval, const InfoNCEConfig& cfg) {
  NoGradGuard no_grad;
  Rng rng(cfg.seed ^ 0x1c0deu);
  const std::size_t negatives = std::min(cfg.negatives, eval.size() - 1);
  double total = 0.0;
  const std::size_t count = std::min(cfg.eval_queries, eval.size());
  for (std::size_t i = 0; i < count; ++i) {
    const CandidateDraw d = draw_candidates(i, eval.size(), negatives + 1, rng);
    std::vector<std::size_t> negs;
    for (std::size_t j = 1; j < d.candidates.size(); ++j)
      if (j != d.m) negs.push_back(d.candidates[j]);
    total += static_cast<double>(infonce_step_loss(model, eval, i, negs, static_cast<T>(cfg.tau)).item());
  }
  return total / static_cast<double>(count);
}

// Fine-tunes the embedding model in place. Negatives for each query are
// drawn from the other training targets as in draw_candidates; gradients of
// `accumulate` queries are averaged per update.
template <class T>
TrainReport train_infonce(Model<T>& model, const PairSequences<T>& train, const PairSequences<T>& eval, const InfoNCEConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw ConfigError("InfoNCE temperature must be positive");
  if (cfg.negatives < 1) throw ConfigError("InfoNCE needs at least one negative");
  if (cfg.steps < 1 || cfg.accumulate < 1) throw ConfigError("steps and accumulate must be positive");
  if (train.size() < cfg.negatives + 1) throw InputError("training pairs fewer than negatives + 1");
  if (eval.size() < 2) throw InputError("InfoNCE evaluation needs at least two pairs");
  const Family f = model.config.family;
  if (f != Family::masked_mixer && f != Family::transformer && !is_autoencoder(f))
    throw ConfigError("InfoNCE training needs an embedding model, not " + to_string(f));
  model.set_trainable(true);
  AdamW<T> opt(0.9, 0.999, 1e-8, cfg.weight_decay);
  BatchStream stream(train.size(), cfg.seed);
  Rng rng(cfg.seed + 1);
  TrainReport report;
  std::size_t seen = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const double lr = linear_lr(cfg.lr, step - 1, cfg.steps);
    model.zero_grad();
    double step_loss = 0.0;
    for (std::size_t n : stream.next(cfg.accumulate)) {
      const CandidateDraw d = draw_candidates(n, train.size(), cfg.negatives + 1, rng);
      std::vector<std::size_t> negs;
      for (std::size_t j = 1; j < d.candidates.size(); ++j)
        if (j != d.m) negs.push_back(d.candidates[j]);
      Tensor<T> loss = infonce_step_loss(model, train, n, negs, static_cast<T>(cfg.tau));
      if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite InfoNCE loss at step " + std::to_string(step));
      step_loss += static_cast<double>(loss.item()) / static_cast<double>(cfg.accumulate);
      backward(scale(loss, T(1) / T(cfg.accumulate)));
      ++seen;
    }
    if (cfg.clip_grad) clip_grad_norm(model.params, 1.0);
    opt.step(model.params, lr);
    report.metrics.push_back({step, "train", step_loss, lr, seen});
    if (step == cfg.steps || (cfg.eval_every && step % cfg.eval_every == 0)) {
      const double e = infonce_eval_loss(model, eval, cfg);
      report.metrics.push_back({step, "eval", e, lr, seen});
      report.records.push_back({step, step_loss, e, lr, seen});
    }
  }
  model.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// Inference

namespace detail {

inline Eigen::MatrixXd unit_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw InputError("retrieval: row " + std::to_string(i) + " has zero norm");
    out.row(i) /= n;
  }
  return out;
}

template <class T>
Eigen::MatrixXd to_eigen(const Tensor<T>& t) {
  if (t.rank() != 2) throw DimensionError("retrieval expects matrices, got " + shape_str(t.shape()));
  return view(t.node()->data, t.rows(), t.cols()).template cast<double>();
}

}  // namespace detail

struct Ranked {
  std::vector<std::size_t> index;
  std::vector<double> score;
};

// Cosine scores z = X^ Y^T for every query row, each ranked descending with
// ties broken by lower index; the first k of each ranking are returned.
template <class T>
std::vector<Ranked> retrieve_topk(const Tensor<T>& queries, const Tensor<T>& targets, std::size_t k) {
  const Eigen::MatrixXd x = detail::unit_rows(detail::to_eigen(queries));
  const Eigen::MatrixXd y = detail::unit_rows(detail::to_eigen(targets));
  if (x.cols() != y.cols()) throw DimensionError("retrieval: query and target widths differ");
  const Eigen::MatrixXd z = x * y.transpose();
  const std::size_t n = static_cast<std::size_t>(y.rows());
  k = std::min(k, n);
  std::vector<Ranked> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return z(i, static_cast<Eigen::Index>(a)) > z(i, static_cast<Eigen::Index>(b));
    });
    order.resize(k);
    auto& r = out[static_cast<std::size_t>(i)];
    r.index = order;
    for (std::size_t j : order) r.score.push_back(z(i, static_cast<Eigen::Index>(j)));
  }
  return out;
}

struct AccuracyRow {
  std::size_t n = 0;
  std::size_t trials = 0;
  double top1_accuracy = 0.0;
};

// Top-1@n: one query against n-1 candidates, its matching target and n-2
// non-matching targets drawn as in draw_candidates; a hit when the match
// ranks first (ties go to the lower slot; the match's slot is random).
// Chance level is 1/(n-1). Sizes needing more targets than exist are
// skipped with a notice on `log`.
template <class T>
std::vector<AccuracyRow> eval_topk_accuracy(const Tensor<T>& queries, const Tensor<T>& targets, const std::vector<std::size_t>& sizes,
                                            std::size_t trials, std::uint64_t seed, std::ostream* log = &std::cerr) {
  const Eigen::MatrixXd x = detail::unit_rows(detail::to_eigen(queries));
  const Eigen::MatrixXd y = detail::unit_rows(detail::to_eigen(targets));
  if (x.rows() != y.rows()) throw InputError("retrieval evaluation needs paired queries and targets");
  const std::size_t pool = static_cast<std::size_t>(y.rows());
  Rng rng(seed);
  std::vector<AccuracyRow> out;
  for (std::size_t n : sizes) {
    if (n < 3 || n - 1 > pool - 1) {
      if (log) *log << "skipping n=" << n << ": needs " << (n >= 1 ? n - 1 : 0) << " non-matching targets to sample from, " << pool - 1
                    << " available\n";
      continue;
    }
    std::size_t hits = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t qi = rng.uniform_index(0, pool);
      const CandidateDraw d = draw_candidates(qi, pool, n, rng);
      std::size_t best = 1;
      double best_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 1; j < d.candidates.size(); ++j) {
        const double s = x.row(static_cast<Eigen::Index>(qi)).dot(y.row(static_cast<Eigen::Index>(d.candidates[j])));
        if (s > best_score) {
          best_score = s;
          best = j;
        }
      }
      hits += best == d.m;
    }
    out.push_back({n, trials, static_cast<double>(hits) / static_cast<double>(trials)});
  }
  return out;
}

inline std::string accuracy_csv(const std::vector<AccuracyRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "n,trials,top1_accuracy\n";
  for (const auto& r : rows) os << r.n << ',' << r.trials << ',' << r.top1_accuracy << '\n';
  return os.str();
}

}  // namespace mixlab
