#pragma once

// Shared helpers for the unit tests and the acceptance binary.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mixlab/model.hpp"
#include "mixlab/training.hpp"

namespace mixlab::testing {

inline TokenSequence random_tokens(std::size_t n, Rng& rng, std::size_t content = 0) {
  if (content == 0) content = n;
  std::vector<int> ids;
  for (std::size_t i = 0; i < content; ++i) ids.push_back(static_cast<int>(rng.uniform_index(0, 256)));
  return pad_to(std::move(ids), n, PadSide::right);
}

struct Variant {
  std::string name;
  ModelConfig config;
};

inline ModelConfig small_config(Family f, std::size_t d = 16, std::size_t n_ctx = 12, std::size_t layers = 2) {
  ModelConfig c;
  c.family = f;
  c.d_model = d;
  c.n_ctx = n_ctx;
  c.n_layers = layers;
  c.ff_mult = 2;
  return c;
}

// Every causal family/variant covered by the causality checks.
inline std::vector<Variant> causal_variants() {
  std::vector<Variant> out;
  auto mixer = [](auto&& edit) {
    ModelConfig c = small_config(Family::masked_mixer);
    edit(c);
    return c;
  };
  out.push_back({"flat", mixer([](ModelConfig&) {})});
  out.push_back({"expansion2", mixer([](ModelConfig& c) { c.expansion = 2; })});
  out.push_back({"multihead", mixer([](ModelConfig& c) { c.n_heads = 4; })});
  out.push_back({"kernel1", mixer([](ModelConfig& c) { c.kernel_k = 1; })});
  out.push_back({"kernel2", mixer([](ModelConfig& c) { c.kernel_k = 2; })});
  out.push_back({"kernel4", mixer([](ModelConfig& c) { c.kernel_k = 4; })});
  out.push_back({"softmax_weights", mixer([](ModelConfig& c) { c.softmax_weights = true; })});
  ModelConfig t = small_config(Family::transformer);
  t.n_heads = 2;
  out.push_back({"transformer", t});
  return out;
}

template <class T>
bool rows_identical(const Tensor<T>& a, const Tensor<T>& b, std::size_t row) {
  const std::size_t n = a.cols();
  for (std::size_t j = 0; j < n; ++j)
    if (a(row, j) != b(row, j)) return false;
  return true;
}

struct LeakCount {
  std::size_t cases = 0;
  std::size_t leaks = 0;
};

// Perturbs the token at j and checks that output row i of the stack run in
// `direction` is bit-identical whenever the mask forbids i from seeing j.
// Forward: j > i. Reverse: j < i. Both the last hidden state and, for the
// forward direction, the logits are compared.
inline LeakCount causal_leaks(const ModelConfig& cfg, MaskDirection direction, std::size_t cases, std::uint64_t seed) {
  LeakCount r;
  Rng rng(seed);
  const std::size_t n = cfg.n_ctx;
  NoGradGuard no_grad;
  for (std::size_t c = 0; c < cases; ++c) {
    const Model<double> m = make_model<double>(cfg, seed * 1000 + c);
    const TokenSequence base = random_tokens(n, rng);
    std::size_t i = 0, j = 0;
    while (i == j) {
      i = rng.uniform_index(0, n);
      j = rng.uniform_index(0, n);
    }
    if ((direction == MaskDirection::forward) != (j > i)) std::swap(i, j);
    TokenSequence moved = base;
    moved.ids[j] = (moved.ids[j] + 1 + static_cast<int>(rng.uniform_index(0, 255))) % 256;

    auto run = [&](const TokenSequence& s) {
      const Batch b = make_batch(s, cfg);
      const auto pad = b.pad_mask(cfg.pad_id);
      auto hidden = run_stack(m, "blocks", embedding(b.ids, m["wte"]), direction, pad);
      return std::pair{hidden.back(), matmul(hidden.back(), m["lm_head"])};
    };
    const auto [h0, l0] = run(base);
    const auto [h1, l1] = run(moved);
    ++r.cases;
    if (!rows_identical(h0, h1, i) || !rows_identical(l0, l1, i)) ++r.leaks;
    // Sanity: the perturbed row itself must change, otherwise the check is vacuous.
    if (rows_identical(h0, h1, j)) ++r.leaks;
  }
  return r;
}

// Bidirectional models: perturbing token i must leave the logits at
// position i bit-identical.
inline LeakCount backfill_leaks(const ModelConfig& cfg, std::size_t cases, std::uint64_t seed) {
  LeakCount r;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (std::size_t c = 0; c < cases; ++c) {
    const Model<double> m = make_model<double>(cfg, seed * 1000 + c);
    const TokenSequence base = random_tokens(cfg.n_ctx, rng);
    const std::size_t i = rng.uniform_index(0, cfg.n_ctx);
    TokenSequence moved = base;
    moved.ids[i] = (moved.ids[i] + 1 + static_cast<int>(rng.uniform_index(0, 255))) % 256;
    const auto a = forward(m, make_batch(base, cfg)).logits;
    const auto b = forward(m, make_batch(moved, cfg)).logits;
    ++r.cases;
    if (!rows_identical(a, b, i)) ++r.leaks;
  }
  return r;
}

inline Objective natural_objective(const ModelConfig& c) {
  if (is_bidirectional(c.family)) return Objective::bidirectional;
  if (is_autoencoder(c.family)) return Objective::autoencoder;
  return Objective::clm;
}

// Relative error of the whole-model gradient against central differences,
// measured over the concatenated parameter vector:
//   ||g_auto - g_fd||_2 / max(||g_auto||_2, ||g_fd||_2).
// Entries whose true value is far below the finite-difference round-off
// (about 1e-16 * loss / h) would dominate an elementwise ratio, so the
// model-level check is norm-wise; primitive ops are checked elementwise.
inline double full_model_grad_error(const ModelConfig& cfg, std::uint64_t seed, double h = 1e-5) {
  Model<double> m = make_model<double>(cfg, seed);
  Rng rng(seed + 1);
  std::vector<TokenSequence> seqs{random_tokens(cfg.n_ctx, rng), random_tokens(cfg.n_ctx, rng, cfg.n_ctx - 3)};
  for (auto& s : seqs)
    for (auto& t : s.ids)
      if (t != cfg.pad_id) t %= cfg.pad_id;
  const Batch batch = make_batch(seqs, cfg);
  TrainConfig tc;
  tc.objective = natural_objective(cfg);
  m.zero_grad();
  backward(objective_loss(m, batch, tc));
  double diff = 0, na = 0, nn = 0;
  NoGradGuard no_grad;
  for (auto& [name, p] : m.params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = objective_loss(m, batch, tc).item();
      values[i] = saved - h;
      const double down = objective_loss(m, batch, tc).item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = i < analytic.size() ? analytic[i] : 0.0;
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale > 0 ? std::sqrt(diff) / scale : std::sqrt(diff);
}

// Largest |gradient| reaching the embedding row of the token at `probe`
// from the bidirectional loss at position i alone (probe defaults to i).
// Tokens must be distinct, so with probe == i any non-zero value means the
// token informed its own prediction.
template <class T>
double backfill_gradient(const Model<T>& model, const TokenSequence& seq, std::size_t i, std::size_t probe = std::string::npos) {
  if (probe == std::string::npos) probe = i;
  Model<T> m = clone(model);
  m.set_trainable(true);
  m.zero_grad();
  const Batch batch = make_batch(seq, m.config);
  std::vector<int> targets(seq.size(), m.config.pad_id);
  targets[i] = seq.ids[i];
  backward(cross_entropy(bidirectional_forward(m, batch).logits, targets, m.config.pad_id));
  double worst = 0;
  const std::size_t d = m.config.d_model, row = static_cast<std::size_t>(seq.ids[probe]);
  for (const std::string name : {"wte", "rev.wte"}) {
    if (!m.params.contains(name)) continue;
    const Tensor<T>& w = m[name];
    if (!w.has_grad()) continue;
    for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(static_cast<double>(w.grad()[row * d + j])));
  }
  return worst;
}

// A sequence of distinct byte tokens.
inline TokenSequence distinct_tokens(std::size_t n, Rng& rng) {
  std::vector<int> all(256);
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(all.begin(), all.end());
  all.resize(n);
  return TokenSequence{all, PadSide::right};
}

}  // namespace mixlab::testing
