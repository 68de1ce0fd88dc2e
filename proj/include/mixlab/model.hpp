#pragma once

// Model families over the tensor core.
//
// Mixer block (pre-norm, residual):
//   x += token_mix(layernorm(x))        masked convolution between positions
//   x += ff(layernorm(x))               GELU MLP over features
// Transformer block (Llama-style, pre-norm, residual):
//   x += attn(rmsnorm(x))               rotary q/k, causal + key-pad mask
//   x += swiglu(rmsnorm(x))
// followed by a final rmsnorm.
//
// Batches are row-stacked: B sequences of n_ctx positions form a
// (B * n_ctx) x d_model matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mixlab/config.hpp"
#include "mixlab/data.hpp"
#include "mixlab/ops.hpp"
#include "mixlab/random.hpp"
#include "mixlab/tensor.hpp"

namespace mixlab {

// Named parameters in creation order.
template <class T>
class ParamTable {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamTable&>(*this).at(name));
  }
  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct Model {
  ModelConfig config;
  ParamTable<T> params;

  const Tensor<T>& operator[](const std::string& name) const { return params.at(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : params) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [name, t] : params) t.clear_grad();
  }

  // Token embedding matrix W as d_model x vocab (the lookup table stores
  // its transpose, one row per token).
  Tensor<T> embedding_matrix() const {
    NoGradGuard g;
    return transpose(params.at("wte")).detach();
  }
};

// Deep copy of every parameter value.
template <class T>
Model<T> clone(const Model<T>& m) {
  Model<T> out{m.config, {}};
  for (const auto& [name, t] : m.params) out.params.add(name, t.detach(t.requires_grad()));
  return out;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

inline constexpr double kInitStd = 0.02;

template <class T>
struct Initializer {
  Rng& rng;
  ParamTable<T>& table;

  void normal(const std::string& name, Shape shape, double std) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
    table.add(name, Tensor<T>(std::move(shape), std::move(v), true));
  }
  void constant(const std::string& name, Shape shape, double value) {
    std::vector<T> v(numel_of(shape), static_cast<T>(value));
    table.add(name, Tensor<T>(std::move(shape), std::move(v), true));
  }
};

inline std::size_t swiglu_hidden(const ModelConfig& c) { return std::max<std::size_t>(1, 2 * c.ff_mult * c.d_model / 3); }

template <class T>
void init_mixer_stack(Initializer<T>& init, const std::string& prefix, const ModelConfig& c) {
  const std::size_t d = c.d_model, n = c.n_ctx, k = c.kernel_k;
  const double out_std = kInitStd / std::sqrt(static_cast<double>(c.n_layers));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    init.constant(p + "seq_norm.gamma", {d}, 1.0);
    init.constant(p + "seq_norm.beta", {d}, 0.0);
    if (c.expansion == 2) {
      init.normal(p + "conv1.weight", {k, 2 * n, n}, kInitStd);
      init.constant(p + "conv1.bias", {2 * n}, 0.0);
      init.normal(p + "conv2.weight", {k, n, 2 * n}, out_std);
      init.constant(p + "conv2.bias", {n}, 0.0);
    } else if (c.n_heads == 1) {
      init.normal(p + "conv.weight", {k, n, n}, kInitStd);
      init.constant(p + "conv.bias", {n}, 0.0);
    } else {
      init.normal(p + "mix_in.weight", {d, d}, kInitStd);
      init.constant(p + "mix_in.bias", {d}, 0.0);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        init.normal(p + "conv.h" + std::to_string(h) + ".weight", {k, n, n}, kInitStd);
        init.constant(p + "conv.h" + std::to_string(h) + ".bias", {n}, 0.0);
      }
      init.normal(p + "mix_out.weight", {d, d}, out_std);
      init.constant(p + "mix_out.bias", {d}, 0.0);
    }
    init.constant(p + "ch_norm.gamma", {d}, 1.0);
    init.constant(p + "ch_norm.beta", {d}, 0.0);
    init.normal(p + "ff.w1", {d, c.ff_mult * d}, kInitStd);
    init.constant(p + "ff.b1", {c.ff_mult * d}, 0.0);
    init.normal(p + "ff.w2", {c.ff_mult * d, d}, out_std);
    init.constant(p + "ff.b2", {d}, 0.0);
  }
}

template <class T>
void init_transformer_stack(Initializer<T>& init, const std::string& prefix, const ModelConfig& c) {
  const std::size_t d = c.d_model, hid = swiglu_hidden(c);
  const double out_std = kInitStd / std::sqrt(static_cast<double>(c.n_layers));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    init.constant(p + "attn_norm.gamma", {d}, 1.0);
    init.normal(p + "wq", {d, d}, kInitStd);
    init.normal(p + "wk", {d, d}, kInitStd);
    init.normal(p + "wv", {d, d}, kInitStd);
    init.normal(p + "wo", {d, d}, out_std);
    init.constant(p + "mlp_norm.gamma", {d}, 1.0);
    init.normal(p + "w_gate", {d, hid}, kInitStd);
    init.normal(p + "w_up", {d, hid}, kInitStd);
    init.normal(p + "w_down", {hid, d}, out_std);
  }
  init.constant(prefix + ".final_norm.gamma", {d}, 1.0);
}

}  // namespace detail

// Parameter creation order is fixed per family, so equal seeds give equal
// values for shared prefixes (e.g. a bidirectional model's forward stack
// matches a masked mixer built from the same seed).
//
// Mixer token embeddings are unit-variance normal; transformer embeddings
// and all projections use std 0.02 (residual-output projections
// 0.02/sqrt(n_layers)).
template <class T>
Model<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m{cfg, {}};
  Rng rng(seed);
  detail::Initializer<T> init{rng, m.params};
  const std::size_t d = cfg.d_model, v = cfg.vocab;
  const double wte_std = is_mixer(cfg.family) ? 1.0 : detail::kInitStd;
  auto stack = [&](const std::string& prefix) {
    if (is_mixer(cfg.family)) {
      detail::init_mixer_stack(init, prefix, cfg);
    } else {
      detail::init_transformer_stack(init, prefix, cfg);
    }
  };
  switch (cfg.family) {
    case Family::masked_mixer:
    case Family::transformer:
      init.normal("wte", {v, d}, wte_std);
      stack("blocks");
      init.normal("lm_head", {d, v}, detail::kInitStd);
      break;
    case Family::bidirectional_mixer:
    case Family::bidirectional_transformer:
      init.normal("wte", {v, d}, wte_std);
      stack("fwd");
      if (!cfg.share_wte) init.normal("rev.wte", {v, d}, wte_std);
      stack("rev");
      init.normal("combine.weight", {2 * d, d}, detail::kInitStd);
      init.normal("lm_head", {d, v}, detail::kInitStd);
      break;
    case Family::mixer_autoencoder:
    case Family::transformer_autoencoder:
      init.normal("wte", {v, d}, wte_std);
      stack("encoder");
      stack("decoder");
      init.normal("lm_head", {d, v}, detail::kInitStd);
      break;
    case Family::retrieval_mixer:
      stack("blocks");
      init.normal("head.weight", {d, 1}, detail::kInitStd);
      init.constant("head.bias", {1}, 0.0);
      break;
  }
  if (cfg.placeholder) init.normal("placeholder", {1, d}, wte_std);
  return m;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<int> ids;
  std::size_t size = 0;
  std::size_t n_ctx = 0;

  std::vector<std::uint8_t> pad_mask(int pad_id) const {
    std::vector<std::uint8_t> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] == pad_id;
    return m;
  }
};

inline Batch make_batch(const std::vector<TokenSequence>& seqs, const ModelConfig& cfg) {
  Batch b;
  b.n_ctx = cfg.n_ctx;
  b.size = seqs.size();
  b.ids.reserve(seqs.size() * cfg.n_ctx);
  for (const auto& s : seqs) {
    if (s.size() != cfg.n_ctx)
      throw InputError("sequence length " + std::to_string(s.size()) + " differs from n_ctx " + std::to_string(cfg.n_ctx));
    for (int t : s.ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab)
        throw InputError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab));
      b.ids.push_back(t);
    }
  }
  return b;
}

inline Batch make_batch(const TokenSequence& seq, const ModelConfig& cfg) { return make_batch(std::vector<TokenSequence>{seq}, cfg); }

// ---------------------------------------------------------------------------
// Stacks

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return matmul(x, w);
}

namespace detail {

template <class T>
Tensor<T> conv(const Model<T>& m, const std::string& name, const Tensor<T>& x, CausalMask mask) {
  const Tensor<T>& w = m[name + ".weight"];
  const Tensor<T> eff = m.config.softmax_weights ? softmax_conv_weights(w, mask) : w;
  return masked_conv1d(x, eff, m[name + ".bias"], mask);
}

template <class T>
Tensor<T> token_mixing(const Model<T>& m, const std::string& p, const Tensor<T>& h, CausalMask mask) {
  const ModelConfig& c = m.config;
  if (c.expansion == 2) return conv(m, p + "conv2", gelu(conv(m, p + "conv1", h, mask)), mask);
  if (c.n_heads == 1) return conv(m, p + "conv", h, mask);
  const std::size_t width = c.d_model / c.n_heads;
  Tensor<T> projected = linear(h, m[p + "mix_in.weight"], m[p + "mix_in.bias"]);
  std::vector<Tensor<T>> heads;
  for (std::size_t i = 0; i < c.n_heads; ++i)
    heads.push_back(conv(m, p + "conv.h" + std::to_string(i), slice_cols(projected, i * width, width), mask));
  return linear(concat_cols(heads), m[p + "mix_out.weight"], m[p + "mix_out.bias"]);
}

}  // namespace detail

// Runs the mixer blocks under `prefix`; returns every block output.
template <class T>
std::vector<Tensor<T>> mixer_stack(const Model<T>& m, const std::string& prefix, Tensor<T> x, MaskDirection direction) {
  const CausalMask mask{direction};
  std::vector<Tensor<T>> hidden;
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    Tensor<T> h = layernorm(x, m[p + "seq_norm.gamma"], m[p + "seq_norm.beta"]);
    x = add(x, detail::token_mixing(m, p, h, mask));
    h = layernorm(x, m[p + "ch_norm.gamma"], m[p + "ch_norm.beta"]);
    h = linear(gelu(linear(h, m[p + "ff.w1"], m[p + "ff.b1"])), m[p + "ff.w2"], m[p + "ff.b2"]);
    x = add(x, h);
    hidden.push_back(x);
  }
  return hidden;
}

// Runs the transformer blocks under `prefix`; returns every block output,
// the last one after the final norm.
template <class T>
std::vector<Tensor<T>> transformer_stack(const Model<T>& m, const std::string& prefix, Tensor<T> x, MaskDirection direction,
                                         std::span<const std::uint8_t> key_pad) {
  const ModelConfig& c = m.config;
  std::vector<Tensor<T>> hidden;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    Tensor<T> h = rmsnorm(x, m[p + "attn_norm.gamma"]);
    Tensor<T> q = rotary(matmul(h, m[p + "wq"]), c.n_ctx, c.n_heads);
    Tensor<T> k = rotary(matmul(h, m[p + "wk"]), c.n_ctx, c.n_heads);
    Tensor<T> v = matmul(h, m[p + "wv"]);
    x = add(x, matmul(attention(q, k, v, c.n_ctx, c.n_heads, direction, key_pad), m[p + "wo"]));
    h = rmsnorm(x, m[p + "mlp_norm.gamma"]);
    h = matmul(mul(silu(matmul(h, m[p + "w_gate"])), matmul(h, m[p + "w_up"])), m[p + "w_down"]);
    x = add(x, h);
    hidden.push_back(x);
  }
  hidden.back() = rmsnorm(hidden.back(), m[prefix + ".final_norm.gamma"]);
  return hidden;
}

template <class T>
std::vector<Tensor<T>> run_stack(const Model<T>& m, const std::string& prefix, const Tensor<T>& x, MaskDirection direction,
                                 std::span<const std::uint8_t> key_pad) {
  if (is_mixer(m.config.family)) return mixer_stack(m, prefix, x, direction);
  return transformer_stack(m, prefix, x, direction, key_pad);
}

// ---------------------------------------------------------------------------
// Family forwards

template <class T>
struct Forward {
  Tensor<T> logits;                 // (B * n_ctx) x vocab, or B x c for retrieval
  std::vector<Tensor<T>> hidden;    // per-layer outputs (forward stack / encoder)
  std::vector<Tensor<T>> reverse;   // reverse stack (bidirectional only)
  Tensor<T> bottleneck;             // B x d_model (autoencoders only)
};

namespace detail {

inline void expect_family(const ModelConfig& c, std::initializer_list<Family> allowed, const char* op) {
  for (Family f : allowed)
    if (c.family == f) return;
  throw ConfigError(std::string(op) + " does not support family " + to_string(c.family));
}

}  // namespace detail

// Causal LM from precomputed input embeddings (rows of E). key_pad marks
// pad positions for transformer attention masking; mixers ignore it.
template <class T>
Forward<T> forward_embedded(const Model<T>& m, const Tensor<T>& embedded, std::span<const std::uint8_t> key_pad = {}) {
  detail::expect_family(m.config, {Family::masked_mixer, Family::transformer}, "forward_embedded");
  Forward<T> f;
  f.hidden = run_stack(m, "blocks", embedded, MaskDirection::forward, key_pad);
  f.logits = matmul(f.hidden.back(), m["lm_head"]);
  return f;
}

template <class T>
Forward<T> mixer_forward(const Model<T>& m, const Batch& batch) {
  detail::expect_family(m.config, {Family::masked_mixer}, "mixer_forward");
  return forward_embedded(m, embedding(batch.ids, m["wte"]));
}

template <class T>
Forward<T> transformer_forward(const Model<T>& m, const Batch& batch) {
  detail::expect_family(m.config, {Family::transformer}, "transformer_forward");
  const auto pad = batch.pad_mask(m.config.pad_id);
  return forward_embedded(m, embedding(batch.ids, m["wte"]), pad);
}

// Forward stack output at n-1 and reverse stack output at n+1 are joined by
// one linear map before the shared head, so the prediction at n never sees
// token n.
template <class T>
Forward<T> bidirectional_forward(const Model<T>& m, const Batch& batch) {
  detail::expect_family(m.config, {Family::bidirectional_mixer, Family::bidirectional_transformer}, "bidirectional_forward");
  const ModelConfig& c = m.config;
  if (c.combine_points != 1) throw ConfigError("bidirectional models permit exactly one combination point");
  const auto pad = batch.pad_mask(c.pad_id);
  Forward<T> f;
  f.hidden = run_stack(m, "fwd", embedding(batch.ids, m["wte"]), MaskDirection::forward, pad);
  const Tensor<T>& rev_table = c.share_wte ? m["wte"] : m["rev.wte"];
  f.reverse = run_stack(m, "rev", embedding(batch.ids, rev_table), MaskDirection::reverse, pad);
  Tensor<T> joined = concat_cols<T>({shift_rows(f.hidden.back(), c.n_ctx, -1), shift_rows(f.reverse.back(), c.n_ctx, +1)});
  f.logits = matmul(matmul(joined, m["combine.weight"]), m["lm_head"]);
  return f;
}

// Index of the bottleneck row for each sequence: its last non-pad token.
inline std::vector<std::size_t> bottleneck_rows(const Batch& batch, int pad_id) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::size_t idx = std::string::npos;
    for (std::size_t i = batch.n_ctx; i-- > 0;)
      if (batch.ids[b * batch.n_ctx + i] != pad_id) {
        idx = i;
        break;
      }
    if (idx == std::string::npos) throw InputError("autoencoder input " + std::to_string(b) + " contains only pad tokens");
    rows.push_back(b * batch.n_ctx + idx);
  }
  return rows;
}

// Encoder's last-token hidden state, repeated at every position, is decoded
// back into per-position logits.
template <class T>
Forward<T> autoencoder_forward(const Model<T>& m, const Batch& batch) {
  detail::expect_family(m.config, {Family::mixer_autoencoder, Family::transformer_autoencoder}, "autoencoder_forward");
  const ModelConfig& c = m.config;
  const auto pad = batch.pad_mask(c.pad_id);
  Forward<T> f;
  f.hidden = run_stack(m, "encoder", embedding(batch.ids, m["wte"]), MaskDirection::forward, pad);
  f.bottleneck = gather_rows(f.hidden.back(), bottleneck_rows(batch, c.pad_id));
  std::vector<std::size_t> repeat;
  for (std::size_t b = 0; b < batch.size; ++b) repeat.insert(repeat.end(), c.n_ctx, b);
  Tensor<T> decoded = run_stack(m, "decoder", gather_rows(f.bottleneck, std::move(repeat)), MaskDirection::forward, {}).back();
  f.logits = matmul(decoded, m["lm_head"]);
  return f;
}

// Input rows are embeddings, B blocks of c rows each with row 0 the query.
// Returns B x c logits; softmax belongs to the loss only.
template <class T>
Forward<T> retrieval_mixer_forward(const Model<T>& m, const Tensor<T>& embeddings) {
  detail::expect_family(m.config, {Family::retrieval_mixer}, "retrieval_mixer_forward");
  const ModelConfig& c = m.config;
  if (embeddings.rank() != 2 || embeddings.cols() != c.d_model)
    throw DimensionError("retrieval mixer expects rows of width " + std::to_string(c.d_model) + ", got " + shape_str(embeddings.shape()));
  if (embeddings.rows() % c.n_ctx != 0)
    throw InputError("retrieval input of " + std::to_string(embeddings.rows()) + " rows is not a whole number of " +
                     std::to_string(c.n_ctx) + "-candidate contexts");
  Forward<T> f;
  f.hidden = mixer_stack(m, "blocks", embeddings, MaskDirection::none);
  Tensor<T> scores = add_rowvec(matmul(f.hidden.back(), m["head.weight"]), m["head.bias"]);
  f.logits = reshape(scores, {embeddings.rows() / c.n_ctx, c.n_ctx});
  return f;
}

// Language-model families dispatch.
template <class T>
Forward<T> forward(const Model<T>& m, const Batch& batch) {
  switch (m.config.family) {
    case Family::masked_mixer: return mixer_forward(m, batch);
    case Family::transformer: return transformer_forward(m, batch);
    case Family::bidirectional_mixer:
    case Family::bidirectional_transformer: return bidirectional_forward(m, batch);
    case Family::mixer_autoencoder:
    case Family::transformer_autoencoder: return autoencoder_forward(m, batch);
    case Family::retrieval_mixer: break;
  }
  throw ConfigError("forward() over tokens is undefined for retrieval_mixer; use retrieval_mixer_forward");
}

// Many-token prediction input: positions >= prefix_len receive the learned
// placeholder instead of their token.
template <class T>
Forward<T> many_token_forward(const Model<T>& m, const Batch& batch, std::size_t prefix_len) {
  detail::expect_family(m.config, {Family::masked_mixer, Family::transformer}, "many_token_forward");
  if (!m.params.contains("placeholder")) throw ConfigError("many-token prediction needs a model built with placeholder=true");
  if (prefix_len == 0 || prefix_len >= m.config.n_ctx) throw ConfigError("prefix_len must lie in [1, n_ctx)");
  const std::size_t n = m.config.n_ctx;
  Tensor<T> e = embedding(batch.ids, m["wte"]);
  std::vector<Tensor<T>> parts;
  for (std::size_t b = 0; b < batch.size; ++b) {
    parts.push_back(slice_rows(e, b * n, prefix_len));
    parts.push_back(repeat_row(m["placeholder"], n - prefix_len));
  }
  std::vector<std::uint8_t> pad;
  if (m.config.family == Family::transformer) {
    pad = batch.pad_mask(m.config.pad_id);
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t i = prefix_len; i < n; ++i) pad[b * n + i] = 0;
  }
  return forward_embedded(m, concat_rows(parts), pad);
}

// Sequence embedding used by both retrieval paths: the last hidden layer at
// the second-to-last position for causal LMs, the encoder bottleneck for
// autoencoders. Returns B x d_model.
template <class T>
Tensor<T> extract_embeddings(const Model<T>& m, const Batch& batch) {
  switch (m.config.family) {
    case Family::masked_mixer:
    case Family::transformer: {
      Forward<T> f = forward(m, batch);
      std::vector<std::size_t> rows;
      for (std::size_t b = 0; b < batch.size; ++b) rows.push_back(b * batch.n_ctx + batch.n_ctx - 2);
      return gather_rows(f.hidden.back(), std::move(rows));
    }
    case Family::mixer_autoencoder:
    case Family::transformer_autoencoder: {
      const ModelConfig& c = m.config;
      const auto pad = batch.pad_mask(c.pad_id);
      auto hidden = run_stack(m, "encoder", embedding(batch.ids, m["wte"]), MaskDirection::forward, pad);
      return gather_rows(hidden.back(), bottleneck_rows(batch, c.pad_id));
    }
    default: break;
  }
  throw ConfigError("embedding extraction is undefined for family " + to_string(m.config.family));
}

// Closed-form parameter count, independent of make_model.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, n = c.n_ctx, k = c.kernel_k, v = c.vocab;
  auto mixer_layer = [&] {
    std::size_t token = 0;
    if (c.expansion == 2) {
      token = k * 2 * n * n + 2 * n + k * n * 2 * n + n;
    } else if (c.n_heads == 1) {
      token = k * n * n + n;
    } else {
      token = 2 * (d * d + d) + c.n_heads * (k * n * n + n);
    }
    return 4 * d + token + d * c.ff_mult * d + c.ff_mult * d + c.ff_mult * d * d + d;
  };
  auto transformer_layer = [&] {
    const std::size_t h = std::max<std::size_t>(1, 2 * c.ff_mult * d / 3);
    return 2 * d + 4 * d * d + 3 * d * h;
  };
  const bool mixer = is_mixer(c.family);
  const std::size_t stack = c.n_layers * (mixer ? mixer_layer() : transformer_layer()) + (mixer ? 0 : d);
  std::size_t total = 0;
  switch (c.family) {
    case Family::masked_mixer:
    case Family::transformer: total = v * d + stack + d * v; break;
    case Family::bidirectional_mixer:
    case Family::bidirectional_transformer: total = v * d * (c.share_wte ? 1 : 2) + 2 * stack + 2 * d * d + d * v; break;
    case Family::mixer_autoencoder:
    case Family::transformer_autoencoder: total = v * d + 2 * stack + d * v; break;
    case Family::retrieval_mixer: total = stack + d + 1; break;
  }
  if (c.placeholder) total += d;
  return total;
}

}  // namespace mixlab
