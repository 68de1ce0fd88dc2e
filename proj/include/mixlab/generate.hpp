#pragma once

// Greedy decoding for causal LMs. The prompt sits at positions [0, p) of a
// pad-filled context; each step reruns the full forward pass and writes the
// argmax of the logits at the last filled position into the next slot.

#include <vector>

#include "mixlab/model.hpp"

namespace mixlab {

template <class T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j)
    if (logits(row, j) > logits(row, best)) best = j;
  return static_cast<int>(best);
}

// Returns prompt followed by n_new generated tokens.
template <class T>
std::vector<int> generate(const Model<T>& model, const std::vector<int>& prompt, std::size_t n_new) {
  const ModelConfig& c = model.config;
  if (c.family != Family::masked_mixer && c.family != Family::transformer)
    throw ConfigError("generation needs a causal language model, not " + to_string(c.family));
  if (prompt.empty()) throw InputError("generation needs a non-empty prompt");
  if (prompt.size() + n_new > c.n_ctx)
    throw InputError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(n_new) + " new tokens exceeds n_ctx " +
                     std::to_string(c.n_ctx));
  NoGradGuard no_grad;
  TokenSequence seq = pad_to(prompt, c.n_ctx, PadSide::right, c.pad_id);
  std::vector<int> out = prompt;
  for (std::size_t step = 0; step < n_new; ++step) {
    const std::size_t pos = prompt.size() - 1 + step;
    const Forward<T> f = forward(model, make_batch(seq, c));
    const int next = argmax_row(f.logits, pos);
    seq.ids[pos + 1] = next;
    out.push_back(next);
  }
  return out;
}

}  // namespace mixlab
