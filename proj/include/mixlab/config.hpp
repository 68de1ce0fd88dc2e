#pragma once

// Model architecture description and its plain-text key=value encoding
// (used for --config files and the checkpoint config blob).

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "mixlab/data.hpp"
#include "mixlab/errors.hpp"
#include "mixlab/mask.hpp"

namespace mixlab {

enum class Family {
  masked_mixer,
  transformer,
  bidirectional_mixer,
  bidirectional_transformer,
  mixer_autoencoder,
  transformer_autoencoder,
  retrieval_mixer,
};

inline std::string to_string(Family f) {
  switch (f) {
    case Family::masked_mixer: return "masked_mixer";
    case Family::transformer: return "transformer";
    case Family::bidirectional_mixer: return "bidirectional_mixer";
    case Family::bidirectional_transformer: return "bidirectional_transformer";
    case Family::mixer_autoencoder: return "mixer_autoencoder";
    case Family::transformer_autoencoder: return "transformer_autoencoder";
    case Family::retrieval_mixer: return "retrieval_mixer";
  }
  return "?";
}

inline Family family_from_string(std::string_view s) {
  for (Family f : {Family::masked_mixer, Family::transformer, Family::bidirectional_mixer, Family::bidirectional_transformer,
                   Family::mixer_autoencoder, Family::transformer_autoencoder, Family::retrieval_mixer})
    if (to_string(f) == s) return f;
  throw ConfigError("unknown model family '" + std::string(s) + "'");
}

inline bool is_mixer(Family f) {
  return f == Family::masked_mixer || f == Family::bidirectional_mixer || f == Family::mixer_autoencoder || f == Family::retrieval_mixer;
}
inline bool is_bidirectional(Family f) { return f == Family::bidirectional_mixer || f == Family::bidirectional_transformer; }
inline bool is_autoencoder(Family f) { return f == Family::mixer_autoencoder || f == Family::transformer_autoencoder; }

// Flat key=value lines; '#' starts a comment.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

struct ModelConfig {
  Family family = Family::masked_mixer;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_ctx = 32;
  std::size_t vocab = kVocabSize;
  // Attention heads (transformers) or convolution heads (mixers).
  std::size_t n_heads = 1;
  std::size_t kernel_k = 1;
  // Token-mixing expansion: 1 is the flat mixer, 2 the two-convolution MLP-mixer form.
  std::size_t expansion = 1;
  bool softmax_weights = false;
  PadSide padding_side = PadSide::right;
  std::size_t ff_mult = 4;
  // Bidirectional models join the forward and reverse stacks exactly once.
  std::size_t combine_points = 1;
  bool share_wte = true;
  // Learned suffix input used by many-token prediction.
  bool placeholder = false;
  int pad_id = kPadId;

  MaskDirection mask_direction() const { return family == Family::retrieval_mixer ? MaskDirection::none : MaskDirection::forward; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (n_ctx < 2) fail("n_ctx must be at least 2");
    if (d_model == 0) fail("d_model must be positive");
    if (n_layers == 0) fail("n_layers must be positive");
    if (ff_mult == 0) fail("ff_mult must be positive");
    if (kernel_k == 0 || kernel_k > n_ctx) fail("kernel_k must lie in [1, n_ctx]");
    if (expansion != 1 && expansion != 2) fail("expansion must be 1 or 2");
    if (n_heads == 0) fail("n_heads must be positive");
    if (is_mixer(family)) {
      if (d_model % n_heads != 0) fail("n_heads must divide the convolution projection width (d_model)");
      if (expansion == 2 && n_heads != 1) fail("expanded mixers support a single convolution head");
    } else {
      if (d_model % n_heads != 0) fail("n_heads must divide d_model");
      if ((d_model / n_heads) % 2 != 0) fail("transformer head width must be even for rotary encoding");
      if (kernel_k != 1 || expansion != 1 || softmax_weights) fail("kernel_k, expansion and softmax_weights apply to mixers only");
    }
    if (is_bidirectional(family) && combine_points != 1)
      fail("bidirectional models permit exactly one combination of forward and reverse stacks (got " + std::to_string(combine_points) + ")");
    if (family != Family::retrieval_mixer && (pad_id < 0 || static_cast<std::size_t>(pad_id) >= vocab))
      fail("pad_id must be a vocabulary entry");
    if (placeholder && family != Family::masked_mixer && family != Family::transformer)
      fail("the many-token placeholder applies to causal language models only");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "family=" << to_string(family) << '\n'
       << "d_model=" << d_model << '\n'
       << "n_layers=" << n_layers << '\n'
       << "n_ctx=" << n_ctx << '\n'
       << "vocab=" << vocab << '\n'
       << "n_heads=" << n_heads << '\n'
       << "kernel_k=" << kernel_k << '\n'
       << "expansion=" << expansion << '\n'
       << "softmax_weights=" << (softmax_weights ? "true" : "false") << '\n'
       << "padding_side=" << to_string(padding_side) << '\n'
       << "ff_mult=" << ff_mult << '\n'
       << "combine_points=" << combine_points << '\n'
       << "share_wte=" << (share_wte ? "true" : "false") << '\n'
       << "placeholder=" << (placeholder ? "true" : "false") << '\n'
       << "pad_id=" << pad_id << '\n';
    return os.str();
  }

  // Applies recognised keys and erases them from kv; other keys are left
  // for the caller.
  void apply(KeyValues& kv) {
    auto take = [&](const char* key, auto&& fn) {
      if (auto it = kv.find(key); it != kv.end()) {
        fn(it->second);
        kv.erase(it);
      }
    };
    using detail::parse_bool;
    using detail::parse_size;
    take("family", [&](const std::string& v) { family = family_from_string(v); });
    take("d_model", [&](const std::string& v) { d_model = parse_size("d_model", v); });
    take("n_layers", [&](const std::string& v) { n_layers = parse_size("n_layers", v); });
    take("n_ctx", [&](const std::string& v) { n_ctx = parse_size("n_ctx", v); });
    take("vocab", [&](const std::string& v) { vocab = parse_size("vocab", v); });
    take("n_heads", [&](const std::string& v) { n_heads = parse_size("n_heads", v); });
    take("kernel_k", [&](const std::string& v) { kernel_k = parse_size("kernel_k", v); });
    take("expansion", [&](const std::string& v) { expansion = parse_size("expansion", v); });
    take("softmax_weights", [&](const std::string& v) { softmax_weights = parse_bool("softmax_weights", v); });
    take("padding_side", [&](const std::string& v) { padding_side = pad_side_from_string(v); });
    take("ff_mult", [&](const std::string& v) { ff_mult = parse_size("ff_mult", v); });
    take("combine_points", [&](const std::string& v) { combine_points = parse_size("combine_points", v); });
    take("share_wte", [&](const std::string& v) { share_wte = parse_bool("share_wte", v); });
    take("placeholder", [&](const std::string& v) { placeholder = parse_bool("placeholder", v); });
    take("pad_id", [&](const std::string& v) { pad_id = static_cast<int>(parse_size("pad_id", v)); });
  }

  static ModelConfig from_text(std::string_view text) {
    KeyValues kv = parse_key_values(text);
    ModelConfig cfg;
    cfg.apply(kv);
    if (!kv.empty()) throw ConfigError("unknown model config key '" + kv.begin()->first + "'");
    cfg.validate();
    return cfg;
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace mixlab
