#pragma once

// Byte-level tokenizer, fixed-context chunking with left/right padding,
// corpus splitting and the query/target pair corpus.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mixlab/errors.hpp"
#include "mixlab/random.hpp"

namespace mixlab {

inline constexpr int kPadId = 256;
inline constexpr int kBosId = 257;
inline constexpr int kEosId = 258;
inline constexpr int kVocabSize = 259;

enum class PadSide { left, right };

inline std::string to_string(PadSide s) { return s == PadSide::left ? "left" : "right"; }
inline PadSide pad_side_from_string(std::string_view s) {
  if (s == "left") return PadSide::left;
  if (s == "right") return PadSide::right;
  throw ConfigError("padding side must be 'left' or 'right', got '" + std::string(s) + "'");
}

// Fixed-length token record. Pads are contiguous on `side`.
struct TokenSequence {
  std::vector<int> ids;
  PadSide side = PadSide::right;

  std::size_t size() const { return ids.size(); }
  std::size_t pad_count(int pad_id = kPadId) const {
    std::size_t n = 0;
    for (int t : ids) n += t == pad_id;
    return n;
  }
  std::size_t content_length(int pad_id = kPadId) const { return ids.size() - pad_count(pad_id); }

  // Index of the last non-pad token, or npos when the sequence is all pads.
  std::size_t last_content_index(int pad_id = kPadId) const {
    for (std::size_t i = ids.size(); i-- > 0;)
      if (ids[i] != pad_id) return i;
    return std::string::npos;
  }

  bool pads_contiguous(int pad_id = kPadId) const {
    const std::size_t n = content_length(pad_id);
    const std::size_t p = ids.size() - n;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const bool in_pad_region = side == PadSide::right ? i >= n : i < p;
      if ((ids[i] == pad_id) != in_pad_region) return false;
    }
    return true;
  }
};

// Bytes map to ids 0..255; pad/bos/eos sit above and are never produced by
// tokenize().
class ByteTokenizer {
 public:
  static constexpr int vocab_size() { return kVocabSize; }

  static std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  // Special tokens are dropped.
  static std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int t : ids) {
      if (t < 0 || t >= kVocabSize) throw InputError("detokenize: token id " + std::to_string(t) + " outside vocabulary");
      if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
  }
};

// Pads (or truncates, keeping the leading tokens) to exactly n_ctx.
inline TokenSequence pad_to(std::vector<int> ids, std::size_t n_ctx, PadSide side, int pad_id = kPadId) {
  if (ids.size() > n_ctx) ids.resize(n_ctx);
  const std::size_t pads = n_ctx - ids.size();
  if (side == PadSide::right) {
    ids.insert(ids.end(), pads, pad_id);
  } else {
    ids.insert(ids.begin(), pads, pad_id);
  }
  return TokenSequence{std::move(ids), side};
}

// Splits ids into consecutive n_ctx windows; the final partial window is
// padded on `side`.
inline std::vector<TokenSequence> chunk_and_pad(const std::vector<int>& ids, std::size_t n_ctx, PadSide side, int pad_id = kPadId) {
  if (n_ctx < 2) throw ConfigError("chunk_and_pad: n_ctx must be at least 2");
  std::vector<TokenSequence> out;
  for (std::size_t start = 0; start < ids.size(); start += n_ctx) {
    const std::size_t end = std::min(ids.size(), start + n_ctx);
    out.push_back(pad_to(std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(start), ids.begin() + static_cast<std::ptrdiff_t>(end)),
                         n_ctx, side, pad_id));
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CorpusSplit {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> eval;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Assigns chunk i to train when hash(seed, i) falls below split_ratio. Both
// splits are non-empty whenever there are at least two chunks.
inline CorpusSplit split_chunks(std::vector<TokenSequence> chunks, double split_ratio, std::uint64_t seed = 0x5eed) {
  if (!(split_ratio > 0.0 && split_ratio < 1.0))
    throw ConfigError("split ratio must lie strictly between 0 and 1 so both splits exist, got " + std::to_string(split_ratio));
  CorpusSplit out;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const double u = static_cast<double>(detail::splitmix64(seed ^ detail::splitmix64(i)) >> 11) * 0x1.0p-53;
    (u < split_ratio ? out.train : out.eval).push_back(std::move(chunks[i]));
  }
  if (out.train.size() + out.eval.size() >= 2) {
    if (out.eval.empty()) {
      out.eval.push_back(std::move(out.train.back()));
      out.train.pop_back();
    } else if (out.train.empty()) {
      out.train.push_back(std::move(out.eval.back()));
      out.eval.pop_back();
    }
  }
  return out;
}

inline CorpusSplit build_corpus_from_text(std::string_view text, std::size_t n_ctx, PadSide side, double split_ratio,
                                          std::uint64_t seed = 0x5eed) {
  return split_chunks(chunk_and_pad(ByteTokenizer::tokenize(text), n_ctx, side), split_ratio, seed);
}

inline CorpusSplit build_corpus(const std::string& path, std::size_t n_ctx, PadSide side, double split_ratio, std::uint64_t seed = 0x5eed) {
  return build_corpus_from_text(read_text_file(path), n_ctx, side, split_ratio, seed);
}

// ---------------------------------------------------------------------------
// Query/target pairs

struct TextPair {
  std::string query;
  std::string target;
};

// One pair per line: query<TAB>target. Blank lines are skipped.
inline std::vector<TextPair> parse_pairs(std::string_view text) {
  std::vector<TextPair> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos)
      throw InputError("pair corpus line " + std::to_string(line_no) + " has no TAB separator");
    out.push_back({std::string(line.substr(0, tab)), std::string(line.substr(tab + 1))});
  }
  return out;
}

inline std::vector<TextPair> read_pairs(const std::string& path) { return parse_pairs(read_text_file(path)); }

inline std::string format_pairs(const std::vector<TextPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += p.query + '\t' + p.target + '\n';
  return out;
}

// Synthetic key/value pairs: query and target share a random lowercase key
// prefix; the target continues with random value groups. Every target has
// the same length, so keys sit at fixed positions after padding.
inline std::vector<TextPair> synthetic_pairs(std::size_t count, Rng& rng, std::size_t key_len = 6, std::size_t value_groups = 3) {
  auto letters = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + rng.uniform_index(0, 26)));
    return s;
  };
  std::vector<TextPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string key = letters(key_len);
    std::string target = key + ":";
    for (std::size_t g = 0; g < value_groups; ++g) target += " " + letters(4);
    target += ".";
    out.push_back({key + "?", std::move(target)});
  }
  return out;
}

}  // namespace mixlab
