#pragma once

// Input recovery by gradient descent on the embedding.
//
// Given true tokens x with embedding e, the target activations O_l(e) are
// fixed and a random e_0 ~ N(1/2, 1/20) is moved by plain gradient descent
// on ||O_l(e_n) - O_l(e)||_1 with a step size falling linearly from eta to
// eta/10. The best iterate is decoded through the pseudoinverse of the
// embedding matrix W (d_model x vocab) and scored with the normalized
// Hamming metric against x.

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mixlab/linalg.hpp"
#include "mixlab/model.hpp"
#include "mixlab/random.hpp"

namespace mixlab {

struct InversionConfig {
  std::size_t n_iters = 500;
  double eta = 0.1;
  double init_mean = 0.5;
  double init_std = 0.05;
  double calib_noise_std = 0.05;
  // Block index whose output is matched; -1 selects the last block.
  int layer = -1;
  // Match only the final position of that layer.
  bool last_token_only = false;

  void validate() const {
    if (n_iters < 1) throw ConfigError("inversion needs at least one iteration");
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("inversion eta must be positive");
    if (init_std < 0.0 || calib_noise_std < 0.0) throw ConfigError("noise standard deviations must be non-negative");
  }

  // Step size at iteration n (0-based): eta at n = 0, eta/10 at n = N-1.
  double eta_at(std::size_t n) const {
    if (n_iters == 1) return eta;
    const double frac = static_cast<double>(n) / static_cast<double>(n_iters - 1);
    return eta * (1.0 - 0.9 * frac);
  }
};

struct InversionReport {
  std::vector<double> history;   // objective at e_0 .. e_N
  std::size_t best_iteration = 0;
  double final_distance = 0.0;   // objective of the best iterate
  double epsilon = 0.0;
  bool converged = false;        // final_distance < epsilon
  TokenSequence decoded;
  double hamming = 0.0;
  std::string warning;           // set when the calibration decode check fails
};

// Fraction of non-pad positions of x where y disagrees. Pads of y are
// compared like any other token. All-pad x gives 0.
inline double normalized_hamming(const TokenSequence& x, const TokenSequence& y, int pad_id = kPadId) {
  if (x.size() != y.size())
    throw InputError("normalized_hamming: lengths differ (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  std::size_t counted = 0, wrong = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x.ids[i] == pad_id) continue;
    ++counted;
    wrong += x.ids[i] != y.ids[i];
  }
  return counted ? static_cast<double>(wrong) / static_cast<double>(counted) : 0.0;
}

// a = W+ e^T, then argmax over the token axis for each position. w_pinv is
// vocab x d_model; e holds one embedding per row.
template <class T>
TokenSequence decode_with_pinv(const Tensor<T>& w_pinv, const Tensor<T>& e) {
  if (w_pinv.rank() != 2 || e.rank() != 2 || w_pinv.cols() != e.cols())
    throw DimensionError("decode: pseudoinverse " + shape_str(w_pinv.shape()) + " does not match embeddings " + shape_str(e.shape()));
  const std::size_t vocab = w_pinv.rows(), n = e.rows();
  const auto p = detail::view(w_pinv.node()->data, vocab, w_pinv.cols()).template cast<double>();
  const auto x = detail::view(e.node()->data, n, e.cols()).template cast<double>();
  const Eigen::MatrixXd a = p * x.transpose();  // vocab x n
  TokenSequence out;
  out.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    a.col(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    out.ids[i] = static_cast<int>(best);
  }
  return out;
}

// w is d_model x vocab.
template <class T>
TokenSequence decode_embedding(const Tensor<T>& w, const Tensor<T>& e) {
  return decode_with_pinv(pinv(w), e);
}

namespace detail {

template <class T>
class ActivationProbe {
 public:
  ActivationProbe(const Model<T>& m, const TokenSequence& tokens, const InversionConfig& cfg) : model_(clone(m)), cfg_(cfg) {
    const Family f = m.config.family;
    if (f != Family::masked_mixer && f != Family::transformer)
      throw ConfigError("input inversion supports masked_mixer and transformer models, not " + to_string(f));
    if (tokens.size() != m.config.n_ctx) throw InputError("inversion input must have n_ctx tokens");
    const int n_layers = static_cast<int>(m.config.n_layers);
    if (cfg.layer < -1 || cfg.layer >= n_layers)
      throw ConfigError("inversion layer " + std::to_string(cfg.layer) + " outside [0, " + std::to_string(n_layers) + ")");
    layer_ = cfg.layer < 0 ? static_cast<std::size_t>(n_layers - 1) : static_cast<std::size_t>(cfg.layer);
    model_.set_trainable(false);
    if (f == Family::transformer) pad_ = make_batch(tokens, m.config).pad_mask(m.config.pad_id);
  }

  Tensor<T> operator()(const Tensor<T>& e) const {
    auto hidden = run_stack(model_, "blocks", e, MaskDirection::forward, pad_);
    Tensor<T> h = hidden[layer_];
    if (cfg_.last_token_only) h = slice_rows(h, h.rows() - 1, 1);
    return h;
  }

  const Model<T>& model() const { return model_; }

 private:
  Model<T> model_;
  InversionConfig cfg_;
  std::size_t layer_ = 0;
  std::vector<std::uint8_t> pad_;
};

template <class T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace detail

// epsilon = ||O_l(e + N(0, std)) - O_l(e)||_1. Also reports whether the
// noisy embedding still decodes to the true tokens.
template <class T>
double calibrate_epsilon(const Model<T>& model, const TokenSequence& tokens, const InversionConfig& cfg, Rng& rng,
                         std::string* warning = nullptr) {
  cfg.validate();
  NoGradGuard no_grad;
  detail::ActivationProbe<T> probe(model, tokens, cfg);
  const Tensor<T> e = embedding(tokens.ids, model["wte"]).detach();
  std::vector<T> noisy = detail::values(e);
  for (auto& v : noisy) v += static_cast<T>(rng.normal(0.0, cfg.calib_noise_std));
  const Tensor<T> e_noisy(e.shape(), std::move(noisy));
  const std::vector<T> target = detail::values(probe(e));
  const double eps = static_cast<double>(l1_distance(probe(e_noisy), std::span<const T>(target)).item());
  if (warning) {
    const Tensor<T> wp = pinv(model.embedding_matrix());
    if (decode_with_pinv(wp, e_noisy).ids != decode_with_pinv(wp, e).ids)
      *warning = "calibration noise changes the pseudoinverse decoding";
  }
  return eps;
}

// Gradient descent from a given starting embedding. e_true supplies the
// target activations; only the iterate receives gradient.
template <class T>
InversionReport invert_from(const Model<T>& model, const TokenSequence& tokens, const Tensor<T>& e_start, const InversionConfig& cfg,
                            double epsilon) {
  cfg.validate();
  detail::ActivationProbe<T> probe(model, tokens, cfg);
  const Tensor<T> e_true = embedding(tokens.ids, model["wte"]).detach();
  if (e_start.shape() != e_true.shape())
    throw DimensionError("inversion start " + shape_str(e_start.shape()) + " differs from embedding shape " + shape_str(e_true.shape()));
  std::vector<T> target;
  {
    NoGradGuard no_grad;
    target = detail::values(probe(e_true));
  }

  InversionReport r;
  r.epsilon = epsilon;
  Tensor<T> e = e_start.detach(true);
  std::vector<T> best = detail::values(e);
  double best_value = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n <= cfg.n_iters; ++n) {
    const bool last = n == cfg.n_iters;
    Tensor<T> loss;
    if (last) {
      NoGradGuard no_grad;
      loss = l1_distance(probe(e), std::span<const T>(target));
    } else {
      loss = l1_distance(probe(e), std::span<const T>(target));
    }
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NumericError("inversion objective became non-finite at iteration " + std::to_string(n));
    r.history.push_back(value);
    if (value < best_value) {
      best_value = value;
      r.best_iteration = n;
      best = detail::values(e);
    }
    if (last) break;
    e.zero_grad();
    backward(loss);
    const T step = static_cast<T>(cfg.eta_at(n));
    auto data = e.mutable_data();
    auto grad = e.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(static_cast<double>(grad[i])))
        throw NumericError("non-finite gradient at inversion iteration " + std::to_string(n) + ", element " + std::to_string(i));
      data[i] -= step * grad[i];
    }
  }
  r.final_distance = best_value;
  r.converged = r.final_distance < r.epsilon;
  const Tensor<T> e_best(e_true.shape(), std::move(best));
  r.decoded = decode_with_pinv(pinv(model.embedding_matrix()), e_best);
  r.decoded.side = tokens.side;
  r.hamming = normalized_hamming(tokens, r.decoded, model.config.pad_id);
  return r;
}

// Full procedure: calibrate epsilon, draw e_0 ~ N(init_mean, init_std),
// descend, decode.
template <class T>
InversionReport invert_input(const Model<T>& model, const TokenSequence& tokens, const InversionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::string warning;
  const double eps = calibrate_epsilon(model, tokens, cfg, rng, &warning);
  std::vector<T> start(tokens.size() * model.config.d_model);
  for (auto& v : start) v = static_cast<T>(rng.normal(cfg.init_mean, cfg.init_std));
  InversionReport r = invert_from(model, tokens, Tensor<T>::matrix(tokens.size(), model.config.d_model, std::move(start)), cfg, eps);
  r.warning = warning;
  return r;
}

inline std::string inversion_csv_header() { return "seed,model_id,layer,n_ctx,final_distance,epsilon,converged,hamming"; }

inline std::string inversion_csv_row(std::uint64_t seed, const std::string& model_id, int layer, std::size_t n_ctx, const InversionReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << seed << ',' << model_id << ',' << layer << ',' << n_ctx << ',' << r.final_distance << ',' << r.epsilon << ','
     << (r.converged ? 1 : 0) << ',' << r.hamming;
  return os.str();
}

}  // namespace mixlab
