#pragma once

// Command-line front end. run_cli() parses argv, dispatches one subcommand
// and returns the process exit code: 0 success, 2 usage error, 1 runtime
// failure. Every setting can come from a flag (--batch-size) or from the
// --config key=value file (batch_size); flags win.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mixlab/checkpoint.hpp"
#include "mixlab/generate.hpp"
#include "mixlab/inversion.hpp"
#include "mixlab/jl.hpp"
#include "mixlab/retrieval.hpp"
#include "mixlab/training.hpp"

namespace mixlab {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli {

inline std::string dashed(std::string key) {
  for (auto& ch : key)
    if (ch == '_') ch = '-';
  return "--" + key;
}

template <class V>
V parse_value(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    if constexpr (std::is_same_v<V, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<V, bool>) {
      return detail::parse_bool(key, text);
    } else if constexpr (std::is_floating_point_v<V>) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return static_cast<V>(v);
    } else if constexpr (std::is_signed_v<V>) {
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return static_cast<V>(v);
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
      const unsigned long long v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return static_cast<V>(v);
    }
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': cannot parse '" + text + "'");
  }
}

// Registers each setting as a flag and as a config-file key.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {}

  template <class V>
  CLI::Option* add(const std::string& key, V& target, const std::string& help) {
    CLI::Option* opt = app_->add_option(dashed(key), target, help);
    if constexpr (!std::is_same_v<V, bool>) opt->capture_default_str();
    bindings_.push_back({key, opt, [&target, key](const std::string& text) { target = parse_value<V>(key, text); }});
    return opt;
  }

  // Applies config-file values for settings not given as flags; consumed
  // keys are erased from kv.
  void apply(KeyValues& kv) const {
    for (const auto& b : bindings_) {
      auto it = kv.find(b.key);
      if (it == kv.end()) continue;
      if (b.option->count() == 0) b.set(it->second);
      kv.erase(it);
    }
  }

  bool given(const std::string& key) const {
    for (const auto& b : bindings_)
      if (b.key == key) return b.option->count() > 0;
    return false;
  }

 private:
  struct Binding {
    std::string key;
    CLI::Option* option;
    std::function<void(const std::string&)> set;
  };
  CLI::App* app_;
  std::vector<Binding> bindings_;
};

// Model architecture settings as strings/numbers, turned into a
// ModelConfig after parsing.
struct ModelFlags {
  std::string family;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_ctx = 32;
  std::size_t n_heads = 1;
  std::size_t kernel_k = 1;
  std::size_t expansion = 1;
  bool softmax_weights = false;
  std::string padding_side = "right";
  std::size_t ff_mult = 4;
  bool share_wte = true;

  void bind(Settings& s) {
    s.add("family", family, "model family");
    s.add("d_model", d_model, "hidden width");
    s.add("n_layers", n_layers, "number of blocks");
    s.add("n_ctx", n_ctx, "context length");
    s.add("n_heads", n_heads, "attention or convolution heads");
    s.add("kernel_k", kernel_k, "mixer convolution kernel size");
    s.add("expansion", expansion, "mixer token-mixing expansion (1 or 2)");
    s.add("softmax_weights", softmax_weights, "softmax-normalised convolution weights (true/false)");
    s.add("padding_side", padding_side, "left or right");
    s.add("ff_mult", ff_mult, "feedforward width multiplier");
    s.add("share_wte", share_wte, "bidirectional stacks share the embedding (true/false)");
  }

  ModelConfig build() const {
    try {
      ModelConfig c;
      c.family = family_from_string(family);
      c.d_model = d_model;
      c.n_layers = n_layers;
      c.n_ctx = n_ctx;
      c.n_heads = n_heads;
      c.kernel_k = kernel_k;
      c.expansion = expansion;
      c.softmax_weights = softmax_weights;
      c.padding_side = pad_side_from_string(padding_side);
      c.ff_mult = ff_mult;
      c.share_wte = share_wte;
      return c;
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
};

struct Globals {
  std::uint64_t seed = 0;
  std::string precision = "train32";
  std::string config;
  std::string out = "mixlab_out";
};

inline std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_value<std::size_t>("sizes", item));
  if (out.empty()) throw UsageError("sizes must list at least one value");
  return out;
}

class Run {
 public:
  Run(const Globals& g, std::string command, std::ostream& out) : g_(g), command_(std::move(command)), out_(out) {}

  void prepare_dir() const { std::filesystem::create_directories(g_.out); }
  std::string path(const std::string& name) const { return g_.out + "/" + name; }

  // Writes the config echo: command, globals and every resolved setting.
  void echo(const std::string& body) const {
    prepare_dir();
    std::ofstream f(path("config.txt"));
    if (!f) throw IoError("cannot write '" + path("config.txt") + "'");
    f << "command=" << command_ << "\nseed=" << g_.seed << "\nprecision=" << g_.precision << '\n' << body;
  }

  void write(const std::string& name, const std::string& text) const {
    std::ofstream f(path(name));
    if (!f) throw IoError("cannot write '" + path(name) + "'");
    f << text;
  }

  const Globals& globals() const { return g_; }
  std::ostream& out() const { return out_; }

 private:
  Globals g_;
  std::string command_;
  std::ostream& out_;
};

inline std::string train_echo(const TrainConfig& t) {
  std::ostringstream os;
  os.precision(17);
  os << "objective=" << to_string(t.objective) << "\nsteps=" << t.steps << "\nbatch_size=" << t.batch_size << "\nlr=" << t.lr
     << "\nweight_decay=" << t.weight_decay << "\nclip_grad=" << (t.clip_grad ? "true" : "false") << "\neval_every=" << t.eval_every
     << "\neval_limit=" << t.eval_limit << "\nm=" << t.multi_token_m << "\nprefix_len=" << t.prefix_len << '\n';
  return os.str();
}

inline std::string embeddings_path_note(const std::string& p) { return "embeddings=" + p + "\n"; }

// ---------------------------------------------------------------------------
// Commands

struct LmTrainArgs {
  ModelFlags model;
  std::string corpus;
  double split = 0.9;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  double lr = 0.0;  // 0 picks 5e-4 for mixers, 2e-4 for transformers
  double weight_decay = 0.01;
  std::size_t eval_every = 0;
  std::size_t eval_limit = 0;
  bool clip_grad = true;
  std::size_t m = 2;
  std::size_t prefix_len = 16;
};

template <class T>
int run_lm_train(const Run& run, const LmTrainArgs& a, Objective objective) {
  ModelConfig mc = a.model.build();
  if (objective == Objective::many_token) mc.placeholder = true;
  TrainConfig tc;
  tc.objective = objective;
  tc.steps = a.steps;
  tc.batch_size = a.batch_size;
  tc.lr = a.lr > 0 ? a.lr : (is_mixer(mc.family) ? 5e-4 : 2e-4);
  tc.weight_decay = a.weight_decay;
  tc.eval_every = a.eval_every;
  tc.eval_limit = a.eval_limit;
  tc.clip_grad = a.clip_grad;
  tc.multi_token_m = a.m;
  tc.prefix_len = a.prefix_len;
  tc.seed = run.globals().seed;
  tc.out_dir = run.globals().out;
  try {
    mc.validate();
    tc.validate(mc);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (a.corpus.empty()) throw UsageError("--corpus is required");
  run.echo(mc.to_text() + train_echo(tc) + "corpus=" + a.corpus + "\nsplit=" + std::to_string(a.split) + "\n");
  const CorpusSplit corpus = build_corpus(a.corpus, mc.n_ctx, mc.padding_side, a.split, run.globals().seed);
  save_chunk_store(corpus, mc.n_ctx, mc.padding_side, run.path("chunks.bin"));
  Model<T> model = make_model<T>(mc, run.globals().seed);
  const TrainReport r = train(model, corpus, tc);
  run.out() << "trained " << to_string(mc.family) << " (" << model.parameter_count() << " parameters) for " << tc.steps
            << " steps; final eval loss " << r.final_eval_loss() << "; checkpoint " << r.checkpoint << '\n';
  return 0;
}

struct EmbedArgs {
  std::string checkpoint;
  std::string pairs;
};

template <class T>
int run_embed(const Run& run, const EmbedArgs& a) {
  if (a.checkpoint.empty() || a.pairs.empty()) throw UsageError("--checkpoint and --pairs are required");
  run.echo("checkpoint=" + a.checkpoint + "\npairs=" + a.pairs + "\n");
  const Model<T> model = load_checkpoint<T>(a.checkpoint);
  const EmbeddingStore<T> store = embed_corpus(model, read_pairs(a.pairs), a.checkpoint);
  Container c;
  c.blob = "kind=embeddings\nsource=" + a.checkpoint + "\n";
  const std::string dtype = precision_of<T>() == Precision::check64 ? "f64" : "f32";
  c.tensors.push_back({"queries", dtype, store.x.shape(), detail::encode_values<T>(store.x.data())});
  c.tensors.push_back({"targets", dtype, store.y.shape(), detail::encode_values<T>(store.y.data())});
  write_file_bytes(run.path("embeddings.bin"), encode_container(c));
  std::string skipped;
  for (const auto& s : store.skipped) skipped += s + '\n';
  run.write("skipped.txt", skipped);
  run.out() << "embedded " << store.size() << " pairs (" << store.skipped.size() << " skipped) into " << run.path("embeddings.bin") << '\n';
  return 0;
}

template <class T>
EmbeddingStore<T> load_embeddings(const std::string& path) {
  const Container c = decode_container(read_file_bytes(path));
  if (parse_key_values(c.blob)["kind"] != "embeddings") throw FormatError("'" + path + "' does not hold embeddings", 0);
  auto load = [&](const char* name) {
    const StoredTensor& t = c.find(name);
    std::vector<T> v;
    if (t.dtype == "f32") {
      for (float x : detail::decode_values<float>(t)) v.push_back(static_cast<T>(x));
    } else if (t.dtype == "f64") {
      for (double x : detail::decode_values<double>(t)) v.push_back(static_cast<T>(x));
    } else {
      throw FormatError(std::string("embedding tensor '") + name + "' is not floating point", 0);
    }
    return Tensor<T>(t.shape, std::move(v));
  };
  EmbeddingStore<T> s;
  s.x = load("queries");
  s.y = load("targets");
  s.source = parse_key_values(c.blob)["source"];
  return s;
}

template <class T>
std::pair<EmbeddingStore<T>, EmbeddingStore<T>> split_store(const EmbeddingStore<T>& s, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw UsageError("eval_fraction must lie in (0, 1)");
  const std::size_t n = s.size();
  const std::size_t n_eval = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(eval_fraction * static_cast<double>(n))));
  if (n_eval >= n) throw InputError("too few pairs to hold out an evaluation split");
  std::vector<std::size_t> tr(n - n_eval), ev(n_eval);
  std::iota(tr.begin(), tr.end(), std::size_t{0});
  std::iota(ev.begin(), ev.end(), n - n_eval);
  NoGradGuard g;
  EmbeddingStore<T> a{gather_rows(s.x, tr).detach(), gather_rows(s.y, tr).detach(), s.source, {}};
  EmbeddingStore<T> b{gather_rows(s.x, ev).detach(), gather_rows(s.y, ev).detach(), s.source, {}};
  return {a, b};
}

struct IndirectArgs {
  std::string embeddings;
  double eval_fraction = 0.1;
  std::size_t c = 32;
  std::size_t batch_size = 64;
  std::size_t steps = 200;
  double lr = 1e-4;
  std::size_t n_layers = 2;
  std::size_t ff_mult = 4;
  std::size_t eval_every = 0;
};

template <class T>
int run_indirect(const Run& run, const IndirectArgs& a) {
  if (a.embeddings.empty()) throw UsageError("--embeddings is required");
  const EmbeddingStore<T> store = load_embeddings<T>(a.embeddings);
  auto [train_store, eval_store] = split_store(store, a.eval_fraction);
  ModelConfig mc;
  mc.family = Family::retrieval_mixer;
  mc.d_model = store.x.cols();
  mc.n_ctx = a.c;
  mc.n_layers = a.n_layers;
  mc.ff_mult = a.ff_mult;
  IndirectConfig ic;
  ic.c = a.c;
  ic.batch_size = a.batch_size;
  ic.steps = a.steps;
  ic.lr = a.lr;
  ic.seed = run.globals().seed;
  ic.eval_every = a.eval_every;
  try {
    mc.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  run.echo(mc.to_text() + embeddings_path_note(a.embeddings) + "steps=" + std::to_string(a.steps) + "\nbatch_size=" +
           std::to_string(a.batch_size) + "\nlr=" + std::to_string(a.lr) + "\n");
  Model<T> model = make_model<T>(mc, run.globals().seed);
  const TrainReport r = train_indirect(model, train_store, eval_store, ic);
  write_metrics_csv(r.metrics, run.path("metrics.csv"));
  save_checkpoint(model, run.path("final.ckpt"));
  run.out() << "retrieval model eval loss " << r.final_eval_loss() << " (uniform baseline " << std::log(static_cast<double>(a.c)) << ")\n";
  return 0;
}

template <class T>
std::pair<PairSequences<T>, PairSequences<T>> split_pairs(const std::vector<TextPair>& pairs, const ModelConfig& mc, double eval_fraction) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw UsageError("eval_fraction must lie in (0, 1)");
  const std::size_t n_eval = std::max<std::size_t>(2, static_cast<std::size_t>(std::round(eval_fraction * static_cast<double>(pairs.size()))));
  if (n_eval >= pairs.size()) throw InputError("too few pairs to hold out an evaluation split");
  const std::vector<TextPair> tr(pairs.begin(), pairs.end() - static_cast<std::ptrdiff_t>(n_eval));
  const std::vector<TextPair> ev(pairs.end() - static_cast<std::ptrdiff_t>(n_eval), pairs.end());
  return {encode_pairs<T>(tr, mc), encode_pairs<T>(ev, mc)};
}

template <class T>
std::vector<AccuracyRow> accuracy_on(const Model<T>& model, const std::vector<TextPair>& pairs, const std::vector<std::size_t>& sizes,
                                     std::size_t trials, std::uint64_t seed) {
  const EmbeddingStore<T> store = embed_corpus(model, pairs);
  return eval_topk_accuracy(store.x, store.y, sizes, trials, seed);
}

struct InfoNCEArgs {
  std::string checkpoint;
  std::string pairs;
  double eval_fraction = 0.1;
  std::size_t steps = 100;
  double lr = 1e-4;
  double tau = 0.02;
  std::size_t negatives = 30;
  std::size_t accumulate = 4;
  std::size_t eval_every = 0;
  std::string sizes = "32";
  std::size_t trials = 1000;
};

template <class T>
int run_infonce(const Run& run, const InfoNCEArgs& a) {
  if (a.checkpoint.empty() || a.pairs.empty()) throw UsageError("--checkpoint and --pairs are required");
  const auto sizes = parse_sizes(a.sizes);
  std::ostringstream echo;
  echo << "checkpoint=" << a.checkpoint << "\npairs=" << a.pairs << "\nsteps=" << a.steps << "\nlr=" << a.lr << "\ntau=" << a.tau
       << "\nnegatives=" << a.negatives << "\naccumulate=" << a.accumulate << "\neval_fraction=" << a.eval_fraction << '\n';
  run.echo(echo.str());
  Model<T> model = load_checkpoint<T>(a.checkpoint);
  const std::vector<TextPair> pairs = read_pairs(a.pairs);
  auto [train_pairs, eval_pairs] = split_pairs<T>(pairs, model.config, a.eval_fraction);
  InfoNCEConfig ic;
  ic.tau = a.tau;
  ic.negatives = a.negatives;
  ic.accumulate = a.accumulate;
  ic.steps = a.steps;
  ic.lr = a.lr;
  ic.seed = run.globals().seed;
  ic.eval_every = a.eval_every;
  const TrainReport r = train_infonce(model, train_pairs, eval_pairs, ic);
  write_metrics_csv(r.metrics, run.path("metrics.csv"));
  save_checkpoint(model, run.path("final.ckpt"));
  const std::size_t n_eval = eval_pairs.size();
  const std::vector<TextPair> held(pairs.end() - static_cast<std::ptrdiff_t>(n_eval), pairs.end());
  const auto rows = accuracy_on(model, held, sizes, a.trials, run.globals().seed);
  run.write("accuracy.csv", accuracy_csv(rows));
  run.out() << "InfoNCE eval loss " << r.final_eval_loss() << '\n' << accuracy_csv(rows);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string pairs;
  std::string sizes = "32,256";
  std::size_t trials = 1000;
};

template <class T>
int run_retrieve_eval(const Run& run, const EvalArgs& a) {
  if (a.checkpoint.empty() || a.pairs.empty()) throw UsageError("--checkpoint and --pairs are required");
  const auto sizes = parse_sizes(a.sizes);
  run.echo("checkpoint=" + a.checkpoint + "\npairs=" + a.pairs + "\nsizes=" + a.sizes + "\ntrials=" + std::to_string(a.trials) + "\n");
  const Model<T> model = load_checkpoint<T>(a.checkpoint);
  const auto rows = accuracy_on(model, read_pairs(a.pairs), sizes, a.trials, run.globals().seed);
  run.write("accuracy.csv", accuracy_csv(rows));
  run.out() << accuracy_csv(rows);
  return 0;
}

struct InvertArgs {
  std::string checkpoint;
  std::string text;
  std::size_t samples = 10;
  double eta = 0.0;  // 0 picks 0.1 for mixers, 0.01 for transformers
  std::size_t iters = 500;
  int layer = -1;
  bool last_token = false;
};

template <class T>
int run_invert(const Run& run, const InvertArgs& a) {
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const Model<T> model = load_checkpoint<T>(a.checkpoint);
  InversionConfig ic;
  ic.eta = a.eta > 0 ? a.eta : (is_mixer(model.config.family) ? 0.1 : 0.01);
  ic.n_iters = a.iters;
  ic.layer = a.layer;
  ic.last_token_only = a.last_token;
  try {
    ic.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  std::ostringstream echo;
  echo << "checkpoint=" << a.checkpoint << "\neta=" << ic.eta << "\niters=" << a.iters << "\nlayer=" << a.layer
       << "\nlast_token=" << (a.last_token ? "true" : "false") << "\nsamples=" << a.samples << "\ntext=" << a.text << '\n';
  run.echo(echo.str());
  const std::uint64_t seed = run.globals().seed;
  std::vector<TokenSequence> inputs;
  if (!a.text.empty()) {
    inputs.push_back(encode_text(a.text, model.config));
  } else {
    Rng rng(seed);
    for (std::size_t s = 0; s < a.samples; ++s) {
      std::vector<int> ids(model.config.n_ctx);
      for (auto& t : ids) t = static_cast<int>(rng.uniform_index(0, 256));
      inputs.push_back({ids, PadSide::right});
    }
  }
  const std::string model_id = std::filesystem::path(a.checkpoint).stem().string();
  std::string csv = inversion_csv_header() + "\n";
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const InversionReport r = invert_input(model, inputs[i], ic, seed + i);
    csv += inversion_csv_row(seed + i, model_id, a.layer, model.config.n_ctx, r) + "\n";
    total += r.hamming;
    if (!r.warning.empty()) run.out() << "input " << i << ": " << r.warning << '\n';
  }
  run.write("inversion.csv", csv);
  run.out() << "mean normalized hamming " << total / static_cast<double>(inputs.size()) << " over " << inputs.size() << " inputs\n";
  return 0;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  std::size_t n_new = 16;
};

template <class T>
int run_generate(const Run& run, const GenerateArgs& a) {
  if (a.checkpoint.empty() || a.prompt.empty()) throw UsageError("--checkpoint and --prompt are required");
  run.echo("checkpoint=" + a.checkpoint + "\nprompt=" + a.prompt + "\nn_new=" + std::to_string(a.n_new) + "\n");
  const Model<T> model = load_checkpoint<T>(a.checkpoint);
  const std::vector<int> ids = generate(model, ByteTokenizer::tokenize(a.prompt), a.n_new);
  const std::string text = ByteTokenizer::detokenize(ids);
  run.write("generated.txt", text + "\n");
  run.out() << text << '\n';
  return 0;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli;
  CLI::App app{"mixlab: masked mixer and transformer experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--precision", g.precision, "train32 or check64")->check(CLI::IsMember({"train32", "check64"}))->capture_default_str();
  app.add_option("--config", g.config, "key=value settings file");
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  struct Command {
    CLI::App* app;
    std::unique_ptr<Settings> settings;
    std::function<int(const Run&)> run32, run64;
  };
  std::vector<Command> commands;
  auto add = [&](const char* name, const char* help) -> Command& {
    Command c;
    c.app = app.add_subcommand(name, help);
    c.settings = std::make_unique<Settings>(c.app);
    commands.push_back(std::move(c));
    return commands.back();
  };

  // Language-model training commands.
  struct LmSpec {
    const char* name;
    const char* help;
    Objective objective;
    const char* family;
  };
  const LmSpec lm_specs[] = {
      {"train-clm", "all-next-token causal LM training", Objective::clm, "masked_mixer"},
      {"train-bidir", "bidirectional all-token training", Objective::bidirectional, "bidirectional_mixer"},
      {"train-multitoken", "sequential multi-token prediction", Objective::multi_token, "masked_mixer"},
      {"train-manytoken", "parallel many-token prediction from a prefix", Objective::many_token, "masked_mixer"},
      {"train-autoencoder", "sequence autoencoder training", Objective::autoencoder, "mixer_autoencoder"},
  };
  std::vector<std::unique_ptr<LmTrainArgs>> lm_args;
  for (const auto& spec : lm_specs) {
    auto a = std::make_unique<LmTrainArgs>();
    a->model.family = spec.family;
    Command& c = add(spec.name, spec.help);
    a->model.bind(*c.settings);
    Settings& s = *c.settings;
    s.add("corpus", a->corpus, "UTF-8 text corpus");
    s.add("split", a->split, "train fraction of chunks");
    s.add("steps", a->steps, "optimizer steps");
    s.add("batch_size", a->batch_size, "sequences per step");
    s.add("lr", a->lr, "peak learning rate (0 = family default)");
    s.add("weight_decay", a->weight_decay, "AdamW weight decay");
    s.add("eval_every", a->eval_every, "evaluate and checkpoint every N steps (0 = end only)");
    s.add("eval_limit", a->eval_limit, "max eval sequences (0 = all)");
    s.add("clip_grad", a->clip_grad, "clip gradient global norm at 1 (true/false)");
    if (spec.objective == Objective::multi_token) s.add("m", a->m, "number of sequential passes");
    if (spec.objective == Objective::many_token) s.add("prefix_len", a->prefix_len, "positions given as input");
    LmTrainArgs* ap = a.get();
    const Objective obj = spec.objective;
    c.run32 = [ap, obj](const Run& r) { return run_lm_train<float>(r, *ap, obj); };
    c.run64 = [ap, obj](const Run& r) { return run_lm_train<double>(r, *ap, obj); };
    lm_args.push_back(std::move(a));
  }

  EmbedArgs embed_args;
  {
    Command& c = add("embed", "embed query/target pairs with a trained model");
    c.settings->add("checkpoint", embed_args.checkpoint, "model checkpoint");
    c.settings->add("pairs", embed_args.pairs, "pair corpus (query<TAB>target lines)");
    c.run32 = [&](const Run& r) { return run_embed<float>(r, embed_args); };
    c.run64 = [&](const Run& r) { return run_embed<double>(r, embed_args); };
  }
  IndirectArgs indirect_args;
  {
    Command& c = add("train-retrieval-indirect", "train a retrieval mixer on frozen embeddings");
    Settings& s = *c.settings;
    s.add("embeddings", indirect_args.embeddings, "file written by embed");
    s.add("eval_fraction", indirect_args.eval_fraction, "held-out fraction of pairs");
    s.add("c", indirect_args.c, "candidates per query including the query row");
    s.add("batch_size", indirect_args.batch_size, "queries per step");
    s.add("steps", indirect_args.steps, "optimizer steps");
    s.add("lr", indirect_args.lr, "peak learning rate");
    s.add("n_layers", indirect_args.n_layers, "retrieval mixer blocks");
    s.add("ff_mult", indirect_args.ff_mult, "feedforward width multiplier");
    s.add("eval_every", indirect_args.eval_every, "evaluate every N steps (0 = end only)");
    c.run32 = [&](const Run& r) { return run_indirect<float>(r, indirect_args); };
    c.run64 = [&](const Run& r) { return run_indirect<double>(r, indirect_args); };
  }
  InfoNCEArgs infonce_args;
  {
    Command& c = add("train-retrieval-infonce", "fine-tune an embedding model with InfoNCE");
    Settings& s = *c.settings;
    s.add("checkpoint", infonce_args.checkpoint, "pretrained model checkpoint");
    s.add("pairs", infonce_args.pairs, "pair corpus");
    s.add("eval_fraction", infonce_args.eval_fraction, "held-out fraction of pairs");
    s.add("steps", infonce_args.steps, "optimizer steps");
    s.add("lr", infonce_args.lr, "peak learning rate");
    s.add("tau", infonce_args.tau, "temperature");
    s.add("negatives", infonce_args.negatives, "non-matching targets per query");
    s.add("accumulate", infonce_args.accumulate, "queries per optimizer update");
    s.add("eval_every", infonce_args.eval_every, "evaluate every N steps (0 = end only)");
    s.add("sizes", infonce_args.sizes, "comma-separated n for top-1@n on held-out pairs");
    s.add("trials", infonce_args.trials, "draws per n");
    c.run32 = [&](const Run& r) { return run_infonce<float>(r, infonce_args); };
    c.run64 = [&](const Run& r) { return run_infonce<double>(r, infonce_args); };
  }
  EvalArgs eval_args;
  {
    Command& c = add("retrieve-eval", "top-1@n cosine retrieval accuracy");
    Settings& s = *c.settings;
    s.add("checkpoint", eval_args.checkpoint, "model checkpoint");
    s.add("pairs", eval_args.pairs, "pair corpus");
    s.add("sizes", eval_args.sizes, "comma-separated sample sizes n");
    s.add("trials", eval_args.trials, "draws per n");
    c.run32 = [&](const Run& r) { return run_retrieve_eval<float>(r, eval_args); };
    c.run64 = [&](const Run& r) { return run_retrieve_eval<double>(r, eval_args); };
  }
  InvertArgs invert_args;
  {
    Command& c = add("invert", "recover inputs from hidden activations");
    Settings& s = *c.settings;
    s.add("checkpoint", invert_args.checkpoint, "masked_mixer or transformer checkpoint");
    s.add("text", invert_args.text, "input text (default: random byte inputs)");
    s.add("samples", invert_args.samples, "number of random inputs");
    s.add("eta", invert_args.eta, "initial step size (0 = family default)");
    s.add("iters", invert_args.iters, "gradient descent iterations");
    s.add("layer", invert_args.layer, "block index to match (-1 = last)");
    s.add("last_token", invert_args.last_token, "match only the final position (true/false)");
    c.run32 = [&](const Run& r) { return run_invert<float>(r, invert_args); };
    c.run64 = [&](const Run& r) { return run_invert<double>(r, invert_args); };
  }
  GenerateArgs gen_args;
  {
    Command& c = add("generate", "greedy generation from a causal LM");
    Settings& s = *c.settings;
    s.add("checkpoint", gen_args.checkpoint, "model checkpoint");
    s.add("prompt", gen_args.prompt, "prompt text");
    s.add("n_new", gen_args.n_new, "tokens to generate");
    c.run32 = [&](const Run& r) { return run_generate<float>(r, gen_args); };
    c.run64 = [&](const Run& r) { return run_generate<double>(r, gen_args); };
  }
  double jl_m = 0.0, jl_eps = 1.0;
  {
    Command& c = add("jl-dim", "Johnson-Lindenstrauss minimum dimension");
    c.settings->add("m", jl_m, "number of points");
    c.settings->add("eps", jl_eps, "distortion in (0, 1]");
    auto body = [&](const Run& r) {
      try {
        jl_validate(jl_m, jl_eps);
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      const JLQuery q = jl_query(jl_m, jl_eps);
      r.out() << jl_csv_header() << '\n' << jl_csv_row(q) << '\n';
      return 0;
    };
    c.run32 = body;
    c.run64 = body;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    for (auto& c : commands) {
      if (!c.app->parsed()) continue;
      if (!g.config.empty()) {
        KeyValues kv = parse_key_values(read_text_file(g.config));
        c.settings->apply(kv);
        if (!kv.empty()) throw UsageError("unknown config key '" + kv.begin()->first + "' for " + c.app->get_name());
      }
      const Run run(g, c.app->get_name(), out);
      return g.precision == "check64" ? c.run64(run) : c.run32(run);
    }
    err << "no subcommand given\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mixlab
