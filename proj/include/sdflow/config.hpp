#pragma once

// Flat key=value run configuration ('#' comments). Every hyperparameter in
// the system has a documented key; unknown keys are rejected. Command-line
// flags override file values. The serialized form is embedded in checkpoints
// so generation commands can rebuild the right architecture.

#include <fstream>
#include <functional>
#include <sstream>

#include "sdflow/trainer.hpp"

namespace sdflow {

struct RunConfig {
  std::string dtype = "f32";  // f32 for training speed, f64 for verification
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;
  std::string corpus_dir = "corpus";
  std::string checkpoint = "sdflow.ckpt";
  std::string log_path = "loss_log.csv";
  std::string out_dir = "out";
};

namespace detail {

struct ConfigKey {
  std::string name;
  std::string desc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
T parse_num(const std::string& key, const std::string& s) {
  std::istringstream is(s);
  T v{};
  is >> v;
  if (is.fail() || !is.eof())
    fail(ErrKind::config, "config: bad value '" + s + "' for key '" + key + "'");
  return v;
}

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline const std::vector<detail::ConfigKey>& config_keys() {
  using detail::ConfigKey;
  using detail::fmt_num;
  using detail::parse_num;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto num = [&k](std::string name, std::string desc, auto getter) {
      using Field = std::remove_reference_t<decltype(*getter(std::declval<RunConfig*>()))>;
      k.push_back({name, desc,
                   [getter](const RunConfig& c) {
                     Field v = *getter(const_cast<RunConfig*>(&c));
                     if constexpr (std::is_integral_v<Field>)
                       return std::to_string(v);
                     else
                       return fmt_num(double(v));
                   },
                   [getter, name](RunConfig& c, const std::string& s) {
                     *getter(&c) = parse_num<Field>(name, s);
                   }});
    };
    auto str = [&k](std::string name, std::string desc, auto getter) {
      k.push_back({name, desc, [getter](const RunConfig& c) {
                     return *getter(const_cast<RunConfig*>(&c));
                   },
                   [getter](RunConfig& c, const std::string& s) { *getter(&c) = s; }});
    };

    str("dtype", "float width: f32 or f64", [](RunConfig* c) { return &c->dtype; });
    num("seed", "master RNG seed", [](RunConfig* c) { return &c->train.seed; });

    // model architecture
    num("scale", "SR factor (2, 4 or 8)", [](RunConfig* c) { return &c->model.scale; });
    num("flow_steps", "flow steps K per level", [](RunConfig* c) { return &c->model.flow_steps; });
    num("cond_flow_steps", "conditional flow steps P",
        [](RunConfig* c) { return &c->model.cond_flow_steps; });
    num("rrdb_hf", "HF conditional extractor blocks", [](RunConfig* c) { return &c->model.rrdb_hf; });
    num("rrdb_deg", "Deg conditional extractor blocks",
        [](RunConfig* c) { return &c->model.rrdb_deg; });
    num("coupling_width", "coupling net hidden width",
        [](RunConfig* c) { return &c->model.coupling_width; });
    num("rrdb_growth", "dense block growth channels",
        [](RunConfig* c) { return &c->model.rrdb_growth; });
    num("extractor_width", "feature extractor width",
        [](RunConfig* c) { return &c->model.extractor_width; });
    num("est_layers", "degradation estimator convs",
        [](RunConfig* c) { return &c->model.est_layers; });
    num("dm_blocks", "DM ResBlocks in the content extractor",
        [](RunConfig* c) { return &c->model.dm_blocks; });
    num("mog_components", "mixture components N",
        [](RunConfig* c) { return &c->model.mog_components; });
    num("disc_base", "discriminator base width", [](RunConfig* c) { return &c->model.disc_base; });
    num("init_seed", "weight initialization seed", [](RunConfig* c) { return &c->model.init_seed; });
    num("proxy_seed", "frozen feature-proxy seed", [](RunConfig* c) { return &c->model.proxy_seed; });

    // corpus
    num("corpus_n", "synthetic corpus size", [](RunConfig* c) { return &c->corpus.n_images; });
    num("corpus_size", "HR image side", [](RunConfig* c) { return &c->corpus.size; });
    num("blur_lo", "blur sigma lower bound", [](RunConfig* c) { return &c->corpus.blur_lo; });
    num("blur_hi", "blur sigma upper bound", [](RunConfig* c) { return &c->corpus.blur_hi; });
    num("noise_lo", "noise sigma lower bound", [](RunConfig* c) { return &c->corpus.noise_lo; });
    num("noise_hi", "noise sigma upper bound", [](RunConfig* c) { return &c->corpus.noise_hi; });

    // trainer
    num("iters_pretrain", "phase 1 iterations",
        [](RunConfig* c) { return &c->train.iters_pretrain; });
    num("iters_forward", "phase 2 iterations", [](RunConfig* c) { return &c->train.iters_forward; });
    num("iters_finetune", "phase 3 iterations",
        [](RunConfig* c) { return &c->train.iters_finetune; });
    num("lr_model", "model learning rate", [](RunConfig* c) { return &c->train.lr_model; });
    num("lr_disc", "discriminator learning rate", [](RunConfig* c) { return &c->train.lr_disc; });
    num("accum", "gradient accumulation count", [](RunConfig* c) { return &c->train.accum; });
    num("batch", "mini-batch size", [](RunConfig* c) { return &c->train.batch; });
    num("patch_hr", "HR patch size", [](RunConfig* c) { return &c->train.patch_hr; });
    num("grad_clip", "global gradient-norm clip (0 = off)",
        [](RunConfig* c) { return &c->train.grad_clip; });
    num("checkpoint_every", "rolling checkpoint interval",
        [](RunConfig* c) { return &c->train.checkpoint_every; });

    // loss weights
    num("alpha", "content feature-term weight",
        [](RunConfig* c) { return &c->train.weights.alpha; });
    num("beta1", "latent magnitude regularizer",
        [](RunConfig* c) { return &c->train.weights.beta1; });
    num("beta2", "latent consistency weight", [](RunConfig* c) { return &c->train.weights.beta2; });
    num("lambda1", "DS pixel weight", [](RunConfig* c) { return &c->train.weights.lambda1; });
    num("lambda2", "DS feature weight", [](RunConfig* c) { return &c->train.weights.lambda2; });
    num("lambda3", "DS adversarial weight", [](RunConfig* c) { return &c->train.weights.lambda3; });
    num("lambda4", "SR pixel weight", [](RunConfig* c) { return &c->train.weights.lambda4; });
    num("lambda5", "SR feature weight", [](RunConfig* c) { return &c->train.weights.lambda5; });
    num("lambda6", "SR adversarial weight", [](RunConfig* c) { return &c->train.weights.lambda6; });
    num("tau_pixel", "sampling temperature for pixel losses",
        [](RunConfig* c) { return &c->train.weights.tau_pixel; });
    num("tau_perceptual", "sampling temperature for feature/GAN losses",
        [](RunConfig* c) { return &c->train.weights.tau_perceptual; });

    // paths
    str("corpus_dir", "corpus directory", [](RunConfig* c) { return &c->corpus_dir; });
    str("checkpoint", "checkpoint path", [](RunConfig* c) { return &c->checkpoint; });
    str("log", "loss log CSV path", [](RunConfig* c) { return &c->log_path; });
    str("out_dir", "output directory", [](RunConfig* c) { return &c->out_dir; });
    return k;
  }();
  return keys;
}

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  fail(ErrKind::config, "config: unknown key '" + key + "'");
}

inline std::string config_serialize(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << "=" << k.get(cfg) << "\n";
  return os.str();
}

inline void config_parse_text(RunConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrKind::config, "config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto ke = key.find_last_not_of(" \t");
    key = key.substr(0, ke + 1);
    auto vb = val.find_first_not_of(" \t");
    val = vb == std::string::npos ? "" : val.substr(vb);
    config_set(cfg, key, val);
  }
}

inline void config_load_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrKind::io, "cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  config_parse_text(cfg, ss.str());
}

// keeps the data-generation knobs in sync when only one side was set
inline void config_finalize(RunConfig& cfg) {
  require(cfg.dtype == "f32" || cfg.dtype == "f64", ErrKind::config,
          "dtype must be f32 or f64, got '" + cfg.dtype + "'");
  cfg.corpus.scale = cfg.model.scale;
  cfg.corpus.seed = cfg.train.seed;
}

}  // namespace sdflow
