// sdflow: synthetic-corpus generation, unpaired training, bidirectional
// generation (sr / downscale), evaluation, and the built-in oracle suites.
//
// Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 divergence, 5 artifact mismatch.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

#include "sdflow/config.hpp"
#include "sdflow/eval.hpp"
#include "sdflow/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sdflow;

namespace {

int exit_code(const Error& e) {
  switch (e.kind) {
    case ErrKind::io: return 3;
    case ErrKind::format: return 3;
    case ErrKind::divergence: return 4;
    case ErrKind::mismatch: return 5;
    default: return 2;
  }
}

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;  // key=value overrides
  std::string dtype;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_file, "flat key=value config file ('#' comments)");
  cmd->add_option("--set", o.sets, "override a config key, e.g. --set flow_steps=4")
      ->take_all();
  cmd->add_option("--dtype", o.dtype, "float width: f32 or f64");
  cmd->add_option("--seed", o.seed, "master RNG seed");
}

RunConfig build_config(const CommonOpts& o, const std::string& embedded = "") {
  RunConfig cfg;
  if (!embedded.empty()) config_parse_text(cfg, embedded);
  if (!o.config_file.empty()) config_load_file(cfg, o.config_file);
  for (const auto& kv : o.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      fail(ErrKind::config, "--set expects key=value, got '" + kv + "'");
    config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!o.dtype.empty()) cfg.dtype = o.dtype;
  if (o.seed >= 0) cfg.train.seed = uint64_t(o.seed);
  config_finalize(cfg);
  return cfg;
}

std::string config_key_help() {
  std::string out = "\nConfig keys (key=value; defaults shown):\n";
  RunConfig defaults;
  for (const auto& k : config_keys()) {
    out += "  " + k.name + " = " + k.get(defaults);
    out += "  # " + k.desc + "\n";
  }
  return out;
}

// ---- synth-data -------------------------------------------------------------

int cmd_synth_data(const CommonOpts& o, const std::string& out_dir_flag) {
  RunConfig cfg = build_config(o);
  std::string dir = out_dir_flag.empty() ? cfg.corpus_dir : out_dir_flag;
  if (cfg.corpus.size % cfg.corpus.scale != 0 || (cfg.corpus.size / cfg.corpus.scale) % 2 != 0)
    fail(ErrKind::config, "corpus_size " + std::to_string(cfg.corpus.size) +
                              " must be divisible by scale " + std::to_string(cfg.corpus.scale) +
                              " with an even LR side");
  Corpus corpus = synth_corpus<float>(cfg.corpus);
  save_corpus(corpus, dir);
  std::cout << "corpus: " << corpus.size() << " HR/LR pairs, HR " << cfg.corpus.size << "x"
            << cfg.corpus.size << ", scale " << cfg.corpus.scale << ", seed " << cfg.corpus.seed
            << "\n  train/val/test = " << corpus.ids(Corpus::Split::train).size() << "/"
            << corpus.ids(Corpus::Split::val).size() << "/"
            << corpus.ids(Corpus::Split::test).size() << "\n  written to " << dir << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

template <class R>
int run_train(RunConfig cfg, const std::string& phase, long iters_override,
              const std::string& resume, const std::string& corpus_dir) {
  if (iters_override >= 0) {
    if (phase == "pretrain")
      cfg.train.iters_pretrain = iters_override;
    else if (phase == "forward")
      cfg.train.iters_forward = iters_override;
    else if (phase == "finetune")
      cfg.train.iters_finetune = iters_override;
    else
      fail(ErrKind::config, "--iters requires --phase pretrain|forward|finetune");
  }
  std::string dir = corpus_dir.empty() ? cfg.corpus_dir : corpus_dir;
  Corpus corpus;
  if (fs::exists(dir + "/hr")) {
    corpus = load_corpus(dir, cfg.model.scale);
    std::cout << "loaded corpus with " << corpus.size() << " pairs from " << dir << "\n";
  } else {
    std::cout << "no corpus at " << dir << "; generating " << cfg.corpus.n_images
              << " synthetic pairs\n";
    corpus = synth_corpus<R>(cfg.corpus);
    save_corpus(corpus, dir);
  }

  SDFlowModel<R> model(cfg.model);
  cfg.train.log_path = cfg.log_path;
  cfg.train.checkpoint_path = cfg.checkpoint;
  cfg.train.config_blob = config_serialize(cfg);
  Trainer<R> trainer(model, corpus, cfg.train);
  if (!resume.empty()) {
    trainer.load_checkpoint(Checkpoint::load(resume));
    std::cout << "resumed from " << resume << " at iteration " << trainer.iteration() << "\n";
  }

  long until = cfg.train.total_iters();
  if (phase == "pretrain") until = cfg.train.iters_pretrain;
  else if (phase == "forward") until = cfg.train.iters_pretrain + cfg.train.iters_forward;
  else if (phase != "finetune" && phase != "all")
    fail(ErrKind::config, "--phase must be pretrain, forward, finetune or all");

  std::cout << "training to iteration " << until << " (phases "
            << cfg.train.iters_pretrain << "/" << cfg.train.iters_forward << "/"
            << cfg.train.iters_finetune << ", dtype " << cfg.dtype << ")\n";
  trainer.run(until);
  trainer.save_checkpoint(cfg.checkpoint, cfg.train.config_blob);
  std::cout << "checkpoint written to " << cfg.checkpoint << "\nloss log: " << cfg.log_path
            << "\n";
  return 0;
}

// ---- sr / downscale ----------------------------------------------------------

template <class R>
int run_generate(bool sr_direction, const RunConfig& cfg, const Checkpoint& ck,
                 const std::vector<std::string>& inputs, double tau, long n_samples,
                 const std::string& out_dir) {
  if (tau < 0) fail(ErrKind::parameter, "--tau must be >= 0");
  SDFlowModel<R> model(cfg.model);
  load_model_params(model, ck);
  fs::create_directories(out_dir);

  for (const auto& path : inputs) {
    ImageU8 img = read_png(path);
    Tensor<R> t = to_tensor<R>(img);
    if (!sr_direction) {
      long need = 2 * cfg.model.scale;
      if (img.h % need != 0 || img.w % need != 0)
        fail(ErrKind::parameter, "downscale input dims must be divisible by " +
                                     std::to_string(need) + ", got " + std::to_string(img.h) +
                                     "x" + std::to_string(img.w));
    }
    std::string stem = fs::path(path).stem().string();
    std::vector<Tensor<R>> samples;
    for (long k = 0; k < n_samples; ++k) {
      Rng rng = Rng::derive(cfg.train.seed, 5150, tau == 0.0 ? 0 : uint64_t(k));
      Tensor<R> out = sr_direction ? sr_from_lr(model, t, tau, rng)
                                   : ds_from_hr(model, t, tau, rng);
      samples.push_back(clamp01(out));
      std::string out_path = out_dir + "/" + stem + "_s" + std::to_string(k) + ".png";
      write_png(out_path, to_image(samples.back()));
      std::cout << out_path << "\n";
    }
    if (n_samples >= 2)
      std::cout << stem << ": diversity over " << n_samples << " samples = "
                << diversity(samples) << "\n";
  }
  return 0;
}

// ---- eval ---------------------------------------------------------------------

template <class R>
int run_eval(const RunConfig& cfg, const Checkpoint& ck, const std::string& corpus_dir,
             const std::string& out_dir, bool do_tau_sweep) {
  SDFlowModel<R> model(cfg.model);
  load_model_params(model, ck);
  Corpus corpus = load_corpus(corpus_dir.empty() ? cfg.corpus_dir : corpus_dir, cfg.model.scale);
  auto ids = corpus.ids(Corpus::Split::test);
  if (ids.size() < 16) {  // small corpora: extend with the validation split
    for (long id : corpus.ids(Corpus::Split::val)) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
  }
  fs::create_directories(out_dir);

  auto res = evaluate_model(model, corpus, ids, cfg.train.seed);
  {
    std::ofstream csv(out_dir + "/eval.csv");
    if (!csv) fail(ErrKind::io, "cannot write " + out_dir + "/eval.csv");
    csv << "image_id,metric,value\n";
    csv.precision(10);
    for (auto& r : res.rows) csv << r.id << "," << r.metric << "," << r.value << "\n";
  }
  const auto& s = res.summary;
  json j{{"n_images", s.n_images},
         {"sr", {{"psnr_tau0", s.sr_psnr_tau0}, {"ssim_tau0", s.sr_ssim_tau0},
                 {"psnr_tau0.8", s.sr_psnr_tau08}, {"ssim_tau0.8", s.sr_ssim_tau08},
                 {"psnr_bicubic", s.sr_psnr_bicubic}, {"ssim_bicubic", s.sr_ssim_bicubic},
                 {"diversity_tau0", s.sr_div_tau0}, {"diversity_tau0.8", s.sr_div_tau08}}},
         {"ds", {{"psnr_tau0", s.ds_psnr_tau0}, {"ssim_tau0", s.ds_ssim_tau0},
                 {"psnr_bicubic", s.ds_psnr_bicubic}, {"ssim_bicubic", s.ds_ssim_bicubic},
                 {"diversity_tau0", s.ds_div_tau0}, {"diversity_tau0.8", s.ds_div_tau08},
                 {"fd_generated", s.fd_generated}, {"fd_bicubic", s.fd_bicubic}}}};
  std::ofstream(out_dir + "/summary.json") << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";

  if (do_tau_sweep) {
    auto rows = tau_sweep(model, corpus, ids, {0.0, 0.4, 0.8, 1.2}, cfg.train.seed);
    std::ofstream csv(out_dir + "/tau_sweep.csv");
    csv << "tau,psnr,ssim,diversity\n";
    csv.precision(10);
    for (auto& r : rows) {
      csv << r.tau << "," << r.psnr << "," << r.ssim << "," << r.div << "\n";
      std::cout << "tau " << r.tau << ": psnr " << r.psnr << " ssim " << r.ssim << " diversity "
                << r.div << "\n";
    }
  }
  return 0;
}

// ---- verify --------------------------------------------------------------------

int cmd_verify(const std::string& out_path, long seeds) {
  auto checks = verify_invertibility_suite(seeds);
  for (auto& c : verify_logdet_suite()) checks.push_back(c);
  for (auto& c : verify_gradients()) checks.push_back(c);

  json arr = json::array();
  bool all = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS  " : "FAIL  ") << c.name << "  err=" << c.value
              << "  tol=" << c.tolerance << "\n";
    arr.push_back({{"name", c.name}, {"pass", c.pass}, {"error", c.value},
                   {"tolerance", c.tolerance}, {"detail", c.detail}});
    all = all && c.pass;
  }
  json report{{"pass", all}, {"checks", arr}};
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) fail(ErrKind::io, "cannot write " + out_path);
    f << report.dump(2) << "\n";
  }
  std::cout << (all ? "verify: all checks passed" : "verify: FAILURES present") << "\n";
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdflow: bidirectional invertible super-resolution / downscaling"};
  app.require_subcommand(1);
  app.footer(config_key_help());

  CommonOpts synth_o, train_o, sr_o, ds_o, eval_o;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic degradation corpus");
  std::string synth_out;
  long synth_n = -1, synth_size = -1, synth_scale = -1;
  add_common(synth, synth_o);
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--size", synth_size, "HR image side");
  synth->add_option("--scale", synth_scale, "downscaling factor");
  synth->add_option("--out", synth_out, "corpus directory");

  auto* train = app.add_subcommand("train", "train the model on an unpaired corpus");
  std::string train_phase = "all", train_resume, train_corpus;
  long train_iters = -1;
  add_common(train, train_o);
  train->add_option("--phase", train_phase, "pretrain | forward | finetune | all");
  train->add_option("--iters", train_iters, "override the selected phase's iteration count");
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--corpus", train_corpus, "corpus directory");

  auto* sr = app.add_subcommand("sr", "super-resolve LR images from a checkpoint");
  auto* ds = app.add_subcommand("downscale", "downscale HR images from a checkpoint");
  std::string sr_ckpt, ds_ckpt, sr_out = "out", ds_out = "out";
  std::vector<std::string> sr_inputs, ds_inputs;
  double sr_tau = 0.8, ds_tau = 0.8;
  long sr_n = 1, ds_n = 1;
  add_common(sr, sr_o);
  sr->add_option("--checkpoint", sr_ckpt, "trained checkpoint")->required();
  sr->add_option("--input", sr_inputs, "input PNG paths")->required()->take_all();
  sr->add_option("--tau", sr_tau, "sampling temperature");
  sr->add_option("--n-samples", sr_n, "samples per input");
  sr->add_option("--out", sr_out, "output directory");
  add_common(ds, ds_o);
  ds->add_option("--checkpoint", ds_ckpt, "trained checkpoint")->required();
  ds->add_option("--input", ds_inputs, "input PNG paths")->required()->take_all();
  ds->add_option("--tau", ds_tau, "sampling temperature");
  ds->add_option("--n-samples", ds_n, "samples per input");
  ds->add_option("--out", ds_out, "output directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  std::string eval_ckpt, eval_corpus, eval_out = "out";
  bool eval_sweep = false;
  add_common(eval, eval_o);
  eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval->add_option("--corpus", eval_corpus, "corpus directory");
  eval->add_option("--out", eval_out, "report directory");
  eval->add_flag("--tau-sweep", eval_sweep, "emit the temperature sweep table");

  auto* verify = app.add_subcommand("verify", "run the invertibility/logdet/gradient oracles");
  std::string verify_out;
  long verify_seeds = 100;
  verify->add_option("--out", verify_out, "JSON report path");
  verify->add_option("--seeds", verify_seeds, "round-trip seeds per layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      if (synth_n > 0) synth_o.sets.push_back("corpus_n=" + std::to_string(synth_n));
      if (synth_size > 0) synth_o.sets.push_back("corpus_size=" + std::to_string(synth_size));
      if (synth_scale > 0) synth_o.sets.push_back("scale=" + std::to_string(synth_scale));
      return cmd_synth_data(synth_o, synth_out);
    }
    if (train->parsed()) {
      RunConfig cfg = build_config(train_o);
      return cfg.dtype == "f64"
                 ? run_train<double>(cfg, train_phase, train_iters, train_resume, train_corpus)
                 : run_train<float>(cfg, train_phase, train_iters, train_resume, train_corpus);
    }
    auto with_ckpt = [&](const CommonOpts& o, const std::string& path, auto&& fn) {
      Checkpoint ck = Checkpoint::load(path);
      std::string embedded = ck.has("meta.config") ? ck.get_blob("meta.config") : "";
      RunConfig cfg = build_config(o, embedded);
      return cfg.dtype == "f64" ? fn(cfg, ck, std::true_type{}) : fn(cfg, ck, std::false_type{});
    };
    if (sr->parsed())
      return with_ckpt(sr_o, sr_ckpt, [&](const RunConfig& cfg, const Checkpoint& ck, auto f64) {
        if constexpr (decltype(f64)::value)
          return run_generate<double>(true, cfg, ck, sr_inputs, sr_tau, sr_n, sr_out);
        else
          return run_generate<float>(true, cfg, ck, sr_inputs, sr_tau, sr_n, sr_out);
      });
    if (ds->parsed())
      return with_ckpt(ds_o, ds_ckpt, [&](const RunConfig& cfg, const Checkpoint& ck, auto f64) {
        if constexpr (decltype(f64)::value)
          return run_generate<double>(false, cfg, ck, ds_inputs, ds_tau, ds_n, ds_out);
        else
          return run_generate<float>(false, cfg, ck, ds_inputs, ds_tau, ds_n, ds_out);
      });
    if (eval->parsed())
      return with_ckpt(eval_o, eval_ckpt,
                       [&](const RunConfig& cfg, const Checkpoint& ck, auto f64) {
                         if constexpr (decltype(f64)::value)
                           return run_eval<double>(cfg, ck, eval_corpus, eval_out, eval_sweep);
                         else
                           return run_eval<float>(cfg, ck, eval_corpus, eval_out, eval_sweep);
                       });
    if (verify->parsed()) return cmd_verify(verify_out, verify_seeds);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
