#pragma once

// Three-phase optimization: (1) NLLs + content loss, (2) the full forward
// loss with the latent-domain discriminator, (3) alternating forward-loss and
// backward-loss accumulation per update with the image discriminators.
// Learning rates halve at 50/75/90/95% of the total iteration count. All
// per-iteration randomness is re-derived from (seed, stream, iteration), so a
// resumed run is bit-identical to an uninterrupted one.

#include <deque>
#include <sstream>

#include "sdflow/checkpoint.hpp"
#include "sdflow/data.hpp"
#include "sdflow/objectives.hpp"

namespace sdflow {

struct TrainConfig {
  long iters_pretrain = 1000;
  long iters_forward = 4000;
  long iters_finetune = 1000;
  double lr_model = 1e-4;
  double lr_disc = 1e-5;
  long accum = 1;  // microbatches accumulated per update
  long batch = 8;
  long patch_hr = 64;
  uint64_t seed = 1;
  double grad_clip = 50.0;
  bool nll_per_dim = true;  // normalize NLL terms by elements per sample
  LossWeights weights;
  std::string log_path;         // loss CSV; empty = in-memory only
  std::string checkpoint_path;  // rolling checkpoint; empty = none
  std::string config_blob;      // embedded into checkpoints when set
  long checkpoint_every = 500;

  long total_iters() const { return iters_pretrain + iters_forward + iters_finetune; }
  int phase_of(long iter) const {
    if (iter < iters_pretrain) return 1;
    if (iter < iters_pretrain + iters_forward) return 2;
    return 3;
  }
  // halving milestones at 50/75/90/95% of the total
  double lr_factor(long iter) const {
    double f = 1.0;
    for (double m : {0.5, 0.75, 0.9, 0.95})
      if (double(iter) >= m * double(total_iters())) f *= 0.5;
    return f;
  }
};

// per-iteration loss record; inactive terms are NaN and print empty
struct LossRow {
  long iter = 0;
  int phase = 0;
  double nll_x = std::nan(""), nll_y = std::nan(""), content = std::nan("");
  double domain_gen = std::nan(""), domain_disc = std::nan(""), consistency = std::nan("");
  double ds_pix = std::nan(""), ds_per = std::nan(""), ds_gan = std::nan("");
  double sr_pix = std::nan(""), sr_per = std::nan(""), sr_gan = std::nan("");
  double total = std::nan("");
  double lr_model = 0, lr_disc = 0;

  static std::string header() {
    return "iter,phase,nll_x,nll_y,content,domain_gen,domain_disc,consistency,"
           "ds_pix,ds_per,ds_gan,sr_pix,sr_per,sr_gan,total,lr_model,lr_disc";
  }
  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << iter << "," << phase;
    for (double v : {nll_x, nll_y, content, domain_gen, domain_disc, consistency, ds_pix, ds_per,
                     ds_gan, sr_pix, sr_per, sr_gan, total}) {
      os << ",";
      if (std::isfinite(v)) os << v;
    }
    os << "," << lr_model << "," << lr_disc;
    return os.str();
  }
};

// Adam with moments stored per parameter, aligned with the param list order
template <class R>
class Adam {
public:
  Adam() = default;
  explicit Adam(const ParamList<R>& ps, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : ps) {
      m_.push_back(Tensor<R>::zeros(p->value.shape));
      v_.push_back(Tensor<R>::zeros(p->value.shape));
    }
  }

  void step(ParamList<R>& ps, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      for (size_t k = 0; k < p.value.v.size(); ++k) {
        double gk = double(p.grad.v[k]);
        double mk = beta1_ * double(m_[i].v[k]) + (1 - beta1_) * gk;
        double vk = beta2_ * double(v_[i].v[k]) + (1 - beta2_) * gk * gk;
        m_[i].v[k] = R(mk);
        v_[i].v[k] = R(vk);
        p.value.v[k] -= R(lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps_));
      }
    }
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }
  Tensor<R>& m(size_t i) { return m_[i]; }
  Tensor<R>& v(size_t i) { return v_[i]; }
  size_t size() const { return m_.size(); }

private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<Tensor<R>> m_, v_;
};

template <class R>
double global_grad_norm(const ParamList<R>& ps) {
  double s = 0;
  for (auto* p : ps)
    for (R g : p->grad.v) s += double(g) * double(g);
  return std::sqrt(s);
}

template <class R>
void clip_grads(ParamList<R>& ps, double max_norm) {
  double n = global_grad_norm(ps);
  if (n > max_norm && n > 0) {
    R f = R(max_norm / n);
    for (auto* p : ps)
      for (auto& g : p->grad.v) g *= f;
  }
}

template <class R>
class Trainer {
public:
  Trainer(SDFlowModel<R>& model, Corpus& corpus, TrainConfig cfg)
      : model_(model), corpus_(corpus), cfg_(std::move(cfg)) {
    flow_ps_ = model_.flow_params();
    disc_ps_ = model_.disc_params();
    opt_model_ = Adam<R>(flow_ps_);
    opt_disc_ = Adam<R>(disc_ps_);
    train_ids_ = corpus_.ids(Corpus::Split::train);
    if (!cfg_.log_path.empty()) {
      bool fresh = iter_ == 0;
      log_file_.open(cfg_.log_path, fresh ? std::ios::out : std::ios::app);
      if (!log_file_) fail(ErrKind::io, "cannot open loss log " + cfg_.log_path);
      log_file_ << LossRow::header() << "\n";
    }
  }

  long iteration() const { return iter_; }
  const std::deque<LossRow>& log() const { return log_; }

  // run until `until` (exclusive); defaults to the full schedule
  void run(long until = -1) {
    if (until < 0) until = cfg_.total_iters();
    while (iter_ < until) step();
  }

  void step() {
    const long iter = iter_;
    const int phase = cfg_.phase_of(iter);
    const double lrm = cfg_.lr_model * cfg_.lr_factor(iter);
    const double lrd = cfg_.lr_disc * cfg_.lr_factor(iter);

    LossRow row;
    row.iter = iter;
    row.phase = phase;
    row.lr_model = lrm;
    row.lr_disc = lrd;

    zero_grads(flow_ps_);
    zero_grads(disc_ps_);

    double total = 0;
    // cached values for the discriminator updates (detached by copy)
    Tensor<R> zc_hr_val, zc_lr_val, zlr_val, yhat_val, xhat_val, xb_val, yb_val;

    for (long micro = 0; micro < cfg_.accum; ++micro) {
      Rng rng_batch = Rng::derive(cfg_.seed, 1000 + uint64_t(micro), uint64_t(iter));
      Rng rng_latent = Rng::derive(cfg_.seed, 2000 + uint64_t(micro), uint64_t(iter));
      auto batch = make_unpaired_batch<R>(corpus_, train_ids_, cfg_.patch_hr, cfg_.batch,
                                          rng_batch);
      if (iter == 0 && micro == 0 && !actnorm_init_done_) {
        model_.init_actnorms(batch.x, batch.y);
        actnorm_init_done_ = true;
      }
      const R scale = R(1) / R(cfg_.accum);

      // ---- forward loss ----
      {
        Graph<R> g;
        int xv = g.leaf(batch.x);
        int yv = g.leaf(batch.y);
        auto hr = model_.sr.hr_forward(g, yv);
        auto hf = model_.sr.hf_forward(g, hr.z_h, hr.z_c);
        int nll_y = g.neg(g.add(StdNormalPrior<R>::logp(g, hf.y), g.add(hr.logdet, hf.logdet)));
        auto lr = model_.ds.lr_forward(g, xv);
        auto dg = model_.ds.deg_forward(g, lr.z_d, lr.z_c);
        int nll_x = g.neg(g.add(model_.ds.mog().logp(g, dg.y), g.add(lr.logdet, dg.logdet)));

        double ny = double(cfg_.nll_per_dim ? 1.0 / double(batch.y.numel() / batch.y.shape.n) : 1.0);
        double nx = double(cfg_.nll_per_dim ? 1.0 / double(batch.x.numel() / batch.x.shape.n) : 1.0);
        int loss = g.add(g.scalar_mul(g.mean_all(nll_y), R(ny)),
                         g.scalar_mul(g.mean_all(nll_x), R(nx)));
        int content = content_loss(g, model_, hr.z_c, lr.z_c, xv, yv, cfg_.weights);
        loss = g.add(loss, content);
        int dgen = -1, cons = -1;
        if (phase >= 2) {
          dgen = domain_loss_gen(g, model_, hr.z_c, lr.z_c, cfg_.weights);
          cons = content_consistency(g, lr.z_lr, lr.z_c, cfg_.weights);
          loss = g.add(loss, g.add(dgen, cons));
        }
        double lv = double(g.val(loss).v[0]);
        if (!std::isfinite(lv)) abort_diverged(iter, "forward loss");
        g.backward(loss, scale);

        acc(row.nll_y, double(g.val(g.mean_all(nll_y)).v[0]) * ny / cfg_.accum);
        acc(row.nll_x, double(g.val(g.mean_all(nll_x)).v[0]) * nx / cfg_.accum);
        acc(row.content, double(g.val(content).v[0]) / cfg_.accum);
        if (dgen >= 0) acc(row.domain_gen, double(g.val(dgen).v[0]) / cfg_.accum);
        if (cons >= 0) acc(row.consistency, double(g.val(cons).v[0]) / cfg_.accum);
        total += lv / cfg_.accum;

        if (micro == 0 && phase >= 2) {
          zc_hr_val = g.val(hr.z_c);
          zc_lr_val = g.val(lr.z_c);
          zlr_val = g.val(lr.z_lr);
        }
      }

      // ---- backward loss (phase 3): separate accumulation, same update ----
      if (phase >= 3) {
        Graph<R> g;
        int xv = g.leaf(batch.x);
        int yv = g.leaf(batch.y);
        auto smp = BackwardSamples<R>::draw(model_, batch.x.shape, batch.y.shape, cfg_.weights,
                                            rng_latent);
        auto t = backward_losses(g, model_, xv, yv, cfg_.weights, smp);
        int loss = g.add(t.ds_total, t.sr_total);
        double lv = double(g.val(loss).v[0]);
        if (!std::isfinite(lv)) abort_diverged(iter, "backward loss");
        g.backward(loss, scale);
        total += lv / cfg_.accum;
        acc(row.ds_pix, double(g.val(t.ds_pix).v[0]) / cfg_.accum);
        acc(row.ds_per, double(g.val(t.ds_per).v[0]) / cfg_.accum);
        acc(row.ds_gan, double(g.val(t.ds_gan).v[0]) / cfg_.accum);
        acc(row.sr_pix, double(g.val(t.sr_pix).v[0]) / cfg_.accum);
        acc(row.sr_per, double(g.val(t.sr_per).v[0]) / cfg_.accum);
        acc(row.sr_gan, double(g.val(t.sr_gan).v[0]) / cfg_.accum);
        if (micro == 0) {
          yhat_val = g.val(t.y_hat_per);
          xhat_val = g.val(t.x_hat_per);
          xb_val = batch.x;
          yb_val = batch.y;
        }
      }
    }

    // flow update
    for (auto* p : flow_ps_)
      if (!p->grad.all_finite()) abort_diverged(iter, "gradient of " + p->name);
    if (cfg_.grad_clip > 0) clip_grads(flow_ps_, cfg_.grad_clip);
    opt_model_.step(flow_ps_, lrm);

    // discriminator updates on detached values
    if (phase >= 2) {
      Graph<R> g;
      int loss = domain_loss_disc(g, model_, g.leaf(zc_hr_val), g.leaf(zc_lr_val),
                                  g.leaf(zlr_val), cfg_.weights);
      if (phase >= 3) {
        int d_sr = image_disc_loss(g, model_.d_sr, g.leaf(yb_val), g.leaf(yhat_val));
        int d_lr = image_disc_loss(g, model_.d_lr, g.leaf(xb_val), g.leaf(xhat_val));
        loss = g.add(loss, g.add(d_sr, d_lr));
      }
      double lv = double(g.val(loss).v[0]);
      if (!std::isfinite(lv)) abort_diverged(iter, "discriminator loss");
      g.backward(loss);
      opt_disc_.step(disc_ps_, lrd);
      row.domain_disc = lv;
    }

    row.total = total;
    log_.push_back(row);
    if (log_file_) log_file_ << row.csv() << "\n";
    ++iter_;

    if (!cfg_.checkpoint_path.empty() &&
        (iter_ % cfg_.checkpoint_every == 0 || iter_ == cfg_.total_iters()))
      save_checkpoint(cfg_.checkpoint_path, cfg_.config_blob);
  }

  // ---- checkpointing ----

  void save_checkpoint(const std::string& path, const std::string& config_blob = "") {
    Checkpoint ck;
    for (auto* p : flow_ps_) ck.add_tensor("param." + p->name, p->value);
    for (auto* p : disc_ps_) ck.add_tensor("param." + p->name, p->value);
    for (size_t i = 0; i < flow_ps_.size(); ++i) {
      ck.add_tensor("adam.m." + flow_ps_[i]->name, opt_model_.m(i));
      ck.add_tensor("adam.v." + flow_ps_[i]->name, opt_model_.v(i));
    }
    for (size_t i = 0; i < disc_ps_.size(); ++i) {
      ck.add_tensor("adam.m." + disc_ps_[i]->name, opt_disc_.m(i));
      ck.add_tensor("adam.v." + disc_ps_[i]->name, opt_disc_.v(i));
    }
    ck.add_i64("meta.iter", iter_);
    ck.add_i64("meta.model_steps", opt_model_.step_count());
    ck.add_i64("meta.disc_steps", opt_disc_.step_count());
    ck.add_i64("meta.seed", int64_t(cfg_.seed));
    if (!config_blob.empty()) ck.add_blob("meta.config", config_blob);
    ck.save(path);
  }

  void load_checkpoint(const Checkpoint& ck) {
    for (auto* p : flow_ps_) p->value = ck.get_tensor<R>("param." + p->name, p->value.shape);
    for (auto* p : disc_ps_) p->value = ck.get_tensor<R>("param." + p->name, p->value.shape);
    for (size_t i = 0; i < flow_ps_.size(); ++i) {
      opt_model_.m(i) = ck.get_tensor<R>("adam.m." + flow_ps_[i]->name, flow_ps_[i]->value.shape);
      opt_model_.v(i) = ck.get_tensor<R>("adam.v." + flow_ps_[i]->name, flow_ps_[i]->value.shape);
    }
    for (size_t i = 0; i < disc_ps_.size(); ++i) {
      opt_disc_.m(i) = ck.get_tensor<R>("adam.m." + disc_ps_[i]->name, disc_ps_[i]->value.shape);
      opt_disc_.v(i) = ck.get_tensor<R>("adam.v." + disc_ps_[i]->name, disc_ps_[i]->value.shape);
    }
    iter_ = ck.get_i64("meta.iter");
    opt_model_.set_step_count(ck.get_i64("meta.model_steps"));
    opt_disc_.set_step_count(ck.get_i64("meta.disc_steps"));
    actnorm_init_done_ = iter_ > 0;
  }

private:
  static void acc(double& slot, double v) { slot = std::isfinite(slot) ? slot + v : v; }

  [[noreturn]] void abort_diverged(long iter, const std::string& what) {
    if (!cfg_.checkpoint_path.empty()) {
      // parameters have not been updated with the bad gradient yet
      save_checkpoint(cfg_.checkpoint_path + ".last_finite", cfg_.config_blob);
    }
    fail(ErrKind::divergence,
         "training diverged at iteration " + std::to_string(iter) + " (" + what + ")");
  }

  SDFlowModel<R>& model_;
  Corpus& corpus_;
  TrainConfig cfg_;
  ParamList<R> flow_ps_, disc_ps_;
  Adam<R> opt_model_, opt_disc_;
  std::vector<long> train_ids_;
  long iter_ = 0;
  bool actnorm_init_done_ = false;
  std::deque<LossRow> log_;
  std::ofstream log_file_;
};

template <class R>
void load_model_params(SDFlowModel<R>& m, const Checkpoint& ck) {
  for (auto* p : m.all_params()) p->value = ck.get_tensor<R>("param." + p->name, p->value.shape);
}

}  // namespace sdflow
