#include "efi/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "efi/checkpoint.hpp"
#include "efi/errors.hpp"

namespace efi {

void TrainConfig::validate() const {
  if (epochs <= 0) throw InputError("train config: epochs must be > 0");
  if (batch_size <= 0) throw InputError("train config: batch_size must be > 0");
  if (lr <= 0.0) throw InputError("train config: lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw InputError("train config: momentum must be in [0,1)");
  if (lambda < 0.0) throw InputError("train config: lambda must be >= 0");
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0) {
    throw InputError("train config: decay factor must be in (0,1]");
  }
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int d : cfg.lr_decay_epochs) {
    if (epoch > d) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

Trainer::Trainer(Model& model, const TrainConfig& cfg)
    : model_(model),
      lambda_(cfg.lambda),
      opt_ed_(static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum)),
      opt_c_(static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum)),
      opt_eg_(static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum)) {
  cfg.validate();
  auto enc = model_.named(model_.encoder_param_names());
  auto dec = model_.named(model_.decoder_param_names());
  auto cls = model_.named(model_.classifier_param_names());
  params_ed_ = enc;
  params_ed_.insert(params_ed_.end(), dec.begin(), dec.end());
  params_c_ = {model_.codebook()};
  params_eg_ = enc;
  params_eg_.insert(params_eg_.end(), cls.begin(), cls.end());
}

void Trainer::set_learning_rate(double lr) {
  opt_ed_.set_learning_rate(static_cast<float>(lr));
  opt_c_.set_learning_rate(static_cast<float>(lr));
  opt_eg_.set_learning_rate(static_cast<float>(lr));
}

void Trainer::set_context(int epoch, int batch_index) {
  epoch_ = epoch;
  batch_index_ = batch_index;
}

void Trainer::check_finite(double v, const char* name) const {
  if (!std::isfinite(v)) {
    throw TrainError(std::string("non-finite ") + name + " at epoch " + std::to_string(epoch_) +
                     ", batch " + std::to_string(batch_index_));
  }
}

StepLosses Trainer::train_step(const Tensor& x_batch, const std::vector<int>& labels) {
  if (x_batch.rank() != 4 || x_batch.dim(0) == 0) throw InputError("train_step: empty batch");
  if (static_cast<int>(labels.size()) != x_batch.dim(0)) {
    throw InputError("train_step: labels do not match batch");
  }
  StepLosses out;
  out.batch = x_batch.dim(0);

  // (i) encoder + decoder on the reconstruction loss
  auto loss_r = loss_reconstruction_graph(model_, x_batch);
  out.loss_r = loss_r->value[0];
  check_finite(out.loss_r, "reconstruction loss");
  backward(loss_r);
  opt_ed_.step(params_ed_);
  loss_r.reset();

  // (ii) codebook on the quantization loss; the encoder changed, so encode
  // again (this forward also serves phase iii, whose encoder inputs are
  // unchanged by the codebook update)
  auto enc = model_.encode(x_batch);
  auto loss_c = codebook_loss(enc.e_c_rows, enc.indices, model_.codebook(), out.batch);
  out.loss_c = loss_c->value[0];
  check_finite(out.loss_c, "codebook loss");
  backward(loss_c);
  opt_c_.step(params_c_);
  loss_c.reset();

  // (iii) encoder + classifier on the joint loss, re-quantized against the
  // fresh codebook
  auto [indices, e_d_rows] = quantize_nearest(enc.e_c_rows, model_.codebook()->value);
  enc.indices = std::move(indices);
  enc.e_d_rows = std::move(e_d_rows);
  const auto& g = enc.e_c_grid->value;
  enc.e_d_grid = latent_rows_to_grid(enc.e_d_rows, g.dim(0), g.dim(1), g.dim(2), g.dim(3));

  NodeRef<float> loss_y;
  NodeRef<float> logits;
  auto loss_e = loss_joint_graph(model_, enc, labels, static_cast<float>(lambda_), &loss_y, &logits);
  out.loss_e = loss_e->value[0];
  out.loss_y = loss_y->value[0];
  check_finite(out.loss_e, "joint loss");
  backward(loss_e);
  opt_eg_.step(params_eg_);

  const int t = model_.config().num_classes;
  for (int r = 0; r < out.batch; ++r) {
    const float* row = logits->value.data() + static_cast<std::int64_t>(r) * t;
    int best = 0;
    for (int i = 1; i < t; ++i) {
      if (row[i] > row[best]) best = i;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++out.correct;
  }
  return out;
}

void append_metrics_csv(const std::string& path, const EpochMetrics& m, bool write_header) {
  std::ofstream f(path, write_header ? std::ios::trunc : std::ios::app);
  if (!f) throw LoadError("cannot write metrics CSV " + path);
  if (write_header) f << "epoch,loss_r,loss_c,loss_e,train_acc,lr\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.epoch, m.loss_r, m.loss_c,
                m.loss_e, m.train_accuracy, m.lr);
  f << buf;
}

TrainResult train_loop(const Dataset& dataset, const ArchitectureConfig& arch,
                       const TrainConfig& cfg, const std::string& metrics_csv_path,
                       const std::string& checkpoint_path,
                       const std::function<bool(const EpochMetrics&)>& stop_after_epoch) {
  cfg.validate();
  if (dataset.frames.empty() || dataset.train_indices.empty()) {
    throw InputError("train_loop: dataset has no training samples");
  }
  for (int idx : dataset.train_indices) {
    if (dataset.frames[static_cast<std::size_t>(idx)].label < 0) {
      throw InputError("train_loop: unlabeled training sample");
    }
  }

  TrainResult result{build_from_config(arch, cfg.seed), {}};
  Model& model = result.model;
  Trainer trainer(model, cfg);

  const auto& frames = dataset.frames;
  const std::int64_t per = frames[static_cast<std::size_t>(dataset.train_indices[0])].amplitude.numel();
  std::vector<int> order = dataset.train_indices;
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x0e70c5ULL));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    trainer.set_learning_rate(lr);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_r = 0, sum_c = 0, sum_e = 0;
    int correct = 0, seen = 0, batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const int b = static_cast<int>(end - begin);
      Tensor batch({b, arch.in_channels, arch.in_height, arch.in_width});
      std::vector<int> labels(static_cast<std::size_t>(b));
      for (std::size_t i = begin; i < end; ++i) {
        const auto& f = frames[static_cast<std::size_t>(order[i])];
        std::copy_n(f.amplitude.data(), per, batch.data() + static_cast<std::int64_t>(i - begin) * per);
        labels[i - begin] = f.label;
      }
      trainer.set_context(epoch, batches);
      const StepLosses losses = trainer.train_step(batch, labels);
      sum_r += losses.loss_r;
      sum_c += losses.loss_c;
      sum_e += losses.loss_e;
      correct += losses.correct;
      seen += losses.batch;
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss_r = sum_r / batches;
    m.loss_c = sum_c / batches;
    m.loss_e = sum_e / batches;
    m.train_accuracy = static_cast<double>(correct) / seen;
    m.lr = lr;
    result.metrics.push_back(m);
    if (!metrics_csv_path.empty()) append_metrics_csv(metrics_csv_path, m, epoch == 1);
    if (stop_after_epoch && stop_after_epoch(m)) break;
  }

  if (!checkpoint_path.empty()) {
    CheckpointMeta meta;
    const EpochMetrics& last = result.metrics.back();
    meta.epoch = last.epoch;
    meta.loss_r = last.loss_r;
    meta.loss_c = last.loss_c;
    meta.loss_e = last.loss_e;
    save_checkpoint(model, checkpoint_path, meta, CheckpointView::full);
  }
  return result;
}

}  // namespace efi
