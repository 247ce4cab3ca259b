#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "efi/model.hpp"
#include "efi/synthetic_csi.hpp"

namespace efi {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  double lr = 0.01;
  double momentum = 0.9;
  std::vector<int> lr_decay_epochs = {40, 80};
  double lr_decay_factor = 0.1;
  double lambda = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Learning rate in effect during a 1-based epoch: decays take effect after
// each listed epoch completes.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct StepLosses {
  double loss_r = 0.0;
  double loss_c = 0.0;
  double loss_e = 0.0;
  double loss_y = 0.0;
  double total() const { return loss_r + loss_c + loss_e; }
  int correct = 0;
  int batch = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss_r = 0.0;
  double loss_c = 0.0;
  double loss_e = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
};

// -------------------------------------------------------------------------
// loss graphs (shared with tests)

// Forward equals ||x - D(E_d(x))||^2 / B via the straight-through
// composition; gradients reach the decoder directly and the encoder through
// the pass-through path. The codebook sees no gradient here.
template <typename S>
NodeRef<S> loss_reconstruction_graph(const ModelT<S>& m, const TensorT<S>& x,
                                     EncodeResultT<S>* enc_out = nullptr) {
  auto enc = m.encode(x);
  auto st = straight_through_compose(enc.e_c_grid, enc.e_d_grid);
  auto x_hat = m.decoder_forward(st);
  auto loss = mse_norm(make_const(x), x_hat);
  if (enc_out) *enc_out = std::move(enc);
  return loss;
}

// lambda * commitment + cross-entropy on the dequantized latent.
template <typename S>
NodeRef<S> loss_joint_graph(const ModelT<S>& m, const EncodeResultT<S>& enc,
                            const std::vector<int>& labels, S lambda,
                            NodeRef<S>* loss_y_out = nullptr, NodeRef<S>* logits_out = nullptr) {
  const int batch = enc.e_c_grid->value.dim(0);
  auto commit = commitment_loss(enc.e_c_grid, enc.e_d_grid, lambda, batch);
  auto logits = m.classifier_logits(make_const(enc.e_d_grid));
  auto loss_y = softmax_crossentropy(logits, labels);
  if (loss_y_out) *loss_y_out = loss_y;
  if (logits_out) *logits_out = logits;
  return add(commit, loss_y);
}

// -------------------------------------------------------------------------
// trainer

// One model step of the three-phase schedule: (i) encoder+decoder on the
// reconstruction loss, (ii) codebook on the quantization loss, (iii)
// encoder+classifier on the joint loss. Each phase runs against the
// parameters left by the previous one; reported values are each phase's
// pre-update loss.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);

  StepLosses train_step(const Tensor& x_batch, const std::vector<int>& labels);

  void set_learning_rate(double lr);
  // context strings for non-finite loss diagnostics
  void set_context(int epoch, int batch_index);

  SgdMomentum<float>& optimizer_ed() { return opt_ed_; }
  SgdMomentum<float>& optimizer_c() { return opt_c_; }
  SgdMomentum<float>& optimizer_eg() { return opt_eg_; }

 private:
  void check_finite(double v, const char* name) const;

  Model& model_;
  double lambda_;
  SgdMomentum<float> opt_ed_;
  SgdMomentum<float> opt_c_;
  SgdMomentum<float> opt_eg_;
  std::vector<NodeRef<float>> params_ed_;
  std::vector<NodeRef<float>> params_c_;
  std::vector<NodeRef<float>> params_eg_;
  int epoch_ = 0;
  int batch_index_ = 0;
};

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> metrics;
};

// Seeded-shuffle mini-batches, the decayed-lr schedule, per-epoch metric
// rows (optionally appended to a CSV) and a final checkpoint (optional
// path). `stop_after_epoch` may end training early.
TrainResult train_loop(const Dataset& dataset, const ArchitectureConfig& arch,
                       const TrainConfig& cfg, const std::string& metrics_csv_path = "",
                       const std::string& checkpoint_path = "",
                       const std::function<bool(const EpochMetrics&)>& stop_after_epoch = nullptr);

void append_metrics_csv(const std::string& path, const EpochMetrics& m, bool write_header);

}  // namespace efi
