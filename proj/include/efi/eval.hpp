#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "efi/model.hpp"
#include "efi/synthetic_csi.hpp"

namespace efi {

struct EvalReport {
  double nmse_db = 0.0;  // -inf on perfect reconstruction
  double accuracy = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_accuracy;
  int n_samples = 0;
};

// 10*log10(mean ||x-x_hat||^2 / ||x||^2); throws InputError on an empty batch
// or a zero-norm sample. Perfect reconstruction yields -inf.
double nmse_db(const std::vector<Tensor>& x, const std::vector<Tensor>& x_hat);
double nmse_db_from_ratios(const std::vector<double>& ratios);
double nmse_ratio(const Tensor& x, const Tensor& x_hat);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);
std::vector<std::vector<std::int64_t>> confusion(const std::vector<int>& predictions,
                                                 const std::vector<int>& labels, int num_classes);

// Full in-process pipeline (encode, quantize, dequantize, decode, classify)
// over the given frames.
EvalReport evaluate(const Model& model, const std::vector<const CSIFrame*>& frames);
EvalReport evaluate_split(const Model& model, const Dataset& ds, bool test_split = true);

std::vector<const CSIFrame*> split_frames(const Dataset& ds, bool test_split);

struct FinetuneConfig {
  int epochs = 10;
  double lr = 0.001;
  double momentum = 0.9;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  Model model;
  int samples_used = 0;
};

// Pseudo-labels frames whose top softmax probability reaches `threshold`
// (default 0.9) with the argmax class and fine-tunes the classifier on their
// dequantized latents. Encoder, decoder and codebook stay untouched.
FinetuneResult incremental_finetune(const Model& model, const std::vector<const CSIFrame*>& frames,
                                    double threshold, const FinetuneConfig& cfg);

enum class EmbeddingLayer { raw, quantized, penultimate };

EmbeddingLayer embedding_layer_from_string(const std::string& name);

// CSV rows (sample_id, label, flattened vector); the header documents the
// vector length of the chosen layer.
void export_embeddings(const Model& model, const std::vector<const CSIFrame*>& frames,
                       const std::vector<int>& sample_ids, EmbeddingLayer layer, std::ostream& out);

}  // namespace efi
