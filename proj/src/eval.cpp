#include "efi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include "efi/errors.hpp"

namespace efi {

double nmse_ratio(const Tensor& x, const Tensor& x_hat) {
  if (!x.same_shape(x_hat)) throw InputError("nmse: shape mismatch");
  double err = 0.0, sig = 0.0;
  const float* px = x.data();
  const float* py = x_hat.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(px[i]) - static_cast<double>(py[i]);
    err += d * d;
    sig += static_cast<double>(px[i]) * static_cast<double>(px[i]);
  }
  if (sig == 0.0) throw InputError("nmse: zero-norm reference sample");
  return err / sig;
}

double nmse_db_from_ratios(const std::vector<double>& ratios) {
  if (ratios.empty()) throw InputError("nmse: empty batch");
  double mean = 0.0;
  for (double r : ratios) mean += r;
  mean /= static_cast<double>(ratios.size());
  if (mean == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(mean);
}

double nmse_db(const std::vector<Tensor>& x, const std::vector<Tensor>& x_hat) {
  if (x.size() != x_hat.size()) throw InputError("nmse: batch size mismatch");
  std::vector<double> ratios;
  ratios.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) ratios.push_back(nmse_ratio(x[i], x_hat[i]));
  return nmse_db_from_ratios(ratios);
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw InputError("accuracy: length mismatch");
  if (predictions.empty()) throw InputError("accuracy: empty input");
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

std::vector<std::vector<std::int64_t>> confusion(const std::vector<int>& predictions,
                                                 const std::vector<int>& labels, int num_classes) {
  if (predictions.size() != labels.size()) throw InputError("confusion: length mismatch");
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(num_classes),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 ||
        predictions[i] >= num_classes) {
      throw InputError("confusion: class index out of range");
    }
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return m;
}

std::vector<const CSIFrame*> split_frames(const Dataset& ds, bool test_split) {
  const auto& idx = test_split ? ds.test_indices : ds.train_indices;
  std::vector<const CSIFrame*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&ds.frames[static_cast<std::size_t>(i)]);
  return out;
}

namespace {

Tensor frame_batch(const std::vector<const CSIFrame*>& frames, std::size_t begin, std::size_t end) {
  const auto& s = frames[begin]->amplitude.shape();
  Tensor batch({static_cast<int>(end - begin), s[0], s[1], s[2]});
  const std::int64_t per = frames[begin]->amplitude.numel();
  for (std::size_t i = begin; i < end; ++i) {
    std::copy_n(frames[i]->amplitude.data(), per, batch.data() + static_cast<std::int64_t>(i - begin) * per);
  }
  return batch;
}

int argmax_row(const float* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace

EvalReport evaluate(const Model& model, const std::vector<const CSIFrame*>& frames) {
  if (frames.empty()) throw InputError("evaluate: empty split");
  NoGradGuard ng;
  const int t = model.config().num_classes;
  std::vector<int> predictions, labels;
  std::vector<double> ratios;
  predictions.reserve(frames.size());

  constexpr std::size_t kChunk = 16;
  for (std::size_t begin = 0; begin < frames.size(); begin += kChunk) {
    const std::size_t end = std::min(frames.size(), begin + kChunk);
    Tensor batch = frame_batch(frames, begin, end);
    const int b = batch.dim(0);
    auto enc = model.encode(batch);
    Tensor recon = model.decode(enc.e_d_grid);
    Tensor probs = model.classify(enc.e_d_grid);
    const std::int64_t per = frames[begin]->amplitude.numel();
    for (int i = 0; i < b; ++i) {
      Tensor one(frames[begin + static_cast<std::size_t>(i)]->amplitude.shape());
      std::copy_n(recon.data() + static_cast<std::int64_t>(i) * per, per, one.data());
      ratios.push_back(nmse_ratio(frames[begin + static_cast<std::size_t>(i)]->amplitude, one));
      predictions.push_back(argmax_row(probs.data() + static_cast<std::int64_t>(i) * t, t));
      labels.push_back(frames[begin + static_cast<std::size_t>(i)]->label);
    }
  }

  EvalReport r;
  r.n_samples = static_cast<int>(frames.size());
  r.nmse_db = nmse_db_from_ratios(ratios);
  r.accuracy = accuracy(predictions, labels);
  r.confusion = confusion(predictions, labels, t);
  r.per_class_accuracy.assign(static_cast<std::size_t>(t), 0.0);
  for (int c = 0; c < t; ++c) {
    std::int64_t row_total = 0;
    for (int j = 0; j < t; ++j) row_total += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
    r.per_class_accuracy[static_cast<std::size_t>(c)] =
        row_total == 0 ? 0.0
                       : static_cast<double>(r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)]) /
                             static_cast<double>(row_total);
  }
  return r;
}

EvalReport evaluate_split(const Model& model, const Dataset& ds, bool test_split) {
  return evaluate(model, split_frames(ds, test_split));
}

FinetuneResult incremental_finetune(const Model& model, const std::vector<const CSIFrame*>& frames,
                                    double threshold, const FinetuneConfig& cfg) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw InputError("incremental_finetune: threshold must be in (0,1]");
  }
  // copy parameters so the input model stays untouched
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, node] : model.params()) tensors.emplace(name, node->value);
  FinetuneResult result{Model(model.config(), std::move(tensors)), 0};
  Model& m = result.model;

  // pseudo-label confident reconstructions, keeping their latents
  std::vector<Tensor> latents;  // dequantized grids, batch of one each
  std::vector<int> pseudo;
  {
    NoGradGuard ng;
    const int t = m.config().num_classes;
    for (const CSIFrame* f : frames) {
      Tensor batch({1, f->amplitude.dim(0), f->amplitude.dim(1), f->amplitude.dim(2)},
                   f->amplitude.raw());
      auto enc = m.encode(batch);
      Tensor probs = m.classify(enc.e_d_grid);
      const int cls = argmax_row(probs.data(), t);
      if (static_cast<double>(probs[cls]) >= threshold) {
        latents.push_back(enc.e_d_grid);
        pseudo.push_back(cls);
      }
    }
  }
  result.samples_used = static_cast<int>(latents.size());
  if (latents.empty()) return result;

  auto cls_params = m.named(m.classifier_param_names());
  SgdMomentum<float> opt(static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum));
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xF17EULL));
  std::vector<int> order(latents.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const auto& lat = m.trace().latent;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const int b = static_cast<int>(end - begin);
      Tensor batch({b, lat[0], lat[1], lat[2]});
      std::vector<int> labels(static_cast<std::size_t>(b));
      const std::int64_t per = latents[0].numel();
      for (std::size_t i = begin; i < end; ++i) {
        std::copy_n(latents[static_cast<std::size_t>(order[i])].data(), per,
                    batch.data() + static_cast<std::int64_t>(i - begin) * per);
        labels[i - begin] = pseudo[static_cast<std::size_t>(order[i])];
      }
      auto logits = m.classifier_logits(make_const(batch));
      auto loss = softmax_crossentropy(logits, labels);
      backward(loss);
      opt.step(cls_params);
    }
  }
  return result;
}

EmbeddingLayer embedding_layer_from_string(const std::string& name) {
  if (name == "raw") return EmbeddingLayer::raw;
  if (name == "quantized") return EmbeddingLayer::quantized;
  if (name == "penultimate") return EmbeddingLayer::penultimate;
  throw InputError("unknown embedding layer '" + name + "' (raw|quantized|penultimate)");
}

void export_embeddings(const Model& model, const std::vector<const CSIFrame*>& frames,
                       const std::vector<int>& sample_ids, EmbeddingLayer layer,
                       std::ostream& out) {
  if (frames.size() != sample_ids.size()) throw InputError("export_embeddings: id/frame mismatch");
  NoGradGuard ng;
  std::int64_t dim = 0;
  const auto& cfg = model.config();
  switch (layer) {
    case EmbeddingLayer::raw:
      dim = static_cast<std::int64_t>(cfg.in_channels) * cfg.in_height * cfg.in_width;
      break;
    case EmbeddingLayer::quantized:
      dim = static_cast<std::int64_t>(cfg.latent_dim) * model.trace().latent_positions;
      break;
    case EmbeddingLayer::penultimate:
      dim = cfg.classifier_hidden;
      break;
  }
  out << "sample_id,label";
  for (std::int64_t i = 0; i < dim; ++i) out << ",v" << i;
  out << "\n";

  char buf[64];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const CSIFrame* f = frames[i];
    const float* vec = nullptr;
    Tensor holder;
    switch (layer) {
      case EmbeddingLayer::raw:
        vec = f->amplitude.data();
        break;
      case EmbeddingLayer::quantized: {
        Tensor batch({1, f->amplitude.dim(0), f->amplitude.dim(1), f->amplitude.dim(2)},
                     f->amplitude.raw());
        holder = model.encode(batch).e_d_grid;
        vec = holder.data();
        break;
      }
      case EmbeddingLayer::penultimate: {
        Tensor batch({1, f->amplitude.dim(0), f->amplitude.dim(1), f->amplitude.dim(2)},
                     f->amplitude.raw());
        auto enc = model.encode(batch);
        holder = model.classifier_hidden(make_const(enc.e_d_grid))->value;
        vec = holder.data();
        break;
      }
    }
    out << sample_ids[i] << ',' << f->label;
    for (std::int64_t k = 0; k < dim; ++k) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(vec[k]));
      out << ',' << buf;
    }
    out << "\n";
  }
}

}  // namespace efi
