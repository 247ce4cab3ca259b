#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "efi/model.hpp"
#include "efi/synthetic_csi.hpp"
#include "efi/wire.hpp"

namespace efi {

struct CompressionReport {
  std::int64_t original_bytes = 0;
  std::int64_t payload_bytes = 0;
  std::int64_t header_bytes = 0;
  double gamma_payload = 0.0;
  double gamma_paper = 0.0;
  int codebook_size = 0;   // K
  int latent_positions = 0;  // M
};

// The published accounting 684000 / (K * log2 K); K must be a power of two
// in [64, 1024]. Reproduces the gamma columns of the reported tables.
double gamma_paper(int codebook_size);

// True wire accounting for a configuration: original amplitude bytes over
// packed payload bytes, with gamma_paper alongside for comparison.
CompressionReport gamma_payload(const ArchitectureConfig& cfg, int codebook_size);

// Encoder + codebook living at the AP side.
class EdgeEndpoint {
 public:
  explicit EdgeEndpoint(Model model);

  QuantizedMessage encode_frame(const CSIFrame& frame, std::uint32_t sample_id,
                                std::optional<std::uint8_t> label = std::nullopt) const;

  const Model& model() const { return model_; }

 private:
  Model model_;
};

struct DecodedFrame {
  std::uint32_t sample_id = 0;
  Tensor reconstruction;  // (C,S,T)
  int predicted = -1;
  std::vector<float> probabilities;
  std::optional<std::uint8_t> label;
};

// Decoder + classifier + codebook at the server side. Optionally appends
// every reconstruction to an append-only log file (sample_id + raw floats).
class CloudEndpoint {
 public:
  explicit CloudEndpoint(Model model, std::string reconstruction_log = "");

  DecodedFrame decode_frame(const QuantizedMessage& msg) const;
  DecodedFrame decode_bytes(const std::uint8_t* data, std::size_t len, std::size_t& consumed) const;

  const Model& model() const { return model_; }

 private:
  Model model_;
  std::string log_path_;
};

struct SessionReport {
  int frames = 0;
  double accuracy = 0.0;
  double nmse_db = 0.0;
  std::int64_t bytes_transferred = 0;  // edge -> cloud direction
  std::int64_t payload_bytes = 0;
  std::int64_t header_bytes = 0;
  double msgs_per_sec = 0.0;
  double elapsed_sec = 0.0;
};

// Streams every frame through encode_frame/decode_frame over an in-process
// byte channel, or over loopback TCP (cloud endpoint on a service thread)
// when tcp_port is set. Metrics aggregate at the caller, which holds the
// originals and labels.
SessionReport simulate_session(const std::vector<const CSIFrame*>& frames,
                               const EdgeEndpoint& edge, const CloudEndpoint& cloud,
                               std::optional<int> tcp_port = std::nullopt);

}  // namespace efi
