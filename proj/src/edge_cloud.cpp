#include "efi/edge_cloud.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "efi/errors.hpp"
#include "efi/eval.hpp"

namespace efi {

double gamma_paper(int codebook_size) {
  if (codebook_size < 64 || codebook_size > 1024 ||
      (codebook_size & (codebook_size - 1)) != 0) {
    throw InputError("gamma_paper: K must be a power of two in [64,1024]");
  }
  const double bits = std::log2(static_cast<double>(codebook_size));
  return 684000.0 / (static_cast<double>(codebook_size) * bits);
}

CompressionReport gamma_payload(const ArchitectureConfig& cfg, int codebook_size) {
  const ShapeTrace trace = propagate_shapes(cfg);
  CompressionReport r;
  r.codebook_size = codebook_size;
  r.latent_positions = trace.latent_positions;
  r.original_bytes = static_cast<std::int64_t>(cfg.in_channels) * cfg.in_height * cfg.in_width * 4;
  r.payload_bytes = static_cast<std::int64_t>(packed_size(trace.latent_positions, codebook_size));
  r.header_bytes = static_cast<std::int64_t>(kWireFixedHeaderSize + kWireCrcSize);
  r.gamma_payload = static_cast<double>(r.original_bytes) / static_cast<double>(r.payload_bytes);
  const bool paper_k = codebook_size >= 64 && codebook_size <= 1024 &&
                       (codebook_size & (codebook_size - 1)) == 0;
  r.gamma_paper = paper_k ? gamma_paper(codebook_size) : 0.0;
  return r;
}

EdgeEndpoint::EdgeEndpoint(Model model) : model_(std::move(model)) {
  if (!model_.has_encoder() || !model_.has_param("codebook")) {
    throw ProtocolError("edge endpoint needs encoder parameters and the codebook");
  }
}

QuantizedMessage EdgeEndpoint::encode_frame(const CSIFrame& frame, std::uint32_t sample_id,
                                            std::optional<std::uint8_t> label) const {
  const auto& cfg = model_.config();
  if (frame.amplitude.rank() != 3 || frame.amplitude.dim(0) != cfg.in_channels ||
      frame.amplitude.dim(1) != cfg.in_height || frame.amplitude.dim(2) != cfg.in_width) {
    throw InputError("encode_frame: frame shape " + shape_str(frame.amplitude.shape()) +
                     " does not match the model input");
  }
  NoGradGuard ng;
  Tensor batch({1, cfg.in_channels, cfg.in_height, cfg.in_width}, frame.amplitude.raw());
  auto enc = model_.encode(batch);

  QuantizedMessage msg;
  msg.codebook_size = static_cast<std::uint16_t>(cfg.codebook_size);
  msg.latent_dim = static_cast<std::uint16_t>(cfg.latent_dim);
  msg.num_indices = static_cast<std::uint16_t>(model_.trace().latent_positions);
  msg.sample_id = sample_id;
  if (label) {
    msg.has_label = true;
    msg.label = *label;
  }
  msg.payload = pack_indices(enc.indices, cfg.codebook_size);
  return msg;
}

CloudEndpoint::CloudEndpoint(Model model, std::string reconstruction_log)
    : model_(std::move(model)), log_path_(std::move(reconstruction_log)) {
  if (!model_.has_decoder() || !model_.has_classifier() || !model_.has_param("codebook")) {
    throw ProtocolError("cloud endpoint needs decoder, classifier and the codebook");
  }
}

DecodedFrame CloudEndpoint::decode_frame(const QuantizedMessage& msg) const {
  const auto& cfg = model_.config();
  const auto& trace = model_.trace();
  if (msg.codebook_size != cfg.codebook_size || msg.latent_dim != cfg.latent_dim ||
      msg.num_indices != trace.latent_positions) {
    throw ProtocolError("message K/D/M (" + std::to_string(msg.codebook_size) + "," +
                        std::to_string(msg.latent_dim) + "," + std::to_string(msg.num_indices) +
                        ") does not match the loaded model (" + std::to_string(cfg.codebook_size) +
                        "," + std::to_string(cfg.latent_dim) + "," +
                        std::to_string(trace.latent_positions) + ")");
  }
  NoGradGuard ng;
  const auto indices = unpack_indices(msg.payload, cfg.codebook_size, msg.num_indices);
  Tensor rows = dequantize(indices, model_.codebook()->value);
  Tensor grid = latent_rows_to_grid(rows, 1, trace.latent[0], trace.latent[1], trace.latent[2]);

  DecodedFrame out;
  out.sample_id = msg.sample_id;
  Tensor recon4 = model_.decode(grid);
  out.reconstruction = Tensor({cfg.in_channels, cfg.in_height, cfg.in_width}, recon4.raw());
  Tensor probs = model_.classify(grid);
  out.probabilities.assign(probs.data(), probs.data() + probs.numel());
  out.predicted = 0;
  for (int i = 1; i < static_cast<int>(out.probabilities.size()); ++i) {
    if (out.probabilities[static_cast<std::size_t>(i)] >
        out.probabilities[static_cast<std::size_t>(out.predicted)]) {
      out.predicted = i;
    }
  }
  if (msg.has_label) out.label = msg.label;

  if (!log_path_.empty()) {
    std::ofstream log(log_path_, std::ios::binary | std::ios::app);
    if (!log) throw LoadError("cannot append to reconstruction log " + log_path_);
    const std::uint32_t id = msg.sample_id;
    log.write(reinterpret_cast<const char*>(&id), 4);
    log.write(reinterpret_cast<const char*>(out.reconstruction.data()),
              static_cast<std::streamsize>(out.reconstruction.numel()) * 4);
  }
  return out;
}

DecodedFrame CloudEndpoint::decode_bytes(const std::uint8_t* data, std::size_t len,
                                         std::size_t& consumed) const {
  return decode_frame(parse_message(data, len, consumed));
}

namespace {

// response record: "EFR1" | sample_id u32 | predicted u8 | n_probs u8 |
// probs f32[n] | frame f32[C*S*T]
std::vector<std::uint8_t> serialize_result(const DecodedFrame& d) {
  std::vector<std::uint8_t> out;
  const std::size_t frame_bytes = static_cast<std::size_t>(d.reconstruction.numel()) * 4;
  out.reserve(10 + d.probabilities.size() * 4 + frame_bytes);
  out.insert(out.end(), {'E', 'F', 'R', '1'});
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((d.sample_id >> (8 * i)) & 0xff));
  out.push_back(static_cast<std::uint8_t>(d.predicted));
  out.push_back(static_cast<std::uint8_t>(d.probabilities.size()));
  const auto* pp = reinterpret_cast<const std::uint8_t*>(d.probabilities.data());
  out.insert(out.end(), pp, pp + d.probabilities.size() * 4);
  const auto* pf = reinterpret_cast<const std::uint8_t*>(d.reconstruction.data());
  out.insert(out.end(), pf, pf + frame_bytes);
  return out;
}

DecodedFrame parse_result(const std::uint8_t* data, std::size_t len, const Shape& frame_shape,
                          std::size_t& consumed) {
  const std::int64_t frame_n = shape_numel(frame_shape);
  if (len < 10) throw ProtocolError("short result record");
  if (std::memcmp(data, "EFR1", 4) != 0) throw ProtocolError("bad result record magic");
  DecodedFrame d;
  d.sample_id = static_cast<std::uint32_t>(data[4]) | (static_cast<std::uint32_t>(data[5]) << 8) |
                (static_cast<std::uint32_t>(data[6]) << 16) |
                (static_cast<std::uint32_t>(data[7]) << 24);
  d.predicted = data[8];
  const std::size_t n_probs = data[9];
  const std::size_t want = 10 + n_probs * 4 + static_cast<std::size_t>(frame_n) * 4;
  if (len < want) throw ProtocolError("truncated result record");
  d.probabilities.resize(n_probs);
  std::memcpy(d.probabilities.data(), data + 10, n_probs * 4);
  std::vector<float> frame(static_cast<std::size_t>(frame_n));
  std::memcpy(frame.data(), data + 10 + n_probs * 4, static_cast<std::size_t>(frame_n) * 4);
  d.reconstruction = Tensor(frame_shape, std::move(frame));
  consumed = want;
  return d;
}

void write_all(int fd, const std::uint8_t* data, std::size_t len) {
  std::size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::write(fd, data + sent, len - sent);
    if (n <= 0) throw ProtocolError("socket write failed");
    sent += static_cast<std::size_t>(n);
  }
}

bool read_exact(int fd, std::uint8_t* data, std::size_t len) {
  std::size_t got = 0;
  while (got < len) {
    const ssize_t n = ::read(fd, data + got, len - got);
    if (n == 0) return false;
    if (n < 0) throw ProtocolError("socket read failed");
    got += static_cast<std::size_t>(n);
  }
  return true;
}

// reads one self-delimiting quantized message from the stream
bool read_message_bytes(int fd, std::vector<std::uint8_t>& buf) {
  buf.resize(kWireFixedHeaderSize);
  if (!read_exact(fd, buf.data(), kWireFixedHeaderSize)) return false;
  const std::uint16_t k = static_cast<std::uint16_t>(buf[5] | (buf[6] << 8));
  const std::uint16_t m = static_cast<std::uint16_t>(buf[9] | (buf[10] << 8));
  const bool has_label = (buf[15] & 0x01) != 0;
  if (k < 2) throw CorruptMessageError("codebook size field < 2");
  const std::size_t rest = (has_label ? 1 : 0) + packed_size(m, k) + kWireCrcSize;
  const std::size_t head = buf.size();
  buf.resize(head + rest);
  if (!read_exact(fd, buf.data() + head, rest)) throw CorruptMessageError("truncated stream");
  return true;
}

struct SessionAccumulator {
  std::vector<int> predictions;
  std::vector<double> ratios;

  void add(const CSIFrame& original, const DecodedFrame& d) {
    predictions.push_back(d.predicted);
    ratios.push_back(nmse_ratio(original.amplitude, d.reconstruction));
  }
};

}  // namespace

SessionReport simulate_session(const std::vector<const CSIFrame*>& frames,
                               const EdgeEndpoint& edge, const CloudEndpoint& cloud,
                               std::optional<int> tcp_port) {
  if (frames.empty()) throw InputError("simulate_session: no frames");
  SessionReport report;
  SessionAccumulator acc;
  std::vector<int> labels;
  labels.reserve(frames.size());
  for (const CSIFrame* f : frames) labels.push_back(f->label);

  const auto t0 = std::chrono::steady_clock::now();

  if (!tcp_port) {
    // in-process byte channel
    std::uint32_t next_id = 0;
    for (const CSIFrame* f : frames) {
      const auto msg = edge.encode_frame(*f, next_id++, static_cast<std::uint8_t>(f->label));
      const auto bytes = serialize_message(msg);
      report.bytes_transferred += static_cast<std::int64_t>(bytes.size());
      report.payload_bytes += static_cast<std::int64_t>(msg.payload.size());
      report.header_bytes += static_cast<std::int64_t>(message_header_size(msg) + kWireCrcSize);
      std::size_t consumed = 0;
      const auto decoded = cloud.decode_bytes(bytes.data(), bytes.size(), consumed);
      if (consumed != bytes.size()) throw ProtocolError("message framing error");
      acc.add(*f, decoded);
    }
  } else {
    const int listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd < 0) throw ProtocolError("cannot create socket");
    const int reuse = 1;
    ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &reuse, sizeof(reuse));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(*tcp_port));
    if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd, 1) != 0) {
      ::close(listen_fd);
      throw ProtocolError("cannot bind/listen on port " + std::to_string(*tcp_port));
    }

    std::exception_ptr cloud_error;
    std::thread server([&] {
      try {
        const int conn = ::accept(listen_fd, nullptr, nullptr);
        if (conn < 0) throw ProtocolError("accept failed");
        std::vector<std::uint8_t> buf;
        while (read_message_bytes(conn, buf)) {
          std::size_t consumed = 0;
          const auto decoded = cloud.decode_bytes(buf.data(), buf.size(), consumed);
          const auto resp = serialize_result(decoded);
          write_all(conn, resp.data(), resp.size());
        }
        ::close(conn);
      } catch (...) {
        cloud_error = std::current_exception();
      }
    });

    int fd = -1;
    try {
      fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw ProtocolError("cannot create client socket");
      for (int attempt = 0;; ++attempt) {
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
        if (attempt > 50) throw ProtocolError("cannot connect to cloud endpoint");
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      const Shape frame_shape = frames[0]->amplitude.shape();
      const std::int64_t frame_n = shape_numel(frame_shape);
      std::uint32_t next_id = 0;
      for (const CSIFrame* f : frames) {
        const auto msg = edge.encode_frame(*f, next_id++, static_cast<std::uint8_t>(f->label));
        const auto bytes = serialize_message(msg);
        report.bytes_transferred += static_cast<std::int64_t>(bytes.size());
        report.payload_bytes += static_cast<std::int64_t>(msg.payload.size());
        report.header_bytes += static_cast<std::int64_t>(message_header_size(msg) + kWireCrcSize);
        write_all(fd, bytes.data(), bytes.size());

        const std::size_t resp_len =
            10 + static_cast<std::size_t>(edge.model().config().num_classes) * 4 +
            static_cast<std::size_t>(frame_n) * 4;
        std::vector<std::uint8_t> resp(resp_len);
        if (!read_exact(fd, resp.data(), resp.size())) throw ProtocolError("cloud closed early");
        std::size_t consumed = 0;
        acc.add(*f, parse_result(resp.data(), resp.size(), frame_shape, consumed));
      }
      ::shutdown(fd, SHUT_WR);
      ::close(fd);
      fd = -1;
      server.join();
      ::close(listen_fd);
      if (cloud_error) std::rethrow_exception(cloud_error);
    } catch (...) {
      if (fd >= 0) ::close(fd);
      if (server.joinable()) server.join();
      ::close(listen_fd);
      throw;
    }
  }

  const auto t1 = std::chrono::steady_clock::now();
  report.elapsed_sec = std::chrono::duration<double>(t1 - t0).count();
  report.frames = static_cast<int>(frames.size());
  report.accuracy = accuracy(acc.predictions, labels);
  report.nmse_db = nmse_db_from_ratios(acc.ratios);
  report.msgs_per_sec = report.elapsed_sec > 0 ? report.frames / report.elapsed_sec : 0.0;
  return report;
}

}  // namespace efi
