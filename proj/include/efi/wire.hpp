#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace efi {

// Edge -> cloud message. On the wire (integers little-endian):
//   magic "EFQ1" | version u8 | K u16 | D u16 | M u16 | sample_id u32 |
//   flags u8 (bit0: label present) | [label u8] |
//   payload ceil(M*b/8) bytes, b = ceil(log2 K), MSB-first |
//   crc32 u32 over everything before it (IEEE polynomial)
// Fixed header is 16 bytes (17 with label); the CRC trailer adds 4.
struct QuantizedMessage {
  std::uint8_t version = 1;
  std::uint16_t codebook_size = 0;  // K
  std::uint16_t latent_dim = 0;     // D
  std::uint16_t num_indices = 0;    // M
  std::uint32_t sample_id = 0;
  bool has_label = false;
  std::uint8_t label = 0;
  std::vector<std::uint8_t> payload;
};

constexpr std::size_t kWireMagicSize = 4;
constexpr std::size_t kWireFixedHeaderSize = 16;  // magic..flags, without label
constexpr std::size_t kWireCrcSize = 4;

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len);

// Bits needed for an index in [0, K).
int bits_per_index(int codebook_size);

// Fixed-width MSB-first packing; the final byte is zero-padded.
std::vector<std::uint8_t> pack_indices(const std::vector<int>& indices, int codebook_size);

// Exact inverse; throws CorruptMessageError on wrong length or decoded
// index >= K. Pad bits are ignored.
std::vector<int> unpack_indices(const std::vector<std::uint8_t>& bytes, int codebook_size,
                                int num_indices);

std::size_t packed_size(int num_indices, int codebook_size);

std::size_t message_header_size(const QuantizedMessage& msg);
std::size_t message_wire_size(const QuantizedMessage& msg);

// Serialize with a freshly computed CRC.
std::vector<std::uint8_t> serialize_message(const QuantizedMessage& msg);

// Parse and fully validate one message from `data`; sets `consumed` to the
// number of bytes read.
QuantizedMessage parse_message(const std::uint8_t* data, std::size_t len, std::size_t& consumed);

}  // namespace efi
