#include "efi/wire.hpp"

#include <algorithm>
#include <array>
#include <string>

#include "efi/errors.hpp"

namespace efi {

namespace {

constexpr std::uint8_t kMagic[4] = {'E', 'F', 'Q', '1'};

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

const std::array<std::uint32_t, 256>& crc_table() {
  static const auto table = make_crc_table();
  return table;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len) {
  const auto& table = crc_table();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

int bits_per_index(int codebook_size) {
  if (codebook_size < 2) throw InputError("bits_per_index: codebook size must be >= 2");
  int bits = 0;
  while ((1 << bits) < codebook_size) ++bits;
  return bits == 0 ? 1 : bits;
}

std::size_t packed_size(int num_indices, int codebook_size) {
  const int b = bits_per_index(codebook_size);
  return (static_cast<std::size_t>(num_indices) * static_cast<std::size_t>(b) + 7) / 8;
}

std::vector<std::uint8_t> pack_indices(const std::vector<int>& indices, int codebook_size) {
  const int b = bits_per_index(codebook_size);
  std::vector<std::uint8_t> out(packed_size(static_cast<int>(indices.size()), codebook_size), 0);
  std::size_t bitpos = 0;
  for (int idx : indices) {
    if (idx < 0 || idx >= codebook_size) {
      throw InputError("pack_indices: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(codebook_size) + ")");
    }
    for (int k = b - 1; k >= 0; --k, ++bitpos) {
      if ((idx >> k) & 1) out[bitpos >> 3] |= static_cast<std::uint8_t>(0x80u >> (bitpos & 7));
    }
  }
  return out;
}

std::vector<int> unpack_indices(const std::vector<std::uint8_t>& bytes, int codebook_size,
                                int num_indices) {
  if (num_indices < 0) throw InputError("unpack_indices: negative count");
  const std::size_t want = packed_size(num_indices, codebook_size);
  if (bytes.size() != want) {
    throw CorruptMessageError("unpack_indices: payload is " + std::to_string(bytes.size()) +
                              " bytes, expected " + std::to_string(want));
  }
  const int b = bits_per_index(codebook_size);
  std::vector<int> out(static_cast<std::size_t>(num_indices), 0);
  std::size_t bitpos = 0;
  for (int i = 0; i < num_indices; ++i) {
    int v = 0;
    for (int k = 0; k < b; ++k, ++bitpos) {
      v = (v << 1) | ((bytes[bitpos >> 3] >> (7 - (bitpos & 7))) & 1);
    }
    if (v >= codebook_size) {
      throw CorruptMessageError("unpack_indices: decoded index " + std::to_string(v) +
                                " >= K=" + std::to_string(codebook_size));
    }
    out[static_cast<std::size_t>(i)] = v;
  }
  return out;
}

std::size_t message_header_size(const QuantizedMessage& msg) {
  return kWireFixedHeaderSize + (msg.has_label ? 1 : 0);
}

std::size_t message_wire_size(const QuantizedMessage& msg) {
  return message_header_size(msg) + msg.payload.size() + kWireCrcSize;
}

std::vector<std::uint8_t> serialize_message(const QuantizedMessage& msg) {
  if (msg.payload.size() != packed_size(msg.num_indices, msg.codebook_size)) {
    throw InputError("serialize_message: payload length does not match M and K");
  }
  std::vector<std::uint8_t> out;
  out.reserve(message_wire_size(msg));
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(msg.version);
  put_u16(out, msg.codebook_size);
  put_u16(out, msg.latent_dim);
  put_u16(out, msg.num_indices);
  put_u32(out, msg.sample_id);
  out.push_back(msg.has_label ? 0x01 : 0x00);
  if (msg.has_label) out.push_back(msg.label);
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  put_u32(out, crc32_ieee(out.data(), out.size()));
  return out;
}

QuantizedMessage parse_message(const std::uint8_t* data, std::size_t len, std::size_t& consumed) {
  if (len < kWireFixedHeaderSize) throw CorruptMessageError("message shorter than fixed header");
  if (!std::equal(kMagic, kMagic + 4, data)) throw CorruptMessageError("bad message magic");

  QuantizedMessage msg;
  msg.version = data[4];
  if (msg.version != 1) {
    throw CorruptMessageError("unsupported message version " + std::to_string(msg.version));
  }
  msg.codebook_size = get_u16(data + 5);
  msg.latent_dim = get_u16(data + 7);
  msg.num_indices = get_u16(data + 9);
  msg.sample_id = get_u32(data + 11);
  const std::uint8_t flags = data[15];
  if ((flags & ~0x01u) != 0) throw CorruptMessageError("unknown flag bits set");
  msg.has_label = (flags & 0x01u) != 0;
  if (msg.codebook_size < 2) throw CorruptMessageError("codebook size field < 2");

  std::size_t pos = kWireFixedHeaderSize;
  if (msg.has_label) {
    if (len < pos + 1) throw CorruptMessageError("truncated message (label)");
    msg.label = data[pos++];
  }
  const std::size_t payload_len = packed_size(msg.num_indices, msg.codebook_size);
  if (len < pos + payload_len + kWireCrcSize) throw CorruptMessageError("truncated message (payload)");
  msg.payload.assign(data + pos, data + pos + payload_len);
  pos += payload_len;
  const std::uint32_t stored = get_u32(data + pos);
  pos += kWireCrcSize;
  const std::uint32_t computed = crc32_ieee(data, pos - kWireCrcSize);
  if (stored != computed) throw CorruptMessageError("CRC mismatch");
  consumed = pos;
  return msg;
}

}  // namespace efi
