#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taillab {

// Wire format: every message is a frame with a fixed 24-byte header
// followed by an opaque payload. All multi-byte fields little-endian.
//
//   offset  size  field
//   0       2     magic 0x54 0x42 ("TB")
//   2       1     version (1)
//   3       1     kind
//   4       8     request_id
//   12      8     client_id
//   20      4     payload_len
//   24      ...   payload

inline constexpr uint8_t kMagic0 = 0x54;
inline constexpr uint8_t kMagic1 = 0x42;
inline constexpr uint8_t kProtoVersion = 1;
inline constexpr size_t kHeaderSize = 24;

enum class FrameKind : uint8_t {
  kRequest = 1,
  kResponse = 2,
  kClientHello = 3,
  kClientBye = 4,
};

struct Frame {
  FrameKind kind = FrameKind::kRequest;
  uint64_t request_id = 0;
  uint64_t client_id = 0;
  uint32_t payload_len = 0;
  std::vector<uint8_t> payload;
};

inline Frame make_frame(FrameKind kind, uint64_t request_id, uint64_t client_id,
                        std::vector<uint8_t> payload = {}) {
  Frame f;
  f.kind = kind;
  f.request_id = request_id;
  f.client_id = client_id;
  f.payload_len = static_cast<uint32_t>(payload.size());
  f.payload = std::move(payload);
  return f;
}

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32le(uint8_t* p, uint32_t v) {
  p[0] = static_cast<uint8_t>(v);
  p[1] = static_cast<uint8_t>(v >> 8);
  p[2] = static_cast<uint8_t>(v >> 16);
  p[3] = static_cast<uint8_t>(v >> 24);
}

inline void put_u64le(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = static_cast<uint8_t>(v >> (8 * i));
}

inline uint32_t get_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

inline uint64_t get_u64le(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = v << 8 | p[i];
  return v;
}

}  // namespace detail

/// Serializes a frame. The frame's payload_len must equal payload.size().
inline std::vector<uint8_t> encode(const Frame& f) {
  if (f.payload.size() > 0xffffffffull) {
    throw ProtocolError("payload exceeds 2^32-1 bytes");
  }
  if (f.payload_len != f.payload.size()) {
    throw ProtocolError("payload_len " + std::to_string(f.payload_len) +
                        " does not match payload size " +
                        std::to_string(f.payload.size()));
  }
  std::vector<uint8_t> out(kHeaderSize + f.payload.size());
  out[0] = kMagic0;
  out[1] = kMagic1;
  out[2] = kProtoVersion;
  out[3] = static_cast<uint8_t>(f.kind);
  detail::put_u64le(out.data() + 4, f.request_id);
  detail::put_u64le(out.data() + 12, f.client_id);
  detail::put_u32le(out.data() + 20, f.payload_len);
  std::memcpy(out.data() + kHeaderSize, f.payload.data(), f.payload.size());
  return out;
}

enum class DecodeStatus {
  kOk,
  kIncomplete,   // need more bytes; retry after the next read
  kBadMagic,     // protocol error, connection unusable
  kBadVersion,   // protocol error
  kBadKind,      // protocol error
};

struct DecodeResult {
  DecodeStatus status = DecodeStatus::kIncomplete;
  Frame frame;
  size_t consumed = 0;  // bytes consumed from the input on kOk
};

/// Parses one frame from the front of `bytes`. Consumes exactly
/// 24 + payload_len bytes on success; consumes nothing otherwise.
inline DecodeResult decode(std::span<const uint8_t> bytes) {
  DecodeResult r;
  if (bytes.size() < kHeaderSize) return r;
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1) {
    r.status = DecodeStatus::kBadMagic;
    return r;
  }
  if (bytes[2] != kProtoVersion) {
    r.status = DecodeStatus::kBadVersion;
    return r;
  }
  if (bytes[3] < 1 || bytes[3] > 4) {
    r.status = DecodeStatus::kBadKind;
    return r;
  }
  uint32_t len = detail::get_u32le(bytes.data() + 20);
  if (bytes.size() < kHeaderSize + static_cast<size_t>(len)) return r;
  r.frame.kind = static_cast<FrameKind>(bytes[3]);
  r.frame.request_id = detail::get_u64le(bytes.data() + 4);
  r.frame.client_id = detail::get_u64le(bytes.data() + 12);
  r.frame.payload_len = len;
  r.frame.payload.assign(bytes.begin() + kHeaderSize,
                         bytes.begin() + kHeaderSize + len);
  r.consumed = kHeaderSize + len;
  r.status = DecodeStatus::kOk;
  return r;
}

inline bool operator==(const Frame& a, const Frame& b) {
  return a.kind == b.kind && a.request_id == b.request_id &&
         a.client_id == b.client_id && a.payload_len == b.payload_len &&
         a.payload == b.payload;
}

/// Server-side timing record carried in RESPONSE payloads (28 bytes).
struct ResponsePayload {
  uint64_t server_recv_ns = 0;     // stamped when the request left the socket
  uint64_t service_start_ns = 0;   // workload execution began
  uint64_t service_end_ns = 0;     // workload execution finished
  uint32_t server_id = 0;
};

inline constexpr size_t kResponsePayloadSize = 28;

inline std::vector<uint8_t> encode_response_payload(const ResponsePayload& p) {
  std::vector<uint8_t> out(kResponsePayloadSize);
  detail::put_u64le(out.data(), p.server_recv_ns);
  detail::put_u64le(out.data() + 8, p.service_start_ns);
  detail::put_u64le(out.data() + 16, p.service_end_ns);
  detail::put_u32le(out.data() + 24, p.server_id);
  return out;
}

inline ResponsePayload decode_response_payload(std::span<const uint8_t> bytes) {
  if (bytes.size() < kResponsePayloadSize) {
    throw ProtocolError("response payload too short: " +
                        std::to_string(bytes.size()) + " bytes");
  }
  ResponsePayload p;
  p.server_recv_ns = detail::get_u64le(bytes.data());
  p.service_start_ns = detail::get_u64le(bytes.data() + 8);
  p.service_end_ns = detail::get_u64le(bytes.data() + 16);
  p.server_id = detail::get_u32le(bytes.data() + 24);
  return p;
}

/// Incremental frame parser for a byte stream. Feed socket reads in,
/// pull complete frames out; partial frames stay buffered.
class FrameReader {
 public:
  void feed(std::span<const uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  /// Next frame, or kIncomplete when more bytes are needed. A protocol
  /// error status is sticky: the stream has no recoverable framing.
  DecodeResult next() {
    DecodeResult r = decode(std::span<const uint8_t>(buf_).subspan(off_));
    if (r.status == DecodeStatus::kOk) {
      off_ += r.consumed;
      if (off_ > 64 * 1024 || off_ == buf_.size()) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<long>(off_));
        off_ = 0;
      }
    }
    return r;
  }

  size_t buffered() const { return buf_.size() - off_; }

 private:
  std::vector<uint8_t> buf_;
  size_t off_ = 0;
};

}  // namespace taillab
