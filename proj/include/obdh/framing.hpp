#pragma once

// Incremental, byte-at-a-time codecs for every link protocol on the bus.
//
//   Ground segment uplink   '#' id reserved payload... '&'
//   Ground segment downlink '#' id payload... '&'          (no reserved byte)
//   Wheel drive electronics payload... 0xAC
//   Star sensor             type byte selects a fixed total length
//   Battery / custom board  lead byte, fixed length, XOR check, 0xAC
//   GPS                     printable sentence ending in LF
//
// None of these protocols escape their delimiters. Encoders reject payloads
// that would be misparsed instead of inventing byte stuffing.

#include "obdh/bytes.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

namespace obdh {

class FramingError : public Error {
public:
    using Error::Error;
};

inline constexpr std::uint8_t kGsStart = 0x23;        // '#'
inline constexpr std::uint8_t kGsEnd = 0x26;          // '&'
inline constexpr std::uint8_t kWdeTerminator = 0xAC;

inline constexpr std::size_t kGsDefaultCap = 4096;
inline constexpr std::size_t kWdeCap = 4096;
inline constexpr std::size_t kStsMaxLength = 3120;

// ---------------------------------------------------------------------------
// Ground segment

struct GsFrame {
    std::uint8_t subsystem_id = 0;
    std::uint8_t reserved = 0;
    Bytes payload;

    bool operator==(const GsFrame&) const = default;
};

inline bool is_valid_gs_payload(ByteView payload) {
    return std::none_of(payload.begin(), payload.end(),
                        [](std::uint8_t b) { return b == kGsStart || b == kGsEnd; });
}

inline Bytes encode_gs_frame(const GsFrame& frame) {
    if (!is_valid_gs_payload(frame.payload))
        throw FramingError("payload contains a ground-segment delimiter (0x23 or 0x26)");
    Bytes out;
    out.reserve(frame.payload.size() + 4);
    out.push_back(kGsStart);
    out.push_back(frame.subsystem_id);
    out.push_back(frame.reserved);
    out.insert(out.end(), frame.payload.begin(), frame.payload.end());
    out.push_back(kGsEnd);
    return out;
}

// Downlink envelope. Payload is forwarded verbatim, unchecked.
inline Bytes encode_downlink(std::uint8_t subsystem_id, ByteView payload) {
    Bytes out;
    out.reserve(payload.size() + 3);
    out.push_back(kGsStart);
    out.push_back(subsystem_id);
    out.insert(out.end(), payload.begin(), payload.end());
    out.push_back(kGsEnd);
    return out;
}

struct GsEvent {
    enum class Kind { Pending, Reset, Complete };
    Kind kind = Kind::Pending;
    bool overflow = false;
    GsFrame frame; // valid for Complete
};

// '#' always restarts accumulation. '&' completes a frame once id and
// reserved are present (at least 4 bytes including both delimiters).
// Bytes outside a frame are discarded.
class GsDeframer {
public:
    explicit GsDeframer(std::size_t cap = kGsDefaultCap) : cap_(cap) { buffer_.reserve(64); }

    GsEvent push(std::uint8_t b) {
        if (b == kGsStart) {
            buffer_.clear();
            buffer_.push_back(b);
            return {GsEvent::Kind::Reset, false, {}};
        }
        if (buffer_.empty())
            return {};
        if (buffer_.size() >= cap_) {
            buffer_.clear();
            return {GsEvent::Kind::Reset, true, {}};
        }
        buffer_.push_back(b);
        if (b == kGsEnd && buffer_.size() >= 4) {
            GsEvent ev{GsEvent::Kind::Complete, false, {}};
            ev.frame.subsystem_id = buffer_[1];
            ev.frame.reserved = buffer_[2];
            ev.frame.payload.assign(buffer_.begin() + 3, buffer_.end() - 1);
            buffer_.clear();
            return ev;
        }
        return {};
    }

    std::size_t index() const { return buffer_.size(); }
    void reset() { buffer_.clear(); }

private:
    std::size_t cap_;
    Bytes buffer_;
};

// ---------------------------------------------------------------------------
// Wheel drive electronics

struct WdeEvent {
    enum class Kind { Pending, Complete };
    Kind kind = Kind::Pending;
    bool overflow = false;
    Bytes frame; // includes the 0xAC terminator
};

class WdeDeframer {
public:
    explicit WdeDeframer(std::size_t cap = kWdeCap) : cap_(cap) {}

    WdeEvent push(std::uint8_t b) {
        if (buffer_.size() >= cap_) {
            buffer_.clear();
            return {WdeEvent::Kind::Pending, true, {}};
        }
        buffer_.push_back(b);
        if (b == kWdeTerminator) {
            WdeEvent ev{WdeEvent::Kind::Complete, false, std::move(buffer_)};
            buffer_ = {};
            return ev;
        }
        return {};
    }

    std::size_t index() const { return buffer_.size(); }

private:
    std::size_t cap_;
    Bytes buffer_;
};

// ---------------------------------------------------------------------------
// Star sensor

struct StsTypeEntry {
    std::uint8_t type;
    std::size_t total_length; // includes the type byte
};

class StsTypeTable {
public:
    static constexpr std::array<StsTypeEntry, 7> kEntries{{
        {0x00, 152},
        {0x01, 16},
        {0xA0, 11},
        {0xA7, 3120},
        {0xA8, 180},
        {0x4D, 8},
        {0x02, 32},
    }};

    std::optional<std::size_t> lookup(std::uint8_t type) const {
        for (const auto& e : kEntries)
            if (e.type == type)
                return e.total_length;
        return std::nullopt;
    }

    const auto& entries() const { return kEntries; }
};

inline std::optional<std::size_t> sts_expected_length(std::uint8_t type, const StsTypeTable& table = {}) {
    return table.lookup(type);
}

struct StsEvent {
    enum class Kind { Pending, Complete, Resync };
    Kind kind = Kind::Pending;
    Bytes frame;
};

class StsDeframer {
public:
    explicit StsDeframer(StsTypeTable table = {}) : table_(table) {}

    StsEvent push(std::uint8_t b) {
        if (buffer_.empty()) {
            const auto len = table_.lookup(b);
            if (!len)
                return {StsEvent::Kind::Resync, {}};
            expected_ = *len;
            buffer_.reserve(expected_);
        }
        buffer_.push_back(b);
        if (buffer_.size() == expected_) {
            StsEvent ev{StsEvent::Kind::Complete, std::move(buffer_)};
            buffer_ = {};
            expected_ = 0;
            return ev;
        }
        return {};
    }

    std::size_t index() const { return buffer_.size(); }
    std::size_t expected_length() const { return expected_; }

private:
    StsTypeTable table_;
    Bytes buffer_;
    std::size_t expected_ = 0;
};

// ---------------------------------------------------------------------------
// Auxiliary housekeeping subsystems

enum class AuxKind { Battery, Gps, Custom };

inline constexpr std::uint8_t kBatteryLead = 0xB1;
inline constexpr std::size_t kBatteryFrameLength = 8;
inline constexpr std::uint8_t kCustomLead = 0xC1;
inline constexpr std::size_t kCustomFrameLength = 10;
inline constexpr std::uint8_t kGpsTerminator = 0x0A;
inline constexpr std::size_t kGpsCap = 256;

inline std::uint8_t xor_checksum(ByteView data) {
    std::uint8_t chk = 0;
    for (auto b : data)
        chk ^= b;
    return chk;
}

struct AuxEvent {
    enum class Kind { Pending, Complete, Resync };
    Kind kind = Kind::Pending;
    Bytes frame;
};

// Battery and custom frames are keyed by lead byte and fixed length, then
// checked for terminator and XOR sum; a bad frame is dropped as Resync.
// GPS sentences start at '$' and end at LF.
class AuxDeframer {
public:
    explicit AuxDeframer(AuxKind kind) : kind_(kind) {}

    AuxEvent push(std::uint8_t b) {
        if (kind_ == AuxKind::Gps)
            return push_gps(b);
        const std::uint8_t lead = kind_ == AuxKind::Battery ? kBatteryLead : kCustomLead;
        const std::size_t length = kind_ == AuxKind::Battery ? kBatteryFrameLength : kCustomFrameLength;
        if (buffer_.empty() && b != lead)
            return {AuxEvent::Kind::Resync, {}};
        buffer_.push_back(b);
        if (buffer_.size() < length)
            return {};
        Bytes frame = std::move(buffer_);
        buffer_ = {};
        const bool ok = frame.back() == kWdeTerminator &&
                        xor_checksum(ByteView(frame).first(length - 2)) == frame[length - 2];
        if (!ok)
            return {AuxEvent::Kind::Resync, {}};
        return {AuxEvent::Kind::Complete, std::move(frame)};
    }

    AuxKind kind() const { return kind_; }

private:
    AuxEvent push_gps(std::uint8_t b) {
        if (buffer_.empty() && b != '$')
            return {AuxEvent::Kind::Resync, {}};
        if (b == '$' && !buffer_.empty()) {
            buffer_.assign(1, b);
            return {AuxEvent::Kind::Resync, {}};
        }
        if (buffer_.size() >= kGpsCap) {
            buffer_.clear();
            return {AuxEvent::Kind::Resync, {}};
        }
        buffer_.push_back(b);
        if (b == kGpsTerminator) {
            AuxEvent ev{AuxEvent::Kind::Complete, std::move(buffer_)};
            buffer_ = {};
            return ev;
        }
        return {};
    }

    AuxKind kind_;
    Bytes buffer_;
};

// ---------------------------------------------------------------------------
// Downlink envelopes, as seen by ground equipment.

// Unchecked: no knowledge of this id; plain '#'/'&' delimiting applies.
enum class PayloadCheck { Complete, Incomplete, Invalid, Unchecked };

// Decides whether a payload accumulated for `id` forms one whole subsystem
// frame. Lets the deframer treat '#' and '&' inside a payload as data.
using DownlinkValidator = std::function<PayloadCheck(std::uint8_t id, ByteView payload)>;

struct DownlinkEvent {
    enum class Kind { Pending, Reset, Complete };
    Kind kind = Kind::Pending;
    bool overflow = false;
    std::uint8_t subsystem_id = 0;
    Bytes payload;
};

// Without a validator this behaves like the uplink parser: '#' restarts and
// '&' terminates. With one, delimiters inside a payload are accepted as data
// until the validator reports the payload whole.
class DownlinkDeframer {
public:
    explicit DownlinkDeframer(DownlinkValidator validator = {}, std::size_t cap = kStsMaxLength + 16)
        : validator_(std::move(validator)), cap_(cap) {}

    DownlinkEvent push(std::uint8_t b) {
        switch (state_) {
        case State::Idle:
            if (b == kGsStart) {
                state_ = State::Id;
                return {DownlinkEvent::Kind::Reset, false, 0, {}};
            }
            return {};
        case State::Id:
            id_ = b;
            payload_.clear();
            state_ = State::Payload;
            return {};
        case State::Payload:
            break;
        }

        if (b == kGsEnd) {
            const auto check = validator_ ? validator_(id_, payload_) : PayloadCheck::Unchecked;
            if (check == PayloadCheck::Complete || check == PayloadCheck::Unchecked) {
                DownlinkEvent ev{DownlinkEvent::Kind::Complete, false, id_, std::move(payload_)};
                payload_ = {};
                state_ = State::Idle;
                return ev;
            }
            if (check == PayloadCheck::Invalid) {
                payload_.clear();
                state_ = State::Idle;
                return {DownlinkEvent::Kind::Reset, false, 0, {}};
            }
        } else if (b == kGsStart) {
            const auto check = validator_ ? validator_(id_, payload_) : PayloadCheck::Unchecked;
            if (check == PayloadCheck::Invalid || check == PayloadCheck::Unchecked) {
                state_ = State::Id;
                return {DownlinkEvent::Kind::Reset, false, 0, {}};
            }
        }

        if (payload_.size() >= cap_) {
            payload_.clear();
            state_ = b == kGsStart ? State::Id : State::Idle;
            return {DownlinkEvent::Kind::Reset, true, 0, {}};
        }
        payload_.push_back(b);
        return {};
    }

private:
    enum class State { Idle, Id, Payload };

    DownlinkValidator validator_;
    std::size_t cap_;
    State state_ = State::Idle;
    std::uint8_t id_ = 0;
    Bytes payload_;
};

// ---------------------------------------------------------------------------

// Minimal base-2 text, most significant bit first. Zero yields "".
inline std::string convert_to_bin(std::int64_t n) {
    if (n < 0)
        throw Error("convert_to_bin: negative input");
    if (n >= (std::int64_t{1} << 31))
        throw Error("convert_to_bin: input must be < 2^31");
    std::string bits;
    while (n != 0) {
        bits.push_back((n & 1) ? '1' : '0');
        n >>= 1;
    }
    return {bits.rbegin(), bits.rend()};
}

} // namespace obdh
