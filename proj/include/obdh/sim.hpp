#pragma once

// Protocol-level simulators for the subsystems wired to the OBDH, plus the
// passive hook node used to close a test loop.
//
// WDE command set (reply always ends with 0xAC, never contains it inside):
//   [0x01]          -> [0x01, seq, speed_hi, speed_lo, 0xAC]   telemetry
//   [0x02, hi, lo]  -> [0x02, 0x00, 0xAC]                      set speed (int16 rpm)
//   anything else   -> [0xEE, 0xAC]                            nak
// Reply bytes equal to 0xAC are saturated to 0xAB.
//
// Battery frame: [0xB1, seq, v_hi, v_lo, i_hi, i_lo, chk, 0xAC]
// Custom board:  [0xC1, seq, t_hi, t_lo, v_hi, v_lo, i_hi, i_lo, chk, 0xAC]
//   volts, amps and degrees C are signed 16-bit fixed point, x100.
//   chk is the XOR of every byte before it.
// GPS: "$GPGGA,...*hh\n"

#include "obdh/framing.hpp"
#include "obdh/transport.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <optional>
#include <random>
#include <stop_token>
#include <thread>

namespace obdh {

// ---------------------------------------------------------------------------
// Wheel drive electronics

inline constexpr std::uint8_t kWdeCmdTelemetry = 0x01;
inline constexpr std::uint8_t kWdeCmdSetSpeed = 0x02;
inline constexpr std::uint8_t kWdeNak = 0xEE;
inline constexpr int kMaxWheelSpeed = 10'000;

struct WdeState {
    int wheel_speed = 0; // rpm
    std::uint8_t device_id = 0x01;
    std::uint8_t telemetry_seq = 0;
};

namespace detail {

inline std::uint8_t saturate_terminator(std::uint8_t b) {
    return b == kWdeTerminator ? static_cast<std::uint8_t>(kWdeTerminator - 1) : b;
}

} // namespace detail

inline Bytes wde_sim_step(WdeState& state, ByteView command) {
    if (command.size() == 1 && command[0] == kWdeCmdTelemetry) {
        const auto raw = static_cast<std::uint16_t>(static_cast<std::int16_t>(state.wheel_speed));
        Bytes reply{kWdeCmdTelemetry, detail::saturate_terminator(state.telemetry_seq),
                    detail::saturate_terminator(static_cast<std::uint8_t>(raw >> 8)),
                    detail::saturate_terminator(static_cast<std::uint8_t>(raw & 0xFF)), kWdeTerminator};
        ++state.telemetry_seq;
        return reply;
    }
    if (command.size() == 3 && command[0] == kWdeCmdSetSpeed) {
        const auto rpm = static_cast<std::int16_t>(get_u16_be(command, 1));
        state.wheel_speed = std::clamp<int>(rpm, -kMaxWheelSpeed, kMaxWheelSpeed);
        return {kWdeCmdSetSpeed, 0x00, kWdeTerminator};
    }
    return {kWdeNak, kWdeTerminator};
}

inline Bytes wde_set_speed_command(int rpm) {
    Bytes cmd{kWdeCmdSetSpeed};
    put_u16_be(cmd, static_cast<std::uint16_t>(static_cast<std::int16_t>(rpm)));
    return cmd;
}

struct WdeTelemetry {
    std::uint8_t seq = 0;
    int wheel_speed = 0;
};

inline std::optional<WdeTelemetry> decode_wde_telemetry(ByteView reply) {
    if (reply.size() != 5 || reply[0] != kWdeCmdTelemetry || reply[4] != kWdeTerminator)
        return std::nullopt;
    return WdeTelemetry{reply[1], static_cast<std::int16_t>(get_u16_be(reply, 2))};
}

// Splits the raw command stream a WDE sees into commands. OBDH forwards
// payloads without framing, so command boundaries come from opcode lengths.
class WdeCommandParser {
public:
    std::optional<Bytes> push(std::uint8_t b) {
        buffer_.push_back(b);
        const std::size_t need = buffer_[0] == kWdeCmdSetSpeed ? 3 : 1;
        if (buffer_.size() < need)
            return std::nullopt;
        Bytes cmd = std::move(buffer_);
        buffer_ = {};
        return cmd;
    }

    // A partial command abandoned by an inter-character timeout.
    std::optional<Bytes> flush() {
        if (buffer_.empty())
            return std::nullopt;
        Bytes cmd = std::move(buffer_);
        buffer_ = {};
        return cmd;
    }

private:
    Bytes buffer_;
};

// ---------------------------------------------------------------------------
// Star sensor

struct StsState {
    std::uint8_t device_id = 0x04;
    std::uint64_t attitude_seed = 1;
    std::uint64_t emitted = 0;
};

inline Bytes sts_sim_emit(StsState& state, std::uint8_t type_byte, const StsTypeTable& table = {}) {
    const auto len = table.lookup(type_byte);
    if (!len)
        throw Error("unknown star sensor type 0x" + hex_byte(type_byte));
    std::mt19937_64 gen(state.attitude_seed * 0x9E3779B97F4A7C15ULL + state.emitted);
    ++state.emitted;
    Bytes frame(*len);
    frame[0] = type_byte;
    for (std::size_t i = 1; i < frame.size(); ++i)
        frame[i] = static_cast<std::uint8_t>(gen() & 0xFF);
    return frame;
}

// ---------------------------------------------------------------------------
// Battery, GPS and custom housekeeping board

struct AuxState {
    double battery_voltage = 28.0; // V, 0..35
    double battery_current = 1.5;  // A
    std::string gps_fix = "0614.3000,S,10649.5000,E";
    double temperature = 25.0;     // deg C, -40..85
    double board_voltage = 5.0;    // V
    double board_current = 0.25;   // A
    std::uint8_t seq = 0;
};

inline constexpr double kBatteryMaxVoltage = 35.0;
inline constexpr double kMinTemperature = -40.0;
inline constexpr double kMaxTemperature = 85.0;

namespace detail {

inline std::uint16_t fixed_x100(double v) {
    const long scaled = std::lround(v * 100.0);
    return static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp<long>(scaled, -32768, 32767)));
}

inline double from_fixed_x100(ByteView data, std::size_t at) {
    return static_cast<std::int16_t>(get_u16_be(data, at)) / 100.0;
}

inline std::string nmea_checksum(std::string_view body) {
    std::uint8_t chk = 0;
    for (char c : body)
        chk ^= static_cast<std::uint8_t>(c);
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02X", chk);
    return buf;
}

} // namespace detail

inline Bytes aux_sim_emit(AuxState& state, AuxKind kind) {
    const std::uint8_t seq = state.seq++;
    switch (kind) {
    case AuxKind::Battery: {
        Bytes f{kBatteryLead, seq};
        put_u16_be(f, detail::fixed_x100(std::clamp(state.battery_voltage, 0.0, kBatteryMaxVoltage)));
        put_u16_be(f, detail::fixed_x100(state.battery_current));
        f.push_back(xor_checksum(f));
        f.push_back(kWdeTerminator);
        return f;
    }
    case AuxKind::Custom: {
        Bytes f{kCustomLead, seq};
        put_u16_be(f, detail::fixed_x100(std::clamp(state.temperature, kMinTemperature, kMaxTemperature)));
        put_u16_be(f, detail::fixed_x100(state.board_voltage));
        put_u16_be(f, detail::fixed_x100(state.board_current));
        f.push_back(xor_checksum(f));
        f.push_back(kWdeTerminator);
        return f;
    }
    case AuxKind::Gps: {
        char time_field[16];
        const unsigned secs = seq;
        std::snprintf(time_field, sizeof time_field, "0000%02u.00", secs % 60);
        std::string body = "GPGGA," + std::string(time_field) + "," + state.gps_fix + ",1,08,0.9,650.0,M,0.0,M,,";
        std::string sentence = "$" + body + "*" + detail::nmea_checksum(body) + "\n";
        return Bytes(sentence.begin(), sentence.end());
    }
    }
    throw Error("unknown aux kind");
}

struct BatteryReading {
    std::uint8_t seq = 0;
    double voltage = 0;
    double current = 0;
};

inline std::optional<BatteryReading> decode_battery_frame(ByteView f) {
    if (f.size() != kBatteryFrameLength || f[0] != kBatteryLead || f[7] != kWdeTerminator ||
        xor_checksum(f.first(6)) != f[6])
        return std::nullopt;
    return BatteryReading{f[1], detail::from_fixed_x100(f, 2), detail::from_fixed_x100(f, 4)};
}

struct CustomReading {
    std::uint8_t seq = 0;
    double temperature = 0;
    double voltage = 0;
    double current = 0;
};

inline std::optional<CustomReading> decode_custom_frame(ByteView f) {
    if (f.size() != kCustomFrameLength || f[0] != kCustomLead || f[9] != kWdeTerminator ||
        xor_checksum(f.first(8)) != f[8])
        return std::nullopt;
    return CustomReading{f[1], detail::from_fixed_x100(f, 2), detail::from_fixed_x100(f, 4),
                         detail::from_fixed_x100(f, 6)};
}

// ---------------------------------------------------------------------------
// Service loops. Each returns when its link reports Eof or `stop` fires.

// Copies every byte from `in` to `out` unchanged. Eof on `in` closes `out`.
// `in` and `out` may be the same link (a loopback plug).
inline std::uint64_t hook_node_forward(Link& in, Link& out, std::stop_token stop = {}) {
    std::uint64_t forwarded = 0;
    Bytes chunk;
    while (!stop.stop_requested()) {
        const auto ev = in.recv_byte();
        if (ev.is_eof())
            break;
        if (!ev.is_byte())
            continue;
        chunk.clear();
        chunk.push_back(ev.value);
        in.drain_pending(chunk);
        try {
            out.send(chunk);
        } catch (const Error&) {
            break;
        }
        forwarded += chunk.size();
    }
    out.close();
    return forwarded;
}

struct SimOptions {
    double rate_hz = 0; // periodic emissions per second; 0 = only on request
    std::uint8_t sts_periodic_type = 0x01;
};

namespace detail {

// Runs `emit` at a fixed rate on its own thread until stopped.
class PeriodicEmitter {
public:
    template <typename F>
    PeriodicEmitter(double rate_hz, F emit) {
        if (rate_hz <= 0)
            return;
        thread_ = std::jthread([rate_hz, emit = std::move(emit)](std::stop_token st) mutable {
            const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                std::chrono::duration<double>(1.0 / rate_hz));
            auto next = std::chrono::steady_clock::now() + period;
            while (!st.stop_requested()) {
                std::this_thread::sleep_until(next);
                next += period;
                if (!emit())
                    break;
            }
        });
    }

private:
    std::jthread thread_;
};

class LockedWriter {
public:
    explicit LockedWriter(Link& link) : link_(link) {}

    bool send(ByteView data) {
        std::lock_guard lock(mu_);
        try {
            link_.send(data);
            return true;
        } catch (const Error&) {
            return false;
        }
    }

private:
    Link& link_;
    std::mutex mu_;
};

} // namespace detail

inline void run_wde_sim(Link& link, WdeState& state, const SimOptions& options = {}, std::stop_token stop = {}) {
    detail::LockedWriter writer(link);
    std::mutex state_mu;
    detail::PeriodicEmitter periodic(options.rate_hz, [&] {
        Bytes reply;
        {
            std::lock_guard lock(state_mu);
            reply = wde_sim_step(state, Bytes{kWdeCmdTelemetry});
        }
        return writer.send(reply);
    });
    WdeCommandParser parser;
    while (!stop.stop_requested()) {
        const auto ev = link.recv_byte();
        if (ev.is_eof())
            break;
        std::optional<Bytes> cmd = ev.is_byte() ? parser.push(ev.value) : parser.flush();
        if (!cmd)
            continue;
        Bytes reply;
        {
            std::lock_guard lock(state_mu);
            reply = wde_sim_step(state, *cmd);
        }
        if (!writer.send(reply))
            break;
    }
}

// Each received byte that names a known frame type is a request for one frame.
inline void run_sts_sim(Link& link, StsState& state, const SimOptions& options = {}, std::stop_token stop = {}) {
    detail::LockedWriter writer(link);
    std::mutex state_mu;
    detail::PeriodicEmitter periodic(options.rate_hz, [&] {
        Bytes frame;
        {
            std::lock_guard lock(state_mu);
            frame = sts_sim_emit(state, options.sts_periodic_type);
        }
        return writer.send(frame);
    });
    const StsTypeTable table;
    while (!stop.stop_requested()) {
        const auto ev = link.recv_byte();
        if (ev.is_eof())
            break;
        if (!ev.is_byte() || !table.lookup(ev.value))
            continue;
        Bytes frame;
        {
            std::lock_guard lock(state_mu);
            frame = sts_sim_emit(state, ev.value, table);
        }
        if (!writer.send(frame))
            break;
    }
}

// Emits periodically and once per received request byte.
inline void run_aux_sim(Link& link, AuxState& state, AuxKind kind, const SimOptions& options = {},
                        std::stop_token stop = {}) {
    detail::LockedWriter writer(link);
    std::mutex state_mu;
    auto emit = [&] {
        Bytes frame;
        {
            std::lock_guard lock(state_mu);
            frame = aux_sim_emit(state, kind);
        }
        return writer.send(frame);
    };
    detail::PeriodicEmitter periodic(options.rate_hz, emit);
    while (!stop.stop_requested()) {
        const auto ev = link.recv_byte();
        if (ev.is_eof())
            break;
        if (ev.is_byte() && !emit())
            break;
    }
}

} // namespace obdh
