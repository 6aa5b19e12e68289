#pragma once

// The OBDH frame router: one receive task per port.
//
// The ground-segment task deframes uplink frames and writes each payload,
// verbatim, to the port that owns the addressed subsystem id. Subsystem tasks
// deframe their own protocol, keep every complete frame in telemetry memory
// and, when the port's disposition says so, wrap it for downlink as
// '#' id frame '&'. Every output link has one writer lock, so envelopes from
// different tasks never interleave on the shared ground link.

#include "obdh/frame_log.hpp"
#include "obdh/framing.hpp"
#include "obdh/port_table.hpp"
#include "obdh/telemetry.hpp"
#include "obdh/transport.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <variant>

namespace obdh {

struct Destination {
    enum class Kind { Port, Internal, Unknown };
    Kind kind = Kind::Unknown;
    std::string port;

    bool operator==(const Destination&) const = default;

    static Destination to_port(std::string name) { return {Kind::Port, std::move(name)}; }
    static Destination internal() { return {Kind::Internal, {}}; }
    static Destination unknown() { return {Kind::Unknown, {}}; }
};

inline Destination route_uplink(const GsFrame& frame, const PortTable& table) {
    if (frame.subsystem_id == kInternalId)
        return Destination::internal();
    const auto* row = table.find_by_id(frame.subsystem_id);
    if (row == nullptr || row->kind == SubsystemKind::Egse)
        return Destination::unknown();
    return Destination::to_port(row->port_name);
}

struct RouterCounters {
    std::uint64_t uplink_frames = 0;
    std::uint64_t frames_routed = 0;
    std::uint64_t frames_dropped = 0;
    std::uint64_t internal_commands = 0;
    std::uint64_t downlink_frames = 0;
    std::uint64_t stored_frames = 0;
    std::uint64_t resyncs = 0;
    std::uint64_t overflows = 0;
    std::uint64_t link_errors = 0;
};

struct TaskStatus {
    enum class Reason { Eof, Error };
    std::string port;
    Reason reason = Reason::Eof;
    std::string message;
};

// Internal commands addressed to subsystem id 0x00.
inline constexpr std::uint8_t kInternalStatus = 0x01; // -> ASCII counters + 0xAC
inline constexpr std::uint8_t kInternalReplay = 0x02; // [0x02, id, n] -> last n records of id
inline constexpr std::uint8_t kNak = 0xEE;

class Router {
public:
    explicit Router(PortTable table, std::size_t telemetry_capacity = TelemetryStore::kDefaultCapacity,
                    FrameLog log = {})
        : table_(std::move(table)), store_(telemetry_capacity), log_(std::move(log)) {
        for (const auto& row : table_.rows())
            channels_.emplace(row.port_name, std::make_unique<Channel>());
    }

    const PortTable& table() const { return table_; }
    TelemetryStore& telemetry() { return store_; }
    const TelemetryStore& telemetry() const { return store_; }

    Destination route(const GsFrame& frame) const { return route_uplink(frame, table_); }

    void attach(const std::string& port, std::shared_ptr<Link> link) {
        auto& ch = channel(port);
        std::lock_guard lock(ch.mu);
        ch.link = std::move(link);
    }

    std::shared_ptr<Link> link(const std::string& port) const {
        auto& ch = channel(port);
        std::lock_guard lock(ch.mu);
        return ch.link;
    }

    // Writes `bytes` to the port as one uninterrupted unit. False when the
    // port has no open link.
    bool write_port(const std::string& port, ByteView bytes) {
        auto& ch = channel(port);
        std::lock_guard lock(ch.mu);
        if (!ch.link)
            return false;
        try {
            ch.link->send(bytes);
            return true;
        } catch (const Error&) {
            return false;
        }
    }

    void store_telemetry(TelemetryRecord rec) {
        store_.append(std::move(rec));
        stored_frames_.fetch_add(1);
    }

    std::vector<TelemetryRecord> query_telemetry(const TelemetryFilter& filter = {}) const {
        return store_.query(filter);
    }

    RouterCounters counters() const {
        RouterCounters c;
        c.uplink_frames = uplink_frames_.load();
        c.frames_routed = frames_routed_.load();
        c.frames_dropped = frames_dropped_.load();
        c.internal_commands = internal_commands_.load();
        c.downlink_frames = downlink_frames_.load();
        c.stored_frames = stored_frames_.load();
        c.resyncs = resyncs_.load();
        c.overflows = overflows_.load();
        c.link_errors = link_errors_.load();
        return c;
    }

    // Ground segment receive loop. Returns when the link reports Eof.
    TaskStatus run_gs_task(const std::shared_ptr<Link>& gs_link) {
        const auto* egse = table_.egse();
        if (egse == nullptr)
            throw Error("port table has no EGSE port");
        const std::string port = egse->port_name;
        attach(port, gs_link);
        GsDeframer deframer;
        for (;;) {
            const auto ev = gs_link->recv_byte();
            if (ev.is_eof())
                return finish(port);
            if (!ev.is_byte())
                continue;
            auto out = deframer.push(ev.value);
            if (out.kind == GsEvent::Kind::Reset && out.overflow) {
                overflows_.fetch_add(1);
                log_.event(port, "overflow");
            } else if (out.kind == GsEvent::Kind::Complete) {
                handle_uplink(port, out.frame);
            }
        }
    }

    // Protocol receive loop for one subsystem port.
    TaskStatus run_subsystem_task(const std::string& port_name, const std::shared_ptr<Link>& link) {
        const auto* row = table_.find(port_name);
        if (row == nullptr)
            throw Error("unknown port: " + port_name);
        if (row->kind == SubsystemKind::Egse)
            return run_gs_task(link);
        attach(port_name, link);

        using AnyDeframer = std::variant<WdeDeframer, StsDeframer, AuxDeframer>;
        AnyDeframer deframer = [&]() -> AnyDeframer {
            switch (row->kind) {
            case SubsystemKind::Wde: return WdeDeframer{};
            case SubsystemKind::Sts: return StsDeframer{};
            default: return AuxDeframer{*aux_kind(row->kind)};
            }
        }();

        for (;;) {
            const auto ev = link->recv_byte();
            if (ev.is_eof())
                return finish(port_name);
            if (!ev.is_byte())
                continue;
            std::visit(
                [&](auto& d) {
                    auto out = d.push(ev.value);
                    using E = decltype(out);
                    if constexpr (std::is_same_v<E, WdeEvent>) {
                        if (out.overflow) {
                            overflows_.fetch_add(1);
                            log_.event(port_name, "overflow");
                        }
                    } else {
                        if (out.kind == E::Kind::Resync)
                            resyncs_.fetch_add(1);
                    }
                    if (out.kind == E::Kind::Complete)
                        handle_subsystem_frame(*row, std::move(out.frame));
                },
                deframer);
        }
    }

    // Raw byte forwarding from one port's receive side to another port's
    // transmit side, used when the ports are wired as a close loop.
    TaskStatus run_forward_task(const std::string& rx_port, const std::shared_ptr<Link>& link,
                                const std::string& tx_port) {
        attach(rx_port, link);
        Bytes chunk;
        for (;;) {
            const auto ev = link->recv_byte();
            if (ev.is_eof())
                return finish(rx_port);
            if (!ev.is_byte())
                continue;
            chunk.clear();
            chunk.push_back(ev.value);
            link->drain_pending(chunk);
            if (!write_port(tx_port, chunk))
                link_errors_.fetch_add(1);
        }
    }

private:
    struct Channel {
        std::mutex mu;
        std::shared_ptr<Link> link;
    };

    Channel& channel(const std::string& port) const {
        auto it = channels_.find(port);
        if (it == channels_.end())
            throw Error("unknown port: " + port);
        return *it->second;
    }

    TaskStatus finish(const std::string& port) {
        log_.event(port, "eof");
        return {port, TaskStatus::Reason::Eof, "end of stream"};
    }

    void handle_uplink(const std::string& gs_port, const GsFrame& frame) {
        uplink_frames_.fetch_add(1);
        log_.event(gs_port, "uplink", encode_downlink(frame.subsystem_id, frame.payload));
        const auto dest = route(frame);
        switch (dest.kind) {
        case Destination::Kind::Port:
            if (frame.payload.empty() || write_port(dest.port, frame.payload)) {
                frames_routed_.fetch_add(1);
                log_.event(dest.port, "route", frame.payload);
            } else {
                link_errors_.fetch_add(1);
                log_.event(dest.port, "nolink", frame.payload);
            }
            break;
        case Destination::Kind::Internal:
            internal_commands_.fetch_add(1);
            handle_internal(gs_port, frame.payload);
            break;
        case Destination::Kind::Unknown:
            frames_dropped_.fetch_add(1);
            log_.event(gs_port, "drop", frame.payload);
            break;
        }
    }

    void handle_subsystem_frame(const PortRow& row, Bytes frame) {
        const auto now = MonotonicClock::now();
        if (row.disposition == Disposition::ForwardedToGs) {
            const auto envelope = encode_downlink(row.subsystem_id, frame);
            const auto* egse = table_.egse();
            if (egse != nullptr && write_port(egse->port_name, envelope)) {
                downlink_frames_.fetch_add(1);
                log_.event(row.port_name, "downlink", frame);
            } else {
                link_errors_.fetch_add(1);
                log_.event(row.port_name, "nolink", frame);
            }
        } else {
            log_.event(row.port_name, "store", frame);
        }
        store_telemetry({now, row.port_name, row.subsystem_id, std::move(frame), row.disposition});
    }

    void handle_internal(const std::string& gs_port, ByteView cmd) {
        if (!cmd.empty() && cmd[0] == kInternalStatus && cmd.size() == 1) {
            const auto c = counters();
            std::string text = "uplink=" + std::to_string(c.uplink_frames) +
                               " routed=" + std::to_string(c.frames_routed) +
                               " dropped=" + std::to_string(c.frames_dropped) +
                               " downlink=" + std::to_string(c.downlink_frames) +
                               " stored=" + std::to_string(store_.size()) +
                               " resyncs=" + std::to_string(c.resyncs) +
                               " overflows=" + std::to_string(c.overflows);
            Bytes payload(text.begin(), text.end());
            payload.push_back(kWdeTerminator);
            write_port(gs_port, encode_downlink(kInternalId, payload));
            return;
        }
        if (cmd.size() == 3 && cmd[0] == kInternalReplay) {
            TelemetryFilter f;
            f.subsystem_id = cmd[1];
            f.limit = cmd[2];
            for (const auto& rec : store_.query(f))
                write_port(gs_port, encode_downlink(rec.subsystem_id, rec.payload));
            return;
        }
        const Bytes nak{kNak, kWdeTerminator};
        write_port(gs_port, encode_downlink(kInternalId, nak));
    }

    PortTable table_;
    TelemetryStore store_;
    FrameLog log_;
    std::map<std::string, std::unique_ptr<Channel>> channels_;

    std::atomic<std::uint64_t> uplink_frames_{0};
    std::atomic<std::uint64_t> frames_routed_{0};
    std::atomic<std::uint64_t> frames_dropped_{0};
    std::atomic<std::uint64_t> internal_commands_{0};
    std::atomic<std::uint64_t> downlink_frames_{0};
    std::atomic<std::uint64_t> stored_frames_{0};
    std::atomic<std::uint64_t> resyncs_{0};
    std::atomic<std::uint64_t> overflows_{0};
    std::atomic<std::uint64_t> link_errors_{0};
};

} // namespace obdh
