#pragma once

// Test procedures run against a live OBDH node.
//
// Close loop: the node's ports are chained by internal forward rules and
// external cables so that data pumped into the ingress port comes back out of
// the egress port. Every pumped frame is a 4-byte big-endian sequence number
// followed by a payload generated from (seed, sequence); the egress stream
// must equal the concatenation of pumped frames.
//
// Integration scenario: an ordered script of uplink sends and downlink
// expectations, executed from the EGSE seat.

#include "obdh/node.hpp"
#include "obdh/sim.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <limits>
#include <set>
#include <sstream>

namespace obdh {

struct RoundTrip {
    bool match = true;
    std::size_t first_diff = 0; // valid when !match

    static RoundTrip matched() { return {true, 0}; }
    static RoundTrip mismatch(std::size_t at) { return {false, at}; }
};

inline RoundTrip verify_round_trip(ByteView sent, ByteView received) {
    const std::size_t n = std::min(sent.size(), received.size());
    for (std::size_t i = 0; i < n; ++i)
        if (sent[i] != received[i])
            return RoundTrip::mismatch(i);
    if (sent.size() != received.size())
        return RoundTrip::mismatch(n);
    return RoundTrip::matched();
}

// ---------------------------------------------------------------------------
// Close loop

struct PortLink {
    std::string from;
    std::string to;
};

struct LoopTopology {
    std::string ingress;
    std::vector<PortLink> internal_forwards; // rx port -> tx port, inside the OBDH
    std::vector<PortLink> cables;            // tx port -> rx port, outside the OBDH
    std::string egress;
};

// Computer on PortRxOsci3; the data visits Osci0, Osci1, Osci2 and Osci6,
// each closed by a loopback hook, and returns to the computer on Osci3.
inline LoopTopology default_loop_topology() {
    LoopTopology t;
    t.ingress = "PortRxOsci3";
    t.egress = "PortRxOsci3";
    t.internal_forwards = {
        {"PortRxOsci3", "PortRxOsci0"},
        {"PortRxOsci0", "PortRxOsci1"},
        {"PortRxOsci1", "PortRxOsci2"},
        {"PortRxOsci2", "PortRxOsci6"},
        {"PortRxOsci6", "PortRxOsci3"},
    };
    t.cables = {
        {"PortRxOsci0", "PortRxOsci0"},
        {"PortRxOsci1", "PortRxOsci1"},
        {"PortRxOsci2", "PortRxOsci2"},
        {"PortRxOsci6", "PortRxOsci6"},
    };
    return t;
}

// Ordered hop list "rx:P" / "tx:P" from ingress to egress. Throws when the
// chain is broken, loops, or leaves a listed hop unused.
inline std::vector<std::string> loop_path(const LoopTopology& t) {
    std::vector<std::string> path;
    std::set<std::size_t> used_fwd, used_cable;
    std::string rx = t.ingress;
    for (;;) {
        path.push_back("rx:" + rx);
        std::size_t fi = t.internal_forwards.size();
        for (std::size_t i = 0; i < t.internal_forwards.size(); ++i)
            if (t.internal_forwards[i].from == rx)
                fi = i;
        if (fi == t.internal_forwards.size())
            throw Error("topology broken: no forward rule from " + rx);
        if (!used_fwd.insert(fi).second)
            throw Error("topology cycle without egress");
        const std::string tx = t.internal_forwards[fi].to;
        path.push_back("tx:" + tx);
        if (tx == t.egress && used_fwd.size() == t.internal_forwards.size())
            break;
        std::size_t ci = t.cables.size();
        for (std::size_t i = 0; i < t.cables.size(); ++i)
            if (t.cables[i].from == tx)
                ci = i;
        if (ci == t.cables.size()) {
            if (tx == t.egress)
                break;
            throw Error("topology broken: no cable from " + tx);
        }
        if (!used_cable.insert(ci).second)
            throw Error("topology cycle without egress");
        rx = t.cables[ci].to;
    }
    if (used_fwd.size() != t.internal_forwards.size() || used_cable.size() != t.cables.size())
        throw Error("topology has hops off the ingress-egress path");
    return path;
}

inline LoopTopology parse_loop_topology(const nlohmann::json& j) {
    LoopTopology t;
    try {
        t.ingress = j.at("ingress").get<std::string>();
        t.egress = j.at("egress").get<std::string>();
        for (const auto& f : j.at("internal_forwards"))
            t.internal_forwards.push_back({f.at(0).get<std::string>(), f.at(1).get<std::string>()});
        for (const auto& c : j.at("cables"))
            t.cables.push_back({c.at(0).get<std::string>(), c.at(1).get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("bad topology: ") + e.what());
    }
    return t;
}

struct CloseLoopOptions {
    double duration_s = 60;
    double rate_hz = 100;
    std::size_t payload_len = 64;
    std::uint64_t seed = 1;
    // How long to wait for stragglers after the last frame is pumped.
    std::chrono::milliseconds drain_timeout{2000};
    // Cable indices left unplugged.
    std::set<std::size_t> severed_cables;
};

struct LoopReport {
    std::uint64_t frames_sent = 0;
    std::uint64_t frames_received = 0;
    std::uint64_t corrupt = 0;
    std::uint64_t lost = 0;
    double duration_s = 0;
    double latency_min_ms = 0;
    double latency_mean_ms = 0;
    double latency_max_ms = 0;

    bool passed() const { return frames_sent > 0 && corrupt == 0 && lost == 0; }
};

inline Bytes close_loop_frame(std::uint64_t seed, std::uint32_t seq, std::size_t payload_len) {
    Bytes frame;
    frame.reserve(4 + payload_len);
    put_u32_be(frame, seq);
    std::mt19937_64 gen(seed * 0xD1B54A32D192ED03ULL + seq);
    for (std::size_t i = 0; i < payload_len; ++i)
        frame.push_back(static_cast<std::uint8_t>(gen() & 0xFF));
    return frame;
}

inline std::string format_report(const LoopReport& r) {
    std::ostringstream os;
    os << "close-loop report\n"
       << "  frames_sent     " << r.frames_sent << "\n"
       << "  frames_received " << r.frames_received << "\n"
       << "  lost            " << r.lost << "\n"
       << "  corrupt         " << r.corrupt << "\n"
       << "  duration_s      " << r.duration_s << "\n"
       << "  latency_ms      min " << r.latency_min_ms << " mean " << r.latency_mean_ms << " max "
       << r.latency_max_ms << "\n"
       << "  result          " << (r.passed() ? "PASS" : "FAIL") << "\n";
    return os.str();
}

inline std::string summary_line(const LoopReport& r) {
    nlohmann::ordered_json j;
    j["test"] = "closeloop";
    j["pass"] = r.passed();
    j["frames_sent"] = r.frames_sent;
    j["frames_received"] = r.frames_received;
    j["lost"] = r.lost;
    j["corrupt"] = r.corrupt;
    j["duration_s"] = r.duration_s;
    j["latency_mean_ms"] = r.latency_mean_ms;
    return j.dump();
}

inline LoopReport run_close_loop(const LoopTopology& topology, const CloseLoopOptions& options) {
    if (!(options.rate_hz > 0))
        throw Error("rate must be > 0");
    if (!(options.duration_s > 0))
        throw Error("duration must be > 0");
    loop_path(topology);

    static std::atomic<int> run_counter{0};
    const std::string ns = "closeloop" + std::to_string(::getpid()) + "-" + std::to_string(run_counter++) + "/";

    std::set<std::string> ports{topology.ingress, topology.egress};
    for (const auto& f : topology.internal_forwards) {
        ports.insert(f.from);
        ports.insert(f.to);
    }
    for (const auto& c : topology.cables) {
        ports.insert(c.from);
        ports.insert(c.to);
    }

    NodeConfig cfg;
    auto rows = default_port_table().rows();
    for (auto& r : rows)
        r.backend = ports.contains(r.port_name) ? "mem:" + ns + r.port_name : "none";
    for (const auto& p : ports)
        if (std::none_of(rows.begin(), rows.end(), [&](const PortRow& r) { return r.port_name == p; }))
            throw Error("topology names unknown port: " + p);
    cfg.table = PortTable(std::move(rows));
    for (const auto& f : topology.internal_forwards)
        cfg.forwards.push_back({f.from, f.to});

    // Far ends, held by the harness computer and the hook cables.
    std::map<std::string, std::unique_ptr<Link>> far;
    for (const auto& p : ports) {
        memory_registry().ensure(ns + p);
        PortConfig pc;
        pc.port_name = p + "/far";
        pc.intercharacter_timeout = std::chrono::milliseconds(100);
        far.emplace(p, std::make_unique<Link>(open_link(pc, "mem:" + ns + p)));
    }

    ObdhNode node(cfg);
    node.start();

    std::vector<std::jthread> hooks;
    for (std::size_t i = 0; i < topology.cables.size(); ++i) {
        if (options.severed_cables.contains(i))
            continue;
        Link* in = far.at(topology.cables[i].from).get();
        Link* out = far.at(topology.cables[i].to).get();
        hooks.emplace_back([in, out](std::stop_token st) { hook_node_forward(*in, *out, st); });
    }

    const auto total = static_cast<std::uint64_t>(std::llround(options.duration_s * options.rate_hz));
    if (total > std::numeric_limits<std::uint32_t>::max())
        throw Error("too many frames for a 32-bit sequence number");
    const std::size_t frame_len = 4 + options.payload_len;
    using Clock = std::chrono::steady_clock;
    std::vector<Clock::time_point> sent_at(total);
    std::atomic<std::uint64_t> pumped{0};

    LoopReport report;
    report.frames_sent = total;
    std::atomic<std::uint64_t> received{0};
    std::atomic<bool> stop_drain{false};
    double lat_sum = 0, lat_min = std::numeric_limits<double>::max(), lat_max = 0;
    std::uint64_t lat_n = 0;

    const auto t0 = Clock::now();
    std::jthread drain([&] {
        Link& egress = *far.at(topology.egress);
        Bytes buf;
        std::uint64_t k = 0;
        while (k < total) {
            const auto ev = egress.recv_byte();
            if (ev.is_eof())
                break;
            if (!ev.is_byte()) {
                if (stop_drain.load())
                    break;
                continue;
            }
            buf.push_back(ev.value);
            egress.drain_pending(buf);
            std::size_t off = 0;
            while (buf.size() - off >= frame_len && k < total) {
                const auto now = Clock::now();
                const auto expected = close_loop_frame(options.seed, static_cast<std::uint32_t>(k), options.payload_len);
                if (!verify_round_trip(expected, ByteView(buf).subspan(off, frame_len)).match)
                    ++report.corrupt;
                if (k < pumped.load()) {
                    const double ms = std::chrono::duration<double, std::milli>(now - sent_at[k]).count();
                    lat_sum += ms;
                    lat_min = std::min(lat_min, ms);
                    lat_max = std::max(lat_max, ms);
                    ++lat_n;
                }
                ++k;
                received.store(k);
                off += frame_len;
            }
            buf.erase(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(off));
        }
    });

    {
        Link& ingress = *far.at(topology.ingress);
        const auto period = std::chrono::duration<double>(1.0 / options.rate_hz);
        for (std::uint64_t k = 0; k < total; ++k) {
            std::this_thread::sleep_until(t0 + std::chrono::duration_cast<Clock::duration>(period * static_cast<double>(k)));
            const auto frame = close_loop_frame(options.seed, static_cast<std::uint32_t>(k), options.payload_len);
            sent_at[k] = Clock::now();
            pumped.store(k + 1);
            try {
                ingress.send(frame);
            } catch (const Error&) {
                break;
            }
        }
    }

    // Wait for stragglers: give up once nothing new arrives for drain_timeout.
    auto last_progress = Clock::now();
    std::uint64_t last_seen = received.load();
    while (received.load() < total) {
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
        const auto now_seen = received.load();
        if (now_seen != last_seen) {
            last_seen = now_seen;
            last_progress = Clock::now();
        } else if (Clock::now() - last_progress > options.drain_timeout) {
            break;
        }
    }
    stop_drain.store(true);
    drain.join();
    report.duration_s = std::chrono::duration<double>(Clock::now() - t0).count();

    for (auto& [name, link] : far)
        link->close();
    for (auto& h : hooks)
        h.request_stop();
    hooks.clear();
    node.stop();

    report.frames_received = received.load();
    report.lost = report.frames_sent - report.frames_received;
    if (lat_n > 0) {
        report.latency_min_ms = lat_min;
        report.latency_mean_ms = lat_sum / static_cast<double>(lat_n);
        report.latency_max_ms = lat_max;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Integration scenario

struct DownlinkMatcher {
    std::optional<Bytes> exact;
    std::optional<Bytes> prefix;
    std::optional<std::size_t> length;
    std::optional<int> wde_speed;

    bool matches(ByteView payload) const {
        if (exact && !std::equal(exact->begin(), exact->end(), payload.begin(), payload.end()))
            return false;
        if (prefix && (payload.size() < prefix->size() || !std::equal(prefix->begin(), prefix->end(), payload.begin())))
            return false;
        if (length && payload.size() != *length)
            return false;
        if (wde_speed) {
            const auto t = decode_wde_telemetry(payload);
            if (!t || t->wheel_speed != *wde_speed)
                return false;
        }
        return true;
    }
};

struct ScenarioStep {
    enum class Kind { SendUplink, ExpectDownlink };
    Kind kind = Kind::SendUplink;
    std::string description;
    std::uint8_t subsystem_id = 0;
    Bytes payload;                         // SendUplink
    DownlinkMatcher matcher;               // ExpectDownlink
    std::chrono::milliseconds timeout{3000}; // ExpectDownlink
};

struct StepResult {
    std::string description;
    bool passed = false;
    std::string detail;
};

struct ScenarioReport {
    std::vector<StepResult> steps;
    std::vector<std::string> transcript;

    std::size_t steps_passed() const {
        return static_cast<std::size_t>(std::count_if(steps.begin(), steps.end(), [](const auto& s) { return s.passed; }));
    }
    std::size_t steps_failed() const { return steps.size() - steps_passed(); }
    bool passed() const { return !steps.empty() && steps_failed() == 0; }
};

inline ScenarioStep send_step(std::string description, std::uint8_t id, Bytes payload) {
    ScenarioStep s;
    s.kind = ScenarioStep::Kind::SendUplink;
    s.description = std::move(description);
    s.subsystem_id = id;
    s.payload = std::move(payload);
    return s;
}

inline ScenarioStep expect_step(std::string description, std::uint8_t id, DownlinkMatcher matcher,
                                std::chrono::milliseconds timeout = std::chrono::milliseconds(3000)) {
    ScenarioStep s;
    s.kind = ScenarioStep::Kind::ExpectDownlink;
    s.description = std::move(description);
    s.subsystem_id = id;
    s.matcher = std::move(matcher);
    s.timeout = timeout;
    return s;
}

// WDE1 telemetry, wheel set to 500 rpm and read back, one STS1 type-0x01 frame.
inline std::vector<ScenarioStep> default_scenario(std::uint8_t wde_id = 0x01, std::uint8_t sts_id = 0x04) {
    DownlinkMatcher telemetry;
    telemetry.prefix = Bytes{kWdeCmdTelemetry};
    telemetry.length = 5;
    DownlinkMatcher ack;
    ack.exact = Bytes{kWdeCmdSetSpeed, 0x00, kWdeTerminator};
    DownlinkMatcher speed;
    speed.wde_speed = 500;
    DownlinkMatcher sts;
    sts.prefix = Bytes{0x01};
    sts.length = 16;
    return {
        send_step("request WDE telemetry", wde_id, {kWdeCmdTelemetry}),
        expect_step("WDE telemetry envelope", wde_id, telemetry),
        send_step("set wheel speed 500 rpm", wde_id, wde_set_speed_command(500)),
        expect_step("WDE set-speed ack", wde_id, ack),
        send_step("request WDE telemetry again", wde_id, {kWdeCmdTelemetry}),
        expect_step("WDE telemetry reports 500 rpm", wde_id, speed),
        send_step("request STS frame type 0x01", sts_id, {0x01}),
        expect_step("STS 16-byte type 0x01 frame", sts_id, sts),
    };
}

// Script file: {"steps": [{"send": {"id": "01", "payload": "01"}},
//                         {"expect": {"id": "01", "prefix": "01", "length": 5,
//                                     "exact": "...", "wde_speed": 500,
//                                     "timeout_ms": 3000}}]}
inline std::vector<ScenarioStep> parse_scenario(std::string_view text) {
    std::vector<ScenarioStep> steps;
    auto hex = [](const nlohmann::json& j) {
        auto b = from_hex(j.get<std::string>());
        if (!b)
            throw Error("bad hex in scenario: " + j.dump());
        return *b;
    };
    try {
        const auto j = nlohmann::json::parse(text);
        for (const auto& s : j.at("steps")) {
            const std::string desc = s.value("description", std::string{});
            if (s.contains("send")) {
                const auto& x = s.at("send");
                steps.push_back(send_step(desc.empty() ? "send " + x.dump() : desc, detail::parse_id(x.at("id")),
                                          hex(x.value("payload", nlohmann::json("")))));
            } else if (s.contains("expect")) {
                const auto& x = s.at("expect");
                DownlinkMatcher m;
                if (x.contains("exact")) m.exact = hex(x.at("exact"));
                if (x.contains("prefix")) m.prefix = hex(x.at("prefix"));
                if (x.contains("length")) m.length = x.at("length").get<std::size_t>();
                if (x.contains("wde_speed")) m.wde_speed = x.at("wde_speed").get<int>();
                steps.push_back(expect_step(desc.empty() ? "expect " + x.dump() : desc, detail::parse_id(x.at("id")), m,
                                            std::chrono::milliseconds(x.value("timeout_ms", 3000))));
            } else {
                throw Error("scenario step needs send or expect: " + s.dump());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("bad scenario: ") + e.what());
    }
    return steps;
}

// Runs the script from the EGSE side of `gs_link`. A failed expectation is
// recorded and the run continues with the next step.
inline ScenarioReport run_integration_scenario(const std::vector<ScenarioStep>& script, Link& gs_link,
                                               const PortTable& table = default_port_table()) {
    ScenarioReport report;
    std::mutex mu;
    std::condition_variable cv;
    std::deque<DownlinkEvent> inbox;
    std::atomic<bool> done{false};

    std::jthread reader([&] {
        DownlinkDeframer deframer(make_downlink_validator(table));
        while (!done.load()) {
            const auto ev = gs_link.recv_byte();
            if (ev.is_eof())
                break;
            if (!ev.is_byte())
                continue;
            auto out = deframer.push(ev.value);
            if (out.kind != DownlinkEvent::Kind::Complete)
                continue;
            {
                std::lock_guard lock(mu);
                inbox.push_back(std::move(out));
            }
            cv.notify_all();
        }
    });

    for (const auto& step : script) {
        StepResult result{step.description, false, {}};
        if (step.kind == ScenarioStep::Kind::SendUplink) {
            try {
                gs_link.send(encode_gs_frame({step.subsystem_id, 0x00, step.payload}));
                report.transcript.push_back("up   " + hex_byte(step.subsystem_id) + " " + to_hex(step.payload));
                result.passed = true;
            } catch (const Error& e) {
                result.detail = e.what();
            }
        } else {
            std::unique_lock lock(mu);
            const auto deadline = std::chrono::steady_clock::now() + step.timeout;
            while (!result.passed) {
                while (!inbox.empty()) {
                    auto ev = std::move(inbox.front());
                    inbox.pop_front();
                    report.transcript.push_back("down " + hex_byte(ev.subsystem_id) + " " + to_hex(ev.payload));
                    if (ev.subsystem_id == step.subsystem_id && step.matcher.matches(ev.payload)) {
                        result.passed = true;
                        break;
                    }
                }
                if (result.passed)
                    break;
                if (cv.wait_until(lock, deadline) == std::cv_status::timeout && inbox.empty()) {
                    result.detail = "timeout";
                    break;
                }
            }
        }
        report.steps.push_back(std::move(result));
    }
    done.store(true);
    reader.join();
    return report;
}

inline std::string format_report(const ScenarioReport& r) {
    std::ostringstream os;
    os << "integration scenario\n";
    for (const auto& s : r.steps)
        os << "  [" << (s.passed ? "PASS" : "FAIL") << "] " << s.description
           << (s.detail.empty() ? "" : " (" + s.detail + ")") << "\n";
    os << "transcript\n";
    for (const auto& line : r.transcript)
        os << "  " << line << "\n";
    return os.str();
}

inline std::string summary_line(const ScenarioReport& r) {
    nlohmann::ordered_json j;
    j["test"] = "scenario";
    j["pass"] = r.passed();
    j["steps_passed"] = r.steps_passed();
    j["steps_failed"] = r.steps_failed();
    return j.dump();
}

} // namespace obdh
