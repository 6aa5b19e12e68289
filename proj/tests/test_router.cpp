#include <catch2/catch_amalgamated.hpp>

#include "obdh/node.hpp"
#include "oracles.hpp"

#include <random>
#include <sstream>
#include <thread>

using namespace obdh;
using namespace std::chrono_literals;

namespace {

std::string unique_prefix() {
    static std::atomic<int> n{0};
    return "router-test-" + std::to_string(n.fetch_add(1)) + "/";
}

// A node on in-memory links plus the far end of every port.
struct Bench {
    std::string prefix = unique_prefix();
    std::unique_ptr<ObdhNode> node;
    std::map<std::string, Link> far;

    explicit Bench(std::size_t telemetry_cap = 10000, std::string_view config = "") {
        auto cfg = parse_node_config(config);
        cfg.table = with_memory_namespace(cfg.table, prefix);
        cfg.telemetry_capacity = telemetry_cap;
        for (const auto& row : cfg.table.rows())
            memory_registry().declare(row.backend.substr(4));
        PortConfig quick;
        quick.intercharacter_timeout = 100ms;
        for (const auto& row : cfg.table.rows())
            far.emplace(row.port_name, open_link(quick, row.backend));
        node = std::make_unique<ObdhNode>(std::move(cfg));
        node->start();
        for (const auto& [port, _] : far)
            REQUIRE(node->wait_attached(port, 2s));
    }

    Link& gs() { return far.at("PortRxMainBoard2"); }
    Router& router() { return node->router(); }
};

// Collects bytes until `n` arrive or nothing comes for the link's timeout.
Bytes read_bytes(Link& link, std::size_t n) {
    Bytes out;
    while (out.size() < n) {
        auto ev = link.recv_byte();
        if (!ev.is_byte())
            break;
        out.push_back(ev.value);
        link.drain_pending(out);
    }
    return out;
}

// Reads until the link goes quiet.
Bytes read_all(Link& link) { return read_bytes(link, SIZE_MAX); }

std::vector<DownlinkEvent> deframe_downlink(ByteView bytes, const PortTable& table) {
    DownlinkDeframer d(make_downlink_validator(table));
    std::vector<DownlinkEvent> out;
    for (auto b : bytes)
        if (auto ev = d.push(b); ev.kind == DownlinkEvent::Kind::Complete)
            out.push_back(ev);
    return out;
}

} // namespace

TEST_CASE("uplink routing decisions") {
    const auto t = default_port_table();
    CHECK(route_uplink({0x01, 0, {}}, t) == Destination::to_port("PortRxMainBoard3"));
    CHECK(route_uplink({0x05, 0, {}}, t) == Destination::to_port("PortRxOsci6"));
    CHECK(route_uplink({0x08, 0, {}}, t) == Destination::to_port("PortRxOsci5"));
    CHECK(route_uplink({0x00, 0, {}}, t) == Destination::internal());
    CHECK(route_uplink({0x42, 0, {}}, t) == Destination::unknown());
}

TEST_CASE("uplink payload reaches the addressed port verbatim") {
    Bench b;
    const Bytes frame{0x23, 0x01, 0x00, 0xAA, 0xBB, 0x26};
    b.gs().send(frame);
    CHECK(read_bytes(b.far.at("PortRxMainBoard3"), 2) == Bytes{0xAA, 0xBB});
    // Same bytes the flight parser would have written.
    CHECK(oracle::gs_task_forwarding(frame).at(0x01) == Bytes{0xAA, 0xBB});
    // Nothing else, and no other port saw anything.
    CHECK(read_all(b.far.at("PortRxMainBoard3")).empty());
    for (auto& [port, link] : b.far)
        if (port != "PortRxMainBoard3")
            CHECK(read_all(link).empty());
    CHECK(b.router().counters().frames_routed == 1);
}

TEST_CASE("unknown subsystem id is dropped") {
    Bench b;
    b.gs().send(encode_gs_frame({0x42, 0x00, {0x01}}));
    b.gs().send(encode_gs_frame({0x03, 0x00, {0x09}}));
    CHECK(read_bytes(b.far.at("PortRxOsci2"), 1) == Bytes{0x09});
    const auto c = b.router().counters();
    CHECK(c.frames_dropped == 1);
    CHECK(c.uplink_frames == 2);
    for (auto& [port, link] : b.far)
        CHECK(read_all(link).empty());
}

TEST_CASE("wde frame is wrapped for downlink") {
    Bench b;
    const Bytes wde{0x10, 0x20, 0xAC};
    b.far.at("PortRxMainBoard3").send(wde);
    const Bytes expected{0x23, 0x01, 0x10, 0x20, 0xAC, 0x26};
    CHECK(read_bytes(b.gs(), expected.size()) == expected);
    CHECK(oracle::wde_task_downlink(wde, 0x01) == expected);
    const auto recs = b.router().query_telemetry();
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].payload == wde);
    CHECK(recs[0].source_port == "PortRxMainBoard3");
    CHECK(recs[0].disposition == Disposition::ForwardedToGs);
}

TEST_CASE("sts frame is forwarded whole") {
    Bench b;
    Bytes sts(16, 0x00);
    sts[0] = 0x01;
    for (std::size_t i = 1; i < sts.size(); ++i)
        sts[i] = static_cast<std::uint8_t>(i * 17);
    b.far.at("PortRxOsci4").send(sts);
    const auto got = read_bytes(b.gs(), 19);
    CHECK(got == encode_downlink(0x04, sts));
}

TEST_CASE("aux frames are stored, not forwarded") {
    Bench b;
    Bytes bat{kBatteryLead, 0x00, 0x0A, 0xF0, 0x00, 0x96};
    bat.push_back(xor_checksum(bat));
    bat.push_back(0xAC);
    b.far.at("PortRxOsci1").send(bat);
    CHECK(read_all(b.gs()).empty());
    TelemetryFilter f;
    f.subsystem_id = 0x06;
    const auto recs = b.router().query_telemetry(f);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].payload == bat);
    CHECK(recs[0].disposition == Disposition::StoredOnly);
}

TEST_CASE("internal commands") {
    Bench b;

    SECTION("status") {
        b.gs().send(encode_gs_frame({0x00, 0x00, {kInternalStatus}}));
        const auto ev = deframe_downlink(read_all(b.gs()), b.router().table());
        REQUIRE(ev.size() == 1);
        CHECK(ev[0].subsystem_id == 0x00);
        const std::string text(ev[0].payload.begin(), ev[0].payload.end() - 1);
        CHECK(text.find("uplink=1") != std::string::npos);
        CHECK(ev[0].payload.back() == 0xAC);
    }

    SECTION("replay") {
        for (std::uint8_t i = 0; i < 3; ++i)
            b.far.at("PortRxMainBoard3").send({0x01, i, 0xAC});
        CHECK(deframe_downlink(read_all(b.gs()), b.router().table()).size() == 3);
        b.gs().send(encode_gs_frame({0x00, 0x00, {kInternalReplay, 0x01, 0x02}}));
        const auto ev = deframe_downlink(read_all(b.gs()), b.router().table());
        REQUIRE(ev.size() == 2);
        CHECK(ev[0].payload == Bytes{0x01, 0x01, 0xAC});
        CHECK(ev[1].payload == Bytes{0x01, 0x02, 0xAC});
    }

    SECTION("unknown command is refused") {
        b.gs().send(encode_gs_frame({0x00, 0x00, {0x77}}));
        CHECK(read_all(b.gs()) == encode_downlink(0x00, Bytes{kNak, 0xAC}));
    }
}

TEST_CASE("concurrent downlinks never interleave") {
    Bench b;
    constexpr int kFrames = 300;
    const std::vector<std::string> ports{"PortRxMainBoard3", "PortRxOsci0", "PortRxOsci4", "PortRxOsci6"};
    std::vector<std::jthread> writers;
    for (std::size_t p = 0; p < ports.size(); ++p) {
        writers.emplace_back([&, p] {
            auto& link = b.far.at(ports[p]);
            const bool sts = ports[p] == "PortRxOsci4" || ports[p] == "PortRxOsci6";
            for (int i = 0; i < kFrames; ++i) {
                if (sts) {
                    Bytes f(8, static_cast<std::uint8_t>(p));
                    f[0] = 0x4D;
                    f[1] = static_cast<std::uint8_t>(i);
                    link.send(f);
                } else {
                    link.send({static_cast<std::uint8_t>(p), static_cast<std::uint8_t>(i % 100), 0x26, 0x23, 0xAC});
                }
            }
        });
    }
    writers.clear();

    Bytes all;
    while (all.size() < 4 * kFrames * 8) {
        const auto chunk = read_all(b.gs());
        if (chunk.empty())
            break;
        all.insert(all.end(), chunk.begin(), chunk.end());
    }
    const auto ev = deframe_downlink(all, b.router().table());
    std::map<std::uint8_t, int> next;
    for (const auto& e : ev) {
        const auto* row = b.router().table().find_by_id(e.subsystem_id);
        REQUIRE(row != nullptr);
        const auto p = static_cast<std::uint8_t>(std::find(ports.begin(), ports.end(), row->port_name) - ports.begin());
        if (row->kind == SubsystemKind::Sts) {
            REQUIRE(e.payload.size() == 8);
            CHECK(e.payload[1] == static_cast<std::uint8_t>(next[e.subsystem_id]++));
            CHECK(e.payload[7] == p);
        } else {
            REQUIRE(e.payload.size() == 5);
            CHECK(e.payload[0] == p);
            CHECK(e.payload[1] == static_cast<std::uint8_t>(next[e.subsystem_id]++ % 100));
        }
    }
    CHECK(ev.size() == 4 * kFrames);
}

TEST_CASE("node reports eof per task") {
    Bench b;
    b.far.at("PortRxOsci5").close();
    for (int i = 0; i < 200 && b.node->statuses().empty(); ++i)
        std::this_thread::sleep_for(5ms);
    const auto st = b.node->statuses();
    REQUIRE(st.size() == 1);
    CHECK(st[0].port == "PortRxOsci5");
    CHECK(st[0].reason == TaskStatus::Reason::Eof);
    // Other ports keep working.
    b.far.at("PortRxMainBoard3").send({0x01, 0xAC});
    CHECK(read_bytes(b.gs(), 5) == Bytes{0x23, 0x01, 0x01, 0xAC, 0x26});
}

TEST_CASE("telemetry store") {
    TelemetryStore s(3);
    CHECK_THROWS_AS(TelemetryStore(0), Error);
    CHECK_THROWS_AS(s.append({MonotonicClock::now(), "P", 1, {}, Disposition::StoredOnly}), Error);
    for (std::uint8_t i = 0; i < 5; ++i)
        s.append({MonotonicClock::now(), i % 2 ? "A" : "B", i, {i}, Disposition::ForwardedToGs});
    CHECK(s.size() == 3);
    CHECK(s.evicted() == 2);
    CHECK(s.appended() == 5);
    const auto all = s.query();
    REQUIRE(all.size() == 3);
    CHECK(all.front().payload == Bytes{2});
    CHECK(all.back().payload == Bytes{4});

    TelemetryFilter f;
    f.source_port = "B";
    CHECK(s.query(f).size() == 2);
    f = {};
    f.limit = 1;
    REQUIRE(s.query(f).size() == 1);
    CHECK(s.query(f)[0].payload == Bytes{4});
    f = {};
    f.since = all[1].timestamp;
    CHECK(s.query(f).size() == 2);
}

TEST_CASE("frame log line") {
    Bytes big(40, 0xAB);
    const auto line = format_log_line("2026-01-01T00:00:00.000Z", "PortRxOsci0", "downlink", big);
    CHECK(line.rfind("2026-01-01T00:00:00.000Z PortRxOsci0 downlink abab", 0) == 0);
    std::ostringstream os;
    auto log = FrameLog::to_stream(os);
    log.event("P", "eof");
    CHECK(os.str().find(" P eof") != std::string::npos);
}
