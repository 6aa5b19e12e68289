#include <catch2/catch_amalgamated.hpp>

#include "obdh/harness.hpp"

#include <random>

using namespace obdh;
using namespace std::chrono_literals;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string unique_prefix() {
    static std::atomic<int> n{0};
    return "harness-test-" + std::to_string(n.fetch_add(1)) + "/";
}

// In-memory node with a WDE simulator on WDE1 and, optionally, an STS
// simulator on STS1. Exposes the EGSE far end.
struct Rig {
    std::unique_ptr<ObdhNode> node;
    std::optional<Link> gs;
    std::optional<Link> wde_link, sts_link;
    WdeState wde;
    StsState sts;
    std::jthread wde_thread, sts_thread;

    explicit Rig(bool with_sts) {
        NodeConfig cfg;
        cfg.table = with_memory_namespace(default_port_table(), unique_prefix());
        auto far = [&](const char* port) {
            const auto spec = cfg.table.find(port)->backend;
            memory_registry().declare(spec.substr(4));
            PortConfig c;
            c.intercharacter_timeout = 100ms;
            return open_link(c, spec);
        };
        gs.emplace(far("PortRxMainBoard2"));
        wde_link.emplace(far("PortRxMainBoard3"));
        sts_link.emplace(far("PortRxOsci4"));
        node = std::make_unique<ObdhNode>(std::move(cfg));
        node->start();
        REQUIRE(node->wait_attached("PortRxMainBoard2", 2s));
        wde_thread = std::jthread([this](std::stop_token st) { run_wde_sim(*wde_link, wde, {}, st); });
        if (with_sts)
            sts_thread = std::jthread([this](std::stop_token st) { run_sts_sim(*sts_link, sts, {}, st); });
    }

    ~Rig() {
        wde_link->close();
        sts_link->close();
        wde_thread = {};
        sts_thread = {};
        node->stop();
    }
};

} // namespace

TEST_CASE("verify_round_trip examples") {
    CHECK(verify_round_trip(Bytes{1, 2, 3}, Bytes{1, 2, 3}).match);
    auto r = verify_round_trip(Bytes{1, 2, 3}, Bytes{1, 9, 3});
    CHECK_FALSE(r.match);
    CHECK(r.first_diff == 1);
    r = verify_round_trip(Bytes{1, 2, 3}, Bytes{1, 2});
    CHECK_FALSE(r.match);
    CHECK(r.first_diff == 2);
    r = verify_round_trip(Bytes{1, 2}, Bytes{1, 2, 3});
    CHECK(r.first_diff == 2);
    CHECK(verify_round_trip(Bytes{}, Bytes{}).match);
}

TEST_CASE("verify_round_trip finds the first flipped byte") {
    std::mt19937 rng(4);
    for (int i = 0; i < 1000; ++i) {
        Bytes a(std::uniform_int_distribution<std::size_t>(1, 200)(rng));
        for (auto& b : a)
            b = static_cast<std::uint8_t>(rng());
        auto b = a;
        const auto at = std::uniform_int_distribution<std::size_t>(0, a.size() - 1)(rng);
        b[at] ^= static_cast<std::uint8_t>(1 + rng() % 255);
        const auto r = verify_round_trip(a, b);
        REQUIRE_FALSE(r.match);
        REQUIRE(r.first_diff == at);
    }
}

TEST_CASE("default loop path") {
    const auto path = loop_path(default_loop_topology());
    const std::vector<std::string> want{
        "rx:PortRxOsci3", "tx:PortRxOsci0", "rx:PortRxOsci0", "tx:PortRxOsci1", "rx:PortRxOsci1",
        "tx:PortRxOsci2", "rx:PortRxOsci2", "tx:PortRxOsci6", "rx:PortRxOsci6", "tx:PortRxOsci3"};
    CHECK(path == want);
}

TEST_CASE("topology validation") {
    auto t = default_loop_topology();
    t.internal_forwards.pop_back();
    CHECK_THROWS_WITH(loop_path(t), ContainsSubstring("topology broken"));

    LoopTopology cyc;
    cyc.ingress = "A";
    cyc.egress = "Z";
    cyc.internal_forwards = {{"A", "B"}};
    cyc.cables = {{"B", "A"}};
    CHECK_THROWS_WITH(loop_path(cyc), ContainsSubstring("topology cycle without egress"));

    auto extra = default_loop_topology();
    extra.cables.push_back({"PortRxOsci4", "PortRxOsci4"});
    CHECK_THROWS_WITH(loop_path(extra), ContainsSubstring("off the ingress-egress path"));

    auto j = nlohmann::json::parse(R"({"ingress":"A","egress":"A","internal_forwards":[["A","A"]],"cables":[]})");
    CHECK(loop_path(parse_loop_topology(j)).size() == 2);
    CHECK_THROWS_WITH(parse_loop_topology(nlohmann::json::object()), ContainsSubstring("bad topology"));
}

TEST_CASE("close loop frames are deterministic") {
    CHECK(close_loop_frame(1, 7, 64) == close_loop_frame(1, 7, 64));
    CHECK(close_loop_frame(1, 7, 64) != close_loop_frame(2, 7, 64));
    const auto f = close_loop_frame(1, 0x01020304, 16);
    CHECK(f.size() == 20);
    CHECK(get_u32_be(f, 0) == 0x01020304u);
}

TEST_CASE("short close loop passes") {
    CloseLoopOptions o;
    o.duration_s = 1.0;
    o.rate_hz = 100;
    const auto r = run_close_loop(default_loop_topology(), o);
    CHECK(r.frames_sent == 100);
    CHECK(r.frames_received == 100);
    CHECK(r.lost == 0);
    CHECK(r.corrupt == 0);
    CHECK(r.passed());
    const auto j = nlohmann::json::parse(summary_line(r));
    CHECK(j.at("pass").get<bool>());
    CHECK(j.at("frames_sent").get<int>() == 100);
}

TEST_CASE("close loop rejects a zero rate") {
    CloseLoopOptions o;
    o.rate_hz = 0;
    CHECK_THROWS_WITH(run_close_loop(default_loop_topology(), o), ContainsSubstring("rate must be > 0"));
}

TEST_CASE("severed cable loses every frame") {
    CloseLoopOptions o;
    o.duration_s = 0.3;
    o.rate_hz = 50;
    o.drain_timeout = 300ms;
    o.severed_cables = {1};
    const auto r = run_close_loop(default_loop_topology(), o);
    CHECK(r.frames_sent > 0);
    CHECK(r.frames_received == 0);
    CHECK(r.lost == r.frames_sent);
    CHECK_FALSE(r.passed());
}

TEST_CASE("integration scenario passes with simulators") {
    Rig rig(true);
    const auto report = run_integration_scenario(default_scenario(), *rig.gs);
    INFO(format_report(report));
    CHECK(report.steps.size() == 8);
    CHECK(report.passed());
    CHECK(rig.wde.wheel_speed == 500);
}

TEST_CASE("integration scenario flags the silent subsystem") {
    Rig rig(false);
    auto script = default_scenario();
    script.back().timeout = 500ms;
    const auto report = run_integration_scenario(script, *rig.gs);
    REQUIRE(report.steps.size() == 8);
    for (std::size_t i = 0; i + 1 < report.steps.size(); ++i)
        CHECK(report.steps[i].passed);
    CHECK_FALSE(report.steps.back().passed);
    CHECK(report.steps.back().detail == "timeout");
    CHECK_FALSE(report.passed());
    const auto j = nlohmann::json::parse(summary_line(report));
    CHECK_FALSE(j.at("pass").get<bool>());
}

TEST_CASE("scenario script parsing") {
    const auto steps = parse_scenario(R"({"steps":[
        {"send":{"id":"01","payload":"01"}},
        {"expect":{"id":1,"prefix":"01","length":5,"timeout_ms":250}},
        {"description":"speed","expect":{"id":"0x01","wde_speed":500}}]})");
    REQUIRE(steps.size() == 3);
    CHECK(steps[0].kind == ScenarioStep::Kind::SendUplink);
    CHECK(steps[0].payload == Bytes{0x01});
    CHECK(steps[1].timeout == 250ms);
    CHECK(steps[1].matcher.length == 5u);
    CHECK(steps[2].description == "speed");
    CHECK_THROWS_WITH(parse_scenario(R"({"steps":[{"wait":1}]})"), ContainsSubstring("send or expect"));
    CHECK_THROWS_WITH(parse_scenario(R"({"steps":[{"send":{"id":1,"payload":"0"}}]})"), ContainsSubstring("bad hex"));
    CHECK_THROWS_WITH(parse_scenario("nope"), ContainsSubstring("bad scenario"));
}

TEST_CASE("downlink matcher") {
    DownlinkMatcher m;
    m.prefix = Bytes{0x01};
    m.length = 5;
    CHECK(m.matches(Bytes{0x01, 0, 0, 0, 0xAC}));
    CHECK_FALSE(m.matches(Bytes{0x02, 0, 0, 0, 0xAC}));
    CHECK_FALSE(m.matches(Bytes{0x01}));
    DownlinkMatcher s;
    s.wde_speed = 500;
    CHECK(s.matches(Bytes{0x01, 0x00, 0x01, 0xF4, 0xAC}));
    CHECK_FALSE(s.matches(Bytes{0x01, 0x00, 0x01, 0xF5, 0xAC}));
}
