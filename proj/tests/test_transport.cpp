#include <catch2/catch_amalgamated.hpp>

#include "obdh/transport.hpp"

#include <fcntl.h>
#include <stdlib.h>

#include <future>
#include <random>

using namespace obdh;
using namespace std::chrono_literals;

namespace {

std::string unique_name(const char* base) {
    static std::atomic<int> n{0};
    return std::string(base) + "-" + std::to_string(n.fetch_add(1));
}

Bytes random_bytes(std::mt19937& rng, std::size_t n) {
    std::uniform_int_distribution<int> byte(0, 255);
    Bytes out(n);
    for (auto& b : out)
        b = static_cast<std::uint8_t>(byte(rng));
    return out;
}

// Reads until `n` bytes arrive or the link reports Eof/Timeout.
Bytes read_n(Link& link, std::size_t n) {
    Bytes out;
    out.reserve(n);
    while (out.size() < n) {
        auto ev = link.recv_byte();
        if (!ev.is_byte())
            break;
        out.push_back(ev.value);
        link.drain_pending(out);
    }
    return out;
}

void round_trip(Link& a, Link& b, std::mt19937& rng, std::size_t len) {
    const auto payload = random_bytes(rng, len);
    auto reader = std::async(std::launch::async, [&] { return read_n(b, len); });
    CHECK(a.send(payload) == len);
    CHECK(reader.get() == payload);
}

std::pair<Link, Link> tcp_pair(const PortConfig& cfg = {}) {
    TcpListener listener("127.0.0.1", 0);
    auto accepted = std::async(std::launch::async, [&] { return listener.accept(cfg); });
    auto client = connect_tcp(cfg, "127.0.0.1", listener.port(), {2000ms, {}});
    return {std::move(client), accepted.get()};
}

std::pair<Link, Link> pty_pair(const PortConfig& cfg = {}) {
    const int master = ::posix_openpt(O_RDWR | O_NOCTTY);
    REQUIRE(master >= 0);
    REQUIRE(::grantpt(master) == 0);
    REQUIRE(::unlockpt(master) == 0);
    const std::string slave = ::ptsname(master);
    ::fcntl(master, F_SETFL, ::fcntl(master, F_GETFL) | O_NONBLOCK);
    termios tty{};
    ::tcgetattr(master, &tty);
    ::cfmakeraw(&tty);
    ::tcsetattr(master, TCSANOW, &tty);
    auto slave_link = open_link(cfg, "pty:" + slave);
    Link master_link(cfg, BackendKind::PseudoTerminal, std::make_unique<detail::FdEnd>(master, false));
    return {std::move(master_link), std::move(slave_link)};
}

} // namespace

TEST_CASE("backend spec grammar") {
    auto m = parse_backend_spec("mem:gs");
    CHECK(m.kind == BackendSpec::Kind::Memory);
    CHECK(m.name == "gs");
    auto t = parse_backend_spec("tcp:127.0.0.1:5000");
    CHECK(t.kind == BackendSpec::Kind::TcpConnect);
    CHECK(t.host == "127.0.0.1");
    CHECK(t.port == 5000);
    CHECK(parse_backend_spec("tcp-listen:0.0.0.0:0").kind == BackendSpec::Kind::TcpListen);
    CHECK(parse_backend_spec("pty:/dev/pts/3").name == "/dev/pts/3");
    CHECK_THROWS_WITH(parse_backend_spec("serial:/dev/ttyS0"), Catch::Matchers::ContainsSubstring("unknown backend"));
    CHECK_THROWS_AS(parse_backend_spec("tcp:host"), Error);
    CHECK_THROWS_AS(parse_backend_spec("tcp:host:99999"), Error);
    CHECK_THROWS_AS(parse_backend_spec("mem:"), Error);
}

TEST_CASE("port config validation") {
    PortConfig c;
    CHECK_NOTHROW(c.validate());
    c.min_read_bytes = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.intercharacter_timeout = 0ms;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(parse_electrical_standard("RS422") == ElectricalStandard::RS422);
    CHECK_FALSE(parse_electrical_standard("RS485").has_value());
}

TEST_CASE("in-memory round trip preserves order and content") {
    std::mt19937 rng(1);
    auto [a, b] = make_loopback_pair(unique_name("rt"));
    for (std::size_t len : {std::size_t{1}, std::size_t{2}, std::size_t{255}, std::size_t{4096},
                            std::size_t{65536}})
        round_trip(a, b, rng, len);
    std::uniform_int_distribution<std::size_t> len(1, 65536);
    for (int i = 0; i < 20; ++i) {
        round_trip(a, b, rng, len(rng));
        round_trip(b, a, rng, len(rng));
    }
}

TEST_CASE("tcp round trip preserves order and content") {
    std::mt19937 rng(2);
    auto [a, b] = tcp_pair();
    CHECK(a.backend() == BackendKind::Tcp);
    std::uniform_int_distribution<std::size_t> len(1, 65536);
    for (int i = 0; i < 10; ++i) {
        round_trip(a, b, rng, len(rng));
        round_trip(b, a, rng, len(rng));
    }
    round_trip(a, b, rng, 65536);
}

TEST_CASE("pty round trip preserves order and content") {
    std::mt19937 rng(3);
    auto [master, slave] = pty_pair();
    CHECK(slave.backend() == BackendKind::PseudoTerminal);
    std::uniform_int_distribution<std::size_t> len(1, 2048);
    for (int i = 0; i < 10; ++i) {
        round_trip(master, slave, rng, len(rng));
        round_trip(slave, master, rng, len(rng));
    }
}

TEST_CASE("mem endpoints claimed through open_link") {
    const auto name = unique_name("claim");
    memory_registry().declare(name);
    auto a = open_link({}, "mem:" + name);
    auto b = open_link({}, "mem:" + name);
    CHECK_THROWS_WITH(open_link({}, "mem:" + name), Catch::Matchers::ContainsSubstring("endpoint busy"));
    a.send({0x42});
    auto ev = b.recv_byte();
    REQUIRE(ev.is_byte());
    CHECK(ev.value == 0x42);
}

TEST_CASE("error conditions") {
    CHECK_THROWS_WITH(open_link({}, "mem:never-declared"), Catch::Matchers::ContainsSubstring("unknown endpoint"));

    const auto name = unique_name("dup");
    auto pair = make_loopback_pair(name);
    CHECK_THROWS_WITH(make_loopback_pair(name), Catch::Matchers::ContainsSubstring("duplicate loopback name"));

    CHECK_THROWS_WITH(open_link({}, "pty:/dev/definitely-not-here"),
                      Catch::Matchers::ContainsSubstring("device not present"));

    // Nothing listens on this port: bind one, then release it.
    std::uint16_t port;
    {
        TcpListener l("127.0.0.1", 0);
        port = l.port();
    }
    CHECK_THROWS_WITH(connect_tcp({}, "127.0.0.1", port, {100ms, {}}),
                      Catch::Matchers::ContainsSubstring("address unreachable"));

    auto& [a, b] = pair;
    CHECK(a.send(ByteView{}) == 0);
    a.close();
    CHECK_FALSE(a.is_open());
    CHECK_THROWS_AS(a.send({0x01}), LinkClosed);
}

TEST_CASE("intercharacter timeout is reported as an event") {
    auto [a, b] = make_loopback_pair(unique_name("to"));
    const auto t0 = std::chrono::steady_clock::now();
    auto ev = b.recv_byte();
    const auto dt = std::chrono::steady_clock::now() - t0;
    CHECK(ev.is_timeout());
    CHECK(dt >= 450ms);
    CHECK(dt <= 700ms);

    // A gap longer than the timeout loses nothing.
    a.send({0x01, 0x02});
    std::this_thread::sleep_for(600ms);
    a.send({0x03});
    CHECK(read_n(b, 3) == Bytes{0x01, 0x02, 0x03});
}

TEST_CASE("timeout over tcp") {
    PortConfig cfg;
    cfg.intercharacter_timeout = 200ms;
    auto [a, b] = tcp_pair(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(b.recv_byte().is_timeout());
    CHECK(std::chrono::steady_clock::now() - t0 >= 180ms);
}

TEST_CASE("min_read_bytes waits for a batch") {
    PortConfig cfg;
    cfg.min_read_bytes = 4;
    auto [a, b] = make_loopback_pair(unique_name("vmin"), {}, cfg);
    auto reader = std::async(std::launch::async, [&] {
        auto ev = b.recv_byte();
        Bytes rest;
        b.drain_pending(rest);
        return std::pair{ev, rest};
    });
    a.send({0x01, 0x02});
    std::this_thread::sleep_for(100ms);
    a.send({0x03, 0x04});
    auto [ev, rest] = reader.get();
    REQUIRE(ev.is_byte());
    CHECK(ev.value == 0x01);
    CHECK(rest == Bytes{0x02, 0x03, 0x04});
}

TEST_CASE("peer close yields eof after buffered data") {
    SECTION("memory") {
        auto [a, b] = make_loopback_pair(unique_name("eof"));
        a.send({0x07});
        a.close();
        auto ev = b.recv_byte();
        REQUIRE(ev.is_byte());
        CHECK(ev.value == 0x07);
        CHECK(b.recv_byte().is_eof());
        CHECK(b.recv_byte().is_eof());
    }
    SECTION("tcp") {
        auto [a, b] = tcp_pair();
        a.send({0x07});
        a.close();
        CHECK(b.recv_byte().value == 0x07);
        CHECK(b.recv_byte().is_eof());
    }
    SECTION("local close wakes a blocked reader") {
        auto [a, b] = make_loopback_pair(unique_name("wake"));
        auto reader = std::async(std::launch::async, [&b] { return b.recv_byte(); });
        std::this_thread::sleep_for(50ms);
        b.close();
        CHECK(reader.get().is_eof());
    }
}

TEST_CASE("distinct links share no buffers") {
    PortConfig quick;
    quick.intercharacter_timeout = 50ms;
    auto [a1, b1] = make_loopback_pair(unique_name("iso"), quick, quick);
    auto [a2, b2] = make_loopback_pair(unique_name("iso"), quick, quick);
    a1.send({0x11, 0x12});
    a2.send({0x21});
    CHECK(read_n(b2, 1) == Bytes{0x21});
    CHECK(read_n(b1, 2) == Bytes{0x11, 0x12});
    // Nothing leaked across, in either direction.
    CHECK(b1.recv_byte().is_timeout());
    CHECK(b2.recv_byte().is_timeout());
    CHECK(a1.recv_byte().is_timeout());
    CHECK(a2.recv_byte().is_timeout());
}
