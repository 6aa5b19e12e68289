#pragma once

// Byte-stream links between the OBDH node, simulators and test equipment.
//
// A Link is one end of a duplex byte stream. Three backends exist:
//   mem:<name>                 in-process pipe pair from the memory registry
//   tcp:<host>:<port>          outbound TCP connection (raw bytes, no framing)
//   tcp-listen:<host>:<port>   accept exactly one inbound TCP connection
//   pty:<path>                 serial or pseudo-terminal device
//
// Reads follow the serial-port contract used on the flight computer: block
// until min_read_bytes are buffered, or until no new byte has arrived for
// intercharacter_timeout.

#include "obdh/bytes.hpp"

#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <string_view>
#include <thread>
#include <utility>

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <termios.h>
#include <unistd.h>

namespace obdh {

class LinkClosed : public Error {
public:
    LinkClosed() : Error("link closed") {}
};

enum class ElectricalStandard { RS232, RS422, TTL };

inline std::string_view to_string(ElectricalStandard s) {
    switch (s) {
    case ElectricalStandard::RS232: return "RS232";
    case ElectricalStandard::RS422: return "RS422";
    case ElectricalStandard::TTL: return "TTL";
    }
    return "?";
}

inline std::optional<ElectricalStandard> parse_electrical_standard(std::string_view s) {
    if (s == "RS232") return ElectricalStandard::RS232;
    if (s == "RS422") return ElectricalStandard::RS422;
    if (s == "TTL") return ElectricalStandard::TTL;
    return std::nullopt;
}

struct PortConfig {
    std::string port_name;
    unsigned baud = 9600;
    std::size_t min_read_bytes = 1;
    std::chrono::milliseconds intercharacter_timeout{500};
    ElectricalStandard electrical_standard = ElectricalStandard::RS232;
    // Throttle sends to baud/10 bytes per second on virtual links.
    bool pace = false;

    void validate() const {
        if (min_read_bytes < 1)
            throw Error("min_read_bytes must be >= 1");
        if (intercharacter_timeout.count() <= 0)
            throw Error("intercharacter_timeout must be > 0");
        if (baud == 0)
            throw Error("baud must be > 0");
    }
};

enum class BackendKind { InMemory, Tcp, PseudoTerminal };

struct RecvEvent {
    enum class Kind { Byte, Timeout, Eof };
    Kind kind = Kind::Timeout;
    std::uint8_t value = 0;

    static RecvEvent byte(std::uint8_t b) { return {Kind::Byte, b}; }
    static RecvEvent timeout() { return {Kind::Timeout, 0}; }
    static RecvEvent eof() { return {Kind::Eof, 0}; }

    bool is_byte() const { return kind == Kind::Byte; }
    bool is_timeout() const { return kind == Kind::Timeout; }
    bool is_eof() const { return kind == Kind::Eof; }
};

namespace detail {

using Clock = std::chrono::steady_clock;

struct ReadResult {
    std::size_t count = 0; // 0 with eof == false means the deadline passed
    bool eof = false;
};

// One end of a duplex stream. write() and read_some() may run concurrently
// from two different threads; close() may be called from any thread.
class LinkEnd {
public:
    virtual ~LinkEnd() = default;
    virtual void write(ByteView data) = 0;
    virtual ReadResult read_some(std::span<std::uint8_t> out, Clock::time_point deadline) = 0;
    virtual void close() = 0;
};

// Single-direction in-memory byte queue.
struct Pipe {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::uint8_t> buffer;
    bool writer_closed = false;
    bool reader_closed = false;
};

class MemoryEnd final : public LinkEnd {
public:
    MemoryEnd(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out)
        : in_(std::move(in)), out_(std::move(out)) {}

    ~MemoryEnd() override { close(); }

    void write(ByteView data) override {
        {
            std::lock_guard lock(out_->mu);
            if (out_->writer_closed || out_->reader_closed)
                throw LinkClosed();
            out_->buffer.insert(out_->buffer.end(), data.begin(), data.end());
        }
        out_->cv.notify_all();
    }

    ReadResult read_some(std::span<std::uint8_t> out, Clock::time_point deadline) override {
        std::unique_lock lock(in_->mu);
        in_->cv.wait_until(lock, deadline, [&] {
            return !in_->buffer.empty() || in_->writer_closed || in_->reader_closed;
        });
        if (in_->reader_closed)
            return {0, true};
        if (in_->buffer.empty())
            return {0, in_->writer_closed};
        const std::size_t n = std::min(out.size(), in_->buffer.size());
        std::copy_n(in_->buffer.begin(), n, out.begin());
        in_->buffer.erase(in_->buffer.begin(), in_->buffer.begin() + static_cast<std::ptrdiff_t>(n));
        return {n, false};
    }

    void close() override {
        for (auto* pipe : {out_.get(), in_.get()}) {
            {
                std::lock_guard lock(pipe->mu);
                if (pipe == out_.get())
                    pipe->writer_closed = true;
                else
                    pipe->reader_closed = true;
            }
            pipe->cv.notify_all();
        }
    }

private:
    std::shared_ptr<Pipe> in_;
    std::shared_ptr<Pipe> out_;
};

// File-descriptor backed end (TCP socket or tty). Reads poll in short slices
// so close() from another thread is noticed promptly.
class FdEnd final : public LinkEnd {
public:
    FdEnd(int fd, bool is_socket) : fd_(fd), is_socket_(is_socket) {}

    ~FdEnd() override {
        close();
        ::close(fd_);
    }

    void write(ByteView data) override {
        std::size_t done = 0;
        while (done < data.size()) {
            if (closed_.load())
                throw LinkClosed();
            ssize_t n = is_socket_
                ? ::send(fd_, data.data() + done, data.size() - done, MSG_NOSIGNAL)
                : ::write(fd_, data.data() + done, data.size() - done);
            if (n < 0) {
                if (errno == EINTR)
                    continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK) {
                    pollfd p{fd_, POLLOUT, 0};
                    ::poll(&p, 1, 100);
                    continue;
                }
                if (errno == EPIPE || errno == ECONNRESET)
                    throw LinkClosed();
                throw Error(std::string("write failed: ") + std::strerror(errno));
            }
            done += static_cast<std::size_t>(n);
        }
    }

    ReadResult read_some(std::span<std::uint8_t> out, Clock::time_point deadline) override {
        for (;;) {
            if (closed_.load())
                return {0, true};
            const auto now = Clock::now();
            if (now >= deadline)
                return {0, false};
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
            pollfd p{fd_, POLLIN, 0};
            const int rc = ::poll(&p, 1, static_cast<int>(std::clamp<long long>(left, 1, 50)));
            if (rc < 0) {
                if (errno == EINTR)
                    continue;
                return {0, true};
            }
            if (rc == 0)
                continue;
            const ssize_t n = ::read(fd_, out.data(), out.size());
            if (n > 0)
                return {static_cast<std::size_t>(n), false};
            if (n == 0)
                return {0, true};
            if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK)
                continue;
            return {0, true};
        }
    }

    void close() override {
        if (closed_.exchange(true))
            return;
        if (is_socket_)
            ::shutdown(fd_, SHUT_RDWR);
    }

private:
    int fd_;
    bool is_socket_;
    std::atomic<bool> closed_{false};
};

} // namespace detail

class Link {
public:
    Link(PortConfig config, BackendKind backend, std::unique_ptr<detail::LinkEnd> end)
        : config_(std::move(config)), backend_(backend), end_(std::move(end)) {
        config_.validate();
    }

    Link(Link&&) = default;
    Link& operator=(Link&&) = default;

    const PortConfig& config() const { return config_; }
    BackendKind backend() const { return backend_; }
    bool is_open() const { return !closed_->load(); }

    // All-or-error. Returns the number of bytes accepted.
    std::size_t send(ByteView data) {
        if (closed_->load())
            throw LinkClosed();
        if (data.empty())
            return 0;
        end_->write(data);
        if (config_.pace) {
            const double seconds = static_cast<double>(data.size()) * 10.0 / config_.baud;
            std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
        }
        return data.size();
    }

    std::size_t send(std::initializer_list<std::uint8_t> data) {
        const Bytes tmp(data);
        return send(ByteView(tmp));
    }

    RecvEvent recv_byte() {
        if (pending_.empty() && !fill())
            return eof_ ? RecvEvent::eof() : RecvEvent::timeout();
        const std::uint8_t b = pending_.front();
        pending_.pop_front();
        return RecvEvent::byte(b);
    }

    // Moves bytes already buffered on this end into `out` without blocking.
    std::size_t drain_pending(Bytes& out) {
        const std::size_t n = pending_.size();
        out.insert(out.end(), pending_.begin(), pending_.end());
        pending_.clear();
        return n;
    }

    // Closing makes the peer's reads drain and then report Eof; a reader
    // blocked on this end also wakes with Eof.
    void close() {
        if (closed_->exchange(true))
            return;
        end_->close();
    }

private:
    bool fill() {
        if (eof_)
            return false;
        std::array<std::uint8_t, 4096> chunk{};
        auto deadline = detail::Clock::now() + config_.intercharacter_timeout;
        while (pending_.size() < config_.min_read_bytes) {
            const auto got = end_->read_some(std::span(chunk.data(), chunk.size()), deadline);
            if (got.eof) {
                eof_ = true;
                break;
            }
            if (got.count == 0)
                break;
            pending_.insert(pending_.end(), chunk.begin(), chunk.begin() + static_cast<std::ptrdiff_t>(got.count));
            deadline = detail::Clock::now() + config_.intercharacter_timeout;
        }
        return !pending_.empty();
    }

    PortConfig config_;
    BackendKind backend_;
    std::unique_ptr<detail::LinkEnd> end_;
    std::unique_ptr<std::atomic<bool>> closed_ = std::make_unique<std::atomic<bool>>(false);
    std::deque<std::uint8_t> pending_; // reader-owned
    bool eof_ = false;                 // reader-owned
};

// Named in-memory pipe pairs. Each name yields exactly two ends; open_link on
// "mem:<name>" claims them in order.
class MemoryRegistry {
public:
    void declare(const std::string& name) {
        std::lock_guard lock(mu_);
        declare_locked(name);
    }

    // Declares the name unless it already exists.
    void ensure(const std::string& name) {
        std::lock_guard lock(mu_);
        if (!entries_.contains(name))
            declare_locked(name);
    }

    bool contains(const std::string& name) const {
        std::lock_guard lock(mu_);
        return entries_.contains(name);
    }

    std::unique_ptr<detail::LinkEnd> claim(const std::string& name) {
        std::lock_guard lock(mu_);
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw Error("unknown endpoint: mem:" + name);
        auto& e = it->second;
        if (e.claimed >= 2)
            throw Error("endpoint busy: mem:" + name);
        return std::move(e.ends[e.claimed++]);
    }

    std::pair<Link, Link> make_pair(const std::string& name, const PortConfig& a, const PortConfig& b) {
        std::lock_guard lock(mu_);
        if (entries_.contains(name))
            throw Error("duplicate loopback name: " + name);
        declare_locked(name);
        auto& e = entries_.at(name);
        e.claimed = 2;
        return {Link(a, BackendKind::InMemory, std::move(e.ends[0])),
                Link(b, BackendKind::InMemory, std::move(e.ends[1]))};
    }

private:
    struct Entry {
        std::array<std::unique_ptr<detail::LinkEnd>, 2> ends;
        int claimed = 0;
    };

    void declare_locked(const std::string& name) {
        if (entries_.contains(name))
            throw Error("duplicate loopback name: " + name);
        auto ab = std::make_shared<detail::Pipe>();
        auto ba = std::make_shared<detail::Pipe>();
        Entry e;
        e.ends[0] = std::make_unique<detail::MemoryEnd>(ba, ab);
        e.ends[1] = std::make_unique<detail::MemoryEnd>(ab, ba);
        entries_.emplace(name, std::move(e));
    }

    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
};

inline MemoryRegistry& memory_registry() {
    static MemoryRegistry registry;
    return registry;
}

inline std::pair<Link, Link> make_loopback_pair(const std::string& name,
                                                const PortConfig& a = {},
                                                const PortConfig& b = {}) {
    return memory_registry().make_pair(name, a, b);
}

struct BackendSpec {
    enum class Kind { Memory, TcpConnect, TcpListen, Pty };
    Kind kind = Kind::Memory;
    std::string name; // memory pair name or device path
    std::string host;
    std::uint16_t port = 0;
};

inline BackendSpec parse_backend_spec(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos)
        throw Error("unknown backend: " + std::string(text));
    const auto scheme = text.substr(0, colon);
    const auto rest = text.substr(colon + 1);
    BackendSpec spec;
    if (scheme == "mem") {
        if (rest.empty())
            throw Error("empty memory endpoint name");
        spec.kind = BackendSpec::Kind::Memory;
        spec.name = rest;
        return spec;
    }
    if (scheme == "pty") {
        if (rest.empty())
            throw Error("empty device path");
        spec.kind = BackendSpec::Kind::Pty;
        spec.name = rest;
        return spec;
    }
    if (scheme == "tcp" || scheme == "tcp-listen") {
        const auto pc = rest.rfind(':');
        if (pc == std::string_view::npos || pc == 0 || pc + 1 == rest.size())
            throw Error("bad tcp address: " + std::string(text));
        spec.kind = scheme == "tcp" ? BackendSpec::Kind::TcpConnect : BackendSpec::Kind::TcpListen;
        spec.host = rest.substr(0, pc);
        const auto port_text = std::string(rest.substr(pc + 1));
        char* end = nullptr;
        const long port = std::strtol(port_text.c_str(), &end, 10);
        if (*end != '\0' || port < 0 || port > 65535)
            throw Error("bad tcp port: " + port_text);
        spec.port = static_cast<std::uint16_t>(port);
        return spec;
    }
    throw Error("unknown backend: " + std::string(scheme));
}

struct OpenOptions {
    // Keep retrying an outbound TCP connect until this much time has passed.
    std::chrono::milliseconds connect_timeout{0};
    // Cancels a pending tcp-listen accept or connect retry loop.
    std::stop_token stop;
};

namespace detail {

inline sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr)
        throw Error("address unreachable: cannot resolve " + host);
    sockaddr_in addr{};
    std::memcpy(&addr, res->ai_addr, sizeof addr);
    ::freeaddrinfo(res);
    addr.sin_port = htons(port);
    return addr;
}

inline void tune_socket(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

inline speed_t baud_constant(unsigned baud) {
    switch (baud) {
    case 1200: return B1200;
    case 2400: return B2400;
    case 4800: return B4800;
    case 9600: return B9600;
    case 19200: return B19200;
    case 38400: return B38400;
    case 57600: return B57600;
    case 115200: return B115200;
    case 230400: return B230400;
    default: throw Error("unsupported baud for serial device: " + std::to_string(baud));
    }
}

} // namespace detail

// Listening socket that hands out one Link per accepted connection.
class TcpListener {
public:
    TcpListener(const std::string& host, std::uint16_t port) {
        const auto addr = detail::resolve_ipv4(host, port);
        fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
        if (fd_ < 0)
            throw Error("socket() failed");
        int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
            const std::string why = std::strerror(errno);
            ::close(fd_);
            throw Error("bind " + host + ":" + std::to_string(port) + " failed: " + why);
        }
        if (::listen(fd_, 4) != 0) {
            ::close(fd_);
            throw Error("listen failed");
        }
    }

    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;
    ~TcpListener() { ::close(fd_); }

    std::uint16_t port() const {
        sockaddr_in addr{};
        socklen_t len = sizeof addr;
        ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        return ntohs(addr.sin_port);
    }

    // Blocks until a peer connects or the stop token fires.
    Link accept(const PortConfig& config, std::stop_token stop = {}) {
        for (;;) {
            if (stop.stop_requested())
                throw Error("accept cancelled");
            pollfd p{fd_, POLLIN, 0};
            const int rc = ::poll(&p, 1, 50);
            if (rc <= 0)
                continue;
            const int client = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
            if (client < 0)
                continue;
            detail::tune_socket(client);
            return Link(config, BackendKind::Tcp, std::make_unique<detail::FdEnd>(client, true));
        }
    }

private:
    int fd_ = -1;
};

inline Link connect_tcp(const PortConfig& config, const std::string& host, std::uint16_t port,
                        const OpenOptions& options = {}) {
    const auto addr = detail::resolve_ipv4(host, port);
    const auto give_up = detail::Clock::now() + options.connect_timeout;
    for (;;) {
        const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
        if (fd < 0)
            throw Error("socket() failed");
        if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
            detail::tune_socket(fd);
            return Link(config, BackendKind::Tcp, std::make_unique<detail::FdEnd>(fd, true));
        }
        const std::string why = std::strerror(errno);
        ::close(fd);
        if (detail::Clock::now() >= give_up || options.stop.stop_requested())
            throw Error("address unreachable: " + host + ":" + std::to_string(port) + " (" + why + ")");
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

inline Link open_pty(const PortConfig& config, const std::string& path) {
    const int fd = ::open(path.c_str(), O_RDWR | O_NOCTTY | O_NONBLOCK | O_CLOEXEC);
    if (fd < 0) {
        if (errno == ENOENT)
            throw Error("device not present: " + path);
        throw Error("cannot open " + path + ": " + std::strerror(errno));
    }
    if (::isatty(fd)) {
        termios tty{};
        if (::tcgetattr(fd, &tty) == 0) {
            ::cfmakeraw(&tty);
            const speed_t speed = detail::baud_constant(config.baud);
            ::cfsetospeed(&tty, speed);
            ::cfsetispeed(&tty, speed);
            tty.c_cflag |= CLOCAL | CREAD;
            // Timing is enforced by Link::recv_byte, so the driver returns immediately.
            tty.c_cc[VMIN] = 0;
            tty.c_cc[VTIME] = 0;
            ::tcsetattr(fd, TCSANOW, &tty);
        }
    }
    return Link(config, BackendKind::PseudoTerminal, std::make_unique<detail::FdEnd>(fd, false));
}

inline Link open_link(const PortConfig& config, std::string_view backend_spec, const OpenOptions& options = {}) {
    config.validate();
    const auto spec = parse_backend_spec(backend_spec);
    switch (spec.kind) {
    case BackendSpec::Kind::Memory:
        return Link(config, BackendKind::InMemory, memory_registry().claim(spec.name));
    case BackendSpec::Kind::TcpConnect:
        return connect_tcp(config, spec.host, spec.port, options);
    case BackendSpec::Kind::TcpListen: {
        TcpListener listener(spec.host, spec.port);
        return listener.accept(config, options.stop);
    }
    case BackendSpec::Kind::Pty:
        return open_pty(config, spec.name);
    }
    throw Error("unknown backend");
}

} // namespace obdh
