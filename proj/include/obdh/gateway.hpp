#pragma once

// EGSE gateway: bridges the ground-segment byte link to one JSON message per
// WebSocket text frame, so consoles and scripts can command the bus.
//
//   client -> gateway  {"dir":"up","id":"01","payload":"0201f4"}
//   gateway -> client  {"dir":"down","id":"01","payload":"0200ac","ts":"..."}
//                      {"dir":"status","id":"00","payload":"","ts":"...","msg":"bad payload"}
//
// GET /telemetry?limit=N on the same port returns recent downlink messages as
// a JSON array.

#include "obdh/framing.hpp"
#include "obdh/port_table.hpp"
#include "obdh/transport.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <deque>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>

namespace obdh {

struct ConsoleMessage {
    enum class Direction { Uplink, Downlink, Status };
    Direction direction = Direction::Downlink;
    std::uint8_t subsystem_id = 0;
    std::string payload_hex;
    std::string timestamp;
    std::string message; // Status only

    bool operator==(const ConsoleMessage&) const = default;
};

inline std::string_view to_wire(ConsoleMessage::Direction d) {
    switch (d) {
    case ConsoleMessage::Direction::Uplink: return "up";
    case ConsoleMessage::Direction::Downlink: return "down";
    case ConsoleMessage::Direction::Status: return "status";
    }
    return "?";
}

inline nlohmann::ordered_json to_json(const ConsoleMessage& msg) {
    if (!from_hex(msg.payload_hex))
        throw Error("invalid payload hex: " + msg.payload_hex);
    nlohmann::ordered_json j;
    j["dir"] = to_wire(msg.direction);
    j["id"] = hex_byte(msg.subsystem_id);
    j["payload"] = msg.payload_hex;
    j["ts"] = msg.timestamp;
    if (msg.direction == ConsoleMessage::Direction::Status)
        j["msg"] = msg.message;
    return j;
}

// Single line, no trailing newline.
inline std::string encode_console_message(const ConsoleMessage& msg) {
    return to_json(msg).dump();
}

struct ParsedConsoleMessage {
    std::optional<ConsoleMessage> message;
    std::string error; // set when message is empty
};

inline ParsedConsoleMessage parse_console_message(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        return {std::nullopt, "bad message"};
    }
    if (!j.is_object() || !j.contains("dir") || !j["dir"].is_string())
        return {std::nullopt, "bad message"};
    ConsoleMessage m;
    const auto dir = j["dir"].get<std::string>();
    if (dir == "up")
        m.direction = ConsoleMessage::Direction::Uplink;
    else if (dir == "down")
        m.direction = ConsoleMessage::Direction::Downlink;
    else if (dir == "status")
        m.direction = ConsoleMessage::Direction::Status;
    else
        return {std::nullopt, "bad message"};
    if (!j.contains("id") || !j["id"].is_string())
        return {std::nullopt, "bad id"};
    const auto id = from_hex(j["id"].get<std::string>());
    if (!id || id->size() != 1)
        return {std::nullopt, "bad id"};
    m.subsystem_id = (*id)[0];
    if (j.contains("payload")) {
        if (!j["payload"].is_string())
            return {std::nullopt, "bad payload"};
        m.payload_hex = j["payload"].get<std::string>();
    }
    const auto payload = from_hex(m.payload_hex);
    if (!payload)
        return {std::nullopt, "bad payload"};
    if (m.direction == ConsoleMessage::Direction::Uplink && !is_valid_gs_payload(*payload))
        return {std::nullopt, "bad payload"};
    if (j.contains("ts") && j["ts"].is_string())
        m.timestamp = j["ts"].get<std::string>();
    if (j.contains("msg") && j["msg"].is_string())
        m.message = j["msg"].get<std::string>();
    return {std::move(m), {}};
}

inline ConsoleMessage status_message(std::string text) {
    ConsoleMessage m;
    m.direction = ConsoleMessage::Direction::Status;
    m.timestamp = iso_timestamp();
    m.message = std::move(text);
    return m;
}

struct GatewayOptions {
    std::string listen_host = "127.0.0.1";
    std::uint16_t listen_port = 0; // 0 = ephemeral
    std::size_t client_queue = 1024;
    std::size_t history = 1024;
    PortTable table = default_port_table();
};

class Gateway {
public:
    Gateway(std::shared_ptr<Link> gs_link, GatewayOptions options)
        : gs_link_(std::move(gs_link)), options_(std::move(options)) {}

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;
    ~Gateway() { stop(); }

    // Binds and starts serving. Throws on bind failure.
    void start() {
        namespace net = boost::asio;
        using tcp = net::ip::tcp;
        boost::system::error_code ec;
        const auto address = net::ip::make_address(options_.listen_host, ec);
        if (ec)
            throw Error("bad listen address: " + options_.listen_host);
        const tcp::endpoint endpoint(address, options_.listen_port);
        acceptor_.open(endpoint.protocol(), ec);
        if (!ec)
            acceptor_.set_option(net::socket_base::reuse_address(true), ec);
        if (!ec)
            acceptor_.bind(endpoint, ec);
        if (!ec)
            acceptor_.listen(net::socket_base::max_listen_connections, ec);
        if (ec)
            throw Error("bind " + options_.listen_host + ":" + std::to_string(options_.listen_port) +
                        " failed: " + ec.message());
        port_ = acceptor_.local_endpoint().port();
        do_accept();
        io_thread_ = std::jthread([this] { ioc_.run(); });
        reader_thread_ = std::jthread([this](std::stop_token st) { read_downlink(st); });
    }

    void stop() {
        if (stopped_.exchange(true))
            return;
        reader_thread_.request_stop();
        if (reader_thread_.joinable())
            reader_thread_.join();
        work_.reset();
        ioc_.stop();
        if (io_thread_.joinable())
            io_thread_.join();
    }

    std::uint16_t port() const { return port_; }

    std::size_t client_count() const { return clients_.load(); }

    std::vector<ConsoleMessage> recent(std::size_t limit) const {
        std::lock_guard lock(history_mu_);
        const std::size_t n = std::min(limit, history_.size());
        return {history_.end() - static_cast<std::ptrdiff_t>(n), history_.end()};
    }

    std::uint64_t uplinks_sent() const { return uplinks_.load(); }

private:
    class WsSession;

    void do_accept();
    void handle_client_text(const std::shared_ptr<WsSession>& session, const std::string& text);
    void broadcast(const ConsoleMessage& msg);

    void read_downlink(std::stop_token st) {
        DownlinkDeframer deframer(make_downlink_validator(options_.table));
        while (!st.stop_requested()) {
            const auto ev = gs_link_->recv_byte();
            if (ev.is_eof())
                break;
            if (!ev.is_byte())
                continue;
            auto out = deframer.push(ev.value);
            if (out.kind != DownlinkEvent::Kind::Complete)
                continue;
            ConsoleMessage msg;
            msg.direction = ConsoleMessage::Direction::Downlink;
            msg.subsystem_id = out.subsystem_id;
            msg.payload_hex = to_hex(out.payload);
            msg.timestamp = iso_timestamp();
            {
                std::lock_guard lock(history_mu_);
                history_.push_back(msg);
                if (history_.size() > options_.history)
                    history_.pop_front();
            }
            broadcast(msg);
        }
    }

    std::string telemetry_json(std::size_t limit) const {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& m : recent(limit))
            arr.push_back(to_json(m));
        return arr.dump();
    }

    std::shared_ptr<Link> gs_link_;
    GatewayOptions options_;
    boost::asio::io_context ioc_{1};
    std::optional<boost::asio::executor_work_guard<boost::asio::io_context::executor_type>> work_{
        boost::asio::make_work_guard(ioc_)};
    boost::asio::ip::tcp::acceptor acceptor_{ioc_};
    std::uint16_t port_ = 0;
    std::jthread io_thread_;
    std::jthread reader_thread_;
    std::atomic<bool> stopped_{false};
    std::atomic<std::size_t> clients_{0};
    std::atomic<std::uint64_t> uplinks_{0};

    // Touched only on the io thread.
    std::set<std::shared_ptr<WsSession>> sessions_;

    mutable std::mutex history_mu_;
    std::deque<ConsoleMessage> history_;
};

class Gateway::WsSession : public std::enable_shared_from_this<Gateway::WsSession> {
public:
    WsSession(boost::asio::ip::tcp::socket socket, Gateway& gw) : ws_(std::move(socket)), gw_(gw) {}

    void start(boost::beast::http::request<boost::beast::http::string_body> req) {
        ws_.text(true);
        ws_.async_accept(req, [self = shared_from_this()](boost::beast::error_code ec) {
            if (ec)
                return;
            self->gw_.sessions_.insert(self);
            self->gw_.clients_.fetch_add(1);
            self->do_read();
        });
    }

    // Drop-oldest: a slow client loses its own backlog, never stalls the bus.
    void enqueue(std::string text) {
        if (closed_)
            return;
        if (queue_.size() >= gw_.options_.client_queue) {
            queue_.pop_front();
            ++dropped_;
        }
        queue_.push_back(std::move(text));
        if (!writing_)
            do_write();
    }

private:
    void do_read() {
        ws_.async_read(buffer_, [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
            if (ec) {
                self->close();
                return;
            }
            const auto text = boost::beast::buffers_to_string(self->buffer_.data());
            self->buffer_.consume(self->buffer_.size());
            self->gw_.handle_client_text(self, text);
            self->do_read();
        });
    }

    void do_write() {
        if (queue_.empty()) {
            writing_ = false;
            return;
        }
        writing_ = true;
        if (dropped_ > 0) {
            current_ = encode_console_message(status_message("dropped " + std::to_string(dropped_) + " messages"));
            dropped_ = 0;
        } else {
            current_ = std::move(queue_.front());
            queue_.pop_front();
        }
        ws_.async_write(boost::asio::buffer(current_), [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
            if (ec) {
                self->close();
                return;
            }
            self->do_write();
        });
    }

    void close() {
        if (closed_)
            return;
        closed_ = true;
        queue_.clear();
        if (gw_.sessions_.erase(shared_from_this()) > 0)
            gw_.clients_.fetch_sub(1);
    }

    boost::beast::websocket::stream<boost::beast::tcp_stream> ws_;
    Gateway& gw_;
    boost::beast::flat_buffer buffer_;
    std::deque<std::string> queue_;
    std::string current_;
    std::size_t dropped_ = 0;
    bool writing_ = false;
    bool closed_ = false;
};

namespace detail {

class HttpSession : public std::enable_shared_from_this<HttpSession> {
public:
    using Request = boost::beast::http::request<boost::beast::http::string_body>;
    using Upgrade = std::function<void(boost::asio::ip::tcp::socket, Request)>;
    using Telemetry = std::function<std::string(std::size_t)>;

    HttpSession(boost::asio::ip::tcp::socket socket, Upgrade upgrade, Telemetry telemetry)
        : stream_(std::move(socket)), upgrade_(std::move(upgrade)), telemetry_(std::move(telemetry)) {}

    void start() {
        namespace http = boost::beast::http;
        stream_.expires_after(std::chrono::seconds(30));
        http::async_read(stream_, buffer_, req_, [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
            if (ec)
                return;
            self->stream_.expires_never();
            if (boost::beast::websocket::is_upgrade(self->req_)) {
                self->upgrade_(self->stream_.release_socket(), std::move(self->req_));
                return;
            }
            self->respond();
        });
    }

private:
    void respond() {
        namespace http = boost::beast::http;
        auto res = std::make_shared<http::response<http::string_body>>();
        res->version(req_.version());
        res->keep_alive(false);
        const std::string target(req_.target());
        const auto q = target.find('?');
        const std::string path = target.substr(0, q);
        if (req_.method() == http::verb::get && path == "/telemetry") {
            std::size_t limit = 100;
            if (q != std::string::npos) {
                const std::string query = target.substr(q + 1);
                const auto at = query.find("limit=");
                if (at != std::string::npos)
                    limit = std::strtoul(query.c_str() + at + 6, nullptr, 10);
            }
            res->result(http::status::ok);
            res->set(http::field::content_type, "application/json");
            res->body() = telemetry_(limit);
        } else {
            res->result(http::status::not_found);
            res->set(http::field::content_type, "text/plain");
            res->body() = "not found\n";
        }
        res->prepare_payload();
        http::async_write(stream_, *res, [self = shared_from_this(), res](boost::beast::error_code, std::size_t) {
            boost::beast::error_code ignored;
            self->stream_.socket().shutdown(boost::asio::ip::tcp::socket::shutdown_send, ignored);
        });
    }

    boost::beast::tcp_stream stream_;
    boost::beast::flat_buffer buffer_;
    Request req_;
    Upgrade upgrade_;
    Telemetry telemetry_;
};

} // namespace detail

inline void Gateway::do_accept() {
    acceptor_.async_accept([this](boost::beast::error_code ec, boost::asio::ip::tcp::socket socket) {
        if (ec)
            return;
        std::make_shared<detail::HttpSession>(
            std::move(socket),
            [this](boost::asio::ip::tcp::socket s, detail::HttpSession::Request req) {
                std::make_shared<WsSession>(std::move(s), *this)->start(std::move(req));
            },
            [this](std::size_t limit) { return telemetry_json(limit); })
            ->start();
        do_accept();
    });
}

inline void Gateway::handle_client_text(const std::shared_ptr<WsSession>& session, const std::string& text) {
    auto parsed = parse_console_message(text);
    if (!parsed.message) {
        session->enqueue(encode_console_message(status_message(parsed.error)));
        return;
    }
    const auto& msg = *parsed.message;
    if (msg.direction != ConsoleMessage::Direction::Uplink) {
        session->enqueue(encode_console_message(status_message("only uplink messages are accepted")));
        return;
    }
    try {
        gs_link_->send(encode_gs_frame({msg.subsystem_id, 0x00, *from_hex(msg.payload_hex)}));
        uplinks_.fetch_add(1);
    } catch (const Error& e) {
        session->enqueue(encode_console_message(status_message(std::string("uplink failed: ") + e.what())));
    }
}

inline void Gateway::broadcast(const ConsoleMessage& msg) {
    auto text = encode_console_message(msg);
    boost::asio::post(ioc_, [this, text = std::move(text)] {
        for (const auto& s : sessions_)
            s->enqueue(text);
    });
}

} // namespace obdh
