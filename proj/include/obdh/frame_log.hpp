#pragma once

#include "obdh/bytes.hpp"

#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

namespace obdh {

// One line per frame event: "<iso-time> <port> <event> <hex, at most 32 bytes>".
inline std::string format_log_line(std::string_view iso_time, std::string_view port,
                                   std::string_view event, ByteView bytes) {
    std::string line;
    line.reserve(iso_time.size() + port.size() + event.size() + 70);
    line.append(iso_time).append(" ").append(port).append(" ").append(event).append(" ");
    line.append(to_hex(bytes, 32));
    return line;
}

class FrameLog {
public:
    using Sink = std::function<void(const std::string&)>;

    FrameLog() = default;
    explicit FrameLog(Sink sink) : state_(std::make_shared<State>()) { state_->sink = std::move(sink); }

    static FrameLog to_stream(std::ostream& os) {
        return FrameLog([&os](const std::string& line) { os << line << '\n' << std::flush; });
    }

    bool enabled() const { return state_ != nullptr; }

    void event(std::string_view port, std::string_view what, ByteView bytes = {}) const {
        if (!state_)
            return;
        const auto line = format_log_line(iso_timestamp(), port, what, bytes);
        std::lock_guard lock(state_->mu);
        state_->sink(line);
    }

private:
    struct State {
        std::mutex mu;
        Sink sink;
    };
    std::shared_ptr<State> state_;
};

} // namespace obdh
