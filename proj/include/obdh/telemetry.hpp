#pragma once

#include "obdh/bytes.hpp"
#include "obdh/port_table.hpp"

#include <chrono>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace obdh {

using MonotonicClock = std::chrono::steady_clock;

struct TelemetryRecord {
    MonotonicClock::time_point timestamp;
    std::string source_port;
    std::uint8_t subsystem_id = 0;
    Bytes payload;
    Disposition disposition = Disposition::ForwardedToGs;
};

struct TelemetryFilter {
    std::optional<std::string> source_port;
    std::optional<std::uint8_t> subsystem_id;
    std::optional<MonotonicClock::time_point> since;
    std::optional<std::size_t> limit;
};

// Bounded record store held in OBDH memory; the oldest record is evicted
// once capacity is reached. Safe for concurrent append and query.
class TelemetryStore {
public:
    static constexpr std::size_t kDefaultCapacity = 10'000;

    explicit TelemetryStore(std::size_t capacity = kDefaultCapacity) : capacity_(capacity) {
        if (capacity_ == 0)
            throw Error("telemetry capacity must be > 0");
    }

    void append(TelemetryRecord rec) {
        if (rec.payload.empty())
            throw Error("telemetry record payload must be non-empty");
        std::lock_guard lock(mu_);
        if (records_.size() == capacity_) {
            records_.pop_front();
            ++evicted_;
        }
        records_.push_back(std::move(rec));
        ++appended_;
    }

    // Matching records, oldest first; with a limit, only the newest `limit`.
    std::vector<TelemetryRecord> query(const TelemetryFilter& filter = {}) const {
        std::lock_guard lock(mu_);
        std::vector<TelemetryRecord> out;
        const std::size_t limit = filter.limit.value_or(SIZE_MAX);
        if (limit == 0)
            return out;
        for (auto it = records_.rbegin(); it != records_.rend() && out.size() < limit; ++it) {
            if (filter.source_port && it->source_port != *filter.source_port)
                continue;
            if (filter.subsystem_id && it->subsystem_id != *filter.subsystem_id)
                continue;
            if (filter.since && it->timestamp < *filter.since)
                continue;
            out.push_back(*it);
        }
        std::reverse(out.begin(), out.end());
        return out;
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return records_.size();
    }

    std::size_t capacity() const { return capacity_; }

    std::uint64_t appended() const {
        std::lock_guard lock(mu_);
        return appended_;
    }

    std::uint64_t evicted() const {
        std::lock_guard lock(mu_);
        return evicted_;
    }

private:
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::deque<TelemetryRecord> records_;
    std::uint64_t appended_ = 0;
    std::uint64_t evicted_ = 0;
};

} // namespace obdh
