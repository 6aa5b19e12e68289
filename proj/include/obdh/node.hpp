#pragma once

// A running OBDH node: opens every configured port and starts its task.

#include "obdh/router.hpp"

#include <condition_variable>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>
#include <vector>

namespace obdh {

struct ForwardRule {
    std::string rx_port;
    std::string tx_port;
};

struct NodeConfig {
    PortTable table = default_port_table();
    std::size_t telemetry_capacity = TelemetryStore::kDefaultCapacity;
    std::vector<ForwardRule> forwards;
};

// Config text is a JSON object:
//   {"ports": [{"port": ..., "standard": ..., "subsystem": ..., "id": ...,
//               "backend": ..., "disposition": "forward"|"store",
//               "role": "connected"|"hookN"}],
//    "telemetry_cap": N,
//    "forwards": [["PortRxOsci3", "PortRxOsci0"], ...],
//    "replace_defaults": false}
inline NodeConfig parse_node_config(std::string_view text) {
    const auto j = detail::parse_config_json(text);
    NodeConfig cfg;
    cfg.table = build_port_table(j);
    try {
        if (j.contains("telemetry_cap")) {
            const auto cap = j.at("telemetry_cap").get<long long>();
            if (cap <= 0)
                throw Error("telemetry_cap must be > 0");
            cfg.telemetry_capacity = static_cast<std::size_t>(cap);
        }
        if (j.contains("forwards")) {
            for (const auto& f : j.at("forwards")) {
                ForwardRule rule{f.at(0).get<std::string>(), f.at(1).get<std::string>()};
                if (!cfg.table.find(rule.rx_port) || !cfg.table.find(rule.tx_port))
                    throw Error("forward rule names unknown port: " + f.dump());
                cfg.forwards.push_back(std::move(rule));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("config error: ") + e.what());
    }
    return cfg;
}

inline NodeConfig load_node_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot read config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_node_config(ss.str());
}

class ObdhNode {
public:
    explicit ObdhNode(NodeConfig config, FrameLog log = {})
        : config_(std::move(config)),
          router_(config_.table, config_.telemetry_capacity, std::move(log)) {}

    ObdhNode(const ObdhNode&) = delete;
    ObdhNode& operator=(const ObdhNode&) = delete;
    ~ObdhNode() { stop(); }

    Router& router() { return router_; }
    const NodeConfig& config() const { return config_; }

    // Called from the port's thread once its backend is open. Set before start().
    void on_attached(std::function<void(const PortRow&)> cb) { on_attached_ = std::move(cb); }

    // One thread per port. Each opens its backend (which may block, e.g. on
    // tcp-listen) and then runs that port's receive task.
    void start(std::chrono::milliseconds connect_timeout = std::chrono::milliseconds(0)) {
        for (const auto& row : config_.table.rows()) {
            if (row.backend.empty() || row.backend == "none")
                continue;
            if (row.backend.rfind("mem:", 0) == 0)
                memory_registry().ensure(row.backend.substr(4));
            active_.fetch_add(1);
            threads_.emplace_back([this, row, connect_timeout](std::stop_token stop) {
                run_port(row, connect_timeout, stop);
                active_.fetch_sub(1);
            });
        }
    }

    // Closes every link and joins all tasks.
    void stop() {
        for (auto& t : threads_)
            t.request_stop();
        // A task may attach its link after the first sweep; keep closing
        // until every task has returned.
        while (active_.load() > 0) {
            for (const auto& row : config_.table.rows())
                if (auto link = router_.link(row.port_name))
                    link->close();
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
        }
        threads_.clear();
    }

    // Blocks until the port has an attached link or the timeout passes.
    bool wait_attached(const std::string& port, std::chrono::milliseconds timeout) {
        const auto until = std::chrono::steady_clock::now() + timeout;
        while (std::chrono::steady_clock::now() < until) {
            if (router_.link(port))
                return true;
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        }
        return router_.link(port) != nullptr;
    }

    std::vector<TaskStatus> statuses() const {
        std::lock_guard lock(status_mu_);
        return statuses_;
    }

private:
    void run_port(const PortRow& row, std::chrono::milliseconds connect_timeout, std::stop_token stop) {
        TaskStatus status;
        try {
            OpenOptions opts;
            opts.connect_timeout = connect_timeout;
            opts.stop = stop;
            auto link = std::make_shared<Link>(open_link(row.port_config(), row.backend, opts));
            if (stop.stop_requested()) {
                link->close();
                return;
            }
            if (on_attached_)
                on_attached_(row);
            const ForwardRule* fwd = nullptr;
            for (const auto& f : config_.forwards)
                if (f.rx_port == row.port_name)
                    fwd = &f;
            if (fwd != nullptr)
                status = router_.run_forward_task(row.port_name, link, fwd->tx_port);
            else if (row.kind == SubsystemKind::Egse)
                status = router_.run_gs_task(link);
            else
                status = router_.run_subsystem_task(row.port_name, link);
        } catch (const std::exception& e) {
            status = {row.port_name, TaskStatus::Reason::Error, e.what()};
        }
        std::lock_guard lock(status_mu_);
        statuses_.push_back(std::move(status));
    }

    NodeConfig config_;
    Router router_;
    std::function<void(const PortRow&)> on_attached_;
    std::vector<std::jthread> threads_;
    std::atomic<int> active_{0};
    mutable std::mutex status_mu_;
    std::vector<TaskStatus> statuses_;
};

} // namespace obdh
