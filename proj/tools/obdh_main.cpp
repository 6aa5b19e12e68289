// OBDH node: routes ground-segment uplink to subsystem ports and wraps
// subsystem frames for downlink.
//
//   obdh run --config node.json [--telemetry-cap N]

#include "obdh/node.hpp"
#include "signals.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <mutex>

int main(int argc, char** argv) {
    CLI::App app{"OBDH frame router"};
    app.require_subcommand(1);
    auto* run = app.add_subcommand("run", "Open every configured port and route frames");
    std::string config_path;
    long long telemetry_cap = 0;
    int connect_timeout_ms = 10000;
    bool quiet = false;
    run->add_option("--config", config_path, "Node configuration (JSON)");
    run->add_option("--telemetry-cap", telemetry_cap, "Telemetry records kept in memory");
    run->add_option("--connect-timeout-ms", connect_timeout_ms, "Retry window for outbound tcp: ports");
    run->add_flag("--quiet", quiet, "Suppress per-frame log lines");
    CLI11_PARSE(app, argc, argv);

    try {
        obdh::NodeConfig cfg = config_path.empty() ? obdh::NodeConfig{} : obdh::load_node_config(config_path);
        if (telemetry_cap < 0)
            throw obdh::Error("--telemetry-cap must be > 0");
        if (telemetry_cap > 0)
            cfg.telemetry_capacity = static_cast<std::size_t>(telemetry_cap);

        const auto signals = block_shutdown_signals();
        obdh::ObdhNode node(cfg, quiet ? obdh::FrameLog{} : obdh::FrameLog::to_stream(std::cout));
        for (const auto& row : cfg.table.rows())
            if (!row.backend.empty() && row.backend != "none")
                std::cout << obdh::iso_timestamp() << " " << row.port_name << " open " << row.backend << std::endl;
        std::mutex out_mu;
        node.on_attached([&out_mu](const obdh::PortRow& row) {
            std::lock_guard lock(out_mu);
            std::cout << obdh::iso_timestamp() << " " << row.port_name << " attached" << std::endl;
        });
        node.start(std::chrono::milliseconds(connect_timeout_ms));
        wait_for_shutdown(signals);
        node.stop();
        const auto c = node.router().counters();
        std::cout << obdh::iso_timestamp() << " obdh stop routed=" << c.frames_routed
                  << " dropped=" << c.frames_dropped << " downlink=" << c.downlink_frames
                  << " stored=" << c.stored_frames << std::endl;
        for (const auto& s : node.statuses())
            if (s.reason == obdh::TaskStatus::Reason::Error)
                std::cerr << s.port << ": " << s.message << "\n";
    } catch (const std::exception& e) {
        std::cerr << "obdh: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
