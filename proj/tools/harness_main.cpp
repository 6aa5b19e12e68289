// Test procedures against an OBDH node.
//
//   harness closeloop [--config loop.json] --duration 60 --rate 100 [--payload-len 64] [--seed 1]
//   harness scenario --gs-backend tcp:127.0.0.1:7000 [--script steps.json] [--config node.json]
//
// Prints a readable report followed by one JSON summary line. Exit code 0 on pass.

#include "obdh/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw obdh::Error("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"OBDH test harness"};
    app.require_subcommand(1);

    auto* loop = app.add_subcommand("closeloop", "Pump seeded frames around the port loop and verify them");
    std::string loop_config;
    obdh::CloseLoopOptions lo;
    std::vector<std::size_t> severed;
    loop->add_option("--config", loop_config, "JSON with an optional \"topology\" object");
    loop->add_option("--duration", lo.duration_s, "Seconds of pumping")->default_val(60);
    loop->add_option("--rate", lo.rate_hz, "Frames per second")->default_val(100);
    loop->add_option("--payload-len", lo.payload_len, "Payload bytes per frame")->default_val(64);
    loop->add_option("--seed", lo.seed, "Payload seed")->default_val(1);
    loop->add_option("--sever", severed, "Leave cable N unplugged (repeatable)");

    auto* scen = app.add_subcommand("scenario", "Run an integration script from the EGSE seat");
    std::string script_path;
    std::string gs_backend;
    std::string node_config;
    int connect_timeout_ms = 10000;
    scen->add_option("--script", script_path, "Scenario JSON (default: built-in WDE/STS script)");
    scen->add_option("--gs-backend", gs_backend, "Link to the OBDH EGSE port")->required();
    scen->add_option("--config", node_config, "Node config, for the subsystem table");
    scen->add_option("--connect-timeout-ms", connect_timeout_ms, "Retry window for tcp: backends");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*loop) {
            auto topology = obdh::default_loop_topology();
            if (!loop_config.empty()) {
                const auto j = nlohmann::json::parse(read_file(loop_config));
                if (j.contains("topology"))
                    topology = obdh::parse_loop_topology(j.at("topology"));
            }
            lo.severed_cables.insert(severed.begin(), severed.end());
            const auto report = obdh::run_close_loop(topology, lo);
            std::cout << obdh::format_report(report) << obdh::summary_line(report) << std::endl;
            return report.passed() ? 0 : 2;
        }

        const auto steps = script_path.empty() ? obdh::default_scenario() : obdh::parse_scenario(read_file(script_path));
        const auto table = node_config.empty() ? obdh::default_port_table() : obdh::load_node_config(node_config).table;
        obdh::OpenOptions opts;
        opts.connect_timeout = std::chrono::milliseconds(connect_timeout_ms);
        obdh::PortConfig pc;
        pc.port_name = "EGSE";
        obdh::Link link = obdh::open_link(pc, gs_backend, opts);
        const auto report = obdh::run_integration_scenario(steps, link, table);
        link.close();
        std::cout << obdh::format_report(report) << obdh::summary_line(report) << std::endl;
        return report.passed() ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "harness: " << e.what() << "\n";
        return 1;
    }
}
