// Subsystem simulators.
//
//   sim <wde|sts|battery|gps|custom|hook> --backend <spec> [--seed N]
//       [--device-id X] [--rate HZ] [--out-backend <spec>]

#include "obdh/sim.hpp"
#include "signals.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Subsystem simulator"};
    std::string kind;
    std::string backend;
    std::string out_backend;
    std::uint64_t seed = 1;
    int device_id = -1;
    double rate = 0;
    int sts_type = 0x01;
    int connect_timeout_ms = 10000;
    app.add_option("kind", kind, "wde | sts | battery | gps | custom | hook")
        ->required()
        ->check(CLI::IsMember({"wde", "sts", "battery", "gps", "custom", "hook"}));
    app.add_option("--backend", backend, "Link to the OBDH port (mem:, tcp:, tcp-listen:, pty:)")->required();
    app.add_option("--out-backend", out_backend, "hook only: output link (default: loop back on --backend)");
    app.add_option("--seed", seed, "Deterministic payload seed");
    app.add_option("--device-id", device_id, "Device id");
    app.add_option("--rate", rate, "Periodic emissions per second (0 = on request only)");
    app.add_option("--sts-type", sts_type, "Frame type for periodic star sensor output");
    app.add_option("--connect-timeout-ms", connect_timeout_ms, "Retry window for tcp: backends");
    CLI11_PARSE(app, argc, argv);

    try {
        const auto signals = block_shutdown_signals();
        obdh::OpenOptions opts;
        opts.connect_timeout = std::chrono::milliseconds(connect_timeout_ms);
        obdh::PortConfig pc;
        pc.port_name = kind;
        auto link = std::make_shared<obdh::Link>(obdh::open_link(pc, backend, opts));
        std::shared_ptr<obdh::Link> out;
        if (kind == "hook" && !out_backend.empty())
            out = std::make_shared<obdh::Link>(obdh::open_link(pc, out_backend, opts));

        obdh::SimOptions so;
        so.rate_hz = rate;
        so.sts_periodic_type = static_cast<std::uint8_t>(sts_type);
        std::cout << "sim " << kind << " on " << backend << std::endl;

        std::jthread worker([&](std::stop_token st) {
            if (kind == "wde") {
                obdh::WdeState s;
                if (device_id >= 0)
                    s.device_id = static_cast<std::uint8_t>(device_id);
                obdh::run_wde_sim(*link, s, so, st);
            } else if (kind == "sts") {
                obdh::StsState s;
                s.attitude_seed = seed;
                if (device_id >= 0)
                    s.device_id = static_cast<std::uint8_t>(device_id);
                obdh::run_sts_sim(*link, s, so, st);
            } else if (kind == "hook") {
                obdh::hook_node_forward(*link, out ? *out : *link, st);
            } else {
                obdh::AuxState s;
                const auto aux = kind == "battery" ? obdh::AuxKind::Battery
                               : kind == "gps"     ? obdh::AuxKind::Gps
                                                   : obdh::AuxKind::Custom;
                obdh::run_aux_sim(*link, s, aux, so, st);
            }
            // Peer went away: wake main.
            ::kill(::getpid(), SIGTERM);
        });
        wait_for_shutdown(signals);
        worker.request_stop();
        link->close();
        if (out)
            out->close();
    } catch (const std::exception& e) {
        std::cerr << "sim: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
