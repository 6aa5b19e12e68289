// EGSE gateway: WebSocket/HTTP front end for the ground-segment link.
//
//   gateway --gs-backend tcp:127.0.0.1:7000 --listen 127.0.0.1:8080

#include "obdh/gateway.hpp"
#include "obdh/node.hpp"
#include "signals.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"EGSE gateway"};
    std::string gs_backend;
    std::string listen = "127.0.0.1:8080";
    std::string node_config;
    int connect_timeout_ms = 10000;
    app.add_option("--gs-backend", gs_backend, "Link to the OBDH EGSE port")->required();
    app.add_option("--listen", listen, "host:port for WebSocket and HTTP clients");
    app.add_option("--config", node_config, "Node config, for the subsystem table");
    app.add_option("--connect-timeout-ms", connect_timeout_ms, "Retry window for tcp: backends");
    CLI11_PARSE(app, argc, argv);

    try {
        const auto colon = listen.rfind(':');
        if (colon == std::string::npos)
            throw obdh::Error("--listen must be host:port");
        obdh::GatewayOptions go;
        go.listen_host = listen.substr(0, colon);
        go.listen_port = static_cast<std::uint16_t>(std::stoi(listen.substr(colon + 1)));
        if (!node_config.empty())
            go.table = obdh::load_node_config(node_config).table;

        const auto signals = block_shutdown_signals();
        obdh::OpenOptions opts;
        opts.connect_timeout = std::chrono::milliseconds(connect_timeout_ms);
        obdh::PortConfig pc;
        pc.port_name = "gateway";
        auto link = std::make_shared<obdh::Link>(obdh::open_link(pc, gs_backend, opts));
        obdh::Gateway gw(link, go);
        gw.start();
        std::cout << "gateway listening on " << go.listen_host << ":" << gw.port() << std::endl;
        wait_for_shutdown(signals);
        gw.stop();
        link->close();
    } catch (const std::exception& e) {
        std::cerr << "gateway: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
