#pragma once

// Which OBDH port talks to which subsystem.
//
// The default table is the flight wiring: eight ports from the close-loop
// test plan plus the custom PC104 housekeeping board, nine in total.
// Configuration text (JSON) may override individual rows by port name or
// add new ones.

#include "obdh/bytes.hpp"
#include "obdh/framing.hpp"
#include "obdh/transport.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace obdh {

enum class SubsystemKind { Egse, Wde, Sts, Battery, Gps, Custom };

inline std::string_view to_string(SubsystemKind k) {
    switch (k) {
    case SubsystemKind::Egse: return "EGSE";
    case SubsystemKind::Wde: return "WDE";
    case SubsystemKind::Sts: return "STS";
    case SubsystemKind::Battery: return "Battery";
    case SubsystemKind::Gps: return "GPS";
    case SubsystemKind::Custom: return "Custom";
    }
    return "?";
}

// Subsystem names look like "WDE2" or "STS1"; the prefix decides the kind.
inline std::optional<SubsystemKind> subsystem_kind_from_name(std::string_view name) {
    auto starts = [&](std::string_view p) {
        if (name.size() < p.size())
            return false;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (std::toupper(static_cast<unsigned char>(name[i])) != p[i])
                return false;
        return true;
    };
    if (starts("EGSE")) return SubsystemKind::Egse;
    if (starts("WDE")) return SubsystemKind::Wde;
    if (starts("STS")) return SubsystemKind::Sts;
    if (starts("BAT")) return SubsystemKind::Battery;
    if (starts("GPS")) return SubsystemKind::Gps;
    if (starts("CUSTOM")) return SubsystemKind::Custom;
    return std::nullopt;
}

inline std::optional<AuxKind> aux_kind(SubsystemKind k) {
    switch (k) {
    case SubsystemKind::Battery: return AuxKind::Battery;
    case SubsystemKind::Gps: return AuxKind::Gps;
    case SubsystemKind::Custom: return AuxKind::Custom;
    default: return std::nullopt;
    }
}

enum class Disposition { ForwardedToGs, StoredOnly };

inline constexpr std::uint8_t kInternalId = 0x00;

struct PortRow {
    std::string port_name;
    ElectricalStandard standard = ElectricalStandard::RS232;
    std::string subsystem;
    SubsystemKind kind = SubsystemKind::Wde;
    std::uint8_t subsystem_id = 0;
    int loop_hook = 0; // 0 = connected to the real subsystem, n = close-loop hook n
    std::string backend;
    Disposition disposition = Disposition::ForwardedToGs;
    unsigned baud = 9600;
    std::chrono::milliseconds intercharacter_timeout{500};

    PortConfig port_config() const {
        PortConfig c;
        c.port_name = port_name;
        c.baud = baud;
        c.electrical_standard = standard;
        c.intercharacter_timeout = intercharacter_timeout;
        return c;
    }
};

class PortTable {
public:
    PortTable() = default;
    explicit PortTable(std::vector<PortRow> rows) : rows_(std::move(rows)) { validate(); }

    const std::vector<PortRow>& rows() const { return rows_; }
    std::size_t size() const { return rows_.size(); }

    const PortRow* find(std::string_view port_name) const {
        for (const auto& r : rows_)
            if (r.port_name == port_name)
                return &r;
        return nullptr;
    }

    const PortRow* find_by_id(std::uint8_t id) const {
        for (const auto& r : rows_)
            if (r.subsystem_id == id)
                return &r;
        return nullptr;
    }

    const PortRow* egse() const {
        for (const auto& r : rows_)
            if (r.kind == SubsystemKind::Egse)
                return &r;
        return nullptr;
    }

    void validate() const {
        std::set<std::string> names;
        std::set<int> ids;
        int egse_rows = 0;
        for (const auto& r : rows_) {
            if (!names.insert(r.port_name).second)
                throw Error("duplicate port: " + r.port_name);
            if (!ids.insert(r.subsystem_id).second)
                throw Error("duplicate subsystem id: 0x" + hex_byte(r.subsystem_id));
            if (r.kind == SubsystemKind::Egse)
                ++egse_rows;
        }
        if (egse_rows > 1)
            throw Error("more than one EGSE port");
    }

private:
    std::vector<PortRow> rows_;
};

inline PortTable default_port_table() {
    using ES = ElectricalStandard;
    using SK = SubsystemKind;
    using D = Disposition;
    auto row = [](std::string port, ES es, std::string sub, SK kind, std::uint8_t id, int hook, D d) {
        PortRow r;
        r.port_name = std::move(port);
        r.standard = es;
        r.subsystem = std::move(sub);
        r.kind = kind;
        r.subsystem_id = id;
        r.loop_hook = hook;
        r.backend = "mem:" + r.port_name;
        r.disposition = d;
        return r;
    };
    return PortTable({
        row("PortRxMainBoard2", ES::RS232, "EGSE", SK::Egse, 0x00, 0, D::ForwardedToGs),
        row("PortRxMainBoard3", ES::TTL, "WDE1", SK::Wde, 0x01, 0, D::ForwardedToGs),
        row("PortRxOsci0", ES::TTL, "WDE2", SK::Wde, 0x02, 1, D::ForwardedToGs),
        row("PortRxOsci2", ES::TTL, "WDE3", SK::Wde, 0x03, 2, D::ForwardedToGs),
        row("PortRxOsci4", ES::RS422, "STS1", SK::Sts, 0x04, 0, D::ForwardedToGs),
        row("PortRxOsci6", ES::RS422, "STS2", SK::Sts, 0x05, 3, D::ForwardedToGs),
        row("PortRxOsci1", ES::TTL, "Battery", SK::Battery, 0x06, 4, D::StoredOnly),
        row("PortRxOsci3", ES::RS232, "GPS", SK::Gps, 0x07, 5, D::StoredOnly),
        row("PortRxOsci5", ES::RS232, "Custom PC104", SK::Custom, 0x08, 0, D::StoredOnly),
    });
}

namespace detail {

inline std::uint8_t parse_id(const nlohmann::json& j) {
    long v = -1;
    if (j.is_number_integer()) {
        v = j.get<long>();
    } else if (j.is_string()) {
        const auto s = j.get<std::string>();
        char* end = nullptr;
        v = std::strtol(s.c_str(), &end, 0);
        if (s.empty() || *end != '\0')
            v = -1;
    }
    if (v < 0 || v > 255)
        throw Error("bad subsystem id: " + j.dump());
    return static_cast<std::uint8_t>(v);
}

inline Disposition parse_disposition(const std::string& s) {
    if (s == "forward" || s == "ForwardedToGs") return Disposition::ForwardedToGs;
    if (s == "store" || s == "stored" || s == "StoredOnly") return Disposition::StoredOnly;
    throw Error("bad disposition: " + s);
}

inline int parse_role(const std::string& s) {
    if (s == "connected")
        return 0;
    if (s.rfind("hook", 0) == 0 && s.size() > 4) {
        const int n = std::atoi(s.c_str() + 4);
        if (n > 0)
            return n;
    }
    throw Error("bad role: " + s);
}

inline void apply_row_fields(PortRow& row, const nlohmann::json& j) {
    if (j.contains("standard")) {
        const auto es = parse_electrical_standard(j.at("standard").get<std::string>());
        if (!es)
            throw Error("bad electrical standard: " + j.at("standard").dump());
        row.standard = *es;
    }
    if (j.contains("subsystem")) {
        row.subsystem = j.at("subsystem").get<std::string>();
        const auto kind = subsystem_kind_from_name(row.subsystem);
        if (!kind)
            throw Error("unknown subsystem kind: " + row.subsystem);
        row.kind = *kind;
    }
    if (j.contains("id"))
        row.subsystem_id = parse_id(j.at("id"));
    if (j.contains("backend"))
        row.backend = j.at("backend").get<std::string>();
    if (j.contains("disposition"))
        row.disposition = parse_disposition(j.at("disposition").get<std::string>());
    if (j.contains("role"))
        row.loop_hook = parse_role(j.at("role").get<std::string>());
    if (j.contains("baud"))
        row.baud = j.at("baud").get<unsigned>();
    if (j.contains("timeout_ms"))
        row.intercharacter_timeout = std::chrono::milliseconds(j.at("timeout_ms").get<long>());
}

inline nlohmann::json parse_config_json(std::string_view text) {
    if (text.find_first_not_of(" \t\r\n") == std::string_view::npos)
        return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(text);
        if (!j.is_object())
            throw Error("config must be a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("config parse error: ") + e.what());
    }
}

} // namespace detail

inline PortTable build_port_table(const nlohmann::json& config) {
    std::vector<PortRow> rows;
    if (!config.value("replace_defaults", false))
        rows = default_port_table().rows();
    if (!config.contains("ports"))
        return PortTable(std::move(rows));

    std::set<std::string> seen;
    try {
        for (const auto& j : config.at("ports")) {
            const auto name = j.at("port").get<std::string>();
            if (!seen.insert(name).second)
                throw Error("duplicate port: " + name);
            auto it = std::find_if(rows.begin(), rows.end(), [&](const PortRow& r) { return r.port_name == name; });
            if (it != rows.end()) {
                detail::apply_row_fields(*it, j);
                continue;
            }
            if (!j.contains("subsystem") || !j.contains("id"))
                throw Error("new port " + name + " needs subsystem and id");
            PortRow row;
            row.port_name = name;
            row.backend = "mem:" + name;
            detail::apply_row_fields(row, j);
            if (!j.contains("disposition") && aux_kind(row.kind))
                row.disposition = Disposition::StoredOnly;
            rows.push_back(std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("bad port row: ") + e.what());
    }
    return PortTable(std::move(rows));
}

// Empty text yields the default table.
inline PortTable build_port_table(std::string_view config_text) {
    return build_port_table(detail::parse_config_json(config_text));
}

inline PortTable build_port_table(const char* config_text) {
    return build_port_table(std::string_view(config_text));
}

// Rewrites every mem:<name> backend to mem:<prefix><name> so several nodes
// can share one process-wide memory registry.
inline PortTable with_memory_namespace(const PortTable& table, std::string_view prefix) {
    auto rows = table.rows();
    for (auto& r : rows)
        if (r.backend.rfind("mem:", 0) == 0)
            r.backend = "mem:" + std::string(prefix) + r.backend.substr(4);
    return PortTable(std::move(rows));
}

// Downlink payload checks for ground equipment, derived from the protocols
// each subsystem speaks.
inline DownlinkValidator make_downlink_validator(const PortTable& table) {
    std::map<std::uint8_t, SubsystemKind> kinds;
    for (const auto& r : table.rows())
        if (r.kind != SubsystemKind::Egse)
            kinds[r.subsystem_id] = r.kind;
    return [kinds](std::uint8_t id, ByteView payload) -> PayloadCheck {
        if (id == kInternalId) {
            if (!payload.empty() && payload.back() == kWdeTerminator)
                return PayloadCheck::Complete;
            return payload.size() >= 256 ? PayloadCheck::Invalid : PayloadCheck::Incomplete;
        }
        auto it = kinds.find(id);
        if (it == kinds.end())
            return PayloadCheck::Unchecked;
        switch (it->second) {
        case SubsystemKind::Wde:
            if (!payload.empty() && payload.back() == kWdeTerminator)
                return PayloadCheck::Complete;
            return payload.size() >= kWdeCap ? PayloadCheck::Invalid : PayloadCheck::Incomplete;
        case SubsystemKind::Sts: {
            if (payload.empty())
                return PayloadCheck::Incomplete;
            const auto len = sts_expected_length(payload[0]);
            if (!len)
                return PayloadCheck::Invalid;
            if (payload.size() == *len)
                return PayloadCheck::Complete;
            return payload.size() < *len ? PayloadCheck::Incomplete : PayloadCheck::Invalid;
        }
        case SubsystemKind::Battery:
        case SubsystemKind::Custom: {
            const std::size_t len =
                it->second == SubsystemKind::Battery ? kBatteryFrameLength : kCustomFrameLength;
            if (payload.size() == len)
                return PayloadCheck::Complete;
            return payload.size() < len ? PayloadCheck::Incomplete : PayloadCheck::Invalid;
        }
        case SubsystemKind::Gps:
            if (!payload.empty() && payload.back() == kGpsTerminator)
                return PayloadCheck::Complete;
            return payload.size() >= kGpsCap ? PayloadCheck::Invalid : PayloadCheck::Incomplete;
        case SubsystemKind::Egse:
            break;
        }
        return PayloadCheck::Unchecked;
    };
}

} // namespace obdh
