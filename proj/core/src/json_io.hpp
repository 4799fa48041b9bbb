// nlohmann::json conversions shared by the persistence code.
#pragma once

#include <nlohmann/json.hpp>

#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace netecho::jsonio {

nlohmann::json to_json(const traceex::SideTrace& st);
traceex::SideTrace side_trace_from(const nlohmann::json& j);

nlohmann::json to_json(const sim::PacketTrace& pt);
sim::PacketTrace packet_trace_from(const nlohmann::json& j);

}  // namespace netecho::jsonio
