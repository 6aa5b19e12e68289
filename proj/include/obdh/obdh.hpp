#pragma once

// Everything except the gateway, which pulls in Boost.Beast.

#include "obdh/bytes.hpp"
#include "obdh/frame_log.hpp"
#include "obdh/framing.hpp"
#include "obdh/harness.hpp"
#include "obdh/node.hpp"
#include "obdh/port_table.hpp"
#include "obdh/router.hpp"
#include "obdh/sim.hpp"
#include "obdh/telemetry.hpp"
#include "obdh/transport.hpp"
