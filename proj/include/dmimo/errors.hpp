// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: error hierarchy shared by all modules.

#pragma once

#include <stdexcept>
#include <string>

namespace dmimo {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// numkit
struct SingularMatrix : Error {
    using Error::Error;
};

// channel
struct DegenerateGeometry : Error {
    using Error::Error;
};

// precoders / gnn
struct ZeroChannel : Error {
    using Error::Error;
};

// calibration
struct IncompleteLedger : Error {
    using Error::Error;
};

// protocol
struct ProtocolViolation : Error {
    using Error::Error;
};
struct StageTimeout : Error {
    using Error::Error;
};

// file formats and configs
struct ParseError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

} // namespace dmimo
