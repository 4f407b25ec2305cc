#pragma once

#include <stdexcept>
#include <string>

namespace cyclingnet {

/// Bad configuration: unknown keys, unparsable values, invalid settings.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad or missing data: manifests, frames, caches, weight files.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A verification check (golden table, gradient check, oracle) failed.
struct CheckError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cyclingnet
