#pragma once

#include <stdexcept>
#include <string>

namespace sphenic {

// Error taxonomy. Each failure site throws the narrowest class that applies so
// callers (and the CLI exit-code mapping) can distinguish bad usage from bad data.
struct DimensionError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DomainError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ParseError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IngestError : std::runtime_error { using std::runtime_error::runtime_error; };
struct PreprocessError : std::runtime_error { using std::runtime_error::runtime_error; };
struct GraphError : std::runtime_error { using std::runtime_error::runtime_error; };
struct TopologyError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ImageError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ModelError : std::runtime_error { using std::runtime_error::runtime_error; };
struct TrainError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MetricError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };

} // namespace sphenic
