// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace samkit {

enum class ErrorKind {
    config,
    format,
    unsupported_dtype,
    io,
    invalid_value,
    shape_mismatch,
    empty_input,
    dim_mismatch,
    degenerate_embedding,
    too_few_experts,
    empty_intersection,
    too_few_points,
    alignment,
    endpoint_unavailable,
    remote,
    divergence,
    internal,
};

/// Process exit code for an error category: 2 config, 3 data/format,
/// 4 endpoint, 5 internal.
inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::endpoint_unavailable:
        case ErrorKind::remote: return 4;
        case ErrorKind::internal: return 5;
        default: return 3;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return exit_code_for(kind_); }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error(ErrorKind::format, m) {}
};
struct UnsupportedDtype : Error {
    explicit UnsupportedDtype(const std::string& m) : Error(ErrorKind::unsupported_dtype, m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};
struct InvalidValue : Error {
    explicit InvalidValue(const std::string& m) : Error(ErrorKind::invalid_value, m) {}
};
struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& m) : Error(ErrorKind::shape_mismatch, m) {}
};
struct EmptyInput : Error {
    explicit EmptyInput(const std::string& m) : Error(ErrorKind::empty_input, m) {}
};
struct DimMismatch : Error {
    explicit DimMismatch(const std::string& m) : Error(ErrorKind::dim_mismatch, m) {}
};
struct DegenerateEmbedding : Error {
    explicit DegenerateEmbedding(const std::string& m) : Error(ErrorKind::degenerate_embedding, m) {}
};
struct TooFewExperts : Error {
    explicit TooFewExperts(const std::string& m) : Error(ErrorKind::too_few_experts, m) {}
};
struct EmptyIntersection : Error {
    explicit EmptyIntersection(const std::string& m) : Error(ErrorKind::empty_intersection, m) {}
};
struct TooFewPoints : Error {
    explicit TooFewPoints(const std::string& m) : Error(ErrorKind::too_few_points, m) {}
};
struct AlignmentError : Error {
    explicit AlignmentError(const std::string& m) : Error(ErrorKind::alignment, m) {}
};
struct EndpointUnavailable : Error {
    explicit EndpointUnavailable(const std::string& m) : Error(ErrorKind::endpoint_unavailable, m) {}
};
struct RemoteError : Error {
    RemoteError(int status, const std::string& m)
        : Error(ErrorKind::remote, "remote error (status " + std::to_string(status) + "): " + m),
          status_(status) {}

    int status() const noexcept { return status_; }

private:
    int status_;
};
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& m) : Error(ErrorKind::divergence, m) {}
};
struct InternalError : Error {
    explicit InternalError(const std::string& m) : Error(ErrorKind::internal, m) {}
};

}  // namespace samkit
