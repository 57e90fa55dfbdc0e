#pragma once

#include <stdexcept>
#include <string>

namespace bivit {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error("domain error: " + msg) {}
};

// Malformed on-disk data; carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::size_t byte_offset)
        : std::runtime_error("format error at byte " + std::to_string(byte_offset) + ": " + msg),
          offset(byte_offset) {}
    std::size_t offset;
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

} // namespace bivit
