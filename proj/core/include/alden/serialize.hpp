#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alden/tensor.hpp"

namespace alden {

struct SerializeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Stream helpers for the binary container formats (little-endian payloads,
/// length-prefixed strings, raw double tensors). Both the run checkpoint and
/// the external-backbone weight file are built from these.
namespace io {

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
void write_tensor(std::ostream& os, const Tensor& t);

std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
Tensor read_tensor(std::istream& is);

} // namespace io

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Standalone named-tensor container with a magic header and a trailing
/// FNV checksum over the payload.
void write_tensor_file(const std::string& path, const NamedTensors& tensors);
NamedTensors read_tensor_file(const std::string& path);

} // namespace alden
