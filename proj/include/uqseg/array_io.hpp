#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "uqseg/tensor.hpp"

namespace uqseg {

/// One named float64 array in a container file.
struct ArrayRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

/// Container layout (all integers little-endian):
///   "UQARRAY1"  u32 count
///   per record: u16 name_len, name bytes, u8 dtype (1 = float64), u8 ndim,
///               ndim x u64 dims, prod(dims) x f64 values
void write_arrays(const std::filesystem::path& path, std::span<const ArrayRecord> records);
std::vector<ArrayRecord> read_arrays(const std::filesystem::path& path);

ArrayRecord to_record(const std::string& name, const Tensor& t);
/// Reshapes a record into a tensor (1-4 dims, leading dims padded with 1).
Tensor to_tensor(const ArrayRecord& r);

}  // namespace uqseg
