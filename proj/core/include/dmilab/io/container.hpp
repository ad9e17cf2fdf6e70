#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

/// On-disk layout, all integers little-endian:
///   magic "DMILABC\0" | u32 version | str kind
///   u32 n_meta  { str key | str value }
///   u32 n_tensor { str name | u32 rank | u64 dim[rank] | f64 data[prod(dim)] }
///   u64 FNV-1a of every preceding byte
/// where str is u32 length followed by the bytes.
struct Container {
  std::string kind;
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor> tensors;

  friend bool operator==(const Container&, const Container&) = default;
};

inline constexpr std::uint32_t kContainerVersion = 1;

std::string encode_container(const Container& c);

/// Throws MagicMismatchError, VersionMismatchError, TruncatedFileError or
/// CorruptFileError.
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace dmilab
