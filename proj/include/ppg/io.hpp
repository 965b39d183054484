#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ppg/gradcheck.hpp"
#include "ppg/tensor.hpp"

namespace ppg {

// "PPGT v1" tensor file:
//   bytes 0..3  magic "PPGT"
//   byte  4     version (1)
//   byte  5     dtype (0 = f64)
//   byte  6     rank (1..5)
//   then        rank x u32 little-endian dims
//   then        prod(dims) x f64 little-endian payload
inline constexpr std::uint8_t kPpgtVersion = 1;
inline constexpr std::uint8_t kPpgtDtypeF64 = 0;

std::size_t ppgt_header_size(std::size_t rank);
std::vector<std::uint8_t> encode_ppgt(const Tensor& t);
// `source` names the file in error messages.
Tensor decode_ppgt(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Text manifest listing tensors stored next to it, one per line:
//   <name> -> <relative path> <d0>x<d1>x...
// plus optional metadata lines "@<key> = <value>" and '#' comments.
struct ManifestEntry {
  std::string name;
  std::string path;
  Shape shape;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::map<std::string, std::string> meta;

  const ManifestEntry* find(const std::string& name) const;
};

std::string format_manifest(const Manifest& m);
// Throws ParseError("<source>:<line>: ...") on malformed input.
Manifest parse_manifest(const std::string& text, const std::string& source = "<manifest>");
void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// Default relative location of a dotted tensor name: the first component
// becomes a subdirectory ("vim.block0.a_log" -> "vim/block0.a_log.ppgt").
std::string default_tensor_path(const std::string& name);

// Writes every tensor plus a manifest into `dir` (created if needed).
void save_tensor_dir(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors,
                     const std::map<std::string, std::string>& meta = {},
                     const std::string& manifest_name = "manifest.txt");

struct TensorDir {
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::string> meta;

  const Tensor* find(const std::string& name) const;
};

// Loads and checks each payload against the manifest's recorded shape.
TensorDir load_tensor_dir(const std::filesystem::path& dir, const std::string& manifest_name = "manifest.txt");

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// 8-bit binary PGM (P5) of a single-channel image, linearly rescaled so the
// minimum maps to 0 and the maximum to 255.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
               std::size_t width);

}  // namespace ppg
