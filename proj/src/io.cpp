#include "ppg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ppg/errors.hpp"

namespace ppg {

namespace fs = std::filesystem;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Shape parse_shape(const std::string& text, const std::string& where) {
  Shape shape;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('x', start);
    const std::string tok = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw ParseError(where + ": bad shape '" + text + "'");
    const unsigned long long d = std::stoull(tok);
    if (d == 0) throw ParseError(where + ": zero dimension in shape '" + text + "'");
    shape.push_back(static_cast<std::size_t>(d));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  if (shape.empty() || shape.size() > kMaxRank) throw ParseError(where + ": bad rank in shape '" + text + "'");
  return shape;
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

std::size_t ppgt_header_size(std::size_t rank) { return 7 + 4 * rank; }

std::vector<std::uint8_t> encode_ppgt(const Tensor& t) {
  std::vector<std::uint8_t> out{'P', 'P', 'G', 'T', kPpgtVersion, kPpgtDtypeF64, static_cast<std::uint8_t>(t.rank())};
  out.reserve(ppgt_header_size(t.rank()) + 8 * t.numel());
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_f64(out, v);
  return out;
}

Tensor decode_ppgt(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 7) throw ParseError(source + ": truncated PPGT header");
  if (!(bytes[0] == 'P' && bytes[1] == 'P' && bytes[2] == 'G' && bytes[3] == 'T'))
    throw ParseError(source + ": bad magic (not a PPGT file)");
  if (bytes[4] != kPpgtVersion) throw ParseError(source + ": unsupported PPGT version " + std::to_string(bytes[4]));
  if (bytes[5] != kPpgtDtypeF64) throw ParseError(source + ": unsupported dtype " + std::to_string(bytes[5]));
  const std::size_t rank = bytes[6];
  if (rank == 0 || rank > kMaxRank) throw ParseError(source + ": invalid rank " + std::to_string(rank));
  const std::size_t header = ppgt_header_size(rank);
  if (bytes.size() < header) throw ParseError(source + ": truncated PPGT header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(bytes.data() + 7 + 4 * i);
    if (shape[i] == 0) throw ParseError(source + ": zero dimension");
  }
  const std::size_t n = shape_numel(shape);
  const std::size_t expected = header + 8 * n;
  if (bytes.size() < expected)
    throw ParseError(source + ": truncated payload (" + std::to_string(bytes.size()) + " bytes, expected " +
                     std::to_string(expected) + ")");
  if (bytes.size() > expected) throw ParseError(source + ": trailing bytes after payload");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(bytes.data() + header + 8 * i);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const fs::path& path, const Tensor& t) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto bytes = encode_ppgt(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Tensor load_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_ppgt(bytes, path.string());
}

const ManifestEntry* Manifest::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string format_manifest(const Manifest& m) {
  std::ostringstream os;
  os << "# ppg manifest v1\n";
  for (const auto& [k, v] : m.meta) os << '@' << k << " = " << v << '\n';
  for (const auto& e : m.entries) os << e.name << " -> " << e.path << ' ' << shape_token(e.shape) << '\n';
  return os.str();
}

Manifest parse_manifest(const std::string& text, const std::string& source) {
  Manifest m;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '@') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(where + ": metadata line without '='");
      const std::string key = trim(line.substr(1, eq - 1));
      if (key.empty()) throw ParseError(where + ": empty metadata key");
      m.meta[key] = trim(line.substr(eq + 1));
      continue;
    }
    const auto arrow = line.find(" -> ");
    if (arrow == std::string::npos) throw ParseError(where + ": expected '<name> -> <path> <shape>'");
    ManifestEntry e;
    e.name = trim(line.substr(0, arrow));
    const std::string rest = trim(line.substr(arrow + 4));
    const auto sp = rest.find_last_of(' ');
    if (e.name.empty() || sp == std::string::npos) throw ParseError(where + ": expected '<name> -> <path> <shape>'");
    e.path = trim(rest.substr(0, sp));
    if (e.path.empty()) throw ParseError(where + ": empty path");
    e.shape = parse_shape(rest.substr(sp + 1), where);
    if (m.find(e.name)) throw ParseError(where + ": duplicate entry '" + e.name + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) { write_text_file(path, format_manifest(m)); }

Manifest read_manifest(const fs::path& path) { return parse_manifest(read_text_file(path), path.string()); }

std::string default_tensor_path(const std::string& name) {
  std::string p = name;
  const auto dot = p.find('.');
  if (dot != std::string::npos) p[dot] = '/';
  return p + ".ppgt";
}

void save_tensor_dir(const fs::path& dir, const std::vector<NamedTensor>& tensors,
                     const std::map<std::string, std::string>& meta, const std::string& manifest_name) {
  fs::create_directories(dir);
  Manifest m;
  m.meta = meta;
  for (const auto& nt : tensors) {
    ManifestEntry e{nt.name, default_tensor_path(nt.name), nt.tensor.shape()};
    save_tensor(dir / e.path, nt.tensor);
    m.entries.push_back(std::move(e));
  }
  write_manifest(dir / manifest_name, m);
}

const Tensor* TensorDir::find(const std::string& name) const {
  for (const auto& nt : tensors)
    if (nt.name == name) return &nt.tensor;
  return nullptr;
}

TensorDir load_tensor_dir(const fs::path& dir, const std::string& manifest_name) {
  const Manifest m = read_manifest(dir / manifest_name);
  TensorDir out;
  out.meta = m.meta;
  for (const auto& e : m.entries) {
    Tensor t = load_tensor(dir / e.path);
    if (t.shape() != e.shape)
      throw ParseError((dir / e.path).string() + ": shape " + shape_str(t.shape()) + " disagrees with manifest " +
                       shape_str(e.shape));
    out.tensors.push_back({e.name, t});
  }
  return out;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void write_pgm(const fs::path& path, std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw ShapeError("write_pgm: value count does not match image size");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi > lo ? hi - lo : 1.0;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double u = std::clamp((v - lo) / range, 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
}

}  // namespace ppg
