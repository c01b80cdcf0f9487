#include "segcvae/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "segcvae/errors.hpp"

namespace segcvae {

static_assert(std::endian::native == std::endian::little, "payload is written little-endian");

namespace {

std::size_t width(Dtype d) { return d == Dtype::F64 ? 8 : 4; }
const char* dtype_name(Dtype d) { return d == Dtype::F64 ? "f64" : "f32"; }

std::string join_shape(const ad::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out.empty() ? "-" : out;
}

ad::Shape parse_shape(const std::string& text) {
  ad::Shape s;
  if (text == "-") return s;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) s.push_back(std::stoull(part));
  return s;
}

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw FormatError("checkpoint has no array '" + name + "'");
}

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint has no meta key '" + key + "'");
  return it->second;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ostringstream index;
  index << kCheckpointVersion << '\n';
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("checkpoint meta may not contain whitespace in keys or newlines");
    }
    index << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& a : arrays) {
    if (ad::numel(a.shape) != a.values.size()) throw ShapeError("checkpoint array '" + a.name + "' shape");
    std::size_t bytes = a.values.size() * width(a.dtype);
    index << "array " << a.name << ' ' << dtype_name(a.dtype) << ' ' << join_shape(a.shape) << ' '
          << offset << ' ' << bytes << '\n';
    offset += bytes;
  }
  index << "data " << offset << '\n';

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  const std::string head = index.str();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& a : arrays) {
    if (a.dtype == Dtype::F64) {
      out.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * 8));
    } else {
      for (double v : a.values) {
        float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
    }
  }
  if (!out) throw FormatError("short write on checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointVersion) {
    throw FormatError("not a " + std::string(kCheckpointVersion) + " file: " + path.string());
  }
  Checkpoint ck;
  struct Entry {
    std::size_t offset, bytes;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
  bool have_data = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ck.meta[key] = value;
    } else if (kind == "array") {
      NamedArray a;
      std::string dt, shape;
      Entry e{};
      ls >> a.name >> dt >> shape >> e.offset >> e.bytes;
      if (!ls || (dt != "f64" && dt != "f32")) throw FormatError("bad array line: " + line);
      a.dtype = dt == "f64" ? Dtype::F64 : Dtype::F32;
      a.shape = parse_shape(shape);
      if (ad::numel(a.shape) * width(a.dtype) != e.bytes) throw FormatError("array size mismatch: " + line);
      ck.arrays.push_back(std::move(a));
      entries.push_back(e);
    } else if (kind == "data") {
      ls >> total;
      have_data = true;
      break;
    } else {
      throw FormatError("unexpected checkpoint line: " + line);
    }
  }
  if (!have_data) throw FormatError("checkpoint index has no data line");
  std::vector<char> blob(total);
  in.read(blob.data(), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(in.gcount()) != total) throw FormatError("truncated checkpoint payload");
  for (std::size_t k = 0; k < ck.arrays.size(); ++k) {
    auto& a = ck.arrays[k];
    const auto& e = entries[k];
    if (e.offset + e.bytes > total) throw FormatError("array '" + a.name + "' outside payload");
    a.values.resize(ad::numel(a.shape));
    if (a.dtype == Dtype::F64) {
      std::memcpy(a.values.data(), blob.data() + e.offset, e.bytes);
    } else {
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        float f;
        std::memcpy(&f, blob.data() + e.offset + 4 * i, 4);
        a.values[i] = f;
      }
    }
  }
  return ck;
}

}  // namespace segcvae
