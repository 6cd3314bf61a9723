// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace minidino {

namespace {

constexpr char kMagic[4] = {'D', 'N', 'V', '3'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("container: truncated read");
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("container: truncated read");
  return v;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32:
      return 4;
    case DType::f64:
      return 8;
    case DType::u8:
      return 1;
  }
  throw std::runtime_error("container: unknown dtype tag");
}

}  // namespace

void TensorStore::put(NamedTensor nt) {
  auto it = index_.find(nt.name);
  if (it != index_.end()) {
    entries_[it->second] = std::move(nt);
    return;
  }
  index_[nt.name] = entries_.size();
  entries_.push_back(std::move(nt));
}

void TensorStore::put_f32(const std::string& name, const Tensor<float>& t) {
  NamedTensor nt;
  nt.name = name;
  nt.shape = t.shape;
  nt.dtype = DType::f32;
  nt.bytes.resize(t.numel() * 4);
  std::memcpy(nt.bytes.data(), t.data(), nt.bytes.size());
  put(std::move(nt));
}

void TensorStore::put_f64(const std::string& name, const Tensor<double>& t) {
  NamedTensor nt;
  nt.name = name;
  nt.shape = t.shape;
  nt.dtype = DType::f64;
  nt.bytes.resize(t.numel() * 8);
  std::memcpy(nt.bytes.data(), t.data(), nt.bytes.size());
  put(std::move(nt));
}

void TensorStore::put_text(const std::string& name, const std::string& text) {
  NamedTensor nt;
  nt.name = name;
  nt.shape = {(std::int64_t)text.size()};
  nt.dtype = DType::u8;
  nt.bytes.assign(text.begin(), text.end());
  put(std::move(nt));
}

bool TensorStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

std::vector<std::string> TensorStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const NamedTensor& TensorStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::runtime_error("container: no tensor named '" + name + "'");
  return entries_[it->second];
}

Tensor<float> TensorStore::get_f32(const std::string& name) const {
  const NamedTensor& nt = find(name);
  if (nt.dtype != DType::f32)
    throw std::runtime_error("container: '" + name + "' is not f32");
  Tensor<float> t = Tensor<float>::zeros(nt.shape);
  std::memcpy(t.data(), nt.bytes.data(), nt.bytes.size());
  return t;
}

Tensor<double> TensorStore::get_f64(const std::string& name) const {
  const NamedTensor& nt = find(name);
  if (nt.dtype != DType::f64)
    throw std::runtime_error("container: '" + name + "' is not f64");
  Tensor<double> t = Tensor<double>::zeros(nt.shape);
  std::memcpy(t.data(), nt.bytes.data(), nt.bytes.size());
  return t;
}

std::string TensorStore::get_text(const std::string& name) const {
  const NamedTensor& nt = find(name);
  if (nt.dtype != DType::u8)
    throw std::runtime_error("container: '" + name + "' is not a text block");
  return std::string(nt.bytes.begin(), nt.bytes.end());
}

void TensorStore::load_into(const std::string& name, Tensor<float>& t) const {
  const NamedTensor& nt = find(name);
  if (nt.dtype != DType::f32 || nt.shape != t.shape)
    throw std::runtime_error("container: '" + name +
                             "' dtype/shape mismatch on load");
  std::memcpy(t.data(), nt.bytes.data(), nt.bytes.size());
}

void TensorStore::load_into(const std::string& name, Tensor<double>& t) const {
  const NamedTensor& nt = find(name);
  if (nt.dtype != DType::f64 || nt.shape != t.shape)
    throw std::runtime_error("container: '" + name +
                             "' dtype/shape mismatch on load");
  std::memcpy(t.data(), nt.bytes.data(), nt.bytes.size());
}

void TensorStore::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("container: cannot open " + tmp);
    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);
    write_u32(os, (std::uint32_t)entries_.size());
    for (const auto& e : entries_) {
      write_u32(os, (std::uint32_t)e.name.size());
      os.write(e.name.data(), (std::streamsize)e.name.size());
      write_u32(os, (std::uint32_t)e.shape.size());
      for (auto ext : e.shape) write_u64(os, (std::uint64_t)ext);
      write_u32(os, (std::uint32_t)e.dtype);
      os.write(reinterpret_cast<const char*>(e.bytes.data()),
               (std::streamsize)e.bytes.size());
    }
    if (!os) throw std::runtime_error("container: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("container: rename to " + path + " failed");
}

TensorStore TensorStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("container: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("container: bad magic in " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kFormatVersion)
    throw std::runtime_error("container: unsupported format version " +
                             std::to_string(version));
  const std::uint32_t count = read_u32(is);
  TensorStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const std::uint32_t name_len = read_u32(is);
    nt.name.resize(name_len);
    is.read(nt.name.data(), name_len);
    const std::uint32_t rank = read_u32(is);
    nt.shape.resize(rank);
    for (std::uint32_t r = 0; r < rank; ++r)
      nt.shape[r] = (std::int64_t)read_u64(is);
    nt.dtype = (DType)read_u32(is);
    nt.bytes.resize((std::size_t)nt.numel() * dtype_size(nt.dtype));
    is.read(reinterpret_cast<char*>(nt.bytes.data()),
            (std::streamsize)nt.bytes.size());
    if (!is) throw std::runtime_error("container: truncated tensor data");
    store.put(std::move(nt));
  }
  return store;
}

}  // namespace minidino
