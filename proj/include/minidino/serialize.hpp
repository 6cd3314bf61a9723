// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "minidino/tensor.hpp"

namespace minidino {

// Named-tensor container, little-endian throughout.
//
//   magic "DNV3" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes (UTF-8) | u32 rank |
//               u64 extents[rank] | u32 dtype tag | raw data
//
// dtype tags: 0 = f32, 1 = f64, 2 = u8 (raw bytes, used for embedded
// config/metadata text blocks).
enum class DType : std::uint32_t { f32 = 0, f64 = 1, u8 = 2 };

struct NamedTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<std::uint8_t> bytes;

  std::int64_t numel() const { return shape_numel(shape); }
};

class TensorStore {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void put_f32(const std::string& name, const Tensor<float>& t);
  void put_f64(const std::string& name, const Tensor<double>& t);
  void put_text(const std::string& name, const std::string& text);

  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;

  Tensor<float> get_f32(const std::string& name) const;
  Tensor<double> get_f64(const std::string& name) const;
  std::string get_text(const std::string& name) const;

  // Copies stored data into an existing tensor; shapes must match.
  void load_into(const std::string& name, Tensor<float>& t) const;
  void load_into(const std::string& name, Tensor<double>& t) const;

  std::size_t size() const { return entries_.size(); }
  const std::vector<NamedTensor>& entries() const { return entries_; }

  // Atomic write: serialize to <path>.tmp then rename.
  void save(const std::string& path) const;
  static TensorStore load(const std::string& path);

 private:
  std::vector<NamedTensor> entries_;            // insertion order preserved
  std::map<std::string, std::size_t> index_;

  const NamedTensor& find(const std::string& name) const;
  void put(NamedTensor nt);
};

}  // namespace minidino
