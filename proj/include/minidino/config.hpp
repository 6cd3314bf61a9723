// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "minidino/errors.hpp"

namespace minidino {

// Flat `key = value` configuration with a closed key registry: every
// accepted key has a documented default, anything else is rejected with the
// full offending list. File values are overridden by command-line `--set`
// pairs; the fully resolved text (canonical order) is what gets hashed and
// copied into the run directory.
class Config {
 public:
  struct Entry {
    std::string key;
    std::string value;
    std::string help;
  };

  static Config defaults();

  void apply_file(const std::string& path);
  void apply_text(const std::string& text, const std::string& origin);
  // "key=value"
  void apply_override(const std::string& assignment);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  void set(const std::string& key, const std::string& value);

  // Resolved configuration, canonical registry order, one `key = value` per
  // line. Hash is FNV-1a 64 over these bytes.
  std::string canonical_text() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;                 // registry order
  std::map<std::string, std::size_t> index_;
  void add(const std::string& key, const std::string& value,
           const std::string& help);
};

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace minidino
