// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "minidino/config.hpp"
#include "minidino/losses.hpp"

namespace minidino {

// One run per directory. Holds the lock file for the lifetime of the
// object; manifest, resolved config, metrics and checkpoints all live here.
class RunDir {
 public:
  explicit RunDir(const std::string& path);
  ~RunDir();

  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const;
  std::string run_id() const;

  void write_config(const Config& cfg);
  // Wrote as manifest.json: subcommand, config hash, seed, phase, steps,
  // parent checkpoint, format version.
  void write_manifest(const std::string& subcommand, const Config& cfg,
                      Phase phase, std::int64_t start_step,
                      std::int64_t end_step, const std::string& parent);

  void append_metrics(const LossReport& report);
  void append_diagnostic(std::int64_t step, const std::string& name,
                         double value);

  // Highest-step checkpoint in the directory, empty string if none.
  std::string latest_checkpoint() const;
  std::string checkpoint_name(std::int64_t step) const;

  // Stored config hash from a previous manifest; empty if no manifest.
  std::string manifest_config_hash() const;

 private:
  std::string path_;
  bool locked_ = false;
  void lock();
};

}  // namespace minidino
