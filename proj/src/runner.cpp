// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#include "minidino/runner.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace minidino {

namespace fs = std::filesystem;

RunDir::RunDir(const std::string& path) : path_(path) {
  fs::create_directories(path_);
  fs::create_directories(fs::path(path_) / "images");
  lock();
}

RunDir::~RunDir() {
  if (locked_) {
    std::error_code ec;
    fs::remove(fs::path(path_) / ".lock", ec);
  }
}

void RunDir::lock() {
  const std::string lock_path = (fs::path(path_) / ".lock").string();
  std::FILE* f = std::fopen(lock_path.c_str(), "wx");
  if (!f)
    throw ConfigError("run directory " + path_ +
                      " is locked by another writer (stale? remove " +
                      lock_path + ")");
  std::fclose(f);
  locked_ = true;
}

std::string RunDir::file(const std::string& name) const {
  return (fs::path(path_) / name).string();
}

std::string RunDir::run_id() const {
  auto base = fs::path(path_).filename().string();
  if (base.empty()) base = fs::path(path_).parent_path().filename().string();
  return base;
}

void RunDir::write_config(const Config& cfg) {
  std::ofstream os(file("config.resolved"), std::ios::trunc);
  os << cfg.canonical_text();
}

void RunDir::write_manifest(const std::string& subcommand, const Config& cfg,
                            Phase phase, std::int64_t start_step,
                            std::int64_t end_step, const std::string& parent) {
  nlohmann::json j;
  j["subcommand"] = subcommand;
  j["run_id"] = run_id();
  j["config_hash"] = cfg.hash_hex();
  j["seed"] = cfg.get_u64("run.seed");
  j["phase"] = phase_name(phase);
  j["start_step"] = start_step;
  j["end_step"] = end_step;
  j["parent_checkpoint"] = parent;
  j["format_version"] = 1;
  std::ofstream os(file("manifest.json"), std::ios::trunc);
  os << j.dump(2) << "\n";
}

std::string RunDir::manifest_config_hash() const {
  std::ifstream is(file("manifest.json"));
  if (!is) return "";
  nlohmann::json j;
  is >> j;
  return j.value("config_hash", "");
}

void RunDir::append_metrics(const LossReport& report) {
  const std::string p = file("metrics.csv");
  const bool fresh = !fs::exists(p) || fs::file_size(p) == 0;
  std::ofstream os(p, std::ios::app);
  if (fresh) os << LossReport::csv_header() << "\n";
  os << report.csv_row() << "\n";
}

void RunDir::append_diagnostic(std::int64_t step, const std::string& name,
                               double value) {
  const std::string p = file("diagnostics.csv");
  const bool fresh = !fs::exists(p) || fs::file_size(p) == 0;
  std::ofstream os(p, std::ios::app);
  if (fresh) os << "step,name,value\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld,%s,%.10g\n", (long long)step,
                name.c_str(), value);
  os << buf;
}

std::string RunDir::checkpoint_name(std::int64_t step) const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_%08lld.dnv3", (long long)step);
  return file(buf);
}

std::string RunDir::latest_checkpoint() const {
  std::string best;
  std::int64_t best_step = -1;
  for (const auto& entry : fs::directory_iterator(path_)) {
    const std::string name = entry.path().filename().string();
    long long step = -1;
    if (std::sscanf(name.c_str(), "ckpt_%lld.dnv3", &step) == 1 &&
        step > best_step) {
      best_step = step;
      best = entry.path().string();
    }
  }
  return best;
}

}  // namespace minidino
