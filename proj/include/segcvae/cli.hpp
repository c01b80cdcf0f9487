#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "segcvae/model.hpp"
#include "segcvae/training.hpp"

namespace segcvae::cli {

inline constexpr const char* kToolVersion = "segcvae 0.1.0";

struct DataPaths {
  std::optional<std::filesystem::path> train_data;
  std::optional<std::filesystem::path> valid_data;  // training pairs when unset
  std::optional<std::filesystem::path> embedding_file;
  std::size_t max_vocab_size = 20000;
};

struct RunConfig {
  model::ModelConfig model;
  training::TrainingConfig training;
  DataPaths data;

  /// Throws MissingKey when no training data is configured.
  const std::filesystem::path& require_train_data() const;
};

/// "key = value" lines; '#' starts a comment. Unknown or repeated keys and
/// malformed values raise TypeError with the line number. Relative data paths
/// are resolved against base_dir.
RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {});
RunConfig parse_config(const std::filesystem::path& path);
/// Every key in a fixed order; unset optional keys are left out.
void write_config(std::ostream& out, const RunConfig& config);

/// FNV-1a 64 of the file bytes as 16 hex digits. Throws DomainError if unreadable.
std::string file_digest(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string config;                                       // write_config snapshot
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  std::vector<std::string> artifacts;

  void add_input(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
};

/// Runs one subcommand. Returns 0 on success, 1 on a library error (message on
/// err) and 2 on a usage error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace segcvae::cli
