#pragma once

// Run configuration: flat text with [data], [model] and [train] sections of
// `key = value` lines. `#` starts a comment.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "flipdistill/data.hpp"
#include "flipdistill/models.hpp"
#include "flipdistill/trainer.hpp"

namespace flipdistill {

struct RunConfig {
  SyntheticCorpusConfig data;
  ModelConfig model;
  TrainConfig train;

  // Sets every seed field (data, model, train).
  void set_seed(std::uint64_t seed);
  // Validates each section and the cross-section constraints.
  void validate() const;
};

struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  // Throws ConfigError on an unparsable value.
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigField>& config_fields();
const ConfigField* find_field(std::string_view section, std::string_view key);

// Unknown sections or keys and malformed lines raise ParseError with the line number.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
// Canonical text with every field, in table order. parse(to_text(c)) == c.
std::string to_config_text(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

// `section.key=value` override; a bare key must be unambiguous.
void apply_override(RunConfig& cfg, std::string_view assignment);

// Seed from FLIPDISTILL_SEED when set, otherwise `fallback`.
std::uint64_t env_seed(std::uint64_t fallback);

}  // namespace flipdistill
