#pragma once

// JSON forms of every configuration record. Parsing is strict: unknown
// keys are rejected, missing keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "pvae/data.hpp"
#include "pvae/networks.hpp"
#include "pvae/trainer.hpp"

namespace pvae {

struct EvalConfig {
  std::size_t k = 10;
  std::size_t k_min = 2;
  std::size_t k_max = 20;
  std::size_t restarts = 5;
  std::size_t max_iter = 300;
  std::uint64_t seed = 0;

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  std::string model = "pvae";
  ArchConfig arch;
  TrainConfig train;
  GeneratorConfig data;
  std::size_t test_samples = 500;
  EvalConfig eval;

  void validate() const;
};

nlohmann::json to_json(const ArchConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const GeneratorConfig& c);
nlohmann::json to_json(const EvalConfig& c);
nlohmann::json to_json(const RunConfig& c);

ArchConfig arch_from_json(const nlohmann::json& j);
TrainConfig train_from_json(const nlohmann::json& j);
GeneratorConfig generator_from_json(const nlohmann::json& j);
EvalConfig eval_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
/// Pretty-printed, trailing newline; byte-stable for equal configs.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace pvae
