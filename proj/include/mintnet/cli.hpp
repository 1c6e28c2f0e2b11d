#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mintnet/data.hpp"
#include "mintnet/flow.hpp"
#include "mintnet/solver.hpp"
#include "mintnet/train.hpp"

namespace mintnet::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitIo = 3,
  kExitDivergence = 4,
  kExitAudit = 5,
};

struct ModelSection {
  ItemShape input{1, 8, 8};
  std::size_t k_groups = 3;
  std::size_t kernel = 3;
  std::size_t pairs_per_stage = 3;
  std::size_t squeezes = 1;
  std::string activation = "elu";
  double init_scale = 0.05;
  double lambda = 0.05;
};

// source is "bars", "noise" or "idx". Synthetic sets are drawn from `seed`,
// independently of the training seed; idx sets hold out the last eval_count
// images unless eval_path is given.
struct DataSection {
  std::string source = "bars";
  std::string path;
  std::string labels_path;
  std::string eval_path;
  std::size_t downsample = 1;
  std::size_t train_count = 2000;
  std::size_t eval_count = 500;
  std::uint64_t seed = 1234;
};

struct RunConfig {
  ModelSection model;
  DataSection data;
  train::TrainConfig train;
  SolverConfig solver;
  std::string out_dir = "out";

  // Throws ConfigError naming the offending key, including unknown keys.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  FlowArchitecture architecture() const;
  PreprocessConfig preprocess() const;
};

RunConfig load_run_config(const std::string& path);

struct Splits {
  data::Dataset train;
  data::Dataset eval;
};
Splits load_data(const RunConfig& cfg);

// Entry point shared by the executable and the tests. args excludes argv[0].
int run(const std::vector<std::string>& args);

}  // namespace mintnet::cli
