#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mintnet/flow.hpp"
#include "mintnet/train.hpp"

namespace mintnet::train {

// Current manifest format tag.
inline constexpr const char* kCheckpointFormat = "mintnet-checkpoint/1";

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kVersion, kMissingTensor, kShape, kManifest };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  FlowModel model;
  OptimState optim;
  nlohmann::json extra;
};

// Writes <dir>/manifest.json plus one little-endian float64 file per tensor.
// The previous contents of dir are replaced only once the new files are
// complete.
void save_checkpoint(const std::string& dir, const FlowModel& model, const OptimState& optim,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& dir);

nlohmann::json architecture_json(const FlowModel& model);
// Empty model (zero parameters) with the structure described by j.
FlowModel model_from_architecture(const nlohmann::json& j);

}  // namespace mintnet::train
