#include "mintnet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "mintnet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mintnet::train {

namespace {

void write_f64(const fs::path& path, std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<double> read_f64(const fs::path& path, const std::string& name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointError::Kind::kMissingTensor,
                          "tensor '" + name + "' file missing: " + path.string());
  }
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() % 8 != 0) {
    throw CheckpointError(CheckpointError::Kind::kShape,
                          "tensor '" + name + "' file size " + std::to_string(bytes.size()) +
                              " is not a whole number of float64 values");
  }
  std::vector<double> values(bytes.size() / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

json shape_json(const Shape4& s) { return json::array({s.n, s.c, s.h, s.w}); }

json layer_json(const MintParams& p) {
  return {{"channels", p.channels},
          {"k_groups", p.k_groups},
          {"kernel", p.kernel},
          {"activation", p.activation.name()}};
}

MintParams layer_from(const json& j, Orientation o) {
  return MintParams::zeros(j.at("channels").get<std::size_t>(), j.at("k_groups").get<std::size_t>(),
                           j.at("kernel").get<std::size_t>(), o,
                           Activation::from_name(j.at("activation").get<std::string>()));
}

// Reads `name` into dst, checking the manifest shape and the file length.
void load_tensor(const fs::path& dir, const json& entry, const std::string& name, const Shape4& expected,
                 std::span<double> dst) {
  const std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 4 || Shape4{shape[0], shape[1], shape[2], shape[3]} != expected) {
    throw CheckpointError(CheckpointError::Kind::kShape,
                          "tensor '" + name + "' has manifest shape " + entry.at("shape").dump() +
                              " but the architecture needs " + expected.str());
  }
  const std::vector<double> values = read_f64(dir / entry.at("file").get<std::string>(), name);
  if (values.size() != dst.size()) {
    throw CheckpointError(CheckpointError::Kind::kShape,
                          "tensor '" + name + "' file holds " + std::to_string(values.size()) +
                              " values, expected " + std::to_string(dst.size()));
  }
  std::copy(values.begin(), values.end(), dst.begin());
}

}  // namespace

json architecture_json(const FlowModel& model) {
  json blocks = json::array();
  for (const Block& b : model.blocks) {
    if (const auto* sq = std::get_if<Squeeze>(&b)) {
      blocks.push_back({{"type", "squeeze"}, {"factor", sq->factor}});
    } else {
      blocks.push_back({{"type", "paired_mint"}, {"layer", layer_json(std::get<PairedMint>(b).lower)}});
    }
  }
  return {{"input", {model.input.c, model.input.h, model.input.w}},
          {"blocks", blocks},
          {"preprocess",
           {{"lambda", model.preprocess.lambda},
            {"levels", model.preprocess.levels},
            {"seed", model.preprocess.seed}}}};
}

FlowModel model_from_architecture(const json& j) {
  FlowModel model;
  const auto in = j.at("input").get<std::vector<std::size_t>>();
  if (in.size() != 3) throw CheckpointError(CheckpointError::Kind::kManifest, "input shape must have 3 entries");
  model.input = {in[0], in[1], in[2]};
  const json& pre = j.at("preprocess");
  model.preprocess.lambda = pre.at("lambda").get<double>();
  model.preprocess.levels = pre.at("levels").get<int>();
  model.preprocess.seed = pre.at("seed").get<std::uint64_t>();
  for (const json& b : j.at("blocks")) {
    const std::string type = b.at("type").get<std::string>();
    if (type == "squeeze") {
      model.blocks.emplace_back(Squeeze{b.at("factor").get<std::size_t>()});
    } else if (type == "paired_mint") {
      model.blocks.emplace_back(
          PairedMint{layer_from(b.at("layer"), Orientation::kLower), layer_from(b.at("layer"), Orientation::kUpper)});
    } else {
      throw CheckpointError(CheckpointError::Kind::kManifest, "unknown block type '" + type + "'");
    }
  }
  model.latent_shape();
  return model;
}

void save_checkpoint(const std::string& dir, const FlowModel& model, const OptimState& optim, const json& extra) {
  const fs::path target(dir);
  const fs::path staging = target.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + staging.string() + ": " + ec.message());

  const std::vector<ParamView> params = model.parameter_views();
  if (optim.m.size() != params.size()) {
    throw ShapeError("optimizer state does not match model parameters");
  }
  json tensors = json::array();
  for (const ParamView& p : params) {
    const std::string file = p.name + ".bin";
    write_f64(staging / file, p.data);
    tensors.push_back({{"name", p.name}, {"shape", shape_json(p.shape)}, {"file", file}});
  }
  json moments = json::array();
  const char* kinds[] = {"m", "v", "v_hat"};
  const std::vector<std::vector<double>>* slots[] = {&optim.m, &optim.v, &optim.v_hat};
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (int s = 0; s < 3; ++s) {
      const std::string name = std::string("optim.") + kinds[s] + "." + params[k].name;
      write_f64(staging / (name + ".bin"), (*slots[s])[k]);
      moments.push_back({{"name", name}, {"shape", shape_json(params[k].shape)}, {"file", name + ".bin"}});
    }
  }
  const json manifest = {
      {"format", kCheckpointFormat},
      {"architecture", architecture_json(model)},
      {"tensors", tensors},
      {"optimizer",
       {{"step", optim.step},
        {"lr0", optim.hyper.lr0},
        {"beta1", optim.hyper.beta1},
        {"beta2", optim.hyper.beta2},
        {"eps", optim.hyper.eps},
        {"moments", moments}}},
      {"extra", extra},
  };
  {
    std::ofstream out(staging / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + staging.string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("failed writing manifest in " + staging.string());
  }
  fs::remove_all(target, ec);
  fs::rename(staging, target, ec);
  if (ec) throw IoError("cannot move checkpoint into " + target.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kManifest, "unreadable manifest in " + dir + ": " + e.what());
  }
  const std::string format = manifest.value("format", "");
  if (format != kCheckpointFormat) {
    throw CheckpointError(CheckpointError::Kind::kVersion, "checkpoint format '" + format + "' is not '" +
                                                              kCheckpointFormat + "'");
  }
  try {
    Checkpoint ck;
    ck.model = model_from_architecture(manifest.at("architecture"));
    ck.extra = manifest.value("extra", json::object());
    std::vector<ParamRef> params = ck.model.parameters();

    std::map<std::string, json> by_name;
    for (const json& t : manifest.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
    for (const json& t : manifest.at("optimizer").at("moments")) by_name[t.at("name").get<std::string>()] = t;
    auto entry = [&](const std::string& name) -> const json& {
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        throw CheckpointError(CheckpointError::Kind::kMissingTensor, "manifest lists no tensor '" + name + "'");
      }
      return it->second;
    };

    const json& opt = manifest.at("optimizer");
    AmsGradConfig hyper{opt.at("lr0").get<double>(), opt.at("beta1").get<double>(), opt.at("beta2").get<double>(),
                        opt.at("eps").get<double>()};
    ck.optim = OptimState::for_params(params, hyper);
    ck.optim.step = opt.at("step").get<std::size_t>();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const ParamRef& p = params[k];
      load_tensor(root, entry(p.name), p.name, p.shape, p.data);
      load_tensor(root, entry("optim.m." + p.name), "optim.m." + p.name, p.shape, ck.optim.m[k]);
      load_tensor(root, entry("optim.v." + p.name), "optim.v." + p.name, p.shape, ck.optim.v[k]);
      load_tensor(root, entry("optim.v_hat." + p.name), "optim.v_hat." + p.name, p.shape, ck.optim.v_hat[k]);
    }
    return ck;
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kManifest, "malformed manifest in " + dir + ": " + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(CheckpointError::Kind::kManifest, "inconsistent architecture in " + dir + ": " + e.what());
  }
}

}  // namespace mintnet::train
