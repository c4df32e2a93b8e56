#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "blp/ingest.hpp"
#include "blp/models/cyclepatch.hpp"
#include "blp/models/mlp.hpp"

namespace blp::models {

/// Builds an untrained network from a describe() document.
inline std::unique_ptr<Network> make_network(const nlohmann::json& description, std::uint64_t init_seed = 0) {
  try {
    const auto family = description.at("family").get<std::string>();
    if (family == "cpmlp") {
      return std::make_unique<CyclePatchNetwork>(cyclepatch_config_from_json(description.at("config")), init_seed);
    }
    if (family == "mlp") return std::make_unique<MlpNetwork>(mlp_config_from_json(description.at("config")), init_seed);
    throw ConfigError("unknown model family '" + family + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model description: ") + e.what());
  }
}

inline nlohmann::json checkpoint_header(const Network& net) {
  return {{"model", net.describe()},
          {"scaler", {{"mean", net.scaler().mean}, {"scale", net.scaler().scale}}},
          {"input_norm", net.input_norm().to_json()}};
}

inline std::string encode_network(const Network& net) {
  return diff::encode_checkpoint(checkpoint_header(net), net.params().snapshot());
}

inline std::unique_ptr<Network> decode_network(std::string_view bytes) {
  auto data = diff::decode_checkpoint(bytes);
  auto net = make_network(data.header.at("model"));
  net->params().restore(data.values);
  net->scaler().mean = data.header.at("scaler").at("mean").get<double>();
  net->scaler().scale = data.header.at("scaler").at("scale").get<double>();
  net->input_norm() = models::InputNorm::from_json(data.header.at("input_norm"));
  return net;
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
  ingest::write_text_file(path, encode_network(net));
}

inline std::unique_ptr<Network> load_network(const std::filesystem::path& path) {
  return decode_network(ingest::read_file(path));
}

}  // namespace blp::models
