#include "pete/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace pete {

namespace {

using nlohmann::json;

uint32_t to_le32(uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap32(v);
  }
  return v;
}

uint64_t to_le64(uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap64(v);
  }
  return v;
}

json config_to_json(const ModelConfig& cfg) {
  return json{{"n_layers", cfg.n_layers},
              {"n_heads", cfg.n_heads},
              {"d_model", cfg.d_model},
              {"ffn_factor", cfg.ffn_factor},
              {"head_factor", cfg.head_factor},
              {"embedding_kind", to_string(cfg.embedding_kind)},
              {"vocab_size", cfg.vocab_size},
              {"dropout_p", cfg.dropout_p},
              {"max_seq_len", cfg.max_seq_len},
              {"seed", cfg.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.ffn_factor = j.at("ffn_factor").get<double>();
  cfg.head_factor = j.at("head_factor").get<double>();
  cfg.embedding_kind =
      embedding_kind_from_string(j.at("embedding_kind").get<std::string>());
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.dropout_p = j.at("dropout_p").get<double>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto params = model.named_parameters();
  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    manifest.push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel()) * sizeof(uint32_t);
  }
  const json header{{"format_version", kCheckpointFormatVersion},
                    {"config", config_to_json(model.cfg)},
                    {"manifest", manifest}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  const uint64_t payload_len = offset;
  std::vector<uint32_t> buf;
  for (const auto& [name, t] : params) {
    buf.resize(static_cast<size_t>(t.numel()));
    const auto data = t.data();
    for (size_t i = 0; i < buf.size(); ++i) {
      const auto f = static_cast<float>(data[i]);
      uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      buf[i] = to_le32(bits);
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(uint32_t)));
  }
  const uint64_t trailer = to_le64(payload_len);
  out.write(reinterpret_cast<const char*>(&trailer), sizeof trailer);
  if (!out) throw IoError("short write for checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path,
                      const std::optional<ModelConfig>& expect) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const auto file_size = static_cast<uint64_t>(in.tellg());
  if (file_size < sizeof(uint64_t)) {
    throw IoError("checkpoint too small: " + path.string());
  }
  in.seekg(static_cast<std::streamoff>(file_size - sizeof(uint64_t)));
  uint64_t trailer = 0;
  in.read(reinterpret_cast<char*>(&trailer), sizeof trailer);
  const uint64_t payload_len = to_le64(trailer);
  if (payload_len + sizeof(uint64_t) > file_size) {
    throw IoError("checkpoint trailer inconsistent with file size (payload " +
                  std::to_string(payload_len) + " bytes, file " +
                  std::to_string(file_size) + ")");
  }
  const uint64_t header_len = file_size - sizeof(uint64_t) - payload_len;
  std::string header_text(header_len, '\0');
  in.seekg(0);
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  json header = json::parse(header_text, nullptr, false);
  if (header.is_discarded()) {
    throw IoError("checkpoint header is not valid JSON: " + path.string());
  }
  const int version = header.at("format_version").get<int>();
  if (version != kCheckpointFormatVersion) {
    throw IoError("checkpoint format_version " + std::to_string(version) +
                  " unsupported (expected " +
                  std::to_string(kCheckpointFormatVersion) + ")");
  }
  ModelConfig cfg = config_from_json(header.at("config"));
  Model model = build_model(cfg, cfg.seed);

  auto params = model.named_parameters();
  const json& manifest = header.at("manifest");
  if (manifest.size() != params.size()) {
    throw IoError("checkpoint manifest has " +
                  std::to_string(manifest.size()) + " tensors, model needs " +
                  std::to_string(params.size()));
  }

  // Shapes the caller expects, when a config was supplied.
  std::vector<std::pair<std::string, Shape>> expected_shapes;
  if (expect) {
    ModelConfig want = *expect;
    Model probe = build_model(want, 0);
    for (const auto& [name, t] : probe.named_parameters()) {
      expected_shapes.emplace_back(name, t.shape());
    }
    if (expected_shapes.size() != manifest.size()) {
      throw IoError("checkpoint does not match the expected config: tensor "
                    "count differs");
    }
  }

  uint64_t running_offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    const json& entry = manifest.at(i);
    const std::string stored_name = entry.at("name").get<std::string>();
    const Shape stored_shape = entry.at("shape").get<Shape>();
    const auto stored_offset = entry.at("offset").get<uint64_t>();
    if (stored_name != name || stored_shape != tensor.shape()) {
      throw IoError("checkpoint tensor '" + stored_name + "' " +
                    shape_str(stored_shape) + " does not match model tensor '" +
                    name + "' " + shape_str(tensor.shape()));
    }
    if (!expected_shapes.empty() &&
        (expected_shapes[i].first != stored_name ||
         expected_shapes[i].second != stored_shape)) {
      throw IoError("checkpoint does not match the expected config: tensor '" +
                    stored_name + "' has shape " + shape_str(stored_shape) +
                    ", expected '" + expected_shapes[i].first + "' " +
                    shape_str(expected_shapes[i].second));
    }
    if (stored_offset != running_offset) {
      throw IoError("checkpoint manifest offsets not contiguous at tensor '" +
                    stored_name + "'");
    }
    running_offset +=
        static_cast<uint64_t>(tensor.numel()) * sizeof(uint32_t);
  }
  if (running_offset != payload_len) {
    throw IoError("checkpoint payload length " + std::to_string(payload_len) +
                  " does not match manifest total " +
                  std::to_string(running_offset));
  }

  std::vector<uint32_t> buf;
  for (auto& [name, tensor] : params) {
    auto data = tensor.data();
    buf.resize(data.size());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(uint32_t)));
    if (!in) {
      throw IoError("checkpoint payload truncated in tensor '" + name + "'");
    }
    for (size_t i = 0; i < data.size(); ++i) {
      const uint32_t bits = to_le32(buf[i]);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      data[i] = static_cast<Real>(f);
    }
  }
  return model;
}

}  // namespace pete
