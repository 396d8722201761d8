// SPDX-License-Identifier: Apache-2.0

#include "hipo/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"

namespace hipo::ckpt {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json config_to_json(const lm::ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"context_length", c.context_length},
              {"embed_dim", c.embed_dim},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"seed", c.seed}};
}

lm::ModelConfig config_from_json(const json& j) {
  lm::ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context_length = j.at("context_length").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw SchemaError("config");
  }
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw ShapeError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

void put_f32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float get_f32(std::string_view in, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b)
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void save_checkpoint(const lm::Model& model, const fs::path& dir) {
  lm::check_params(model.config, model.params);
  fs::create_directories(dir);
  json tensors = json::array();
  std::string blob;
  blob.reserve(model.params.scalar_count() * 4);
  for (const auto& p : model.params) {
    tensors.push_back(json{{"name", p.name},
                           {"shape", p.shape},
                           {"dtype", "f32"},
                           {"byte_offset", blob.size()}});
    for (double v : p.values) put_f32(blob, static_cast<float>(v));
  }
  const json manifest{{"format", kFormat},
                      {"config", config_to_json(model.config)},
                      {"tensors", tensors}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "params.bin", blob);
}

lm::Model load_checkpoint(const fs::path& dir) {
  const std::string text = read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed checkpoint manifest", e.byte);
  }
  if (!manifest.is_object() || !manifest.contains("format") || !manifest["format"].is_string())
    throw VersionError("checkpoint manifest has no format version");
  const std::string format = manifest["format"].get<std::string>();
  if (format != kFormat)
    throw VersionError("unsupported checkpoint format '" + format + "', expected " + kFormat);
  if (!manifest.contains("config")) throw SchemaError("config");
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw SchemaError("tensors");

  lm::Model model{config_from_json(manifest["config"]), {}};
  const auto layout = lm::param_layout(model.config);
  const json& tensors = manifest["tensors"];
  if (tensors.size() != layout.size())
    throw ShapeError("checkpoint has " + std::to_string(tensors.size()) + " tensors, expected " +
                     std::to_string(layout.size()));

  const std::string blob = read_file(dir / "params.bin");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const json& t = tensors[i];
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t byte_offset = 0;
    try {
      name = t.at("name").get<std::string>();
      shape = t.at("shape").get<std::vector<std::size_t>>();
      byte_offset = t.at("byte_offset").get<std::size_t>();
      if (t.at("dtype").get<std::string>() != "f32") throw SchemaError("tensors.dtype");
    } catch (const json::exception&) {
      throw SchemaError("tensors[" + std::to_string(i) + "]");
    }
    if (name != layout[i].first || shape != layout[i].second)
      throw ShapeError("tensor " + std::to_string(i) + " (" + name +
                       ") does not match the model layout");
    if (byte_offset != offset)
      throw ShapeError("tensor " + name + " has byte_offset " + std::to_string(byte_offset) +
                       ", expected " + std::to_string(offset));
    const std::size_t count = shape_product(shape);
    if (blob.size() < offset + 4 * count)
      throw TruncatedError("params.bin ends inside tensor " + name);
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) values[k] = get_f32(blob, offset + 4 * k);
    offset += 4 * count;
    model.params.add(ParamTensor{name, shape, std::move(values)});
  }
  if (blob.size() != offset)
    throw ShapeError("params.bin has " + std::to_string(blob.size() - offset) + " trailing bytes");
  return model;
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

std::string checkpoint_checksum(const fs::path& dir) {
  return sha256_hex(read_file(dir / "manifest.json") + read_file(dir / "params.bin"));
}

}  // namespace hipo::ckpt
