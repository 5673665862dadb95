// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "json_util.hpp"
#include "wplab/report.hpp"

namespace wplab {

namespace detail {

json model_config_to(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}, {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from(const json& j, std::string_view where) {
  reject_unknown(j, {"n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len", "rope_base",
                     "norm_eps"},
                 where);
  ModelConfig c;
  read_opt(j, "n_layers", c.n_layers, where);
  read_opt(j, "d_model", c.d_model, where);
  read_opt(j, "n_heads", c.n_heads, where);
  read_opt(j, "n_kv_heads", c.n_kv_heads, where);
  read_opt(j, "d_ff", c.d_ff, where);
  read_opt(j, "vocab_size", c.vocab_size, where);
  read_opt(j, "max_seq_len", c.max_seq_len, where);
  read_opt(j, "rope_base", c.rope_base, where);
  read_opt(j, "norm_eps", c.norm_eps, where);
  c.validate();
  return c;
}

}  // namespace detail

namespace {

using detail::json;

void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(std::string_view bytes, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

constexpr std::size_t kPreamble = 4 + 4 + 8;

}  // namespace

std::string checkpoint_bytes(const ModelParams& params, const std::map<std::string, std::string>& meta) {
  validate_params(params);
  json tensors = json::array();
  std::uint64_t offset = 0;
  params.for_each_tensor([&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}});
    offset += 4 * t.numel();
  });
  const json header = {{"config", detail::model_config_to(params.config)}, {"tensors", tensors}, {"meta", meta}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  put_le32(out, kCheckpointVersion);
  put_le64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  params.for_each_tensor([&](const std::string&, const Tensor& t) {
    for (float v : t.data()) put_le32(out, std::bit_cast<std::uint32_t>(v));
  });
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < kPreamble || bytes.substr(0, 4) != kCheckpointMagic) {
    throw CheckpointError("checkpoint: bad magic (expected WPCK)");
  }
  const auto version = get_le(bytes, 4, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto header_len = get_le(bytes, 8, 8);
  if (header_len > bytes.size() - kPreamble) throw CheckpointError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(kPreamble, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(kPreamble + header_len);

  Checkpoint ck;
  try {
    detail::reject_unknown(header, {"config", "tensors", "meta"}, "checkpoint header");
    ck.params = zeros_like(detail::model_config_from(header.at("config"), "checkpoint config"));
    if (header.contains("meta")) ck.meta = header.at("meta").get<std::map<std::string, std::string>>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  const json& entries = header.at("tensors");
  const auto names = ck.params.tensor_names();
  if (!entries.is_array() || entries.size() != names.size()) {
    throw CheckpointError("checkpoint: header lists " + std::to_string(entries.is_array() ? entries.size() : 0) +
                          " tensors, config implies " + std::to_string(names.size()));
  }
  std::uint64_t expected_offset = 0;
  std::size_t i = 0;
  try {
  ck.params.for_each_tensor([&](const std::string& name, Tensor& t) {
    const json& e = entries[i++];
    if (e.value("name", "") != name) throw CheckpointError("checkpoint: expected tensor " + name + " in directory order");
    if (e.value("dtype", "") != "f32") throw CheckpointError("checkpoint: " + name + " is not f32");
    if (e.at("shape").get<Shape>() != t.shape()) throw CheckpointError("checkpoint: " + name + " has the wrong shape");
    if (e.at("offset").get<std::uint64_t>() != expected_offset) {
      throw CheckpointError("checkpoint: " + name + " offset is inconsistent");
    }
    const std::uint64_t size = 4 * t.numel();
    if (expected_offset + size > payload.size()) throw CheckpointError("checkpoint: truncated payload at " + name);
    for (std::size_t k = 0; k < t.numel(); ++k) {
      t[k] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(payload, expected_offset + 4 * k, 4)));
    }
    expected_offset += size;
  });
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed tensor entry: ") + e.what());
  }
  if (expected_offset != payload.size()) throw CheckpointError("checkpoint: trailing bytes after the payload");
  return ck;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta) {
  write_file_atomic(path, checkpoint_bytes(params, meta));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path).params; }

std::string model_config_json(const ModelConfig& config) { return detail::model_config_to(config).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  try {
    return detail::model_config_from(detail::json::parse(text), "model config");
  } catch (const detail::json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
}

}  // namespace wplab
