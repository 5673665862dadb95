// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "json.hpp"
#include "wplab/model.hpp"

namespace wplab::detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, std::string_view where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (auto key : keys) known = known || key == k;
    if (!known) throw std::invalid_argument(std::string(where) + ": unknown key \"" + k + "\"");
  }
}

template <class T>
void read_opt(const json& j, std::string_view key, T& out, std::string_view where) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string(where) + "." + std::string(key) + ": wrong type");
  }
}

json model_config_to(const ModelConfig& c);
ModelConfig model_config_from(const json& j, std::string_view where);

}  // namespace wplab::detail
