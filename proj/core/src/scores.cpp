// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/scores.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace wplab {

double ScoreTable::at(ComponentId c) const {
  const auto it = scores.find(c);
  if (it == scores.end()) throw std::out_of_range("no " + metric + " score for " + c.str());
  return it->second;
}

double ScoreTable::get(ComponentId c, double fallback) const {
  const auto it = scores.find(c);
  return it == scores.end() ? fallback : it->second;
}

std::vector<ComponentId> ScoreTable::components() const {
  std::vector<ComponentId> out;
  out.reserve(scores.size());
  for (const auto& [c, s] : scores) out.push_back(c);
  return out;
}

void ScoreTable::check_finite() const {
  for (const auto& [c, s] : scores) {
    if (!std::isfinite(s)) throw NonFiniteError(metric + " score for " + c.str() + " is not finite");
  }
}

std::string_view ranking_name(Ranking r) { return r == Ranking::Signed ? "signed" : "abs"; }

Ranking parse_ranking(std::string_view s) {
  if (s == "signed") return Ranking::Signed;
  if (s == "abs" || s == "absolute") return Ranking::Absolute;
  throw std::invalid_argument("unknown ranking '" + std::string(s) + "' (expected signed or abs)");
}

std::vector<ComponentId> topk_screen(const ScoreTable& table, std::size_t k, Ranking ranking) {
  if (k > table.size()) {
    throw std::invalid_argument("topk_screen: k = " + std::to_string(k) + " exceeds " + std::to_string(table.size()) +
                                " components");
  }
  std::vector<std::pair<ComponentId, double>> rows(table.scores.begin(), table.scores.end());
  auto key = [ranking](double s) { return ranking == Ranking::Absolute ? std::abs(s) : s; };
  std::stable_sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) { return key(a.second) > key(b.second); });
  std::vector<ComponentId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(rows[i].first);
  return out;
}

double overlap_fraction(const std::vector<ComponentId>& a, const std::vector<ComponentId>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("overlap_fraction: set sizes differ (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  if (a.empty()) return 1.0;
  const std::set<ComponentId> sb(b.begin(), b.end());
  std::size_t hits = 0;
  for (const auto& c : std::set<ComponentId>(a.begin(), a.end())) hits += sb.count(c);
  return static_cast<double>(hits) / static_cast<double>(a.size());
}

}  // namespace wplab
