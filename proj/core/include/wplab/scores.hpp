// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "wplab/model.hpp"

namespace wplab {

/// Per-component scores in component order, with free-form metadata (which
/// utility produced them, normalization, excluded-input counts...).
struct ScoreTable {
  std::string metric;
  std::map<std::string, std::string> meta;
  std::map<ComponentId, double> scores;

  double at(ComponentId c) const;
  double get(ComponentId c, double fallback = 0.0) const;
  std::vector<ComponentId> components() const;
  std::size_t size() const { return scores.size(); }
  // Throws NonFiniteError naming the first non-finite entry.
  void check_finite() const;

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

enum class Ranking : std::uint8_t { Signed, Absolute };

std::string_view ranking_name(Ranking r);
Ranking parse_ranking(std::string_view s);

/// The k highest-ranked components; ties go to the earlier component.
/// Throws if k exceeds the table size.
std::vector<ComponentId> topk_screen(const ScoreTable& table, std::size_t k, Ranking ranking = Ranking::Absolute);

/// |A ∩ B| / |A|. Throws unless |A| == |B|; two empty sets overlap fully.
double overlap_fraction(const std::vector<ComponentId>& a, const std::vector<ComponentId>& b);

}  // namespace wplab
