// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "json_util.hpp"

namespace wplab {

using detail::json;
using detail::read_opt;
using detail::reject_unknown;

std::string_view anchor_metric_name(AnchorMetric m) {
  switch (m) {
    case AnchorMetric::Vec: return "vec";
    case AnchorMetric::Kl: return "kl";
    case AnchorMetric::Proj: return "proj";
  }
  return "?";
}

AnchorMetric parse_anchor_metric(std::string_view s) {
  if (s == "vec") return AnchorMetric::Vec;
  if (s == "kl") return AnchorMetric::Kl;
  if (s == "proj") return AnchorMetric::Proj;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "' (expected vec, kl or proj)");
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  model.validate();
  Vocabulary{n_content}.validate(model);
  if (task.context_len < 1) fail("task.context_len must be >= 1");
  if (task.answer_len < 1 || task.answer_len > task.context_len) fail("task.answer_len must be in [1, context_len]");
  const int longest = task.context_len + 2 + std::max(task.answer_len, kDownstreamSteps) - 1;
  if (longest > model.max_seq_len) {
    fail("model.max_seq_len must be >= " + std::to_string(longest) + " for this task and the downstream rollout");
  }
  for (const auto* h : {&hyper.pretrain, &hyper.specialize}) {
    if (h->steps < 0 || h->batch < 1 || !(h->lr > 0.0)) fail("training needs steps >= 0, batch >= 1 and lr > 0");
  }
  if (!(hyper.copy_fraction >= 0.0 && hyper.copy_fraction <= 1.0)) fail("training.copy_fraction must be in [0, 1]");
  if (anchor_layer < 0 || anchor_layer > model.n_layers) fail("anchor.layer must be 0 (auto) or in [1, n_layers]");
  if (!(gap_floor >= 0.0)) fail("anchor.gap_floor must be >= 0");
  if (pairs < 2) fail("eval.pairs must be >= 2");
  if (accuracy_examples < 1) fail("eval.accuracy_examples must be >= 1");
  if (downstream_prompts < 1) fail("eval.downstream_prompts must be >= 1");
  if (topk > component_count(model)) fail("topk exceeds the component count");
  std::set<TaskKind> seen{task.kind};
  for (auto k : merge_tasks) {
    if (!seen.insert(k).second) fail("merge.tasks must be distinct and differ from task.kind");
  }
  if (threads < 1) fail("threads must be >= 1");
}

namespace {

json hyper_to(const TrainHyper& h) {
  return {{"steps", h.steps}, {"batch", h.batch}, {"lr", h.lr}, {"beta1", h.beta1}, {"beta2", h.beta2},
          {"adam_eps", h.adam_eps}};
}

void hyper_from(const json& j, TrainHyper& h, std::string_view where) {
  reject_unknown(j, {"steps", "batch", "lr", "beta1", "beta2", "adam_eps"}, where);
  read_opt(j, "steps", h.steps, where);
  read_opt(j, "batch", h.batch, where);
  read_opt(j, "lr", h.lr, where);
  read_opt(j, "beta1", h.beta1, where);
  read_opt(j, "beta2", h.beta2, where);
  read_opt(j, "adam_eps", h.adam_eps, where);
}

json component_to(ComponentId c) { return {{"kind", kind_name(c.kind)}, {"layer", c.layer}, {"index", c.index}}; }

ComponentId component_from(const json& j) {
  return {j.at("layer").get<int>(), parse_kind(j.at("kind").get<std::string>()), j.at("index").get<int>()};
}

template <class F>
auto parse_json(std::string_view text, std::string_view where, F&& body) {
  try {
    return body(json::parse(text));
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string(where) + ": " + e.what());
  }
}

std::string optional_hash(const json& j) { return j.contains("config_hash") ? j.at("config_hash").get<std::string>() : ""; }

}  // namespace

std::string config_to_json(const RunConfig& c, bool with_runtime) {
  json tasks = json::array();
  for (auto k : c.merge_tasks) tasks.push_back(task_name(k));
  json j = {
      {"model", detail::model_config_to(c.model)},
      {"task",
       {{"kind", task_name(c.task.kind)},
        {"n_content", c.n_content},
        {"context_len", c.task.context_len},
        {"answer_len", c.task.answer_len},
        {"lower_only", c.task.lower_only}}},
      {"training",
       {{"pretrain", hyper_to(c.hyper.pretrain)},
        {"specialize", hyper_to(c.hyper.specialize)},
        {"copy_fraction", c.hyper.copy_fraction},
        {"restrict_to_components", c.restrict_to_components}}},
      {"anchor", {{"layer", c.anchor_layer}, {"position_rule", c.position.str()}, {"gap_floor", c.gap_floor}}},
      {"thresholds",
       {{"tau_a", c.thresholds.tau_a},
        {"tau_w", c.thresholds.tau_w},
        {"tau_link", c.thresholds.tau_link},
        {"tau_down", c.thresholds.tau_down}}},
      {"seed", c.seed},
      {"eval",
       {{"pairs", c.pairs}, {"accuracy_examples", c.accuracy_examples}, {"downstream_prompts", c.downstream_prompts}}},
      {"merge", {{"tasks", tasks}}},
  };
  if (with_runtime) {
    j["screening"] = {{"topk", c.topk}, {"mode", knockout_mode_name(c.mode)}, {"metric", anchor_metric_name(c.metric)}};
    j["out"] = c.out.generic_string();
    j["threads"] = c.threads;
  }
  return j.dump(2);
}

RunConfig config_from_json(std::string_view text) {
  return parse_json(text, "config", [](const json& j) {
    RunConfig c;
    reject_unknown(j, {"model", "task", "training", "anchor", "thresholds", "seed", "eval", "screening", "merge", "out",
                       "threads", "config_hash"},
                   "config");
    if (j.contains("model")) c.model = detail::model_config_from(j.at("model"), "config.model");
    if (j.contains("task")) {
      const json& t = j.at("task");
      reject_unknown(t, {"kind", "n_content", "context_len", "answer_len", "lower_only"}, "config.task");
      if (t.contains("kind")) c.task.kind = parse_task(t.at("kind").get<std::string>());
      read_opt(t, "n_content", c.n_content, "config.task");
      read_opt(t, "context_len", c.task.context_len, "config.task");
      read_opt(t, "answer_len", c.task.answer_len, "config.task");
      read_opt(t, "lower_only", c.task.lower_only, "config.task");
    }
    if (j.contains("training")) {
      const json& t = j.at("training");
      reject_unknown(t, {"pretrain", "specialize", "copy_fraction", "restrict_to_components"}, "config.training");
      if (t.contains("pretrain")) hyper_from(t.at("pretrain"), c.hyper.pretrain, "config.training.pretrain");
      if (t.contains("specialize")) hyper_from(t.at("specialize"), c.hyper.specialize, "config.training.specialize");
      read_opt(t, "copy_fraction", c.hyper.copy_fraction, "config.training");
      read_opt(t, "restrict_to_components", c.restrict_to_components, "config.training");
    }
    if (j.contains("anchor")) {
      const json& a = j.at("anchor");
      reject_unknown(a, {"layer", "position_rule", "gap_floor"}, "config.anchor");
      read_opt(a, "layer", c.anchor_layer, "config.anchor");
      if (a.contains("position_rule")) c.position = PositionRule::parse(a.at("position_rule").get<std::string>());
      read_opt(a, "gap_floor", c.gap_floor, "config.anchor");
    }
    if (j.contains("thresholds")) {
      const json& t = j.at("thresholds");
      reject_unknown(t, {"tau_a", "tau_w", "tau_link", "tau_down"}, "config.thresholds");
      read_opt(t, "tau_a", c.thresholds.tau_a, "config.thresholds");
      read_opt(t, "tau_w", c.thresholds.tau_w, "config.thresholds");
      read_opt(t, "tau_link", c.thresholds.tau_link, "config.thresholds");
      read_opt(t, "tau_down", c.thresholds.tau_down, "config.thresholds");
    }
    read_opt(j, "seed", c.seed, "config");
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      reject_unknown(e, {"pairs", "accuracy_examples", "downstream_prompts"}, "config.eval");
      read_opt(e, "pairs", c.pairs, "config.eval");
      read_opt(e, "accuracy_examples", c.accuracy_examples, "config.eval");
      read_opt(e, "downstream_prompts", c.downstream_prompts, "config.eval");
    }
    if (j.contains("screening")) {
      const json& s = j.at("screening");
      reject_unknown(s, {"topk", "mode", "metric"}, "config.screening");
      read_opt(s, "topk", c.topk, "config.screening");
      if (s.contains("mode")) c.mode = parse_knockout_mode(s.at("mode").get<std::string>());
      if (s.contains("metric")) c.metric = parse_anchor_metric(s.at("metric").get<std::string>());
    }
    if (j.contains("merge")) {
      const json& m = j.at("merge");
      reject_unknown(m, {"tasks"}, "config.merge");
      if (m.contains("tasks")) {
        c.merge_tasks.clear();
        for (const auto& t : m.at("tasks")) c.merge_tasks.push_back(parse_task(t.get<std::string>()));
      }
    }
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    read_opt(j, "threads", c.threads, "config");
    c.validate();
    return c;
  });
}

RunConfig load_config(const std::filesystem::path& path) { return config_from_json(read_file(path)); }

bool operator==(const RunConfig& a, const RunConfig& b) { return config_to_json(a) == config_to_json(b); }

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : config_to_json(config, false)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- files -------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

// ---- score tables ------------------------------------------------------------

namespace {

constexpr std::string_view kCsvHeader = "kind,layer,index,score";
constexpr std::string_view kHashPrefix = "# config ";

}  // namespace

std::string scores_to_csv(const ScoreTable& table, std::string_view hash) {
  table.check_finite();
  std::string out;
  if (!hash.empty()) {
    out += kHashPrefix;
    out += hash;
    out += '\n';
  }
  out += kCsvHeader;
  out += '\n';
  char buf[64];
  for (const auto& [c, s] : table.scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s);
    out += std::string(kind_name(c.kind)) + ',' + std::to_string(c.layer) + ',' + std::to_string(c.index) + ',' + buf +
           '\n';
  }
  return out;
}

ScoreTable scores_from_csv(std::string_view text, std::string* hash) {
  ScoreTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("scores csv line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.starts_with('#')) {
      if (line.starts_with(kHashPrefix) && hash) *hash = line.substr(kHashPrefix.size());
      continue;
    }
    if (!header) {
      if (line != kCsvHeader) fail("expected header '" + std::string(kCsvHeader) + "'");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 4) fail("expected 4 fields");
    char* end = nullptr;
    const double s = std::strtod(f[3].c_str(), &end);
    if (end == f[3].c_str() || *end != '\0') fail("bad score '" + f[3] + "'");
    try {
      const ComponentId c{std::stoi(f[1]), parse_kind(f[0]), std::stoi(f[2])};
      if (!table.scores.emplace(c, s).second) fail("duplicate component " + c.str());
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
  }
  if (!header) throw std::invalid_argument("scores csv: missing header");
  return table;
}

std::string scores_to_json(const ScoreTable& table, std::string_view hash) {
  table.check_finite();
  json rows = json::array();
  for (const auto& [c, s] : table.scores) {
    json r = component_to(c);
    r["score"] = s;
    rows.push_back(std::move(r));
  }
  json j = {{"metric", table.metric}, {"meta", table.meta}, {"scores", rows}};
  if (!hash.empty()) j["config_hash"] = hash;
  return j.dump(2) + "\n";
}

ScoreTable scores_from_json(std::string_view text, std::string* hash) {
  return parse_json(text, "scores json", [&](const json& j) {
    reject_unknown(j, {"metric", "meta", "scores", "config_hash"}, "scores json");
    ScoreTable table;
    table.metric = j.value("metric", "");
    if (j.contains("meta")) table.meta = j.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& r : j.at("scores")) table.scores[component_from(r)] = r.at("score").get<double>();
    if (hash) *hash = optional_hash(j);
    return table;
  });
}

// ---- circuit -----------------------------------------------------------------

std::string circuit_to_json(const CircuitReport& report, std::string_view hash) {
  auto set_to = [](const std::set<ComponentId>& s) {
    json a = json::array();
    for (auto c : s) a.push_back(component_to(c));
    return a;
  };
  json links = json::array();
  for (const auto& l : report.links) {
    links.push_back({{"target", component_to(l.target)}, {"supplier", component_to(l.supplier)}, {"score", l.score}});
  }
  const auto& t = report.thresholds;
  json j = {{"sources", set_to(report.sources)},
            {"aggregators", set_to(report.aggregators)},
            {"executors", set_to(report.executors)},
            {"circuit", set_to(report.circuit())},
            {"thresholds", {{"tau_a", t.tau_a}, {"tau_w", t.tau_w}, {"tau_link", t.tau_link}, {"tau_down", t.tau_down}}},
            {"links", links}};
  if (!hash.empty()) j["config_hash"] = hash;
  return j.dump(2) + "\n";
}

CircuitReport circuit_from_json(std::string_view text, std::string* hash) {
  return parse_json(text, "circuit json", [&](const json& j) {
    reject_unknown(j, {"sources", "aggregators", "executors", "circuit", "thresholds", "links", "config_hash"},
                   "circuit json");
    CircuitReport r;
    for (const auto& c : j.at("sources")) r.sources.insert(component_from(c));
    for (const auto& c : j.at("aggregators")) r.aggregators.insert(component_from(c));
    for (const auto& c : j.at("executors")) r.executors.insert(component_from(c));
    const json& t = j.at("thresholds");
    r.thresholds = {t.at("tau_a").get<double>(), t.at("tau_w").get<double>(), t.at("tau_link").get<double>(),
                    t.at("tau_down").get<double>()};
    for (const auto& l : j.at("links")) {
      r.links.push_back({component_from(l.at("target")), component_from(l.at("supplier")), l.at("score").get<double>()});
    }
    if (hash) *hash = optional_hash(j);
    return r;
  });
}

}  // namespace wplab
