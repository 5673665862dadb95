// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

#include "wplab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>

#include "json_util.hpp"
#include "wplab/attribution.hpp"
#include "wplab/checkpoint.hpp"
#include "wplab/fusion.hpp"

namespace wplab {

namespace fs = std::filesystem;
using detail::json;

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::TrainPair: return "train-pair";
    case Stage::ExtractAnchor: return "extract-anchor";
    case Stage::Wp: return "wp";
    case Stage::Ap: return "ap";
    case Stage::Attr: return "attr";
    case Stage::Trace: return "trace";
    case Stage::Merge: return "merge";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (auto st : kStages) {
    if (stage_name(st) == s) return st;
  }
  throw std::invalid_argument("unknown stage '" + std::string(s) + "'");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

enum SeedStream : std::uint64_t {
  kInitStream = 0,
  kPretrainStream = 1,
  kSpecializeStream = 2,
  kDataStream = 3,
  kExpertStream = 16,
  kExpertDataStream = 32,
  kAccuracyStream = 48,
};

}  // namespace

Vocabulary run_vocabulary(const RunConfig& config) { return Vocabulary{config.n_content}; }

PairHyper run_pair_hyper(const RunConfig& config) {
  PairHyper h = config.hyper;
  h.init_seed = derive_seed(config.seed, kInitStream);
  h.pretrain.seed = derive_seed(config.seed, kPretrainStream);
  h.specialize.seed = derive_seed(config.seed, kSpecializeStream);
  h.pretrain.threads = config.threads;
  h.specialize.threads = config.threads;
  return h;
}

TrainingScope run_scope(const RunConfig& config) {
  TrainingScope s;
  s.mode = config.restrict_to_components ? TrainingScope::Mode::Components : TrainingScope::Mode::Unrestricted;
  return s;
}

namespace {

json tensor_to(const Tensor& t) { return t.data(); }

Tensor tensor_from(const json& j, int d_model, std::string_view what) {
  const auto v = j.get<std::vector<float>>();
  if (v.size() != static_cast<std::size_t>(d_model)) {
    throw std::invalid_argument(std::string(what) + " has " + std::to_string(v.size()) + " entries, expected " +
                                std::to_string(d_model));
  }
  Tensor t({v.size()});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

}  // namespace

std::string anchor_to_json(const AnchorSelection& sel, const Tensor& readout_direction, std::string_view hash) {
  json layers = json::array();
  for (const auto& r : sel.layers) {
    layers.push_back({{"layer", r.layer}, {"steered_accuracy", r.steered_accuracy}, {"correction_rate", r.correction_rate}});
  }
  json j = {{"layer", sel.spec.layer},
            {"position_rule", sel.spec.rule.str()},
            {"v", tensor_to(sel.spec.v)},
            {"mu_bar", sel.spec.mu_bar},
            {"readout_direction", tensor_to(readout_direction)},
            {"base_accuracy", sel.base_accuracy},
            {"sft_accuracy", sel.sft_accuracy},
            {"no_recovery", sel.no_recovery},
            {"layers", layers}};
  if (!hash.empty()) j["config_hash"] = hash;
  return j.dump(2) + "\n";
}

StoredAnchor anchor_from_json(std::string_view text, const ModelConfig& config) {
  try {
    const json j = json::parse(text);
    detail::reject_unknown(j, {"layer", "position_rule", "v", "mu_bar", "readout_direction", "base_accuracy", "sft_accuracy",
                               "no_recovery", "layers", "config_hash"},
                           "anchor");
    StoredAnchor out;
    auto& sel = out.selection;
    sel.spec = make_anchor_spec(tensor_from(j.at("v"), config.d_model, "anchor v"), j.at("layer").get<int>(),
                                PositionRule::parse(j.at("position_rule").get<std::string>()));
    sel.spec.mu_bar = j.at("mu_bar").get<double>();
    sel.spec.validate(config);
    out.readout_direction = tensor_from(j.at("readout_direction"), config.d_model, "anchor readout_direction");
    sel.base_accuracy = j.at("base_accuracy").get<double>();
    sel.sft_accuracy = j.at("sft_accuracy").get<double>();
    sel.no_recovery = j.at("no_recovery").get<bool>();
    for (const auto& r : j.at("layers")) {
      sel.layers.push_back(
          {r.at("layer").get<int>(), r.at("steered_accuracy").get<double>(), r.at("correction_rate").get<double>()});
    }
    out.config_hash = j.value("config_hash", "");
    return out;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("anchor: ") + e.what());
  }
}

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

class StageContext {
 public:
  StageContext(Stage stage, const RunConfig& config)
      : stage_(stage), cfg_(config), hash_(config_hash(config)), dir_(config.out) {
    config.validate();
  }

  const RunConfig& cfg() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  int threads() const { return cfg_.threads; }
  fs::path path(std::string_view name) const { return dir_ / name; }

  fs::path require(std::string_view name, std::string_view producer) const {
    auto p = path(name);
    if (!fs::exists(p)) {
      throw ArtifactError(std::string(stage_name(stage_)) + " needs " + p.string() + "; run `wplab " +
                          std::string(producer) + "` with the same config first");
    }
    return p;
  }

  void check_hash(const fs::path& p, const std::string& found) const {
    if (found != hash_) {
      throw ArtifactError(p.string() + " was produced under config " + (found.empty() ? "<none>" : found) +
                          ", the current config is " + hash_);
    }
  }

  ModelParams model(std::string_view name, std::string_view producer) const {
    const auto p = require(name, producer);
    auto ck = read_checkpoint(p);
    check_hash(p, ck.meta.count("config_hash") ? ck.meta.at("config_hash") : "");
    if (ck.params.config != cfg_.model) throw ArtifactError(p.string() + " holds a different model config");
    return std::move(ck.params);
  }

  json document(std::string_view name, std::string_view producer) const {
    const auto p = require(name, producer);
    json j;
    try {
      j = json::parse(read_file(p));
    } catch (const json::exception& e) {
      throw ArtifactError(p.string() + ": " + e.what());
    }
    check_hash(p, j.value("config_hash", ""));
    return j;
  }

  ScoreTable scores(std::string_view name, std::string_view producer) const {
    const auto p = require(name, producer);
    std::string found;
    auto t = scores_from_json(read_file(p), &found);
    check_hash(p, found);
    return t;
  }

  StoredAnchor anchor() const {
    const auto p = require("anchor.json", "extract-anchor");
    auto a = anchor_from_json(read_file(p), cfg_.model);
    check_hash(p, a.config_hash);
    return a;
  }

  void write(StageResult& r, std::string_view name, std::string_view bytes) const {
    write_file_atomic(path(name), bytes);
    r.written.push_back(path(name));
  }

  void write_scores(StageResult& r, const std::string& stem, const ScoreTable& t) const {
    write(r, stem + ".csv", scores_to_csv(t, hash_));
    write(r, stem + ".json", scores_to_json(t, hash_));
  }

  void write_model(StageResult& r, std::string_view name, const ModelParams& m, std::string_view role) const {
    save_checkpoint(m, path(name), {{"config_hash", hash_}, {"role", std::string(role)}});
    r.written.push_back(path(name));
  }

 private:
  Stage stage_;
  const RunConfig& cfg_;
  std::string hash_;
  fs::path dir_;
};

struct LoadedPair {
  ModelParams base;
  ModelParams sft;
  DatasetHalves halves;
};

LoadedPair load_pair(const StageContext& ctx) {
  ctx.document("pair.json", "train-pair");
  LoadedPair p{ctx.model("base.wpck", "train-pair"), ctx.model("sft.wpck", "train-pair"), {}};
  p.halves = split_halves(dataset_from_jsonl(read_file(ctx.require("dataset.jsonl", "train-pair"))));
  return p;
}

GapFilteredSet eval_set(const StageContext& ctx, const ModelParams& base, const ModelParams& sft,
                        const DatasetHalves& halves, const AnchorSpec& spec) {
  const auto inputs = instructed_inputs(halves.evaluation);
  return filter_by_gap(base, sft, inputs, spec, ctx.cfg().gap_floor, ctx.threads());
}

DownstreamEval downstream_eval(const StageContext& ctx, const LoadedPair& p, const StoredAnchor& a, DownstreamMode mode) {
  auto inputs = instructed_inputs(p.halves.evaluation);
  inputs.resize(std::min(inputs.size(), ctx.cfg().downstream_prompts));
  DownstreamReadout readout;
  readout.mode = mode;
  if (mode == DownstreamMode::Proj) readout.v_out = a.readout_direction;
  return prepare_downstream(p.base, p.sft, inputs, readout, 1e-9, ctx.threads());
}

DownstreamMode readout_of(AnchorMetric m) { return m == AnchorMetric::Proj ? DownstreamMode::Proj : DownstreamMode::Kl; }

std::string top_line(const ScoreTable& t) {
  if (t.scores.empty()) return "empty";
  const auto top = topk_screen(t, 1)[0];
  return "top " + top.str() + " = " + fmt(t.at(top));
}

AnchorSelection choose_anchor(const RunConfig& cfg, const ModelParams& base, const ModelParams& sft,
                              const DatasetHalves& halves) {
  if (cfg.anchor_layer == 0) return select_anchor(base, sft, halves.extraction, halves.evaluation, cfg.position, cfg.threads);
  AnchorSelection sel;
  sel.spec = make_anchor_spec(
      extract_layer_direction(sft, halves.extraction, cfg.anchor_layer, cfg.position, cfg.threads), cfg.anchor_layer,
      cfg.position);
  calibrate(sel.spec, sft, halves.extraction, cfg.threads);
  sel.base_accuracy = task_accuracy(base, halves.evaluation, cfg.threads);
  sel.sft_accuracy = task_accuracy(sft, halves.evaluation, cfg.threads);
  LayerRecovery rec;
  rec.layer = cfg.anchor_layer;
  rec.steered_accuracy = task_accuracy(steered_runs(base, sel.spec), halves.evaluation, cfg.threads);
  if (sel.sft_accuracy != sel.base_accuracy) {
    rec.correction_rate = correction_rate(sel.base_accuracy, sel.sft_accuracy, rec.steered_accuracy);
  }
  sel.layers.push_back(rec);
  sel.no_recovery = rec.correction_rate <= 0.0;
  return sel;
}

// ---- stages ------------------------------------------------------------------

StageResult train_pair_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto vocab = run_vocabulary(cfg);
  const auto pair = train_base_and_specialized(cfg.model, vocab, cfg.task, run_pair_hyper(cfg), run_scope(cfg),
                                               cfg.accuracy_examples);
  const auto data = make_instruction_dataset(vocab, cfg.task, cfg.pairs, derive_seed(cfg.seed, kDataStream));
  ctx.write_model(r, "base.wpck", pair.base, "base");
  ctx.write_model(r, "sft.wpck", pair.sft, "sft");
  ctx.write(r, "dataset.jsonl", dataset_to_jsonl(data));
  const json doc = {{"config_hash", ctx.hash()},
                    {"task", task_name(cfg.task.kind)},
                    {"base_accuracy", pair.base_accuracy},
                    {"sft_accuracy", pair.sft_accuracy},
                    {"converged", pair.converged},
                    {"pairs", data.size()}};
  ctx.write(r, "pair.json", doc.dump(2) + "\n");
  ctx.write(r, "config.json", config_to_json(cfg, false) + "\n");
  r.summary = pair.summary();
  return r;
}

StageResult extract_anchor_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto p = load_pair(ctx);
  const auto sel = choose_anchor(cfg, p.base, p.sft, p.halves);
  const auto readout = extract_layer_direction(p.sft, p.halves.extraction, cfg.model.n_layers, cfg.position, ctx.threads());
  ctx.write(r, "anchor.json", anchor_to_json(sel, readout, ctx.hash()));
  std::ostringstream s;
  s << "anchor layer " << sel.spec.layer << " (" << sel.spec.rule.str() << "), mu_bar " << fmt(sel.spec.mu_bar);
  for (const auto& l : sel.layers) s << "; R(" << l.layer << ") = " << fmt(l.correction_rate);
  r.summary = s.str();
  return r;
}

StageResult sweep_stage(const StageContext& ctx, Stage stage) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto p = load_pair(ctx);
  const auto a = ctx.anchor();
  const bool weights = stage == Stage::Wp;
  ScoreTable table;
  if (cfg.metric == AnchorMetric::Vec) {
    const auto eval = eval_set(ctx, p.base, p.sft, p.halves, a.selection.spec);
    table = weights ? wp_sweep(p.base, p.sft, a.selection.spec, eval, {}, ctx.threads())
                    : ap_sweep(p.base, p.sft, a.selection.spec, eval, {}, ctx.threads());
  } else {
    const auto deval = downstream_eval(ctx, p, a, readout_of(cfg.metric));
    table = downstream_sweep(p.base, p.sft, deval, weights ? KnockoutMode::Param : KnockoutMode::Activation, {},
                             ctx.threads());
  }
  const std::string stem = std::string(stage_name(stage)) + "_" + std::string(anchor_metric_name(cfg.metric));
  ctx.write_scores(r, stem, table);
  r.summary = stem + ": " + std::to_string(table.size()) + " components, " + top_line(table);
  return r;
}

StageResult attr_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto p = load_pair(ctx);
  const auto a = ctx.anchor();
  const auto eval = eval_set(ctx, p.base, p.sft, p.halves, a.selection.spec);
  const auto table = cfg.mode == KnockoutMode::Param
                         ? weight_attr_sweep(p.base, param_delta(p.base, p.sft), a.selection.spec, eval, {}, ctx.threads())
                         : activation_attr_sweep(p.base, p.sft, a.selection.spec, eval, {}, ctx.threads());
  const std::string stem = "attr_" + std::string(knockout_mode_name(cfg.mode));
  ctx.write_scores(r, stem, table);
  r.summary = stem + ": " + std::to_string(table.size()) + " components, " + top_line(table);
  return r;
}

StageResult trace_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto a = ctx.anchor();
  const auto e_w = ctx.scores("wp_vec.json", "wp --metric vec");
  const auto e_a = ctx.scores("ap_vec.json", "ap --metric vec");
  const auto p = load_pair(ctx);
  const auto& spec = a.selection.spec;
  const auto eval = eval_set(ctx, p.base, p.sft, p.halves, spec);

  std::vector<ComponentId> aggregators;
  for (const auto& [c, s] : e_a.scores) {
    if (s > cfg.thresholds.tau_a) aggregators.push_back(c);
  }
  const auto links = link_strength(p.base, param_delta(p.base, p.sft), spec, eval, aggregators, {}, ctx.threads());

  const auto readout = readout_of(cfg.metric);
  const auto deval = downstream_eval(ctx, p, a, readout);
  const auto e_down = downstream_sweep(p.base, p.sft, deval, cfg.mode, {}, ctx.threads());
  const auto circuit = assemble_circuit(e_a, e_w, links, e_down, cfg.thresholds);

  const std::string variant = std::string(knockout_mode_name(cfg.mode)) + "_" + std::string(downstream_mode_name(readout));
  ctx.write(r, "circuit_" + variant + ".json", circuit_to_json(circuit, ctx.hash()));
  ctx.write_scores(r, "down_" + variant, e_down);

  std::string link_csv = "# config " + ctx.hash() + "\ntarget_kind,target_layer,target_index,kind,layer,index,score\n";
  for (const auto& [target, row] : links) {
    for (const auto& [c, s] : row.scores) {
      link_csv += std::string(kind_name(target.kind)) + ',' + std::to_string(target.layer) + ',' +
                  std::to_string(target.index) + ',' + std::string(kind_name(c.kind)) + ',' + std::to_string(c.layer) +
                  ',' + std::to_string(c.index) + ',' + fmt(s, "%.17g") + '\n';
    }
  }
  ctx.write(r, "links.csv", link_csv);

  const auto inputs = instructed_inputs(p.halves.evaluation);
  const std::size_t instruction[] = {0};
  std::string att = "# config " + ctx.hash() + "\nkind,layer,index,base_ratio,sft_ratio\n";
  for (const auto& c : enumerate_components(cfg.model)) {
    if (!c.is_head()) continue;
    const ComponentId head[] = {c};
    double rb = 0.0, rs = 0.0;
    for (const auto& x : inputs) {
      rb += attention_instruction_ratio(p.base, x, instruction, head);
      rs += attention_instruction_ratio(p.sft, x, instruction, head);
    }
    const auto n = static_cast<double>(inputs.size());
    att += "head," + std::to_string(c.layer) + ',' + std::to_string(c.index) + ',' + fmt(rb / n, "%.17g") + ',' +
           fmt(rs / n, "%.17g") + '\n';
  }
  ctx.write(r, "attention.csv", att);

  r.summary = "circuit: " + std::to_string(circuit.sources.size()) + " sources, " +
              std::to_string(circuit.aggregators.size()) + " aggregators, " + std::to_string(circuit.executors.size()) +
              " executors";
  return r;
}

StageResult merge_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const auto p = load_pair(ctx);
  const auto vocab = run_vocabulary(cfg);
  const auto hyper = run_pair_hyper(cfg);

  std::vector<TaskKind> tasks{cfg.task.kind};
  std::vector<ModelParams> experts{p.sft};
  std::vector<ScoreTable> scores{ctx.scores("wp_vec.json", "wp --metric vec")};
  for (std::size_t k = 0; k < cfg.merge_tasks.size(); ++k) {
    ToyTask task = cfg.task;
    task.kind = cfg.merge_tasks[k];
    TrainHyper h = hyper.specialize;
    h.seed = derive_seed(cfg.seed, kExpertStream + k);
    auto expert = specialize(p.base, vocab, task, h, run_scope(cfg), hyper.copy_fraction);
    const auto data = make_instruction_dataset(vocab, task, cfg.pairs, derive_seed(cfg.seed, kExpertDataStream + k));
    const auto halves = split_halves(data);
    const auto sel = choose_anchor(cfg, p.base, expert, halves);
    const auto eval = eval_set(ctx, p.base, expert, halves, sel.spec);
    auto table = wp_sweep(p.base, expert, sel.spec, eval, {}, ctx.threads());
    const std::string name(task_name(task.kind));
    ctx.write_model(r, "expert_" + name + ".wpck", expert, "expert");
    ctx.write_scores(r, "wp_vec_" + name, table);
    tasks.push_back(task.kind);
    experts.push_back(std::move(expert));
    scores.push_back(std::move(table));
  }

  const auto fused = fuse_models(p.base, experts, scores, ctx.threads());
  const auto uniform = uniform_average(p.base, experts);
  ctx.write_model(r, "fused.wpck", fused, "fused");
  ctx.write_model(r, "uniform.wpck", uniform, "uniform");

  std::vector<std::pair<std::string, const ModelParams*>> models{{"base", &p.base}};
  for (std::size_t k = 0; k < experts.size(); ++k) {
    models.emplace_back("expert_" + std::string(task_name(tasks[k])), &experts[k]);
  }
  models.emplace_back("fused", &fused);
  models.emplace_back("uniform", &uniform);

  json acc = json::object();
  std::string summary;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    ToyTask task = cfg.task;
    task.kind = tasks[k];
    const auto data =
        make_instruction_dataset(vocab, task, cfg.accuracy_examples, derive_seed(cfg.seed, kAccuracyStream + k));
    const std::string name(task_name(task.kind));
    for (const auto& [label, m] : models) acc[label][name] = task_accuracy(*m, data, ctx.threads());
    summary += (summary.empty() ? "" : "; ") + name + ": fused " + fmt(acc["fused"][name].get<double>()) +
               ", uniform " + fmt(acc["uniform"][name].get<double>());
  }
  json task_names = json::array();
  for (auto t : tasks) task_names.push_back(task_name(t));
  const json doc = {{"config_hash", ctx.hash()}, {"tasks", task_names}, {"accuracy", acc}};
  ctx.write(r, "merge.json", doc.dump(2) + "\n");
  r.summary = summary;
  return r;
}

// ---- report ------------------------------------------------------------------

std::vector<std::string> score_stems(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const char* stage : {"wp", "ap"}) {
    for (auto m : {AnchorMetric::Vec, AnchorMetric::Kl, AnchorMetric::Proj}) {
      out.push_back(std::string(stage) + "_" + std::string(anchor_metric_name(m)));
    }
  }
  out.push_back("attr_param");
  out.push_back("attr_activation");
  for (auto side : {KnockoutMode::Param, KnockoutMode::Activation}) {
    for (auto m : {DownstreamMode::Kl, DownstreamMode::Proj}) {
      out.push_back("down_" + std::string(knockout_mode_name(side)) + "_" + std::string(downstream_mode_name(m)));
    }
  }
  for (auto t : cfg.merge_tasks) out.push_back("wp_vec_" + std::string(task_name(t)));
  return out;
}

StageResult report_stage(const StageContext& ctx) {
  const auto& cfg = ctx.cfg();
  StageResult r;
  const json pair = ctx.document("pair.json", "train-pair");
  const auto a = ctx.anchor();
  const auto base = ctx.model("base.wpck", "train-pair");
  const auto sft = ctx.model("sft.wpck", "train-pair");

  json doc = {{"config_hash", ctx.hash()}};
  std::ostringstream md;
  md << "# wplab report\n\nconfig `" << ctx.hash() << "`, task `" << task_name(cfg.task.kind) << "`, seed " << cfg.seed
     << "\n\n## Pair\n\n| model | accuracy |\n|---|---|\n| base | " << fmt(pair.at("base_accuracy").get<double>())
     << " |\n| sft | " << fmt(pair.at("sft_accuracy").get<double>()) << " |\n";
  doc["pair"] = {{"base_accuracy", pair.at("base_accuracy")},
                 {"sft_accuracy", pair.at("sft_accuracy")},
                 {"converged", pair.at("converged")}};

  const auto& sel = a.selection;
  json layers = json::array();
  md << "\n## Anchor\n\nlayer " << sel.spec.layer << ", position " << sel.spec.rule.str() << ", mu_bar "
     << fmt(sel.spec.mu_bar) << "\n\n| layer | steered accuracy | correction rate |\n|---|---|---|\n";
  for (const auto& l : sel.layers) {
    layers.push_back({{"layer", l.layer}, {"steered_accuracy", l.steered_accuracy}, {"correction_rate", l.correction_rate}});
    md << "| " << l.layer << " | " << fmt(l.steered_accuracy) << " | " << fmt(l.correction_rate) << " |\n";
  }
  doc["anchor"] = {{"layer", sel.spec.layer}, {"mu_bar", sel.spec.mu_bar}, {"layers", layers},
                   {"no_recovery", sel.no_recovery}};

  const auto drift = drift_profile(base, param_delta(base, sft));
  json drift_rows = json::array();
  md << "\n## Parameter drift\n\n| layer | wq | wk | wv | wo | gate | up | down | attention | mlp |\n"
     << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& d : drift) {
    drift_rows.push_back({{"layer", d.layer}, {"relative", d.relative}, {"attention_mean", d.attention_mean()},
                          {"mlp_mean", d.mlp_mean()}});
    md << "| " << d.layer;
    for (double v : d.relative) md << " | " << fmt(v);
    md << " | " << fmt(d.attention_mean()) << " | " << fmt(d.mlp_mean()) << " |\n";
  }
  doc["drift"] = drift_rows;

  std::map<std::string, ScoreTable> tables;
  for (const auto& stem : score_stems(cfg)) {
    if (fs::exists(ctx.path(stem + ".json"))) tables[stem] = ctx.scores(stem + ".json", "");
  }
  const std::size_t k = cfg.topk;
  json tables_doc = json::object();
  if (!tables.empty()) md << "\n## Top-" << k << " components\n";
  for (const auto& [stem, t] : tables) {
    json top = json::array();
    md << "\n### " << stem << " (" << t.metric << ")\n\n| rank | component | score |\n|---|---|---|\n";
    std::size_t rank = 1;
    for (auto c : topk_screen(t, std::min(k, t.size()))) {
      top.push_back({{"component", c.str()}, {"score", t.at(c)}});
      md << "| " << rank++ << " | " << c.str() << " | " << fmt(t.at(c), "%.6f") << " |\n";
    }
    tables_doc[stem] = {{"metric", t.metric}, {"meta", t.meta}, {"top", top}};
  }
  doc["tables"] = tables_doc;

  json screening = json::array();
  const double universe = static_cast<double>(component_count(cfg.model));
  for (auto [exact, approx] : {std::pair{"wp_vec", "attr_param"}, std::pair{"ap_vec", "attr_activation"}}) {
    if (!tables.contains(exact) || !tables.contains(approx)) continue;
    const double ov = overlap_fraction(topk_screen(tables.at(exact), k), topk_screen(tables.at(approx), k));
    const double random = static_cast<double>(k) / universe;
    screening.push_back({{"exact", exact}, {"approx", approx}, {"k", k}, {"overlap", ov}, {"random", random}});
    if (screening.size() == 1) md << "\n## Screening overlap\n\n| exact | approximation | overlap | random |\n|---|---|---|---|\n";
    md << "| " << exact << " | " << approx << " | " << fmt(ov) << " | " << fmt(random) << " |\n";
  }
  doc["screening"] = screening;
  doc["topk"] = k;

  json circuits = json::object();
  for (auto side : {KnockoutMode::Param, KnockoutMode::Activation}) {
    for (auto m : {DownstreamMode::Kl, DownstreamMode::Proj}) {
      const std::string variant = std::string(knockout_mode_name(side)) + "_" + std::string(downstream_mode_name(m));
      const auto p = ctx.path("circuit_" + variant + ".json");
      if (!fs::exists(p)) continue;
      std::string found;
      const auto circuit = circuit_from_json(read_file(p), &found);
      ctx.check_hash(p, found);
      auto names = [](const std::set<ComponentId>& s) {
        std::vector<std::string> v;
        for (auto c : s) v.push_back(c.str());
        return v;
      };
      circuits[variant] = {{"sources", names(circuit.sources)},
                           {"aggregators", names(circuit.aggregators)},
                           {"executors", names(circuit.executors)},
                           {"links", circuit.links.size()}};
      md << "\n## Circuit (" << variant << ")\n\n| set | size | members |\n|---|---|---|\n";
      for (auto [label, set] : {std::pair{"sources", &circuit.sources}, std::pair{"aggregators", &circuit.aggregators},
                                std::pair{"executors", &circuit.executors}}) {
        std::string members;
        for (auto c : *set) members += (members.empty() ? "" : " ") + c.str();
        md << "| " << label << " | " << set->size() << " | " << members << " |\n";
      }
      md << "\nvalidated links: " << circuit.links.size() << "\n";
    }
  }
  doc["circuits"] = circuits;

  if (fs::exists(ctx.path("merge.json"))) {
    const json merge = ctx.document("merge.json", "merge");
    doc["merge"] = merge.at("accuracy");
    md << "\n## Merge\n\n| model |";
    for (const auto& t : merge.at("tasks")) md << ' ' << t.get<std::string>() << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < merge.at("tasks").size(); ++i) md << "---|";
    md << '\n';
    for (const auto& [label, row] : merge.at("accuracy").items()) {
      md << "| " << label << " |";
      for (const auto& t : merge.at("tasks")) md << ' ' << fmt(row.at(t.get<std::string>()).get<double>()) << " |";
      md << '\n';
    }
  }

  ctx.write(r, "report.json", doc.dump(2) + "\n");
  ctx.write(r, "report.md", md.str());
  r.summary = "report: " + std::to_string(tables.size()) + " score tables";
  return r;
}

}  // namespace

StageResult run_stage(Stage stage, const RunConfig& config) {
  const StageContext ctx(stage, config);
  StageResult r;
  switch (stage) {
    case Stage::TrainPair: r = train_pair_stage(ctx); break;
    case Stage::ExtractAnchor: r = extract_anchor_stage(ctx); break;
    case Stage::Wp:
    case Stage::Ap: r = sweep_stage(ctx, stage); break;
    case Stage::Attr: r = attr_stage(ctx); break;
    case Stage::Trace: r = trace_stage(ctx); break;
    case Stage::Merge: r = merge_stage(ctx); break;
    case Stage::Report: r = report_stage(ctx); break;
  }
  r.stage = stage;
  return r;
}

std::vector<StageResult> run_pipeline(const RunConfig& config,
                                      const std::function<void(const StageResult&)>& on_stage) {
  RunConfig vec = config;
  vec.metric = AnchorMetric::Vec;
  std::vector<StageResult> out;
  auto run = [&](Stage stage, const RunConfig& c) {
    out.push_back(run_stage(stage, c));
    if (on_stage) on_stage(out.back());
  };
  for (auto stage : kStages) {
    const bool sweep = stage == Stage::Wp || stage == Stage::Ap;
    run(stage, sweep ? vec : config);
    if (sweep && config.metric != AnchorMetric::Vec) run(stage, config);
  }
  return out;
}

}  // namespace wplab
