// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "saeinterp/activation_store.hpp"
#include "saeinterp/autointerp.hpp"
#include "saeinterp/checkpoint.hpp"
#include "saeinterp/errors.hpp"
#include "saeinterp/prompts.hpp"
#include "saeinterp/rng.hpp"

namespace saeinterp {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig::PipelineConfig()
    : template_path(fs::path(SAEINTERP_DATA_DIR) / "templates" / "findings_generation.json"),
      prompts_dir(PromptLibrary::default_dir()) {}

// ---------------------------------------------------------------------------
// Configuration

json interpolate_env(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& [k, v] : j.items()) out[k] = interpolate_env(v);
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& v : j) out.push_back(interpolate_env(v));
    return out;
  }
  if (!j.is_string()) return j;
  const auto& s = j.get_ref<const std::string&>();
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    if (s.compare(i, 2, "${") == 0) {
      const auto close = s.find('}', i + 2);
      if (close == std::string::npos) throw ConfigError("unterminated ${ in config value '" + s + "'");
      const auto name = s.substr(i + 2, close - i - 2);
      const char* value = std::getenv(name.c_str());
      if (!value) throw ConfigError("config references unset environment variable " + name);
      out += value;
      i = close + 1;
    } else {
      out += s[i++];
    }
  }
  return out;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename Fn>
void for_keys(const json& j, const std::string& where, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (!fn(key, v)) throw ConfigError("unknown key '" + key + "' in " + where);
    } catch (const json::exception& e) {
      throw ConfigError(where + "." + key + ": " + e.what());
    }
  }
}

PlantedDictionaryConfig planted_from_json(const json& j) {
  PlantedDictionaryConfig c;
  for_keys(j, "planted", [&](const std::string& k, const json& v) {
    if (k == "n") c.n = v.get<std::size_t>();
    else if (k == "atoms") c.atoms = v.get<std::size_t>();
    else if (k == "k") c.k = v.get<std::uint32_t>();
    else if (k == "value_lo") c.value_lo = v.get<double>();
    else if (k == "value_hi") c.value_hi = v.get<double>();
    else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
    else if (k == "rows") c.rows = v.get<std::uint64_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
  return c;
}

json to_json(const PlantedDictionaryConfig& c) {
  return json{{"n", c.n},         {"atoms", c.atoms},           {"k", c.k},
              {"value_lo", c.value_lo}, {"value_hi", c.value_hi}, {"noise_sigma", c.noise_sigma},
              {"rows", c.rows},   {"seed", c.seed}};
}

AutointerpConfig autointerp_from_json(const json& j) {
  AutointerpConfig c;
  for_keys(j, "autointerp", [&](const std::string& k, const json& v) {
    if (k == "pool_size") c.pool_size = v.get<std::size_t>();
    else if (k == "continuation_chars") c.continuation_chars = v.get<std::size_t>();
    else if (k == "per_side") c.per_side = v.get<std::size_t>();
    else if (k == "max_scoring_positives") c.max_scoring_positives = v.get<std::size_t>();
    else if (k == "scoring_total") c.scoring_total = v.get<std::size_t>();
    else if (k == "chunk_rows") c.chunk_rows = v.get<std::size_t>();
    else if (k == "image_literal") c.image_literal = v.get<std::string>();
    else if (k == "features") c.features = v.is_null() ? std::nullopt : std::optional(v.get<std::vector<std::uint32_t>>());
    else return false;
    return true;
  });
  if (c.pool_size == 0 || c.per_side == 0 || c.chunk_rows == 0) throw ConfigError("autointerp sizes must be positive");
  if (c.max_scoring_positives > c.scoring_total) throw ConfigError("max_scoring_positives exceeds scoring_total");
  return c;
}

json to_json(const AutointerpConfig& c) {
  return json{{"pool_size", c.pool_size},
              {"continuation_chars", c.continuation_chars},
              {"per_side", c.per_side},
              {"max_scoring_positives", c.max_scoring_positives},
              {"scoring_total", c.scoring_total},
              {"chunk_rows", c.chunk_rows},
              {"image_literal", c.image_literal},
              {"features", c.features ? json(*c.features) : json(nullptr)}};
}

GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig c;
  for_keys(j, "generator", [&](const std::string& k, const json& v) {
    if (k == "backend") c.backend = v.get<std::string>();
    else if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "max_new_tokens") c.max_new_tokens = v.get<std::size_t>();
    else return false;
    return true;
  });
  if (c.backend != "toy-linear") throw ConfigError("unsupported generator backend '" + c.backend + "' (have: toy-linear)");
  return c;
}

json to_json(const GeneratorConfig& c) {
  return json{{"backend", c.backend}, {"vocab_size", c.vocab_size}, {"seed", c.seed}, {"max_new_tokens", c.max_new_tokens}};
}

std::vector<SteeringSpec> specs_from_json(const json& j, const std::string& target) {
  std::vector<SteeringSpec> out;
  for (const auto& e : j) {
    SteeringSpec s;
    s.feature_id = e.at("id").get<std::uint32_t>();
    s.steer_alpha = e.at("alpha").get<double>();
    s.target = e.value("target", target);
    if (!std::isfinite(s.steer_alpha) || s.steer_alpha == 0.0) throw ConfigError("steering alpha must be finite and nonzero");
    out.push_back(s);
  }
  return out;
}

json specs_json(const std::vector<SteeringSpec>& specs) {
  json out = json::array();
  for (const auto& s : specs) out.push_back({{"id", s.feature_id}, {"alpha", s.steer_alpha}});
  return out;
}

void apply_steering_json(PipelineConfig& cfg, const json& j, const fs::path& base);

void apply_manifest(PipelineConfig& cfg, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open steering manifest " + path.string());
  json j;
  try {
    j = interpolate_env(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("steering manifest " + path.string() + ": " + e.what());
  }
  apply_steering_json(cfg, j, path.parent_path());
}

void apply_steering_json(PipelineConfig& cfg, const json& j, const fs::path& base) {
  auto& c = cfg.steering;
  json features;
  for_keys(j, "steering", [&](const std::string& k, const json& v) {
    if (k == "manifest") apply_manifest(cfg, resolve(base, v.get<std::string>()));
    else if (k == "features") features = v;
    else if (k == "selection") c.selection = feature_selection_from_json(v);
    else if (k == "alphas") c.alphas = v.get<std::vector<double>>();
    else if (k == "prompts") {
      c.prompts.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i].is_string()) c.prompts.push_back({"p" + std::to_string(i), v[i].get<std::string>()});
        else c.prompts.push_back({v[i].at("id").get<std::string>(), v[i].at("text").get<std::string>()});
      }
    } else if (k == "prompt_count") c.prompt_count = v.get<std::size_t>();
    else if (k == "prompt_length") c.prompt_length = v.get<std::size_t>();
    else if (k == "target") c.target = v.get<std::string>();
    else if (k == "generator") c.generator = generator_from_json(v);
    else if (k == "checkpoint") cfg.checkpoint = resolve(base, v.get<std::string>());
    else if (k == "judge") cfg.llm = llm_config_from_json(v, cfg.llm);
    else return false;
    return true;
  });
  if (!features.is_null()) c.features = specs_from_json(features, c.target);
  for (const double a : c.alphas)
    if (!std::isfinite(a) || a == 0.0) throw ConfigError("steering alphas must be finite and nonzero");
}

EvaluateConfig evaluate_from_json(const json& j) {
  EvaluateConfig c;
  for_keys(j, "evaluate", [&](const std::string& k, const json& v) {
    if (k == "threshold") c.threshold = v.get<double>();
    else if (k == "n_permutations") c.n_permutations = v.get<std::size_t>();
    else return false;
    return true;
  });
  return c;
}

SynthConfig synth_from_json(const json& j) {
  SynthConfig c;
  for_keys(j, "synth", [&](const std::string& k, const json& v) {
    if (k == "sequences") c.sequences = v.get<std::size_t>();
    else if (k == "n") c.n = v.get<std::size_t>();
    else if (k == "atoms") c.atoms = v.get<std::size_t>();
    else if (k == "atoms_per_word") c.atoms_per_word = v.get<std::size_t>();
    else if (k == "words_min") c.words_min = v.get<std::size_t>();
    else if (k == "words_max") c.words_max = v.get<std::size_t>();
    else if (k == "image_tokens") c.image_tokens = v.get<std::size_t>();
    else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
    else if (k == "sequences_per_shard") c.sequences_per_shard = v.get<std::size_t>();
    else return false;
    return true;
  });
  if (c.n == 0 || c.atoms == 0 || c.atoms_per_word == 0 || c.atoms_per_word > c.atoms || c.words_min == 0 ||
      c.words_max < c.words_min || c.sequences_per_shard == 0) {
    throw ConfigError("synth settings out of range");
  }
  return c;
}

json to_json(const SynthConfig& c) {
  return json{{"sequences", c.sequences},         {"n", c.n},
              {"atoms", c.atoms},                 {"atoms_per_word", c.atoms_per_word},
              {"words_min", c.words_min},         {"words_max", c.words_max},
              {"image_tokens", c.image_tokens},   {"noise_sigma", c.noise_sigma},
              {"sequences_per_shard", c.sequences_per_shard}};
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& raw, const fs::path& base_dir) {
  const json j = interpolate_env(raw);
  PipelineConfig cfg;
  bool train_has_seed = false;
  for_keys(j, "config", [&](const std::string& k, const json& v) {
    if (k == "out_dir") cfg.out_dir = resolve(base_dir, v.get<std::string>());
    else if (k == "raw_dir") cfg.raw_dir = resolve(base_dir, v.get<std::string>());
    else if (k == "shards_dir") cfg.shards_dir = resolve(base_dir, v.get<std::string>());
    else if (k == "checkpoint") cfg.checkpoint = resolve(base_dir, v.get<std::string>());
    else if (k == "template") cfg.template_path = resolve(base_dir, v.get<std::string>());
    else if (k == "prompts_dir") cfg.prompts_dir = resolve(base_dir, v.get<std::string>());
    else if (k == "mock_llm") cfg.mock_llm = resolve(base_dir, v.get<std::string>());
    else if (k == "seed") cfg.seed = v.get<std::uint64_t>();
    else if (k == "train") {
      cfg.train = train_config_from_json(v);
      train_has_seed = v.contains("seed");
    } else if (k == "planted") cfg.planted = planted_from_json(v);
    else if (k == "autointerp") cfg.autointerp = autointerp_from_json(v);
    else if (k == "llm") cfg.llm = llm_config_from_json(v, cfg.llm);
    else if (k == "steering") apply_steering_json(cfg, v, base_dir);
    else if (k == "evaluate") cfg.evaluate = evaluate_from_json(v);
    else if (k == "synth") cfg.synth = synth_from_json(v);
    else return false;
    return true;
  });
  if (!train_has_seed) cfg.train.seed = cfg.seed;
  cfg.train.validate();  // fail at load time, not after filtering
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j, path.parent_path());
}

json to_json(const PipelineConfig& cfg) {
  json j;
  j["out_dir"] = cfg.out_dir.string();
  j["raw_dir"] = cfg.raw().string();
  j["shards_dir"] = cfg.shards().string();
  j["checkpoint"] = cfg.checkpoint_path().string();
  j["template"] = cfg.template_path.string();
  j["prompts_dir"] = cfg.prompts_dir.string();
  j["mock_llm"] = cfg.mock_llm ? json(cfg.mock_llm->string()) : json(nullptr);
  j["seed"] = cfg.seed;
  j["train"] = to_json(cfg.train);
  j["planted"] = cfg.planted ? to_json(*cfg.planted) : json(nullptr);
  j["autointerp"] = to_json(cfg.autointerp);
  j["llm"] = to_json(cfg.llm);
  const auto& s = cfg.steering;
  json prompts = json::array();
  for (const auto& p : s.prompts) prompts.push_back({{"id", p.id}, {"text", p.text}});
  j["steering"] = {{"features", specs_json(s.features)},
                   {"selection", to_json(s.selection)},
                   {"alphas", s.alphas},
                   {"prompts", prompts},
                   {"prompt_count", s.prompt_count},
                   {"prompt_length", s.prompt_length},
                   {"target", s.target},
                   {"generator", to_json(s.generator)}};
  j["evaluate"] = {{"threshold", cfg.evaluate.threshold}, {"n_permutations", cfg.evaluate.n_permutations}};
  j["synth"] = to_json(cfg.synth);
  return j;
}

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return rows;
}

std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  return out;
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::shared_ptr<ChatTransport> make_transport(const PipelineConfig& cfg) {
  if (cfg.mock_llm) return MockTransport::load(*cfg.mock_llm);
  return std::make_shared<HttpTransport>(cfg.llm);
}

LlmClient make_client(const PipelineConfig& cfg) { return LlmClient(make_transport(cfg), cfg.llm); }

const TemplateSegment& segment(const FilterTemplate& tmpl, const std::string& name) {
  for (const auto& s : tmpl.fixed_segments)
    if (s.name == name) return s;
  throw ConfigError("template '" + tmpl.name + "' has no segment '" + name + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// synth

void cmd_synth(const PipelineConfig& cfg) {
  static const std::vector<std::string> kWords{
      "_No",      "_pleural", "_effusion", "_or",     "_pneumothorax", "_heart",  "_size",   "_is",
      "_normal",  "_lungs",   "_are",      "_clear",  "_small",        "_left",   "_right",  "_basilar",
      "_opacity", "_atelect", "asis",      "_stable", "_tube",         "_line",   "_tip",    "_mild",
      "_cardiomegaly", "_unchanged", "_consolidation", "."};
  const auto& s = cfg.synth;
  const auto tmpl = FilterTemplate::load(cfg.template_path);
  std::vector<std::string> prefix;
  for (const auto* name : {"bos", "system-prompt", "user-delimiter"}) {
    const auto& seg = segment(tmpl, name).tokens;
    prefix.insert(prefix.end(), seg.begin(), seg.end());
  }
  const std::string image = tmpl.image_token_literals.empty() ? "<image>" : *tmpl.image_token_literals.begin();
  for (std::size_t i = 0; i < s.image_tokens; ++i) prefix.push_back(image);
  for (const auto* name : {"instruction-describe", "assistant-delimiter"}) {
    const auto& seg = segment(tmpl, name).tokens;
    prefix.insert(prefix.end(), seg.begin(), seg.end());
  }
  const auto eos = segment(tmpl, "eos").tokens;

  const ColMatrix dict = random_unit_dictionary(s.n, s.atoms, derive_seed(cfg.seed, 1));
  // Word w (and the shared boilerplate / image "words") draw a fixed atom set.
  const auto word_atoms = [&](std::size_t w) {
    Rng rng(derive_seed(cfg.seed, 1000 + w));
    std::vector<std::size_t> all(s.atoms);
    std::iota(all.begin(), all.end(), 0);
    return sample_without_replacement(all, s.atoms_per_word, rng);
  };
  std::vector<std::vector<std::size_t>> atoms;
  for (std::size_t w = 0; w < kWords.size() + 2; ++w) atoms.push_back(word_atoms(w));
  const std::size_t boiler = kWords.size(), img = kWords.size() + 1;

  Rng rng(derive_seed(cfg.seed, 2));
  NormalSampler normal;
  const fs::path dir = cfg.raw();
  fs::create_directories(dir);
  for (std::size_t shard = 0, seq = 0; seq < s.sequences; ++shard) {
    std::vector<Vector> rows;
    std::string lines;
    for (std::size_t i = 0; i < s.sequences_per_shard && seq < s.sequences; ++i, ++seq) {
      std::vector<std::string> tokens = prefix;
      std::vector<std::size_t> kinds(prefix.size(), boiler);
      for (std::size_t t = 0; t < prefix.size(); ++t)
        if (prefix[t] == image) kinds[t] = img;
      const auto assistant_start = tokens.size();
      const auto len = s.words_min + uniform_index(rng, s.words_max - s.words_min + 1);
      for (std::uint64_t w = 0; w < len; ++w) {
        const auto word = uniform_index(rng, kWords.size());
        tokens.push_back(kWords[word]);
        kinds.push_back(word);
      }
      tokens.insert(tokens.end(), eos.begin(), eos.end());
      kinds.resize(tokens.size(), boiler);
      for (const auto kind : kinds) {
        Vector x = Vector::Zero(static_cast<Eigen::Index>(s.n));
        for (const auto a : atoms[kind]) x += uniform_real(rng, 0.5, 1.5) * dict.col(static_cast<Eigen::Index>(a));
        for (auto& v : x) v += s.noise_sigma * normal(rng);
        rows.push_back(x);
      }
      char id[32];
      std::snprintf(id, sizeof id, "syn%06zu", seq);
      lines += json{{"sequence_id", id}, {"tokens", tokens}, {"assistant_start", assistant_start}}.dump() + "\n";
    }
    RowMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(s.n));
    for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
    char name[32];
    std::snprintf(name, sizeof name, "raw%04zu", shard);
    write_shard_rows(dir / (std::string(name) + ".sae"), m);
    write_file_atomic(dir / (std::string(name) + ".tokens.jsonl"), lines);
  }
  spdlog::info("synth: wrote {} sequences to {}", s.sequences, dir.string());
}

// ---------------------------------------------------------------------------
// filter

FilterReport cmd_filter(const PipelineConfig& cfg) {
  const fs::path in_dir = cfg.raw();
  if (!fs::is_directory(in_dir)) throw DataError("raw dump directory " + in_dir.string() + " does not exist");
  std::vector<fs::path> raw;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".sae") raw.push_back(e.path());
  std::sort(raw.begin(), raw.end());
  if (raw.empty()) throw DataError("no raw activation dumps (*.sae) in " + in_dir.string());
  const auto tmpl = FilterTemplate::load(cfg.template_path);

  FilterReport report;
  const fs::path out_dir = cfg.shards();
  fs::create_directories(out_dir);
  for (const auto& path : raw) {
    const RowMatrix rows = read_shard_rows(path);
    auto tokens_path = path;
    tokens_path.replace_extension(".tokens.jsonl");
    std::vector<std::uint64_t> keep;
    std::vector<TokenRecord> records;
    std::uint64_t offset = 0;
    for (const auto& line : read_jsonl(tokens_path)) {
      const auto seq = token_sequence_from_json(line);
      if (offset + seq.tokens.size() > static_cast<std::uint64_t>(rows.rows())) {
        throw DataError(tokens_path.string() + " lists more tokens than " + path.string() + " has rows");
      }
      auto res = filter_tokens(seq, tmpl);
      for (const auto k : res.kept) keep.push_back(offset + k);
      records.insert(records.end(), std::make_move_iterator(res.records.begin()), std::make_move_iterator(res.records.end()));
      offset += seq.tokens.size();
      ++report.sequences;
    }
    if (offset != static_cast<std::uint64_t>(rows.rows())) {
      throw DataError(path.string() + " has " + std::to_string(rows.rows()) + " rows but its token file lists " +
                      std::to_string(offset));
    }
    RowMatrix kept(static_cast<Eigen::Index>(keep.size()), rows.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) kept.row(static_cast<Eigen::Index>(i)) = rows.row(static_cast<Eigen::Index>(keep[i]));
    write_shard(out_dir / path.filename(), kept, records);
    report.tokens_in += offset;
    report.tokens_kept += keep.size();
    ++report.shards;
  }
  write_json(cfg.out("filter_report.json"), json{{"shards", report.shards},
                                                 {"sequences", report.sequences},
                                                 {"tokens_in", report.tokens_in},
                                                 {"tokens_kept", report.tokens_kept},
                                                 {"tokens_dropped", report.tokens_in - report.tokens_kept}});
  return report;
}

// ---------------------------------------------------------------------------
// train

TrainReport cmd_train(const PipelineConfig& cfg) {
  cfg.train.validate();
  TrainOptions opts;
  opts.metrics_path = cfg.out("metrics.jsonl");
  opts.checkpoint_path = cfg.checkpoint_path();
  fs::create_directories(cfg.out_dir);

  TrainReport report;
  TrainResult result;
  std::optional<double> recovery;
  if (cfg.planted) {
    PlantedDictionarySource source(*cfg.planted);
    result = train(cfg.train, source, opts);
    recovery = mean_max_cosine(source.dictionary(), result.params.w_dec);
  } else {
    const auto store = ActivationStore::open(cfg.shards());
    ShardSource source(store, cfg.train.shuffle_shards, cfg.train.seed);
    result = train(cfg.train, source, opts);
  }
  report.steps = result.steps;
  report.norm_factor = result.norm_factor;
  report.final_loss = result.metrics.empty() ? 0.0 : result.metrics.back().total_loss;
  report.dead = result.tracker.dead_count(cfg.train.dead_tokens_threshold);
  report.recovery = recovery;

  const auto& p = result.params;
  json summary{{"steps", result.steps},
               {"norm_factor", result.norm_factor},
               {"lr", result.lr},
               {"n", p.input_dim()},
               {"m", p.dict_size()},
               {"k", p.k},
               {"arch", to_string(p.arch)},
               {"prefixes", p.prefixes},
               {"inference_threshold", p.inference_threshold},
               {"dead_features", report.dead},
               {"final", result.metrics.empty() ? json(nullptr) : to_json(result.metrics.back())},
               {"config", to_json(cfg.train)}};
  if (recovery) summary["recovery_mean_max_cosine"] = *recovery;
  write_json(cfg.out("train_summary.json"), summary);
  return report;
}

// ---------------------------------------------------------------------------
// autointerp stages

namespace {

struct IndexContext {
  ActivationStore store;
  SaeParams params;
  FeatureActivationIndex index;
  std::vector<std::uint32_t> features;
  InterpretOptions opts;
};

double load_norm_factor(const PipelineConfig& cfg) {
  const auto path = cfg.out("train_summary.json");
  if (!fs::exists(path)) throw DataError("missing " + path.string() + " (run `train` first)");
  return read_json_file(path).at("norm_factor").get<double>();
}

IndexContext build_index(const PipelineConfig& cfg) {
  IndexContext ctx{ActivationStore::open(cfg.shards()), load_checkpoint(cfg.checkpoint_path()), {}, {}, {}};
  const auto& a = cfg.autointerp;
  const auto count = static_cast<std::size_t>(std::min<std::uint64_t>(a.pool_size, ctx.store.row_count()));
  std::vector<std::uint64_t> pool;
  for (const auto& s : sample_rows(ctx.store, count, cfg.seed)) pool.push_back(s.row);
  ctx.index = FeatureActivationIndex::build(ctx.params, ctx.store, std::move(pool), load_norm_factor(cfg), a.chunk_rows);
  const auto m = static_cast<std::uint32_t>(ctx.params.dict_size());
  if (a.features) {
    ctx.features = *a.features;
    for (const auto f : ctx.features)
      if (f >= m) throw ConfigError("autointerp feature " + std::to_string(f) + " out of range (m = " + std::to_string(m) + ")");
  } else {
    ctx.features.resize(m);
    std::iota(ctx.features.begin(), ctx.features.end(), 0u);
  }
  ctx.opts.per_side = a.per_side;
  ctx.opts.max_scoring_positives = a.max_scoring_positives;
  ctx.opts.scoring_total = a.scoring_total;
  ctx.opts.exemplar.continuation_chars = a.continuation_chars;
  ctx.opts.exemplar.image_literal = a.image_literal;
  return ctx;
}

std::vector<FeatureInterpretation> read_interpretations(const fs::path& path) {
  std::vector<FeatureInterpretation> out;
  for (const auto& j : read_jsonl(path)) out.push_back(feature_interpretation_from_json(j));
  return out;
}

std::vector<json> interpretation_rows(const std::vector<FeatureInterpretation>& items) {
  std::vector<json> rows;
  for (const auto& f : items) rows.push_back(to_json(f));
  return rows;
}

}  // namespace

InterpretReport cmd_interpret(const PipelineConfig& cfg) {
  const auto ctx = build_index(cfg);
  const auto lib = PromptLibrary::load(cfg.prompts_dir);
  const auto client = make_client(cfg);
  std::vector<FeatureInterpretation> items(ctx.features.size());
  parallel_for(items.size(), cfg.llm.max_in_flight, [&](std::size_t i) {
    items[i] = explain_feature(ctx.index, ctx.store, client, lib, ctx.features[i], cfg.seed, ctx.opts);
  });
  InterpretReport report;
  report.features = items.size();
  for (const auto& f : items) {
    if (f.status == InterpretationStatus::Ok) ++report.explained;
    else if (f.status == InterpretationStatus::NoPositives) ++report.no_positives;
    else ++report.failed;
  }
  if (report.failed) spdlog::warn("interpret: {} of {} features failed", report.failed, report.features);
  write_file_atomic(cfg.out("explanations.jsonl"), to_jsonl(interpretation_rows(items)));
  return report;
}

ScoreReport cmd_score(const PipelineConfig& cfg) {
  const auto path = cfg.out("explanations.jsonl");
  if (!fs::exists(path)) throw DataError("missing " + path.string() + " (run `interpret` first)");
  auto items = read_interpretations(path);
  const auto ctx = build_index(cfg);
  const auto lib = PromptLibrary::load(cfg.prompts_dir);
  const auto client = make_client(cfg);
  ScoreReport report;
  for (auto& f : items) {
    if (f.feature_id >= ctx.index.feature_count()) throw DataError("explanation for unknown feature " + std::to_string(f.feature_id));
    score_feature(ctx.index, ctx.store, client, lib, f, cfg.seed, ctx.opts);
    if (f.status == InterpretationStatus::Failed) ++report.failed;
    if (f.status == InterpretationStatus::Unscoreable) ++report.unscoreable;
  }
  report.summary = summarize_interpretability(items);
  if (report.failed) spdlog::warn("score: {} features failed", report.failed);
  write_file_atomic(cfg.out("interpretations.jsonl"), to_jsonl(interpretation_rows(items)));
  auto summary = to_json(report.summary);
  summary["failed"] = report.failed;
  summary["unscoreable"] = report.unscoreable;
  write_json(cfg.out("interpretability_summary.json"), summary);
  return report;
}

std::vector<FeatureStats> cmd_stats(const PipelineConfig& cfg) {
  const auto ctx = build_index(cfg);
  auto stats = feature_stats(ctx.index);
  json features = json::array();
  for (const auto& s : stats) features.push_back(to_json(s));
  write_json(cfg.out("feature_stats.json"), json{{"pool_rows", ctx.index.pool().size()}, {"features", features}});
  write_file_atomic(cfg.out("density_histogram.csv"), density_histogram_csv(density_histogram(stats)));
  return stats;
}

// ---------------------------------------------------------------------------
// steering

namespace {

std::vector<FeatureStats> read_feature_stats(const fs::path& path) {
  std::vector<FeatureStats> out;
  const auto doc = read_json_file(path);
  for (const auto& j : doc.at("features")) {
    out.push_back({j.at("feature_id"), j.at("active_rows"), j.at("density"), j.at("max_activation"), j.at("deciles")});
  }
  return out;
}

std::map<std::uint32_t, std::string> read_concepts(const PipelineConfig& cfg) {
  auto path = cfg.out("interpretations.jsonl");
  if (!fs::exists(path)) path = cfg.out("explanations.jsonl");
  if (!fs::exists(path)) throw DataError("no explanations in " + cfg.out_dir.string() + " (run `interpret` first)");
  std::map<std::uint32_t, std::string> out;
  for (const auto& f : read_interpretations(path))
    if (!f.explanation.empty()) out[f.feature_id] = f.explanation;
  return out;
}

}  // namespace

SteerReport cmd_steer(const PipelineConfig& cfg) {
  const auto params = load_checkpoint(cfg.checkpoint_path());
  const auto& s = cfg.steering;
  const auto gen = ToyLinearGenerator::random(s.generator.vocab_size, params.input_dim(), s.generator.seed,
                                              s.generator.max_new_tokens);
  std::vector<SteeringSpec> specs = s.features;
  if (specs.empty()) {
    const auto interp_path = cfg.out("interpretations.jsonl");
    if (!fs::exists(interp_path)) throw DataError("no steering features configured and " + interp_path.string() + " is missing");
    const auto stats_path = cfg.out("feature_stats.json");
    std::optional<std::vector<FeatureStats>> stats;
    if (fs::exists(stats_path)) stats = read_feature_stats(stats_path);
    const auto ids = select_steering_features(read_interpretations(interp_path), stats ? &*stats : nullptr, s.selection);
    for (const auto id : ids)
      for (const double a : s.alphas) specs.push_back({id, a, s.target});
  }
  auto prompts = s.prompts;
  if (prompts.empty()) {
    Rng rng(derive_seed(cfg.seed, 3));
    for (std::size_t p = 0; p < s.prompt_count; ++p) {
      std::string text;
      for (std::size_t w = 0; w < std::max<std::size_t>(1, s.prompt_length); ++w) {
        text += (w ? " " : "") + gen.vocab()[2 + uniform_index(rng, gen.vocab().size() - 2)];
      }
      prompts.push_back({"p" + std::to_string(p), text});
    }
  }
  const auto gens = generate_steered(gen, params, specs, prompts);

  json judge = to_json(cfg.llm);
  judge["mock"] = cfg.mock_llm.has_value();
  // Relative to the output directory, so relocated runs produce the same bytes.
  const auto ckpt = cfg.checkpoint_path().lexically_proximate(cfg.out_dir).generic_string();
  write_json(cfg.out("steering_manifest.json"), json{{"checkpoint", ckpt},
                                                     {"features", specs_json(specs)},
                                                     {"target", s.target},
                                                     {"generator", to_json(s.generator)},
                                                     {"judge", judge}});
  std::vector<json> rows;
  SteerReport report;
  std::set<std::uint32_t> features;
  for (const auto& g : gens) {
    rows.push_back(to_json(g));
    features.insert(g.feature_id);
    report.unchanged += g.original_text == g.steered_text;
  }
  report.features = features.size();
  report.generations = gens.size();
  write_file_atomic(cfg.out("steering_generations.jsonl"), to_jsonl(rows));
  return report;
}

EvaluateReport cmd_evaluate(const PipelineConfig& cfg, const std::optional<fs::path>& generations) {
  const auto path = generations.value_or(cfg.out("steering_generations.jsonl"));
  if (!fs::exists(path)) throw DataError("missing " + path.string() + " (run `steer` first)");
  std::vector<SteeringGeneration> gens;
  for (const auto& j : read_jsonl(path)) gens.push_back(steering_generation_from_json(j));
  const auto concepts = read_concepts(cfg);
  const auto lib = PromptLibrary::load(cfg.prompts_dir);
  const auto client = make_client(cfg);
  const auto outcomes = judge_generations(client, lib, gens, concepts, cfg.evaluate.threshold);

  std::vector<json> rows;
  for (const auto& o : outcomes) rows.push_back(to_json(o));
  write_file_atomic(cfg.out("steering_outcomes.jsonl"), to_jsonl(rows));
  write_json(cfg.out("stratification.json"), stratification_json(outcomes));
  const auto by_feature = stratify_by_feature(outcomes);
  write_file_atomic(cfg.out("stratification.csv"), stratification_csv(by_feature));

  std::map<std::uint32_t, double> density;
  if (const auto stats_path = cfg.out("feature_stats.json"); fs::exists(stats_path)) {
    for (const auto& st : read_feature_stats(stats_path)) density[st.feature_id] = st.density;
  }
  write_json(cfg.out("correlations.json"), steering_correlations(by_feature, density, cfg.steering.selection.manual_add,
                                                                 cfg.evaluate.n_permutations, cfg.seed));
  EvaluateReport report;
  report.overall = stratify(outcomes);
  if (report.overall.judge_failed) spdlog::warn("evaluate: {} judgements failed", report.overall.judge_failed);
  return report;
}

void record_run(const PipelineConfig& cfg, const std::string& command, const std::vector<std::string>& argv,
                const std::string& started_at, const std::string& finished_at, int exit_code) {
  const auto path = cfg.out("run_manifest.json");
  json manifest{{"runs", json::array()}};
  if (fs::exists(path)) {
    try {
      manifest = read_json_file(path);
    } catch (const Error&) {
      spdlog::warn("run manifest {} is unreadable; starting a new one", path.string());
    }
    if (!manifest.contains("runs") || !manifest["runs"].is_array()) manifest = json{{"runs", json::array()}};
  }
  manifest["runs"].push_back({{"command", command},
                              {"argv", argv},
                              {"started_at", started_at},
                              {"finished_at", finished_at},
                              {"exit_code", exit_code},
                              {"config", to_json(cfg)}});
  write_json(path, manifest);
}

}  // namespace saeinterp
