#pragma once

// Run configuration: one JSON document with `connector`, `data` and `stage`
// sections plus `seed` and `output_dir`. Unknown keys are rejected; the
// effective configuration written next to every run has every field filled.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "sfslots/rng.hpp"
#include "sfslots/training.hpp"

namespace sfsl {

struct RunConfig {
  SFSlotsConfig connector;
  DataConfig data;
  StageConfig stage;
  std::uint64_t seed = 0;
  std::string output_dir = "run";

  void sync_data_grid() {
    data.ranges.height = connector.height;
    data.ranges.width = connector.width;
    data.ranges.feature_dim = connector.feature_dim;
  }

  void validate() const {
    connector.validate();
    data.validate();
    stage.validate();
    if (data.ranges.frames > connector.max_frames)
      throw ConfigError("data.frames exceeds connector.max_frames");
    if (connector.slow_frames > data.ranges.frames)
      throw ConfigError("connector.slow_frames exceeds data.frames");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }
};

namespace detail {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("'" + name_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string where = name_.empty() ? key : name_ + "." + key;
    if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(where + " must be a string");
      field = it->template get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(where + " must be a number");
      field = it->template get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer() || (it->is_number_integer() && !it->is_number_unsigned() && it->template get<std::int64_t>() < 0))
        throw ConfigError(where + " must be a non-negative integer");
      field = static_cast<T>(it->template get<std::uint64_t>());
    }
  }

  template <class E>
  void read_enum(const char* key, E& field, E (*parse)(const std::string&)) {
    std::string s;
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) throw ConfigError(name_ + "." + key + " must be a string");
    field = parse(it->template get<std::string>());
  }

  void skip(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

// `stage` is fixed by the command being run; the stage-specific defaults are
// applied before the document is overlaid.
inline RunConfig parse_run_config(const nlohmann::json& doc, int stage) {
  using detail::Section;
  RunConfig rc;
  rc.stage = StageConfig::defaults_for(stage);
  Section top(doc, "");
  top.read("seed", rc.seed);
  top.read("output_dir", rc.output_dir);

  top.skip("connector");
  if (doc.contains("connector")) {
    Section s(doc["connector"], "connector");
    auto& c = rc.connector;
    s.read("height", c.height);
    s.read("width", c.width);
    s.read("feature_dim", c.feature_dim);
    s.read("slow_frames", c.slow_frames);
    s.read("pool_stride", c.pool_stride);
    s.read("slow_slots", c.slow_slots);
    s.read("fast_slots", c.fast_slots);
    s.read("slot_dim", c.slot_dim);
    s.read("out_dim", c.out_dim);
    s.read("max_frames", c.max_frames);
    s.read("slow_iters", c.slow_iters);
    s.read("fast_iters", c.fast_iters);
    s.read_enum("mlp_activation", c.activation, &parse_activation);
    s.read("qformer_layers", c.qformer_layers);
    s.read("qformer_heads", c.qformer_heads);
    s.finish();
  }

  top.skip("data");
  if (doc.contains("data")) {
    Section s(doc["data"], "data");
    auto& d = rc.data;
    s.read("frames", d.ranges.frames);
    s.read("vocab", d.ranges.vocab);
    s.read("noise", d.ranges.noise);
    s.read("min_objects", d.ranges.min_objects);
    s.read("max_objects", d.ranges.max_objects);
    s.read("min_extent", d.ranges.min_extent);
    s.read("max_extent", d.ranges.max_extent);
    s.read("max_dwells", d.ranges.max_dwells);
    s.read("encoder_seed", d.ranges.encoder_seed);
    s.read("train_seed", d.train_seed);
    s.read("eval_seed", d.eval_seed);
    s.read("train_scenes", d.train_scenes);
    s.read("eval_scenes", d.eval_scenes);
    s.read("ari_scenes", d.ari_scenes);
    s.read("ari_objects", d.ari_objects);
    s.finish();
  }

  top.skip("stage");
  if (doc.contains("stage")) {
    Section s(doc["stage"], "stage");
    auto& st = rc.stage;
    int declared = stage;
    s.read("stage", declared);
    if (declared != stage)
      throw ConfigError("config declares stage " + std::to_string(declared) + " but the command runs stage " +
                        std::to_string(stage));
    s.read_enum("branch", st.branch, &parse_branch_set);
    s.read_enum("connector", st.connector, &parse_connector_kind);
    s.read("steps", st.steps);
    s.read("lr_max", st.lr_max);
    s.read("lr_min", st.lr_min);
    s.read_enum("schedule", st.schedule, &parse_schedule);
    s.read("batch", st.batch);
    s.read("log_every", st.log_every);
    s.read("checkpoint_every", st.checkpoint_every);
    s.read("clip_norm", st.clip_norm);
    s.read("decoder_dim", st.decoder_dim);
    s.read("decoder_layers", st.decoder_layers);
    s.read("decoder_heads", st.decoder_heads);
    s.read("decoder_ff_hidden", st.decoder_ff_hidden);
    s.read("init", st.init);
    s.read("init_slow", st.init_slow);
    s.read("init_fast", st.init_fast);
    s.finish();
  }
  top.finish();
  rc.sync_data_grid();
  return rc;
}

inline RunConfig parse_run_config(const std::string& text, int stage) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(doc, stage);
}

inline RunConfig load_run_config(const std::filesystem::path& path, int stage) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), stage);
}

inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["seed"] = rc.seed;
  j["output_dir"] = rc.output_dir;
  const auto& c = rc.connector;
  j["connector"] = {{"height", c.height},
                    {"width", c.width},
                    {"feature_dim", c.feature_dim},
                    {"slow_frames", c.slow_frames},
                    {"pool_stride", c.pool_stride},
                    {"slow_slots", c.slow_slots},
                    {"fast_slots", c.fast_slots},
                    {"slot_dim", c.slot_dim},
                    {"out_dim", c.out_dim},
                    {"max_frames", c.max_frames},
                    {"slow_iters", c.slow_iters},
                    {"fast_iters", c.fast_iters},
                    {"mlp_activation", activation_name(c.activation)},
                    {"qformer_layers", c.qformer_layers},
                    {"qformer_heads", c.qformer_heads}};
  const auto& d = rc.data;
  j["data"] = {{"frames", d.ranges.frames},
               {"vocab", d.ranges.vocab},
               {"noise", d.ranges.noise},
               {"min_objects", d.ranges.min_objects},
               {"max_objects", d.ranges.max_objects},
               {"min_extent", d.ranges.min_extent},
               {"max_extent", d.ranges.max_extent},
               {"max_dwells", d.ranges.max_dwells},
               {"encoder_seed", d.ranges.encoder_seed},
               {"train_seed", d.train_seed},
               {"eval_seed", d.eval_seed},
               {"train_scenes", d.train_scenes},
               {"eval_scenes", d.eval_scenes},
               {"ari_scenes", d.ari_scenes},
               {"ari_objects", d.ari_objects}};
  const auto& s = rc.stage;
  j["stage"] = {{"stage", s.stage},
                {"branch", branch_set_name(s.branch)},
                {"connector", connector_kind_name(s.connector)},
                {"steps", s.steps},
                {"lr_max", s.lr_max},
                {"lr_min", s.lr_min},
                {"schedule", schedule_name(s.schedule)},
                {"batch", s.batch},
                {"log_every", s.log_every},
                {"checkpoint_every", s.checkpoint_every},
                {"clip_norm", s.clip_norm},
                {"decoder_dim", s.decoder_dim},
                {"decoder_layers", s.decoder_layers},
                {"decoder_heads", s.decoder_heads},
                {"decoder_ff_hidden", s.decoder_ff_hidden},
                {"init", s.init},
                {"init_slow", s.init_slow},
                {"init_fast", s.init_fast}};
  return j;
}

inline std::string effective_config_text(const RunConfig& rc) { return to_json(rc).dump(2) + "\n"; }

// Hex FNV-1a of the effective configuration.
inline std::string config_hash(const RunConfig& rc) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_tag(to_json(rc).dump())));
  return buf;
}

}  // namespace sfsl
