// Command-line driver: data export, the three training stages, baselines,
// evaluation, mask rendering and report comparison.
//
// Exit status: 0 success, 2 configuration error, 3 runtime or training error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sfslots/checkpoint.hpp"
#include "sfslots/config.hpp"
#include "sfslots/metrics.hpp"
#include "sfslots/training.hpp"

namespace fs = std::filesystem;
using namespace sfsl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::string init, init_slow, init_fast;
  std::string checkpoint;
  std::size_t scene = 0;
};

RunConfig resolve_config(const RunFlags& f, int stage) {
  RunConfig rc = f.config.empty() ? parse_run_config(std::string("{}"), stage) : load_run_config(f.config, stage);
  if (f.seed) rc.seed = *f.seed;
  if (!f.out.empty()) rc.output_dir = f.out;
  if (!f.init.empty()) rc.stage.init = f.init;
  if (!f.init_slow.empty()) rc.stage.init_slow = f.init_slow;
  if (!f.init_fast.empty()) rc.stage.init_fast = f.init_fast;
  rc.validate();
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path prepare_output(const RunConfig& rc) {
  fs::path dir(rc.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  write_text(dir / "effective_config.json", effective_config_text(rc));
  return dir;
}

std::optional<NamedTensors> load_optional(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

// Streams log records to <dir>/train.log and stdout; intermediate
// checkpoints go to <dir>/checkpoint_step<N>.sfsl.
struct RunOutput {
  fs::path dir;
  std::ofstream log;

  explicit RunOutput(fs::path d) : dir(std::move(d)), log(dir / "train.log", std::ios::trunc) {
    if (!log) throw IoError("cannot write " + (dir / "train.log").string());
  }

  LoopHooks hooks() {
    LoopHooks h;
    h.on_log = [this](const LogRecord& r) {
      const auto line = format_log_record(r);
      log << line << '\n';
      log.flush();
      std::cout << line << '\n';
    };
    h.on_checkpoint = [this](const NamedTensors& ck, std::size_t step) {
      save_checkpoint(ck, dir / ("checkpoint_step" + std::to_string(step) + ".sfsl"));
    };
    return h;
  }
};

void write_report(const fs::path& dir, const EvalMetrics& em, const ConnectorStack& stack, const RunConfig& rc) {
  const auto text = format_report(to_report(em, stack, rc.seed, config_hash(rc)));
  write_text(dir / "report.txt", text);
  std::cout << "report: " << (dir / "report.txt").string() << '\n';
}

void print_metrics(const char* label, const EvalMetrics& m) {
  std::cout << label << ": tokens=" << m.tokens << " accuracy=" << m.probe_accuracy
            << " majority=" << m.majority_baseline << " spatial_ari=" << m.spatial_ari
            << " temporal_ari=" << m.temporal_ari << " overlap=" << m.overlap << " entropy=" << m.entropy << '\n';
}

int cmd_gen_data(const RunFlags& f) {
  const RunConfig rc = resolve_config(f, 1);
  const auto dir = prepare_output(rc);
  const auto data = TrainingData::build(rc.data, rc.connector.pool_stride);
  auto dump = [&](const std::vector<Scene>& scenes, const std::string& split) {
    const auto sub = dir / split;
    fs::create_directories(sub);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto& s = scenes[i];
      const auto& tr = s.truth;
      NamedTensors ts;
      ts.emplace_back("video", s.video.grid);
      std::vector<float> obj(tr.object_labels.begin(), tr.object_labels.end());
      ts.emplace_back("object_labels", TensorF(Shape{tr.frames, tr.height, tr.width}, std::move(obj)));
      std::vector<float> seg(tr.segment_labels.begin(), tr.segment_labels.end());
      ts.emplace_back("segment_labels", TensorF(Shape{tr.pooled_positions(), tr.frames}, std::move(seg)));
      std::vector<float> probe;
      for (auto task : kProbeTasks) probe.push_back(float(data.label(s, task)));
      ts.emplace_back("probe_labels", TensorF(Shape{kNumProbeTasks}, std::move(probe)));
      char name[32];
      std::snprintf(name, sizeof name, "scene_%04zu.sfsl", i);
      save_checkpoint(ts, sub / name);
    }
    std::cout << split << ": " << scenes.size() << " scenes\n";
  };
  dump(data.train, "train");
  dump(data.eval, "eval");
  dump(data.ari, "ari");
  return 0;
}

int cmd_pretrain(const RunFlags& f) {
  const RunConfig rc = resolve_config(f, 1);
  RunOutput out(prepare_output(rc));
  const auto data = TrainingData::build(rc.data, rc.connector.pool_stride);
  const auto resume = load_optional(f.resume);
  auto res = stage1_pretrain(rc.connector, rc.stage, data, rc.seed, resume ? &*resume : nullptr, out.hooks());
  save_checkpoint(res.checkpoint, out.dir / "checkpoint.sfsl");
  std::ostringstream summary;
  summary << "initial_mse = " << detail::fmt_double(res.initial_mse) << '\n'
          << "final_mse = " << detail::fmt_double(res.final_mse) << '\n';
  write_text(out.dir / "recon.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

int run_tune(const RunFlags& f, int stage, bool baseline) {
  const RunConfig rc = resolve_config(f, stage);
  if (baseline && rc.stage.connector == ConnectorKind::kSlots)
    throw ConfigError("train-baseline needs stage.connector = pooling or query_transformer");
  if (!baseline && rc.stage.connector != ConnectorKind::kSlots)
    throw ConfigError("use train-baseline for the pooling and query-transformer connectors");
  RunOutput out(prepare_output(rc));
  const auto data = TrainingData::build(rc.data, rc.connector.pool_stride);
  const auto resume = load_optional(f.resume);
  const NamedTensors* rs = resume ? &*resume : nullptr;
  const std::size_t threads = thread_count();
  TuneResult res;
  if (baseline) {
    res = train_baseline(rc.connector, rc.stage, data, rc.seed, rs, out.hooks(), threads);
  } else if (stage == 2) {
    if (rc.stage.init.empty()) throw ConfigError("tune needs --init or stage.init (stage-1 checkpoint)");
    const auto init = load_checkpoint(rc.stage.init);
    res = stage2_tune(rc.connector, rc.stage, data, rc.seed, init, rs, out.hooks(), threads);
  } else {
    if (rc.stage.init_slow.empty() || rc.stage.init_fast.empty())
      throw ConfigError("joint needs --init-slow and --init-fast (stage-2 checkpoints)");
    const auto slow = load_checkpoint(rc.stage.init_slow);
    const auto fast = load_checkpoint(rc.stage.init_fast);
    res = stage3_joint(rc.connector, rc.stage, data, rc.seed, slow, fast, rs, out.hooks(), threads);
  }
  save_checkpoint(res.checkpoint, out.dir / "checkpoint.sfsl");
  print_metrics("before", res.before);
  print_metrics("after", res.after);
  ConnectorStack shape(rc.connector, rc.stage.connector, rc.stage.branch, rc.seed, data.max_objects);
  write_report(out.dir, res.after, shape, rc);
  return 0;
}

// Rebuilds the connector a checkpoint was trained with and loads every
// parameter the checkpoint provides.
ConnectorStack stack_from_checkpoint(const RunConfig& rc, const NamedTensors& ck, std::size_t max_objects) {
  const int kind = int(scalar_of(ck, "meta.connector"));
  const int branch = int(scalar_of(ck, "meta.branch"));
  if (kind < 0 || kind > 2 || branch < 0 || branch > 2) throw CheckpointError("checkpoint metadata out of range");
  check_activation(ck, rc.connector.activation);
  ConnectorStack stack(rc.connector, ConnectorKind(kind), BranchSet(branch), rc.seed, max_objects);
  std::vector<std::string> names;
  for (const auto& n : stack.store().names())
    if (find_tensor(ck, n)) names.push_back(n);
  if (names.empty()) throw CheckpointError("incompatible checkpoint: nothing to load");
  load_params(stack.store(), ck, names);
  return stack;
}

int cmd_eval(const RunFlags& f) {
  if (f.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const auto ck = load_checkpoint(f.checkpoint);
  const int stage = int(scalar_of(ck, "meta.stage"));
  const RunConfig rc = resolve_config(f, stage);
  const auto dir = prepare_output(rc);
  const auto data = TrainingData::build(rc.data, rc.connector.pool_stride);
  auto stack = stack_from_checkpoint(rc, ck, data.max_objects);
  const auto em = evaluate(stack, data, thread_count());
  print_metrics("eval", em);
  write_report(dir, em, stack, rc);
  return 0;
}

int cmd_viz(const RunFlags& f) {
  if (f.checkpoint.empty()) throw ConfigError("viz needs --checkpoint");
  const auto ck = load_checkpoint(f.checkpoint);
  const RunConfig rc = resolve_config(f, int(scalar_of(ck, "meta.stage")));
  const auto dir = prepare_output(rc);
  const auto data = TrainingData::build(rc.data, rc.connector.pool_stride);
  if (f.scene >= data.ari.size()) throw ConfigError("--scene beyond data.ari_scenes");
  auto stack = stack_from_checkpoint(rc, ck, data.max_objects);
  if (stack.kind() == ConnectorKind::kPooling) throw ConfigError("the pooling connector has no attention masks");
  SlotTokens<float> out;
  {
    NoGradGuard guard;
    out = stack.connect(data.ari[f.scene].video);
  }
  const auto masks = dir / "masks";
  std::error_code ec;
  fs::remove(masks / "index.txt", ec);
  std::size_t n = 0;
  if (!out.slow_masks.empty()) n += render_masks(out.slow_masks, "slow", masks).size();
  if (!out.fast_masks.empty()) n += render_masks(out.fast_masks, "fast", masks).size();
  std::cout << n << " masks written to " << masks.string() << '\n';
  return 0;
}

int cmd_compare(const std::vector<std::string>& files, const std::string& out) {
  if (files.size() < 2) throw ConfigError("compare needs at least two report files");
  std::vector<DecouplingReport> reports;
  for (const auto& p : files) reports.push_back(parse_report(read_text(p)));
  const auto table = compare_reports(reports);
  std::cout << table;
  if (!out.empty()) write_text(out, table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slow-fast slot connector: training, evaluation and analysis"};
  app.require_subcommand(1);
  RunFlags f;
  std::vector<std::string> reports;
  std::string compare_out;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    c->add_option("--seed", f.seed, "seed, overrides the config");
    c->add_option("--out", f.out, "output directory, overrides the config");
  };
  auto training = [&](CLI::App* c) {
    common(c);
    c->add_option("--resume", f.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "write the synthetic scenes as SFSL containers");
  common(gen);
  auto* pre = app.add_subcommand("pretrain", "stage 1: reconstruction pretraining of one branch");
  training(pre);
  auto* tune = app.add_subcommand("tune", "stage 2: probe tuning of one branch");
  training(tune);
  tune->add_option("--init", f.init, "stage-1 checkpoint")->check(CLI::ExistingFile);
  auto* joint = app.add_subcommand("joint", "stage 3: joint tuning of both branches");
  training(joint);
  joint->add_option("--init-slow", f.init_slow, "stage-2 slow checkpoint")->check(CLI::ExistingFile);
  joint->add_option("--init-fast", f.init_fast, "stage-2 fast checkpoint")->check(CLI::ExistingFile);
  auto* base = app.add_subcommand("train-baseline", "train a pooling or query-transformer connector");
  training(base);
  auto* ev = app.add_subcommand("eval", "decoupling report and probe accuracy of a checkpoint");
  common(ev);
  ev->add_option("--checkpoint", f.checkpoint, "checkpoint to evaluate")->check(CLI::ExistingFile);
  auto* viz = app.add_subcommand("viz", "render attention masks of one decoupling scene");
  common(viz);
  viz->add_option("--checkpoint", f.checkpoint, "checkpoint to visualize")->check(CLI::ExistingFile);
  viz->add_option("--scene", f.scene, "index into the decoupling scenes");
  auto* cmp = app.add_subcommand("compare", "side-by-side table of report files");
  cmp->add_option("reports", reports, "report files")->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", compare_out, "also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(f);
    if (*pre) return cmd_pretrain(f);
    if (*tune) return run_tune(f, 2, false);
    if (*joint) return run_tune(f, 3, false);
    if (*base) return run_tune(f, 2, true);
    if (*ev) return cmd_eval(f);
    if (*viz) return cmd_viz(f);
    if (*cmp) return cmd_compare(reports, compare_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
