#pragma once

// Stage-wise training: reconstruction pretraining of one branch's slot
// attention, single-branch tuning against probe tasks, joint tuning of both
// branches, and the comparator connectors under the same probe protocol.
//
// A linear probe on mean-pooled output tokens stands in for the language
// model; it is the only task-supervised component.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sfslots/baselines.hpp"
#include "sfslots/checkpoint.hpp"
#include "sfslots/connector.hpp"
#include "sfslots/decoder.hpp"
#include "sfslots/metrics.hpp"
#include "sfslots/optim.hpp"
#include "sfslots/synthetic.hpp"

namespace sfsl {

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
  if (step > total) {
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                      std::to_string(total));
  }
  if (total == 0) return lr_max;
  const double phase = std::numbers::pi * double(step) / double(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

enum class Schedule { kConstant, kCosine };

inline std::string schedule_name(Schedule s) { return s == Schedule::kCosine ? "cosine" : "constant"; }

inline Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::kConstant;
  if (s == "cosine") return Schedule::kCosine;
  throw ConfigError("unknown schedule '" + s + "' (expected constant, cosine)");
}

struct StageConfig {
  int stage = 1;
  BranchSet branch = BranchSet::kSlow;
  ConnectorKind connector = ConnectorKind::kSlots;
  std::size_t steps = 2000;
  double lr_max = 1e-4;
  double lr_min = 0.0;
  Schedule schedule = Schedule::kConstant;
  std::size_t batch = 8;
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 0;  // 0 keeps only the final checkpoint
  double clip_norm = 1.0;
  // reconstruction decoder (stage 1)
  std::size_t decoder_dim = 64;
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 1;
  std::size_t decoder_ff_hidden = 128;
  // checkpoints to start from
  std::string init;       // stage 2: stage-1 checkpoint of the branch
  std::string init_slow;  // stage 3: stage-2 slow checkpoint
  std::string init_fast;  // stage 3: stage-2 fast checkpoint

  static StageConfig defaults_for(int stage) {
    StageConfig c;
    c.stage = stage;
    if (stage == 1) return c;
    c.steps = 1000;
    c.lr_max = 2e-5;
    c.schedule = Schedule::kCosine;
    c.batch = 4;
    if (stage == 3) c.branch = BranchSet::kBoth;
    return c;
  }

  void validate() const {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (log_every == 0) throw ConfigError("log_every must be >= 1");
    if (!(lr_max >= 0) || !(lr_min >= 0) || lr_min > lr_max) throw ConfigError("need 0 <= lr_min <= lr_max");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
    if (stage == 1 && branch == BranchSet::kBoth) throw ConfigError("stage 1 pretrains one branch at a time");
    if (stage == 1 && connector != ConnectorKind::kSlots) throw ConfigError("stage 1 pretrains slot attention only");
    if (stage == 3 && (branch != BranchSet::kBoth || connector != ConnectorKind::kSlots))
      throw ConfigError("stage 3 trains both slot branches");
    if (decoder_layers == 0 || decoder_heads == 0 || decoder_dim % decoder_heads)
      throw ConfigError("decoder needs layers >= 1 and dim divisible by heads");
  }
};

struct DataConfig {
  SceneRanges ranges;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
  std::size_t train_scenes = 256;
  std::size_t eval_scenes = 100;  // probe accuracy
  std::size_t ari_scenes = 50;    // decoupling metrics
  std::size_t ari_objects = 3;    // object count of the decoupling scenes

  void validate() const {
    ranges.validate();
    if (train_scenes == 0 || eval_scenes == 0 || ari_scenes == 0) throw ConfigError("scene counts must be >= 1");
    if (ari_objects < 1 || ari_objects > ranges.vocab) throw ConfigError("ari_objects out of range");
  }
};

// Scenes generated once and shared by every run over the same data config.
struct TrainingData {
  std::vector<Scene> train, eval, ari;
  std::vector<TensorF> train_pooled;  // [T*M_d x D] per training scene
  ProbeQuery query;
  std::size_t max_objects = 0;
  std::size_t pool_stride = 4;

  static TrainingData build(const DataConfig& cfg, std::size_t pool_stride) {
    cfg.validate();
    TrainingData d;
    d.pool_stride = pool_stride;
    d.max_objects = std::max(cfg.ranges.max_objects, cfg.ari_objects);
    const auto& r = cfg.ranges;
    d.query = ProbeQuery::for_grid(r.frames, r.height, r.width, pool_stride);
    Dataset train(derive_seed(cfg.train_seed, "train"), cfg.train_scenes, r, pool_stride);
    Dataset eval(derive_seed(cfg.eval_seed, "eval"), cfg.eval_scenes, r, pool_stride);
    SceneRanges fixed = r;
    fixed.min_objects = fixed.max_objects = cfg.ari_objects;
    Dataset ari(derive_seed(cfg.eval_seed, "decoupling"), cfg.ari_scenes, fixed, pool_stride);
    for (std::size_t i = 0; i < train.size(); ++i) {
      d.train.push_back(train.at(i));
      const auto& v = d.train.back().video;
      auto flat = SFSlotsModel<float>::flatten(v);
      d.train_pooled.push_back(pool_video(flat, v.frames(), v.height(), v.width(), pool_stride).value());
    }
    for (std::size_t i = 0; i < eval.size(); ++i) d.eval.push_back(eval.at(i));
    for (std::size_t i = 0; i < ari.size(); ++i) d.ari.push_back(ari.at(i));
    return d;
  }

  int label(const Scene& s, ProbeTask task) const { return gen_probe_task(s, task, query); }
};

inline constexpr ProbeTask kProbeTasks[kNumProbeTasks] = {ProbeTask::kObjectCount, ProbeTask::kEventCount,
                                                          ProbeTask::kOccupancy};

// One affine head per probe task over the mean of the output tokens.
class ProbeHead {
 public:
  ProbeHead() = default;
  ProbeHead(ParamStore<float>& store, std::size_t in_dim, std::size_t max_objects) {
    for (auto task : kProbeTasks) {
      heads_.emplace_back(store, "probe." + probe_task_name(task), in_dim, probe_num_classes(task, max_objects));
    }
  }

  // Logits [1 x C_task] per task.
  std::vector<Var<float>> operator()(const Var<float>& tokens) const {
    auto pooled = mean_rows(tokens);
    std::vector<Var<float>> out;
    for (const auto& h : heads_) out.push_back(h(pooled));
    return out;
  }

 private:
  std::vector<Linear<float>> heads_;
};

inline int argmax_row(const TensorF& logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return static_cast<int>(best);
}

// A connector of any kind plus the probe head, owning its parameters.
class ConnectorStack {
 public:
  ConnectorStack(const SFSlotsConfig& cfg, ConnectorKind kind, BranchSet branches, std::uint64_t seed,
                 std::size_t max_objects)
      : store_(derive_seed(seed, "params")), cfg_(cfg), kind_(kind), branches_(branches) {
    if (kind == ConnectorKind::kPooling) {
      pooling_ = std::make_unique<PoolingConnector<float>>(store_, cfg.feature_dim, cfg.out_dim);
    } else {
      model_ = std::make_unique<SFSlotsModel<float>>(store_, cfg, kind, branches);
    }
    probe_ = ProbeHead(store_, cfg.out_dim, max_objects);
  }

  ParamStore<float>& store() { return store_; }
  const ParamStore<float>& store() const { return store_; }
  const SFSlotsConfig& config() const { return cfg_; }
  ConnectorKind kind() const { return kind_; }
  BranchSet branches() const { return branches_; }
  const SFSlotsModel<float>& model() const { return *model_; }
  const ProbeHead& probe() const { return probe_; }

  std::size_t token_count(std::size_t frames) const {
    if (pooling_) return PoolingConnector<float>::token_count(frames, cfg_.height, cfg_.width);
    return model_->token_count();
  }

  // Output tokens; masks are filled for the slot and query-transformer kinds.
  SlotTokens<float> connect(const VideoFeatures<float>& v) const {
    if (pooling_) {
      SlotTokens<float> t;
      t.tokens = (*pooling_)(v);
      return t;
    }
    return model_->connect(v);
  }

 private:
  ParamStore<float> store_;
  SFSlotsConfig cfg_;
  ConnectorKind kind_;
  BranchSet branches_;
  std::unique_ptr<SFSlotsModel<float>> model_;
  std::unique_ptr<PoolingConnector<float>> pooling_;
  ProbeHead probe_;
};

// ---------------------------------------------------------------------------
// logging and checkpoint state

struct LogRecord {
  std::size_t step = 0;  // steps completed
  float lr = 0;
  float loss = 0;
  float accuracy = std::numeric_limits<float>::quiet_NaN();
};

inline std::string format_log_record(const LogRecord& r) {
  char buf[160];
  if (std::isnan(r.accuracy))
    std::snprintf(buf, sizeof buf, "step=%zu\tlr=%.9g\tloss=%.9g\taccuracy=nan", r.step, double(r.lr), double(r.loss));
  else
    std::snprintf(buf, sizeof buf, "step=%zu\tlr=%.9g\tloss=%.9g\taccuracy=%.9g", r.step, double(r.lr),
                  double(r.loss), double(r.accuracy));
  return buf;
}

inline std::optional<LogRecord> parse_log_record(const std::string& line) {
  LogRecord r;
  char acc[32] = {0};
  double lr = 0, loss = 0;
  if (std::sscanf(line.c_str(), "step=%zu\tlr=%lf\tloss=%lf\taccuracy=%31s", &r.step, &lr, &loss, acc) != 4)
    return std::nullopt;
  r.lr = static_cast<float>(lr);
  r.loss = static_cast<float>(loss);
  r.accuracy = std::string(acc) == "nan" ? std::numeric_limits<float>::quiet_NaN()
                                         : static_cast<float>(std::strtod(acc, nullptr));
  return r;
}

struct TrainState {
  AdamState<float> adam;
  std::size_t step = 0;
  std::vector<LogRecord> log;
};

namespace detail {

inline float code_of(BranchSet b) { return static_cast<float>(static_cast<int>(b)); }
inline float code_of(ConnectorKind k) { return static_cast<float>(static_cast<int>(k)); }

inline std::vector<Var<float>> vars_of(const std::vector<std::pair<std::string, Var<float>>>& named) {
  std::vector<Var<float>> out;
  for (const auto& [_, v] : named) out.push_back(v);
  return out;
}

}  // namespace detail

// Every parameter, the optimizer moments of the trainable ones, the step
// counter and the log, so a resumed run continues bit-exactly.
inline NamedTensors make_checkpoint(const ParamStore<float>& store,
                                    const std::vector<std::pair<std::string, Var<float>>>& trainable,
                                    const TrainState& st, const StageConfig& sc, Activation act) {
  NamedTensors out;
  for (const auto& [n, v] : store.entries()) out.emplace_back(n, v.value());
  out.emplace_back("meta.stage", TensorF::scalar(float(sc.stage)));
  out.emplace_back("meta.branch", TensorF::scalar(detail::code_of(sc.branch)));
  out.emplace_back("meta.connector", TensorF::scalar(detail::code_of(sc.connector)));
  out.emplace_back("meta.mlp_activation", TensorF::scalar(act == Activation::kRelu ? 1.0f : 0.0f));
  if (sc.stage == 1) out.emplace_back("meta.decoder_parallel", TensorF::scalar(1.0f));  // non-autoregressive decoder
  out.emplace_back("train.step", TensorF::scalar(float(st.step)));
  out.emplace_back("adam.t", TensorF::scalar(float(st.adam.t)));
  if (!st.adam.m.empty()) {
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      out.emplace_back("adam.m." + trainable[i].first, st.adam.m[i]);
      out.emplace_back("adam.v." + trainable[i].first, st.adam.v[i]);
    }
  }
  if (!st.log.empty()) {
    TensorF log(Shape{st.log.size(), 4});
    for (std::size_t i = 0; i < st.log.size(); ++i) {
      log.at(i, 0) = float(st.log[i].step);
      log.at(i, 1) = st.log[i].lr;
      log.at(i, 2) = st.log[i].loss;
      log.at(i, 3) = st.log[i].accuracy;
    }
    out.emplace_back("train.log", std::move(log));
  }
  return out;
}

inline float scalar_of(const NamedTensors& ck, const std::string& name) {
  const auto& t = require_tensor(ck, name);
  if (t.size() != 1) throw CheckpointError(name + " is not a scalar");
  return t[0];
}

// Copies every checkpoint tensor whose name starts with one of `prefixes`
// into the store; shapes must agree and at least one tensor must match.
inline std::size_t load_params(ParamStore<float>& store, const NamedTensors& ck,
                               const std::vector<std::string>& prefixes) {
  std::size_t loaded = 0;
  for (const auto& [name, t] : ck) {
    bool match = false;
    for (const auto& p : prefixes) match = match || name.rfind(p, 0) == 0;
    if (!match) continue;
    if (!store.contains(name)) throw CheckpointError("checkpoint tensor '" + name + "' has no matching parameter");
    auto param = store.get(name);
    if (param.dims() != t.dims())
      throw CheckpointError("incompatible checkpoint: " + name + " is " + shape_str(t.dims()) + ", model expects " +
                            shape_str(param.dims()));
    param.mutable_value() = t;
    ++loaded;
  }
  if (loaded == 0) throw CheckpointError("incompatible checkpoint: nothing to load");
  return loaded;
}

inline void check_activation(const NamedTensors& ck, Activation act) {
  const float code = scalar_of(ck, "meta.mlp_activation");
  if (code != (act == Activation::kRelu ? 1.0f : 0.0f))
    throw CheckpointError("incompatible checkpoint: trained with a different MLP activation");
}

inline void restore_state(ParamStore<float>& store, const std::vector<std::pair<std::string, Var<float>>>& trainable,
                          TrainState& st, const NamedTensors& ck, const StageConfig& sc) {
  if (scalar_of(ck, "meta.stage") != float(sc.stage) || scalar_of(ck, "meta.branch") != detail::code_of(sc.branch) ||
      scalar_of(ck, "meta.connector") != detail::code_of(sc.connector))
    throw CheckpointError("resume checkpoint belongs to a different stage, branch or connector");
  for (const auto& [name, v] : store.entries()) {
    const auto& t = require_tensor(ck, name);
    if (t.dims() != v.dims()) throw CheckpointError("incompatible checkpoint: shape of " + name);
  }
  std::vector<std::string> names = store.names();
  for (const auto& n : names) {
    auto p = store.get(n);
    p.mutable_value() = require_tensor(ck, n);
  }
  st.step = static_cast<std::size_t>(scalar_of(ck, "train.step"));
  st.adam.t = static_cast<std::uint64_t>(scalar_of(ck, "adam.t"));
  st.adam.m.clear();
  st.adam.v.clear();
  if (st.adam.t > 0) {
    for (const auto& [n, _] : trainable) {
      st.adam.m.push_back(require_tensor(ck, "adam.m." + n));
      st.adam.v.push_back(require_tensor(ck, "adam.v." + n));
    }
  }
  st.log.clear();
  if (const TensorF* log = find_tensor(ck, "train.log")) {
    for (std::size_t i = 0; i < log->rows(); ++i)
      st.log.push_back({static_cast<std::size_t>(log->at(i, 0)), log->at(i, 1), log->at(i, 2), log->at(i, 3)});
  }
  if (st.step > sc.steps) throw CheckpointError("resume checkpoint is past the configured step count");
}

// ---------------------------------------------------------------------------
// generic loop

struct StepOutcome {
  Var<float> loss;
  float accuracy = std::numeric_limits<float>::quiet_NaN();
};

struct LoopHooks {
  std::function<void(const LogRecord&)> on_log;
  std::function<void(const NamedTensors&, std::size_t step)> on_checkpoint;
};

inline float stage_lr(const StageConfig& sc, std::size_t step) {
  return static_cast<float>(sc.schedule == Schedule::kCosine ? cosine_lr(step, sc.steps, sc.lr_max, sc.lr_min)
                                                             : sc.lr_max);
}

// Runs steps [st.step, sc.steps). The step function builds the loss for the
// batch of a given step.
inline void run_loop(ParamStore<float>& store, const std::vector<std::pair<std::string, Var<float>>>& trainable,
                     TrainState& st, const StageConfig& sc, Activation act,
                     const std::function<StepOutcome(std::size_t)>& step_fn, const LoopHooks& hooks) {
  auto params = detail::vars_of(trainable);
  st.adam.beta1 = 0.9f;
  st.adam.beta2 = 0.999f;
  st.adam.eps = 1e-8f;
  for (; st.step < sc.steps; ++st.step) {
    const std::size_t step = st.step;
    st.adam.lr = stage_lr(sc, step);
    StepOutcome out;
    try {
      zero_grads(std::span<Var<float>>(params));
      out = step_fn(step);
      if (!std::isfinite(out.loss.item())) throw NumericError("loss is not finite");
      backward(out.loss);
      clip_grad_norm(std::span<Var<float>>(params), static_cast<float>(sc.clip_norm));
      adam_update(std::span<Var<float>>(params), st.adam);
    } catch (const NumericError& e) {
      throw NumericError("stage " + std::to_string(sc.stage) + " diverged at step " + std::to_string(step) + ": " +
                         e.what());
    }
    const std::size_t done = step + 1;
    if (done % sc.log_every == 0 || done == sc.steps) {
      LogRecord rec{done, st.adam.lr, out.loss.item(), out.accuracy};
      st.log.push_back(rec);
      if (hooks.on_log) hooks.on_log(rec);
    }
    if (sc.checkpoint_every && done % sc.checkpoint_every == 0 && done != sc.steps && hooks.on_checkpoint) {
      TrainState snap = st;
      snap.step = done;
      hooks.on_checkpoint(make_checkpoint(store, trainable, snap, sc, act), done);
    }
  }
}

inline std::vector<std::size_t> batch_scenes(std::uint64_t seed, int stage, std::size_t step, std::size_t batch,
                                             std::size_t n, Rng* rng_out = nullptr) {
  Rng rng(derive_seed(seed, "batch", static_cast<std::uint64_t>(stage), step));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  if (rng_out) *rng_out = rng;
  return out;
}

inline void set_trainable(ParamStore<float>& store, const std::vector<std::string>& prefixes) {
  store.set_requires_grad(false);
  for (auto& [_, v] : store.select(prefixes)) v.set_requires_grad(true);
}

// ---------------------------------------------------------------------------
// evaluation

inline std::size_t thread_count() {
  const char* env = std::getenv("SFSL_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw ConfigError("SFSL_THREADS must be an integer in [1, 256]");
  return static_cast<std::size_t>(n);
}

// Calls fn(i) for i in [0, n) on up to `threads` workers. Results must go to
// per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      NoGradGuard guard;
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EvalMetrics {
  std::map<std::string, double> task_accuracy;
  std::map<std::string, double> task_majority;
  double probe_accuracy = std::numeric_limits<double>::quiet_NaN();
  double majority_baseline = std::numeric_limits<double>::quiet_NaN();
  double spatial_ari = std::numeric_limits<double>::quiet_NaN();
  double temporal_ari = std::numeric_limits<double>::quiet_NaN();
  double overlap = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
  std::size_t tokens = 0;
  std::vector<SceneMetrics> per_scene;
};

// Decoupling scores of one scene's masks against its ground truth. Spatial
// ARI averages over the sampled frames, temporal ARI over pooled positions.
inline SceneMetrics scene_decoupling(const SlotTokens<float>& out, const SceneTruth& truth) {
  SceneMetrics m;
  double overlap = 0, entropy = 0;
  std::size_t masks = 0;
  auto acc = [&](const AttentionMask& a) {
    overlap += slot_overlap(a.weights);
    entropy += mask_entropy(row_normalized(a.weights));
    ++masks;
  };
  if (!out.slow_masks.empty()) {
    double s = 0;
    for (std::size_t i = 0; i < out.slow_masks.size(); ++i) {
      s += ari(hard_assign(out.slow_masks[i]), truth.frame_labels(out.sampled_frames[i]));
      acc(out.slow_masks[i]);
    }
    m.spatial_ari = s / double(out.slow_masks.size());
  }
  if (!out.fast_masks.empty()) {
    double s = 0;
    for (std::size_t k = 0; k < out.fast_masks.size(); ++k) {
      s += ari(hard_assign(out.fast_masks[k]), truth.position_segments(k));
      acc(out.fast_masks[k]);
    }
    m.temporal_ari = s / double(out.fast_masks.size());
  }
  if (masks) {
    m.overlap = overlap / double(masks);
    m.entropy = entropy / double(masks);
  }
  return m;
}

inline EvalMetrics evaluate(const ConnectorStack& stack, const TrainingData& data, std::size_t threads = 1) {
  EvalMetrics em;
  em.tokens = stack.token_count(data.eval.front().video.frames());

  // probe accuracy on the held-out probe scenes
  std::vector<std::vector<int>> pred(data.eval.size());
  parallel_for(data.eval.size(), threads, [&](std::size_t i) {
    auto logits = stack.probe()(stack.connect(data.eval[i].video).tokens);
    for (const auto& l : logits) pred[i].push_back(argmax_row(l.value()));
  });
  double acc_sum = 0, maj_sum = 0;
  for (std::size_t t = 0; t < kNumProbeTasks; ++t) {
    std::map<int, std::size_t> counts;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.eval.size(); ++i) {
      const int y = data.label(data.eval[i], kProbeTasks[t]);
      ++counts[y];
      correct += pred[i][t] == y;
    }
    std::size_t majority = 0;
    for (const auto& [_, c] : counts) majority = std::max(majority, c);
    const std::string name = probe_task_name(kProbeTasks[t]);
    em.task_accuracy[name] = double(correct) / double(data.eval.size());
    em.task_majority[name] = double(majority) / double(data.eval.size());
    acc_sum += em.task_accuracy[name];
    maj_sum += em.task_majority[name];
  }
  em.probe_accuracy = acc_sum / kNumProbeTasks;
  em.majority_baseline = maj_sum / kNumProbeTasks;

  if (stack.kind() == ConnectorKind::kPooling) return em;

  // decoupling metrics on the fixed-object-count scenes
  em.per_scene.resize(data.ari.size());
  parallel_for(data.ari.size(), threads, [&](std::size_t i) {
    em.per_scene[i] = scene_decoupling(stack.connect(data.ari[i].video), data.ari[i].truth);
  });
  auto mean_of = [&](double SceneMetrics::*field) {
    double s = 0;
    for (const auto& m : em.per_scene) s += m.*field;
    return s / double(em.per_scene.size());
  };
  if (has_slow(stack.branches())) em.spatial_ari = mean_of(&SceneMetrics::spatial_ari);
  if (has_fast(stack.branches())) em.temporal_ari = mean_of(&SceneMetrics::temporal_ari);
  em.overlap = mean_of(&SceneMetrics::overlap);
  em.entropy = mean_of(&SceneMetrics::entropy);
  return em;
}

inline DecouplingReport to_report(const EvalMetrics& em, const ConnectorStack& stack, std::uint64_t seed,
                                  const std::string& config_hash) {
  DecouplingReport r;
  r.connector = connector_kind_name(stack.kind());
  r.branch = stack.kind() == ConnectorKind::kPooling ? "-" : branch_set_name(stack.branches());
  r.tokens = em.tokens;
  r.scenes = em.per_scene.size();
  r.seed = seed;
  r.config_hash = config_hash;
  r.spatial_ari = em.spatial_ari;
  r.temporal_ari = em.temporal_ari;
  r.overlap = em.overlap;
  r.entropy = em.entropy;
  r.probe_accuracy = em.probe_accuracy;
  r.majority_baseline = em.majority_baseline;
  r.task_accuracy = em.task_accuracy;
  r.per_scene = em.per_scene;
  return r;
}

// ---------------------------------------------------------------------------
// stage 1: reconstruction pretraining

struct ReconItem {
  std::size_t scene;
  std::size_t index;  // frame (slow) or pooled position (fast)
};

struct Stage1Result {
  NamedTensors checkpoint;
  std::vector<LogRecord> log;
  double initial_mse = 0;  // held-out reconstruction error before training
  double final_mse = 0;
};

class Stage1Model {
 public:
  Stage1Model(const SFSlotsConfig& cfg, const StageConfig& sc, std::size_t frames, std::uint64_t seed)
      : store_(derive_seed(seed, "params")), branch_(sc.branch == BranchSet::kSlow ? Branch::kSlow : Branch::kFast) {
    model_ = std::make_unique<SFSlotsModel<float>>(store_, cfg, ConnectorKind::kSlots, sc.branch);
    DecoderConfig dc;
    dc.positions = branch_ == Branch::kSlow ? cfg.height * cfg.width : frames;
    dc.slot_dim = cfg.slot_dim;
    dc.dim = sc.decoder_dim;
    dc.out_dim = cfg.feature_dim;
    dc.layers = sc.decoder_layers;
    dc.heads = sc.decoder_heads;
    dc.ff_hidden = sc.decoder_ff_hidden;
    dc.activation = cfg.activation;
    decoder_ = ReconDecoder<float>(store_, decoder_name(), dc);
  }

  std::string branch_name() const { return branch_ == Branch::kSlow ? "slow" : "fast"; }
  std::string decoder_name() const { return "decoder." + branch_name(); }
  std::vector<std::string> trainable_prefixes() const {
    return {aggregator_prefix(branch_, ConnectorKind::kSlots) + ".", decoder_name() + "."};
  }
  ParamStore<float>& store() { return store_; }
  const SFSlotsModel<float>& model() const { return *model_; }

  // Slot-attention inputs of one item: a full frame (slow) or one pooled
  // position over time, temporal embedding included (fast).
  Var<float> inputs(const Scene& s, const TensorF* pooled, std::size_t index) const {
    const auto& v = s.video;
    const std::size_t hw = v.height() * v.width(), d = v.feature_dim();
    if (branch_ == Branch::kSlow) {
      auto span = v.grid.data().subspan(index * hw * d, hw * d);
      return Var<float>::constant(TensorF(Shape{hw, d}, std::vector<float>(span.begin(), span.end())));
    }
    Var<float> p;
    if (pooled) {
      p = Var<float>::constant(*pooled);
    } else {
      p = pool_video(SFSlotsModel<float>::flatten(v), v.frames(), v.height(), v.width(),
                     model_->config().pool_stride);
    }
    auto tokens = model_->fast_inputs(p, v.frames());
    return gather_rows(tokens, model_->position_rows(v.frames(), index));
  }

  Var<float> loss(const Var<float>& inputs) const {
    const auto& agg = branch_ == Branch::kSlow ? model_->slow_aggregator() : model_->fast_aggregator();
    auto slots = agg.aggregate(inputs).tokens;
    return recon_loss(decoder_(slots).features, inputs);
  }

  // Mean reconstruction error over fixed held-out items.
  double heldout_mse(const std::vector<Scene>& scenes, std::size_t items) const {
    NoGradGuard guard;
    const std::size_t n = std::min(items, scenes.size());
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& v = scenes[i].video;
      const std::size_t range = branch_ == Branch::kSlow ? v.frames() : model_->config().pooled_positions();
      total += loss(inputs(scenes[i], nullptr, (i * 7) % range)).item();
    }
    return total / double(n);
  }

 private:
  ParamStore<float> store_;
  Branch branch_;
  std::unique_ptr<SFSlotsModel<float>> model_;
  ReconDecoder<float> decoder_;
};

inline constexpr std::size_t kHeldoutReconItems = 32;

inline Stage1Result stage1_pretrain(const SFSlotsConfig& cfg, const StageConfig& sc, const TrainingData& data,
                                    std::uint64_t seed, const NamedTensors* resume = nullptr,
                                    const LoopHooks& hooks = {}) {
  sc.validate();
  if (sc.stage != 1) throw ConfigError("stage1_pretrain needs a stage-1 config");
  const std::size_t frames = data.train.front().video.frames();
  Stage1Model m(cfg, sc, frames, seed);
  auto& store = m.store();
  set_trainable(store, m.trainable_prefixes());
  const auto trainable = store.select(m.trainable_prefixes());

  Stage1Result res;
  TrainState st;
  res.initial_mse = m.heldout_mse(data.eval, kHeldoutReconItems);
  if (resume) {
    check_activation(*resume, cfg.activation);
    restore_state(store, trainable, st, *resume, sc);
  }
  const bool slow = sc.branch == BranchSet::kSlow;
  const std::size_t range = slow ? frames : cfg.pooled_positions();

  run_loop(store, trainable, st, sc, cfg.activation,
           [&](std::size_t step) {
             Rng rng;
             auto scenes = batch_scenes(seed, 1, step, sc.batch, data.train.size(), &rng);
             std::uniform_int_distribution<std::size_t> pick(0, range - 1);
             Var<float> total;
             for (std::size_t b = 0; b < scenes.size(); ++b) {
               const std::size_t idx = pick(rng);
               auto l = m.loss(m.inputs(data.train[scenes[b]], &data.train_pooled[scenes[b]], idx));
               total = b == 0 ? l : add(total, l);
             }
             return StepOutcome{scale(total, 1.0f / float(scenes.size()))};
           },
           hooks);
  res.final_mse = m.heldout_mse(data.eval, kHeldoutReconItems);
  res.log = st.log;
  res.checkpoint = make_checkpoint(store, trainable, st, sc, cfg.activation);
  return res;
}

// ---------------------------------------------------------------------------
// stages 2 and 3, baselines: probe tuning

struct TuneResult {
  NamedTensors checkpoint;
  std::vector<LogRecord> log;
  EvalMetrics before;  // at the starting parameters
  EvalMetrics after;
};

inline std::vector<std::string> tune_prefixes(const StageConfig& sc) {
  if (sc.connector == ConnectorKind::kPooling) return {"pool.", "probe."};
  std::vector<std::string> p;
  if (has_slow(sc.branch)) p.push_back("slow.");
  if (has_fast(sc.branch)) p.push_back("fast.");
  p.push_back("proj.");
  p.push_back("probe.");
  return p;
}

// Loads the starting parameters of a tuning stage into the stack.
inline void load_tuning_init(ConnectorStack& stack, const StageConfig& sc, const NamedTensors* init,
                             const NamedTensors* init_slow, const NamedTensors* init_fast) {
  const Activation act = stack.config().activation;
  if (sc.stage == 2 && sc.connector == ConnectorKind::kSlots) {
    if (!init) throw CheckpointError("stage 2 needs the branch's stage-1 checkpoint");
    check_activation(*init, act);
    if (scalar_of(*init, "meta.stage") != 1.0f || scalar_of(*init, "meta.branch") != detail::code_of(sc.branch))
      throw CheckpointError("incompatible checkpoint: expected a stage-1 " + branch_set_name(sc.branch) +
                            " checkpoint");
    const Branch b = sc.branch == BranchSet::kSlow ? Branch::kSlow : Branch::kFast;
    load_params(stack.store(), *init, {aggregator_prefix(b, ConnectorKind::kSlots) + "."});
  }
  if (sc.stage == 3) {
    if (!init_slow || !init_fast) throw CheckpointError("stage 3 needs both stage-2 checkpoints");
    for (const auto* ck : {init_slow, init_fast}) {
      check_activation(*ck, act);
      if (scalar_of(*ck, "meta.stage") != 2.0f || scalar_of(*ck, "meta.connector") != detail::code_of(ConnectorKind::kSlots))
        throw CheckpointError("incompatible checkpoint: expected stage-2 slot checkpoints");
    }
    if (scalar_of(*init_slow, "meta.branch") != detail::code_of(BranchSet::kSlow) ||
        scalar_of(*init_fast, "meta.branch") != detail::code_of(BranchSet::kFast))
      throw CheckpointError("incompatible checkpoint: slow/fast checkpoints are swapped or wrong");
    load_params(stack.store(), *init_slow, {"slow."});
    load_params(stack.store(), *init_fast, {"fast."});
    // Proj and the probe exist in both; start from their average.
    for (const auto& [name, v] : stack.store().select({"proj.", "probe."})) {
      const auto& a = require_tensor(*init_slow, name);
      const auto& b = require_tensor(*init_fast, name);
      if (a.dims() != v.dims() || b.dims() != v.dims()) throw CheckpointError("incompatible checkpoint: " + name);
      TensorF avg = a;
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5f * (a[i] + b[i]);
      auto p = v;
      p.mutable_value() = avg;
    }
  }
}

inline TuneResult tune_stage(const SFSlotsConfig& cfg, const StageConfig& sc, const TrainingData& data,
                             std::uint64_t seed, const NamedTensors* init = nullptr,
                             const NamedTensors* init_slow = nullptr, const NamedTensors* init_fast = nullptr,
                             const NamedTensors* resume = nullptr, const LoopHooks& hooks = {},
                             std::size_t threads = 1, bool eval_before = true) {
  sc.validate();
  if (sc.stage == 1) throw ConfigError("tune_stage runs stages 2 and 3");
  ConnectorStack stack(cfg, sc.connector, sc.branch, seed, data.max_objects);
  auto& store = stack.store();
  load_tuning_init(stack, sc, init, init_slow, init_fast);
  const auto prefixes = tune_prefixes(sc);
  set_trainable(store, prefixes);
  const auto trainable = store.select(prefixes);

  TuneResult res;
  TrainState st;
  if (eval_before) res.before = evaluate(stack, data, threads);
  if (resume) {
    check_activation(*resume, cfg.activation);
    restore_state(store, trainable, st, *resume, sc);
  }
  run_loop(store, trainable, st, sc, cfg.activation,
           [&](std::size_t step) {
             auto scenes = batch_scenes(seed, sc.stage, step, sc.batch, data.train.size());
             std::vector<std::vector<Var<float>>> logits(kNumProbeTasks);
             std::vector<std::vector<int>> labels(kNumProbeTasks);
             std::size_t correct = 0;
             for (auto i : scenes) {
               const auto& scene = data.train[i];
               auto out = stack.probe()(stack.connect(scene.video).tokens);
               for (std::size_t t = 0; t < kNumProbeTasks; ++t) {
                 const int y = data.label(scene, kProbeTasks[t]);
                 logits[t].push_back(out[t]);
                 labels[t].push_back(y);
                 correct += argmax_row(out[t].value()) == y;
               }
             }
             Var<float> total;
             for (std::size_t t = 0; t < kNumProbeTasks; ++t) {
               auto l = cross_entropy(concat_rows(logits[t]), labels[t]);
               total = t == 0 ? l : add(total, l);
             }
             return StepOutcome{scale(total, 1.0f / float(kNumProbeTasks)),
                                float(correct) / float(scenes.size() * kNumProbeTasks)};
           },
           hooks);
  res.after = evaluate(stack, data, threads);
  res.log = st.log;
  res.checkpoint = make_checkpoint(store, trainable, st, sc, cfg.activation);
  return res;
}

inline TuneResult stage2_tune(const SFSlotsConfig& cfg, const StageConfig& sc, const TrainingData& data,
                              std::uint64_t seed, const NamedTensors& stage1, const NamedTensors* resume = nullptr,
                              const LoopHooks& hooks = {}, std::size_t threads = 1) {
  if (sc.stage != 2 || sc.connector != ConnectorKind::kSlots || sc.branch == BranchSet::kBoth)
    throw ConfigError("stage 2 tunes one slot branch");
  return tune_stage(cfg, sc, data, seed, &stage1, nullptr, nullptr, resume, hooks, threads);
}

inline TuneResult stage3_joint(const SFSlotsConfig& cfg, const StageConfig& sc, const TrainingData& data,
                               std::uint64_t seed, const NamedTensors& slow, const NamedTensors& fast,
                               const NamedTensors* resume = nullptr, const LoopHooks& hooks = {},
                               std::size_t threads = 1) {
  if (sc.stage != 3) throw ConfigError("stage3_joint needs a stage-3 config");
  return tune_stage(cfg, sc, data, seed, nullptr, &slow, &fast, resume, hooks, threads);
}

// Comparator connectors trained with the stage-2 probe protocol and budget,
// starting from initialisation.
inline TuneResult train_baseline(const SFSlotsConfig& cfg, const StageConfig& sc, const TrainingData& data,
                                 std::uint64_t seed, const NamedTensors* resume = nullptr,
                                 const LoopHooks& hooks = {}, std::size_t threads = 1) {
  if (sc.connector == ConnectorKind::kSlots) throw ConfigError("train_baseline expects pooling or query-transformer");
  if (sc.stage != 2) throw ConfigError("baselines follow the stage-2 protocol");
  return tune_stage(cfg, sc, data, seed, nullptr, nullptr, nullptr, resume, hooks, threads);
}

}  // namespace sfsl
