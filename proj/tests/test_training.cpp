#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numbers>

#include "sfslots/training.hpp"

using namespace sfsl;

namespace {

SFSlotsConfig tiny_model() {
  SFSlotsConfig c;
  c.height = 8;
  c.width = 8;
  c.feature_dim = 8;
  c.slow_frames = 2;
  c.pool_stride = 4;
  c.slow_slots = 2;
  c.fast_slots = 2;
  c.slot_dim = 8;
  c.out_dim = 8;
  c.max_frames = 16;
  c.qformer_layers = 1;
  c.qformer_heads = 2;
  return c;
}

DataConfig tiny_data() {
  DataConfig d;
  d.ranges.frames = 6;
  d.ranges.height = 8;
  d.ranges.width = 8;
  d.ranges.feature_dim = 8;
  d.ranges.vocab = 4;
  d.ranges.min_objects = 1;
  d.ranges.max_objects = 2;
  d.ranges.min_extent = 2;
  d.ranges.max_extent = 3;
  d.train_scenes = 8;
  d.eval_scenes = 6;
  d.ari_scenes = 3;
  d.ari_objects = 2;
  return d;
}

const TrainingData& data() {
  static const TrainingData d = TrainingData::build(tiny_data(), 4);
  return d;
}

StageConfig stage(int s, BranchSet b = BranchSet::kSlow, std::size_t steps = 6) {
  auto c = StageConfig::defaults_for(s);
  c.branch = s == 3 ? BranchSet::kBoth : b;
  c.steps = steps;
  c.batch = 2;
  c.log_every = 2;
  c.decoder_dim = 8;
  c.decoder_ff_hidden = 16;
  return c;
}

const TensorF& tensor(const NamedTensors& ck, const std::string& name) { return require_tensor(ck, name); }

bool same(const TensorF& a, const TensorF& b) {
  return a.dims() == b.dims() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

NamedTensors stage1(BranchSet b, std::size_t steps = 6) {
  return stage1_pretrain(tiny_model(), stage(1, b, steps), data(), 3).checkpoint;
}

}  // namespace

TEST(CosineLr, MatchesClosedForm) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 2e-5, 0), 2e-5);
  EXPECT_NEAR(cosine_lr(100, 100, 2e-5, 0), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(50, 100, 2e-5, 0), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(25, 100, 1.0, 0.2), 0.2 + 0.4 * (1 + std::sqrt(0.5)), 1e-15);
  for (std::size_t s = 0; s < 1000; s += 37) {
    const double want = 1e-4 * 0.5 * (1 + std::cos(std::numbers::pi * double(s) / 1000.0));
    EXPECT_NEAR(cosine_lr(s, 1000, 1e-4, 0), want, 1e-18);
    EXPECT_GE(cosine_lr(s, 1000, 1e-4, 0), cosine_lr(s + 1, 1000, 1e-4, 0));
  }
  EXPECT_DOUBLE_EQ(cosine_lr(0, 0, 3e-4, 0), 3e-4);
  EXPECT_THROW(cosine_lr(11, 10, 1, 0), ConfigError);
}

TEST(StageConfig, DefaultsAndValidation) {
  auto s1 = StageConfig::defaults_for(1);
  EXPECT_EQ(s1.steps, 2000u);
  EXPECT_DOUBLE_EQ(s1.lr_max, 1e-4);
  EXPECT_EQ(s1.schedule, Schedule::kConstant);
  EXPECT_EQ(s1.batch, 8u);
  auto s2 = StageConfig::defaults_for(2);
  EXPECT_EQ(s2.steps, 1000u);
  EXPECT_DOUBLE_EQ(s2.lr_max, 2e-5);
  EXPECT_EQ(s2.schedule, Schedule::kCosine);
  EXPECT_EQ(s2.batch, 4u);
  EXPECT_EQ(StageConfig::defaults_for(3).branch, BranchSet::kBoth);
  auto bad = s1;
  bad.branch = BranchSet::kBoth;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s2;
  bad.lr_min = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s2;
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(parse_schedule("linear"), ConfigError);
}

TEST(LogRecord, FormatsAndParses) {
  LogRecord r{50, 1e-4f, 0.25f, std::nanf("")};
  EXPECT_EQ(format_log_record(r), "step=50\tlr=9.99999975e-05\tloss=0.25\taccuracy=nan");
  auto back = parse_log_record(format_log_record(r));
  ASSERT_TRUE(back);
  EXPECT_EQ(back->step, 50u);
  EXPECT_EQ(back->lr, r.lr);
  EXPECT_TRUE(std::isnan(back->accuracy));
  r.accuracy = 0.5f;
  EXPECT_EQ(parse_log_record(format_log_record(r))->accuracy, 0.5f);
  EXPECT_FALSE(parse_log_record("garbage"));
}

TEST(Threads, EnvironmentParsing) {
  ::unsetenv("SFSL_THREADS");
  EXPECT_EQ(thread_count(), 1u);
  ::setenv("SFSL_THREADS", "3", 1);
  EXPECT_EQ(thread_count(), 3u);
  ::setenv("SFSL_THREADS", "zero", 1);
  EXPECT_THROW(thread_count(), ConfigError);
  ::setenv("SFSL_THREADS", "0", 1);
  EXPECT_THROW(thread_count(), ConfigError);
  ::unsetenv("SFSL_THREADS");
}

TEST(Stage1, ZeroStepsReturnsInitialisation) {
  auto ck = stage1(BranchSet::kSlow, 0);
  Stage1Model fresh(tiny_model(), stage(1), 6, 3);
  for (const auto& [name, v] : fresh.store().entries()) EXPECT_TRUE(same(tensor(ck, name), v.value())) << name;
  EXPECT_EQ(scalar_of(ck, "train.step"), 0.0f);
  EXPECT_EQ(scalar_of(ck, "meta.decoder_parallel"), 1.0f);
}

TEST(Stage1, DeterministicUnderSeed) {
  for (auto b : {BranchSet::kSlow, BranchSet::kFast}) {
    auto a = encode_checkpoint(stage1(b));
    EXPECT_EQ(a, encode_checkpoint(stage1(b)));
  }
  auto other = stage1_pretrain(tiny_model(), stage(1), data(), 4).checkpoint;
  EXPECT_NE(encode_checkpoint(other), encode_checkpoint(stage1(BranchSet::kSlow)));
}

TEST(Stage1, TrainsOnlySlotAttentionAndDecoder) {
  auto ck = stage1(BranchSet::kSlow);
  Stage1Model fresh(tiny_model(), stage(1), 6, 3);
  std::size_t moved = 0;
  for (const auto& [name, v] : fresh.store().entries()) {
    const bool trainable = name.rfind("slow.sa.", 0) == 0 || name.rfind("decoder.slow.", 0) == 0;
    if (!trainable) EXPECT_TRUE(same(tensor(ck, name), v.value())) << name;
    else moved += !same(tensor(ck, name), v.value());
  }
  EXPECT_GT(moved, 0u);
}

TEST(Stage1, LogsEveryInterval) {
  auto res = stage1_pretrain(tiny_model(), stage(1, BranchSet::kFast, 5), data(), 3);
  ASSERT_EQ(res.log.size(), 3u);
  EXPECT_EQ(res.log[0].step, 2u);
  EXPECT_EQ(res.log[2].step, 5u);
  for (const auto& r : res.log) {
    EXPECT_FLOAT_EQ(r.lr, 1e-4f);
    EXPECT_TRUE(std::isfinite(r.loss));
  }
  EXPECT_GT(res.initial_mse, 0.0);
}

TEST(Stage1, ZeroLearningRateLeavesParametersUnchanged) {
  auto sc = stage(1);
  sc.lr_max = 0;
  auto ck = stage1_pretrain(tiny_model(), sc, data(), 3).checkpoint;
  Stage1Model fresh(tiny_model(), sc, 6, 3);
  for (const auto& [name, v] : fresh.store().entries()) EXPECT_TRUE(same(tensor(ck, name), v.value())) << name;
  EXPECT_EQ(scalar_of(ck, "adam.t"), 6.0f);
}

TEST(Stage1, ResumeIsBitExact) {
  auto sc = stage(1, BranchSet::kFast);
  sc.checkpoint_every = 2;
  NamedTensors mid;
  LoopHooks hooks;
  hooks.on_checkpoint = [&](const NamedTensors& ck, std::size_t step) {
    if (step == 4) mid = ck;
  };
  auto full = stage1_pretrain(tiny_model(), sc, data(), 3, nullptr, hooks);
  ASSERT_FALSE(mid.empty());
  EXPECT_EQ(scalar_of(mid, "train.step"), 4.0f);
  auto resumed = stage1_pretrain(tiny_model(), sc, data(), 3, &mid);
  EXPECT_EQ(encode_checkpoint(resumed.checkpoint), encode_checkpoint(full.checkpoint));
}

TEST(Stage2, LoadsStage1ParametersExactly) {
  auto s1 = stage1(BranchSet::kSlow);
  auto res = stage2_tune(tiny_model(), stage(2, BranchSet::kSlow, 0), data(), 5, s1);
  std::size_t checked = 0;
  for (const auto& [name, t] : s1)
    if (name.rfind("slow.sa.", 0) == 0) {
      EXPECT_TRUE(same(tensor(res.checkpoint, name), t)) << name;
      ++checked;
    }
  EXPECT_GT(checked, 0u);
  EXPECT_EQ(encode_checkpoint(res.checkpoint),
            encode_checkpoint(stage2_tune(tiny_model(), stage(2, BranchSet::kSlow, 0), data(), 5, s1).checkpoint));
}

TEST(Stage2, ResumeIsBitExactAndCosineLogged) {
  auto s1 = stage1(BranchSet::kFast);
  auto sc = stage(2, BranchSet::kFast);
  sc.checkpoint_every = 2;
  NamedTensors mid;
  LoopHooks hooks;
  hooks.on_checkpoint = [&](const NamedTensors& ck, std::size_t step) {
    if (step == 2) mid = ck;
  };
  auto full = stage2_tune(tiny_model(), sc, data(), 5, s1, nullptr, hooks);
  auto resumed = stage2_tune(tiny_model(), sc, data(), 5, s1, &mid);
  EXPECT_EQ(encode_checkpoint(resumed.checkpoint), encode_checkpoint(full.checkpoint));
  ASSERT_EQ(full.log.size(), 3u);
  EXPECT_FLOAT_EQ(full.log[0].lr, float(cosine_lr(1, 6, 2e-5, 0)));
  EXPECT_TRUE(std::isfinite(full.log[0].accuracy));
}

TEST(Stage2, RejectsWrongCheckpoints) {
  auto slow1 = stage1(BranchSet::kSlow, 0);
  EXPECT_THROW(stage2_tune(tiny_model(), stage(2, BranchSet::kFast, 0), data(), 5, slow1), CheckpointError);
  auto relu = tiny_model();
  relu.activation = Activation::kRelu;
  EXPECT_THROW(stage2_tune(relu, stage(2, BranchSet::kSlow, 0), data(), 5, slow1), CheckpointError);
  auto wider = tiny_model();
  wider.slot_dim = 16;
  EXPECT_THROW(stage2_tune(wider, stage(2, BranchSet::kSlow, 0), data(), 5, slow1), CheckpointError);
  EXPECT_THROW(stage2_tune(tiny_model(), stage(2, BranchSet::kSlow), data(), 5, slow1, &slow1), CheckpointError);
  EXPECT_THROW(stage2_tune(tiny_model(), stage(3), data(), 5, slow1), ConfigError);
}

TEST(Stage3, LoadsBranchesAndAveragesSharedLayers) {
  auto slow2 = stage2_tune(tiny_model(), stage(2, BranchSet::kSlow, 2), data(), 5, stage1(BranchSet::kSlow, 2));
  auto fast2 = stage2_tune(tiny_model(), stage(2, BranchSet::kFast, 2), data(), 6, stage1(BranchSet::kFast, 2));
  auto joint = stage3_joint(tiny_model(), stage(3, BranchSet::kBoth, 0), data(), 7, slow2.checkpoint,
                            fast2.checkpoint);
  for (const auto& [name, t] : joint.checkpoint) {
    if (name.rfind("slow.", 0) == 0) {
      EXPECT_TRUE(same(t, tensor(slow2.checkpoint, name))) << name;
    }
    if (name.rfind("fast.", 0) == 0) {
      EXPECT_TRUE(same(t, tensor(fast2.checkpoint, name))) << name;
    }
    if (name.rfind("proj.", 0) == 0 || name.rfind("probe.", 0) == 0) {
      const auto& a = tensor(slow2.checkpoint, name);
      const auto& b = tensor(fast2.checkpoint, name);
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 0.5f * (a[i] + b[i])) << name;
    }
  }
  EXPECT_EQ(joint.after.tokens, tiny_model().token_count());
  EXPECT_THROW(stage3_joint(tiny_model(), stage(3, BranchSet::kBoth, 0), data(), 7, fast2.checkpoint,
                            slow2.checkpoint),
               CheckpointError);
  EXPECT_THROW(stage3_joint(tiny_model(), stage(3, BranchSet::kBoth, 0), data(), 7, stage1(BranchSet::kSlow, 0),
                            fast2.checkpoint),
               CheckpointError);
}

TEST(Baselines, TrainWithStageTwoProtocol) {
  for (auto kind : {ConnectorKind::kPooling, ConnectorKind::kQueryTransformer}) {
    auto sc = stage(2, BranchSet::kSlow, 4);
    sc.connector = kind;
    auto a = train_baseline(tiny_model(), sc, data(), 8);
    auto b = train_baseline(tiny_model(), sc, data(), 8);
    EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
    EXPECT_GE(a.after.probe_accuracy, 0.0);
    if (kind == ConnectorKind::kPooling) {
      EXPECT_EQ(a.after.tokens, PoolingConnector<float>::token_count(6, 8, 8));
      EXPECT_TRUE(std::isnan(a.after.spatial_ari));
    } else {
      EXPECT_EQ(a.after.tokens, tiny_model().slow_token_count());
      EXPECT_FALSE(std::isnan(a.after.spatial_ari));
    }
  }
  EXPECT_THROW(train_baseline(tiny_model(), stage(2), data(), 8), ConfigError);
}

TEST(Evaluate, ThreadCountDoesNotChangeMetrics) {
  ConnectorStack stack(tiny_model(), ConnectorKind::kSlots, BranchSet::kBoth, 9, data().max_objects);
  auto a = evaluate(stack, data(), 1);
  auto b = evaluate(stack, data(), 3);
  EXPECT_EQ(a.probe_accuracy, b.probe_accuracy);
  EXPECT_EQ(a.spatial_ari, b.spatial_ari);
  EXPECT_EQ(a.temporal_ari, b.temporal_ari);
  EXPECT_EQ(a.overlap, b.overlap);
  EXPECT_EQ(a.entropy, b.entropy);
  EXPECT_GE(a.spatial_ari, -0.5);
  EXPECT_LE(a.spatial_ari, 1.0);
  EXPECT_GE(a.entropy, 0.0);
  EXPECT_LE(a.entropy, std::log(2.0) + 1e-6);
}
