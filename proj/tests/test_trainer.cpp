#include <gtest/gtest.h>

#include "jea/trainer.hpp"

using namespace jea;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.image_size = 16;
  m.patch_size = 4;
  m.embed_dim = 16;
  m.depth = 1;
  m.num_heads = 2;
  m.head_hidden_dim = 32;
  m.head_bottleneck_dim = 8;
  m.num_prototypes = 32;
  return m;
}

AugmentationConfig small_aug() {
  AugmentationConfig a;
  a.global_size = 16;
  a.local_size = 8;
  a.n_local = 2;
  a.crop_mode_resize_to = 20;
  return a;
}

TrainConfig small_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.total_steps = 4;
  t.warmup_steps = 1;
  t.teacher_temp_warmup_steps = 2;
  return t;
}

Dataset small_data() {
  SyntheticSpec s;
  s.n_samples = 16;
  s.image_size = 20;
  s.render_size = 32;
  return synth_generate(s);
}

std::vector<StepMetrics> run_steps(const TrainConfig& tc, std::size_t steps) {
  const auto data = small_data();
  const auto mc = small_model();
  TrainState st = init_train_state(mc, tc.seed);
  StepBatcher batcher(data.size(), tc.batch_size, tc.seed);
  std::vector<StepMetrics> out;
  for (std::size_t i = 0; i < steps; ++i)
    out.push_back(train_step(st, make_batch(data, batcher.at(st.step), small_aug(), mc, tc, st.step), tc));
  return out;
}

}  // namespace

TEST(Schedules, Endpoints) {
  TrainConfig c;
  const auto s0 = schedules(0, c);
  EXPECT_EQ(s0.lr, 0.0);
  EXPECT_DOUBLE_EQ(s0.tau_t, c.teacher_temp_start);
  EXPECT_DOUBLE_EQ(s0.ema_m, c.ema_start);
  const auto w = schedules(c.warmup_steps, c);
  EXPECT_DOUBLE_EQ(w.lr, c.lr);
  EXPECT_DOUBLE_EQ(w.tau_t, c.teacher_temp_end);
  const auto end = schedules(c.total_steps, c);
  EXPECT_DOUBLE_EQ(end.lr, c.min_lr);
  EXPECT_EQ(end.ema_m, 1.0);
  EXPECT_THROW(schedules(c.total_steps + 1, c), HarnessError);
}

TEST(Schedules, MonotoneWhereExpected) {
  TrainConfig c;
  double prev_m = 0.0, prev_tau = 0.0;
  for (std::size_t s = 0; s <= c.total_steps; s += 50) {
    const auto x = schedules(s, c);
    EXPECT_GE(x.ema_m, prev_m);
    EXPECT_GE(x.tau_t, prev_tau);
    EXPECT_GE(x.lr, 0.0);
    EXPECT_LE(x.lr, c.lr);
    prev_m = x.ema_m;
    prev_tau = x.tau_t;
  }
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mask_ratio = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainStep, TeacherUntouchedWhenMomentumIsOne) {
  TrainConfig tc = small_train();
  tc.ema_start = 1.0;
  const auto data = small_data();
  const auto mc = small_model();
  TrainState st = init_train_state(mc, 0);
  const auto teacher_before = params_checksum(st.teacher);
  const auto student_before = params_checksum(st.student);
  StepBatcher batcher(data.size(), tc.batch_size, tc.seed);
  for (int i = 0; i < 2; ++i) train_step(st, make_batch(data, batcher.at(st.step), small_aug(), mc, tc, st.step), tc);
  EXPECT_EQ(params_checksum(st.teacher), teacher_before);
  EXPECT_NE(params_checksum(st.student), student_before);
}

TEST(TrainStep, PureDinoMatchesZeroWeightedMasks) {
  TrainConfig pure = small_train();
  pure.ibot_weight = 0.0;
  pure.mask_ratio = 0.0;
  TrainConfig masked_zero = small_train();
  masked_zero.ibot_weight = 0.0;
  masked_zero.mask_ratio = 0.3;
  const auto a = run_steps(pure, 3), b = run_steps(masked_zero, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a[i].same_numbers(b[i])) << "step " << i;
    EXPECT_EQ(a[i].ibot_loss, 0.0);
    EXPECT_TRUE(std::isfinite(a[i].dino_loss));
  }
}

TEST(TrainStep, IbotTermIsActiveWithMasks) {
  const auto m = run_steps(small_train(), 1);
  EXPECT_GT(m[0].ibot_loss, 0.0);
}

TEST(TrainStep, RepeatsBitExactly) {
  const auto a = run_steps(small_train(), 3), b = run_steps(small_train(), 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].same_numbers(b[i]));
}

TEST(TrainStep, NonFiniteLossNamesStepAndBatch) {
  TrainConfig tc = small_train();
  const auto data = small_data();
  const auto mc = small_model();
  TrainState st = init_train_state(mc, 0);
  st.student.patch_weight[0] = std::numeric_limits<float>::quiet_NaN();
  StepBatcher batcher(data.size(), tc.batch_size, tc.seed);
  try {
    train_step(st, make_batch(data, batcher.at(0), small_aug(), mc, tc, 0), tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("step 0"), std::string::npos) << what;
    EXPECT_NE(what.find("batch ids"), std::string::npos) << what;
  }
}

TEST(TrainStep, MasksDoNotPerturbViews) {
  TrainConfig a = small_train(), b = small_train();
  a.mask_ratio = 0.0;
  b.mask_ratio = 0.45;
  const auto data = small_data();
  const auto ba = make_batch(data, {0, 1, 2, 3}, small_aug(), small_model(), a, 7);
  const auto bb = make_batch(data, {0, 1, 2, 3}, small_aug(), small_model(), b, 7);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t v = 0; v < 2; ++v) EXPECT_EQ(ba.views[k].global_views[v].pixels, bb.views[k].global_views[v].pixels);
}

namespace {

TrainState run_state(const TrainConfig& tc, std::size_t steps) {
  const auto data = small_data();
  const auto mc = small_model();
  TrainState st = init_train_state(mc, tc.seed);
  StepBatcher batcher(data.size(), tc.batch_size, tc.seed);
  for (std::size_t i = 0; i < steps; ++i) train_step(st, make_batch(data, batcher.at(st.step), small_aug(), mc, tc, st.step), tc);
  return st;
}

double row_norm(const Tensor<float>& t, std::size_t r) {
  double s = 0.0;
  for (float v : t.row(r)) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

TEST(TrainStep, FrozenPrototypesStayPutThenMove) {
  TrainConfig tc = small_train();
  tc.freeze_prototypes_steps = 2;
  const auto init = init_train_state(small_model(), tc.seed);
  EXPECT_EQ(run_state(tc, 2).student.prototypes, init.student.prototypes);
  EXPECT_NE(run_state(tc, 3).student.prototypes, init.student.prototypes);
}

TEST(TrainStep, UnitPrototypesKeepRowNorms) {
  TrainConfig tc = small_train();
  tc.unit_prototypes = true;
  const auto st = run_state(tc, 3);
  for (std::size_t k = 0; k < st.student.prototypes.rows(); ++k) EXPECT_NEAR(row_norm(st.student.prototypes, k), 1.0, 1e-5);
}

TEST(TrainStep, TeacherStaysInsideStudentEnvelope) {
  // With m in [0, 1] every teacher coordinate is a convex combination of its
  // initial value and the student iterates.
  TrainConfig tc = small_train();
  tc.total_steps = 6;
  const auto data = small_data();
  const auto mc = small_model();
  TrainState st = init_train_state(mc, tc.seed);
  std::vector<float> lo, hi;
  st.teacher.visit([&](const std::string&, const Tensor<float>& t) {
    lo.insert(lo.end(), t.data().begin(), t.data().end());
  });
  hi = lo;
  StepBatcher batcher(data.size(), tc.batch_size, tc.seed);
  for (std::size_t i = 0; i < tc.total_steps; ++i) {
    train_step(st, make_batch(data, batcher.at(st.step), small_aug(), mc, tc, st.step), tc);
    std::size_t j = 0;
    st.student.visit([&](const std::string&, const Tensor<float>& t) {
      for (float v : t.data()) {
        lo[j] = std::min(lo[j], v);
        hi[j] = std::max(hi[j], v);
        ++j;
      }
    });
    j = 0;
    st.teacher.visit([&](const std::string& name, const Tensor<float>& t) {
      for (float v : t.data()) {
        const float slack = 1e-6f * (1.0f + std::abs(v));
        ASSERT_GE(v, lo[j] - slack) << name << " step " << i;
        ASSERT_LE(v, hi[j] + slack) << name << " step " << i;
        ++j;
      }
    });
  }
}
