#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "fundus/tape.hpp"
#include "fundus/train.hpp"
#include "test_util.hpp"

using namespace fundus;

namespace {

DatasetSplit micro_split(int n, SplitRole role, std::uint64_t seed, int size = 8) {
  // separable toy set: glaucoma images carry a bright square
  DatasetSplit s;
  s.role = role;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    LabeledExample ex;
    ex.label = i % 2;
    ex.id = std::string(role == SplitRole::kTrain ? "tr" : "te") + std::to_string(i);
    ex.image = Tensor::rand_uniform({3, size, size}, rng, 0.f, 0.3f);
    if (ex.label == 1) {
      for (int c = 0; c < 3; ++c)
        for (int y = size / 4; y < 3 * size / 4; ++y)
          for (int x = size / 4; x < 3 * size / 4; ++x) {
            ex.image.data()[(c * size + y) * size + x] = 0.9f;
          }
    }
    (ex.label ? s.counts.glaucoma : s.counts.normal)++;
    s.examples.push_back(std::move(ex));
  }
  return s;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("bce loss on the worked examples") {
  Tensor p = Tensor::from_data({1}, {0.5f});
  Tensor y = Tensor::from_data({1}, {1.f});
  CHECK(ops::bce_loss(p, y).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor perfect = ops::bce_loss(Tensor::from_data({2}, {1.f, 0.f}),
                                 Tensor::from_data({2}, {1.f, 0.f}));
  CHECK(perfect.item() >= 0.f);
  CHECK(perfect.item() <= 2e-7f);

  Tensor batch = ops::bce_loss(Tensor::from_data({2}, {0.9f, 0.2f}),
                               Tensor::from_data({2}, {1.f, 0.f}));
  CHECK(batch.item() == doctest::Approx(0.16425).epsilon(1e-4));

  CHECK_THROWS_AS(
      ops::bce_loss(Tensor::from_data({1}, {0.5f}), Tensor::from_data({1}, {0.5f})),
      ContractError);
}

TEST_CASE("gradient clipping on the worked examples") {
  ParamStore store(1);
  Tensor a = store.param("a", {4}, ParamStore::Init::kZeros);
  SUBCASE("norm 2 halves the gradients") {
    for (int i = 0; i < 4; ++i) a.grad()[i] = 1.f;  // norm = 2
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(0.5));
    CHECK(global_grad_norm(store) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("norm below the cap is untouched") {
    a.grad()[0] = 0.3f;
    CHECK(clip_grad_norm(store, 1.0) == 1.0);
    CHECK(a.grad_data()[0] == 0.3f);
  }
  SUBCASE("3-4-5 across two tensors") {
    Tensor b = store.param("b", {1}, ParamStore::Init::kZeros);
    a.grad()[0] = 3.f;
    b.grad()[0] = 4.f;
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(0.2));
    CHECK(a.grad_data()[0] == doctest::Approx(0.6f));
    CHECK(b.grad_data()[0] == doctest::Approx(0.8f));
  }
  SUBCASE("non-finite norm aborts") {
    a.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(clip_grad_norm(store, 1.0), NumericsError);
  }
}

TEST_CASE("adam follows the closed-form first step") {
  ParamStore store(2);
  Tensor p = store.param("p", {3}, ParamStore::Init::kZeros);
  p.data()[0] = 1.f;
  p.data()[1] = 1.f;
  p.data()[2] = 1.f;
  AdamState st;
  st.init(store);

  SUBCASE("first step moves by about lr in the gradient's direction") {
    p.grad()[0] = 0.5f;
    p.grad()[1] = -2.f;
    p.grad()[2] = 1e-3f;
    adam_step(store, st, 1e-2, 0.0);
    // scalar hand computation: m=0.1g, v=0.001g^2, mhat=g, vhat=g^2,
    // delta = lr*g/(|g|+eps) ~= lr*sign(g)
    CHECK(p.data()[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(1.01).epsilon(1e-6));
    CHECK(p.data()[2] == doctest::Approx(1.f - 1e-2f).epsilon(1e-4));
    CHECK(st.t == 1);
  }
  SUBCASE("zero gradient leaves parameters but advances the step counter") {
    adam_step(store, st, 1e-2, 0.0);
    CHECK(p.data()[0] == 1.f);
    CHECK(st.t == 1);
  }
  SUBCASE("decay-only path multiplies by 1 - lr*wd") {
    adam_step(store, st, 5e-4, 1e-4);
    CHECK(p.data()[0] == static_cast<float>(1.0 - 5e-8));
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 5e-4, 0.0, 50) == 5e-4);
  CHECK(cosine_lr(50, 5e-4, 0.0, 50) == 0.0);
  CHECK(cosine_lr(25, 5e-4, 0.0, 50) == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(cosine_lr(60, 5e-4, 1e-5, 50) == 1e-5);
  double prev = 1.0;
  for (int t = 0; t <= 50; ++t) {
    const double lr = cosine_lr(t, 5e-4, 1e-6, 50);
    CHECK(lr <= prev);
    CHECK(lr >= 1e-6);
    CHECK(lr <= 5e-4);
    prev = lr;
  }
}

TEST_CASE("one epoch logs exactly ceil(N/batch) steps") {
  auto train_split = micro_split(10, SplitRole::kTrain, 3);
  auto test_split = micro_split(4, SplitRole::kTest, 4);
  HybridModel model(testutil::micro_config(ModelVariant::kCnnOnly), 5);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.augment_enabled = false;
  TrainResult r = train(model, train_split, test_split, tc, AugmentationConfig::identity());
  CHECK(r.total_steps == 3);
  CHECK(r.log.records.size() == 1);
  CHECK(r.log.records[0].epoch == 1);
}

TEST_CASE("post-clip norm never exceeds the cap") {
  auto train_split = micro_split(8, SplitRole::kTrain, 6);
  auto test_split = micro_split(4, SplitRole::kTest, 7);
  HybridModel model(testutil::micro_config(ModelVariant::kCrossAttention), 8);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 4;
  tc.augment_enabled = false;
  int checked = 0;
  TrainResult r = train(model, train_split, test_split, tc, AugmentationConfig::identity(), "",
                        nlohmann::json::object(), [&](const StepInfo& info) {
                          CHECK(info.post_clip_norm <= 1.0 + 1e-6);
                          CHECK(info.lr <= static_cast<double>(tc.lr));
                          ++checked;
                        });
  CHECK(checked == 10);
  CHECK(r.total_steps == 10);
  // learning rate sequence is non-increasing
  for (std::size_t i = 1; i < r.log.records.size(); ++i) {
    CHECK(r.log.records[i].lr <= r.log.records[i - 1].lr);
  }
}

TEST_CASE("the first step reduces the first-batch loss on average") {
  // both losses are measured in training mode so batch-norm statistics
  // match; the bar is the seed-averaged decrease
  double total0 = 0.0, total1 = 0.0;
  int wins = 0;
  const int seeds = 5;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    HybridModel model(testutil::micro_config(ModelVariant::kCrossAttention), seed);
    auto split = micro_split(8, SplitRole::kTrain, seed + 200);
    auto batches = make_batches(split, 8, 0);
    AdamState opt;
    opt.init(model.params());

    Tape tape;
    Tensor l0;
    {
      TapeScope scope(tape);
      ForwardResult fwd = model.forward(batches[0].images, true);
      l0 = ops::bce_loss(fwd.prob, batches[0].labels);
    }
    model.params().zero_grads();
    tape.backward(l0);
    clip_grad_norm(model.params(), 1.0);
    adam_step(model.params(), opt, 5e-4, 1e-4);
    ForwardResult fwd = model.forward(batches[0].images, true);
    Tensor l1 = ops::bce_loss(fwd.prob, batches[0].labels);
    total0 += l0.item();
    total1 += l1.item();
    if (l1.item() < l0.item()) ++wins;
  }
  CHECK(total1 < total0);
  CHECK(wins >= 4);
}

TEST_CASE("training is byte-deterministic and checkpoints reload exactly") {
  testutil::TempDir dir("train_det");
  std::filesystem::create_directories(dir.sub("a"));
  std::filesystem::create_directories(dir.sub("b"));
  auto run = [&](const std::string& tag) {
    auto train_split = micro_split(8, SplitRole::kTrain, 11);
    auto test_split = micro_split(6, SplitRole::kTest, 12);
    HybridModel model(testutil::micro_config(ModelVariant::kCrossAttention), 13);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.seed = 21;
    TrainResult r = train(model, train_split, test_split, tc, AugmentationConfig(),
                          dir.sub(tag) + "/ckpt", nlohmann::json{{"tag", "t"}});
    return std::make_pair(r.log.to_csv(), r);
  };
  auto [csv_a, ra] = run("a");
  auto [csv_b, rb] = run("b");
  CHECK(csv_a == csv_b);
  CHECK(ra.best_epoch == rb.best_epoch);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir.sub("a/ckpt.bin")) == slurp(dir.sub("b/ckpt.bin")));
  CHECK(slurp(dir.sub("a/ckpt.json")) == slurp(dir.sub("b/ckpt.json")));

  // reload reproduces the recorded accuracy bit for bit
  auto test_split = micro_split(6, SplitRole::kTest, 12);
  CheckpointManifest manifest = read_checkpoint_manifest(dir.sub("a/ckpt.json"));
  HybridModel fresh(testutil::micro_config(ModelVariant::kCrossAttention), 999);
  load_checkpoint_into(manifest, fresh);
  EvalResult ev = evaluate(fresh, test_split, 4, 0.5f);
  CHECK(ev.accuracy == manifest.test_accuracy);
}

TEST_CASE("checkpoints only move on strict improvement") {
  auto train_split = micro_split(8, SplitRole::kTrain, 31);
  auto test_split = micro_split(6, SplitRole::kTest, 32);
  HybridModel model(testutil::micro_config(ModelVariant::kCnnOnly), 33);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 4;
  tc.augment_enabled = false;
  TrainResult r = train(model, train_split, test_split, tc, AugmentationConfig::identity());
  REQUIRE(r.best_epoch >= 1);
  double best = -1.0;
  int expect_epoch = 0;
  for (const auto& rec : r.log.records) {
    if (rec.test_accuracy > best) {
      best = rec.test_accuracy;
      expect_epoch = rec.epoch;
    }
  }
  CHECK(r.best_epoch == expect_epoch);
  CHECK(r.best_test_accuracy == best);
}

TEST_CASE("non-finite activations abort with a located error") {
  auto train_split = micro_split(4, SplitRole::kTrain, 41);
  auto test_split = micro_split(4, SplitRole::kTest, 42);
  HybridModel model(testutil::micro_config(ModelVariant::kCnnOnly), 43);
  model.params().find("cnn.stem.conv.weight").data()[0] =
      std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  try {
    train(model, train_split, test_split, tc, AugmentationConfig::identity());
    FAIL("expected NumericsError");
  } catch (const NumericsError& e) {
    CHECK(std::string(e.what()).find("cnn.stem") != std::string::npos);
  }
}

TEST_CASE("per-step cosine schedule is selectable") {
  auto train_split = micro_split(8, SplitRole::kTrain, 51);
  auto test_split = micro_split(4, SplitRole::kTest, 52);
  HybridModel model(testutil::micro_config(ModelVariant::kCnnOnly), 53);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.per_step_schedule = true;
  tc.augment_enabled = false;
  std::vector<double> lrs;
  train(model, train_split, test_split, tc, AugmentationConfig::identity(), "",
        nlohmann::json::object(), [&](const StepInfo& info) { lrs.push_back(info.lr); });
  REQUIRE(lrs.size() == 4);
  CHECK(lrs[0] == static_cast<double>(tc.lr));
  for (std::size_t i = 1; i < lrs.size(); ++i) CHECK(lrs[i] < lrs[i - 1]);
}

}  // TEST_SUITE train
