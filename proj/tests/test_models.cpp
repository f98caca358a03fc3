#include <doctest.h>

#include <cmath>
#include <cstring>

#include "fundus/grad_check.hpp"
#include "fundus/tape.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fundus;

TEST_SUITE("cnn") {

TEST_CASE("desk and b0 configs give a 7x7 grid at 224") {
  CHECK(CnnConfig::desk().output_stride() == 32);
  CHECK(CnnConfig::b0().output_stride() == 32);
  CHECK(CnnConfig::tiny().output_stride() == 32);
  CHECK(224 / CnnConfig::desk().output_stride() == 7);
}

TEST_CASE("a two-stage stride-4 config yields a 56x56 grid") {
  CnnConfig c;
  c.stem_channels = 4;
  c.stages = {{1, 8, 3, 2, 1, 0.25f}};  // stem 2 * stage 2 = 4
  c.feature_channels = 8;
  CHECK(c.output_stride() == 4);
  ParamStore store(7);
  CnnBackbone net(c, store);
  Rng rng(3);
  Tensor img = Tensor::rand_uniform({1, 3, 224, 224}, rng, 0.f, 1.f);
  Tensor fmap = net.forward(img, false);
  CHECK(fmap.shape() == Shape{1, 8, 56, 56});
}

TEST_CASE("same seed builds bit-identical parameters") {
  ParamStore s1(42), s2(42), s3(43);
  CnnBackbone a(CnnConfig::tiny(), s1);
  CnnBackbone b(CnnConfig::tiny(), s2);
  CnnBackbone c(CnnConfig::tiny(), s3);
  REQUIRE(s1.entries().size() == s2.entries().size());
  bool any_differs_from_other_seed = false;
  for (std::size_t i = 0; i < s1.entries().size(); ++i) {
    const auto& ea = s1.entries()[i];
    const auto& eb = s2.entries()[i];
    CHECK(ea.name == eb.name);
    CHECK(std::memcmp(ea.tensor.data(), eb.tensor.data(),
                      static_cast<std::size_t>(ea.tensor.numel()) * sizeof(float)) == 0);
    if (std::memcmp(ea.tensor.data(), s3.entries()[i].tensor.data(),
                    static_cast<std::size_t>(ea.tensor.numel()) * sizeof(float)) != 0) {
      any_differs_from_other_seed = true;
    }
  }
  CHECK(any_differs_from_other_seed);
}

TEST_CASE("zero input with zero head gain reduces to the bias pathway") {
  ModelConfig mc = testutil::micro_config(ModelVariant::kCnnOnly, 16);
  ParamStore store(5);
  CnnBackbone net(mc.cnn, store);
  store.find("cnn.head.bn.gain").vec().assign(static_cast<std::size_t>(mc.cnn.feature_channels),
                                              0.f);
  Tensor zero = Tensor::zeros({1, 3, 16, 16});
  Tensor fmap = net.forward(zero, false);
  CHECK(fmap.all_finite());
  const Tensor bias = store.find("cnn.head.bn.bias");
  const int hw = fmap.dim(2) * fmap.dim(3);
  for (int c = 0; c < mc.cnn.feature_channels; ++c) {
    const float b = bias.data()[c];
    const float want = b * (1.f / (1.f + std::exp(-b)));  // silu of the bias
    for (int i = 0; i < hw; ++i) {
      CHECK(fmap.data()[c * hw + i] == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("inference is batch independent") {
  ModelConfig mc = testutil::micro_config(ModelVariant::kCnnOnly, 16);
  ParamStore store(6);
  CnnBackbone net(mc.cnn, store);
  Rng rng(8);
  Tensor one = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.f, 1.f);
  Tensor other = Tensor::rand_uniform({1, 3, 16, 16}, rng, 0.f, 1.f);
  Tensor both = ops::concat(one, other, 0);
  Tensor fa = net.forward(one, false);
  Tensor fb = net.forward(other, false);
  Tensor fboth = net.forward(both, false);
  const std::int64_t n = fa.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    CHECK(fboth.data()[i] == doctest::Approx(fa.data()[i]).epsilon(1e-5));
    CHECK(fboth.data()[n + i] == doctest::Approx(fb.data()[i]).epsilon(1e-5));
  }
  // identical images in one batch give identical rows
  Tensor twin = ops::concat(one, one, 0);
  Tensor ft = net.forward(twin, false);
  for (std::int64_t i = 0; i < n; ++i) CHECK(ft.data()[i] == ft.data()[n + i]);
}

TEST_CASE("squeeze-excitation gates as specified") {
  ParamStore store(9);
  SqueezeExcite se(store, "se", 4, 2);
  Rng rng(10);
  Tensor x = Tensor::randn({2, 4, 3, 3}, rng);

  SUBCASE("zero-initialized gate halves the input") {
    store.find("se.reduce.weight").vec().assign(8, 0.f);
    store.find("se.expand.weight").vec().assign(8, 0.f);
    Tensor y = se.forward(x);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(0.5f * x.data()[i]).epsilon(1e-6));
    }
  }
  SUBCASE("zero input stays zero") {
    Tensor y = se.forward(Tensor::zeros({2, 4, 3, 3}));
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.f);
  }
  SUBCASE("per-channel ratio matches a hand-computed gate") {
    Tensor y = se.forward(x);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 4; ++c) {
        // recompute the gate from pooled means through the two fc layers
        double pooled[4];
        for (int ci = 0; ci < 4; ++ci) {
          double s = 0.0;
          for (int i = 0; i < 9; ++i) s += x.data()[(n * 4 + ci) * 9 + i];
          pooled[ci] = s / 9.0;
        }
        double hidden[2];
        for (int h = 0; h < 2; ++h) {
          double a = store.find("se.reduce.bias").data()[h];
          for (int ci = 0; ci < 4; ++ci) {
            a += store.find("se.reduce.weight").data()[h * 4 + ci] * pooled[ci];
          }
          hidden[h] = a / (1.0 + std::exp(-a));  // silu
        }
        double g = store.find("se.expand.bias").data()[c];
        for (int h = 0; h < 2; ++h) {
          g += store.find("se.expand.weight").data()[c * 2 + h] * hidden[h];
        }
        g = 1.0 / (1.0 + std::exp(-g));
        for (int i = 0; i < 9; ++i) {
          const float xi = x.data()[(n * 4 + c) * 9 + i];
          CHECK(y.data()[(n * 4 + c) * 9 + i] ==
                doctest::Approx(xi * g).epsilon(1e-4));
        }
      }
  }
}

TEST_CASE("output dims follow the stride formula over random configs") {
  Rng rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    CnnConfig c;
    c.stem_channels = 2 + static_cast<int>(rng.uniform_int(3));
    const int n_stages = 1 + static_cast<int>(rng.uniform_int(2));
    for (int s = 0; s < n_stages; ++s) {
      StageSpec st;
      st.expansion = 1 + static_cast<int>(rng.uniform_int(2));
      st.out_channels = 3 + static_cast<int>(rng.uniform_int(5));
      st.kernel = 3;
      st.stride = rng.uniform() < 0.5 ? 1 : 2;
      st.repeats = 1;
      st.se_ratio = 0.5f;
      c.stages.push_back(st);
    }
    c.feature_channels = 6;
    const int stride = c.output_stride();
    const int img = stride * (1 + static_cast<int>(rng.uniform_int(3)));
    ParamStore store(static_cast<std::uint64_t>(trial));
    CnnBackbone net(c, store);
    Tensor x = Tensor::zeros({1, 3, img, img});
    Tensor y = net.forward(x, false);
    CHECK(y.dim(2) == img / stride);
    CHECK(y.dim(3) == img / stride);
  }
}

TEST_CASE("every parameter gets gradient signal") {
  ModelConfig mc = testutil::micro_config(ModelVariant::kCrossAttention, 16);
  HybridModel model(mc, 77);
  Rng rng(12);
  Tensor images = Tensor::rand_uniform({4, 3, 16, 16}, rng, 0.f, 1.f);
  Tape tape;
  {
    TapeScope scope(tape);
    ForwardResult fwd = model.forward(images, true);
    tape.backward(ops::sum_all(fwd.logit));
  }
  for (const auto& e : model.params().entries()) {
    if (!e.trainable) continue;
    REQUIRE_MESSAGE(e.tensor.has_grad(), e.name);
    float mx = 0.f;
    const float* g = e.tensor.grad_data();
    for (std::int64_t i = 0; i < e.tensor.numel(); ++i) mx = std::max(mx, std::fabs(g[i]));
    CHECK_MESSAGE(mx > 0.f, "dead parameter: " << e.name);
  }
}

TEST_CASE("backbone gradients pass finite differences") {
  ModelConfig mc = testutil::micro_config(ModelVariant::kCnnOnly, 8);
  ParamStore store(13);
  CnnBackbone net(mc.cnn, store);
  Rng rng(14);
  Tensor x = Tensor::rand_uniform({2, 3, 8, 8}, rng, 0.f, 1.f);
  auto loss = [&]() { return ops::sum_all(net.forward(x, true)); };
  for (const char* name : {"cnn.stem.conv.weight", "cnn.s1.b0.dw.conv.weight",
                           "cnn.s1.b0.se.reduce.weight", "cnn.s1.b0.se.expand.bias",
                           "cnn.s1.b1.expand.conv.weight", "cnn.s1.b0.dw.bn.gain",
                           "cnn.s1.b1.project.bn.bias", "cnn.head.conv.weight"}) {
    const double err = grad_check_param(loss, store.find(name), 5e-3f, 6, 99);
    CHECK_MESSAGE(err < 1e-3, name << " rel err " << err);
  }
}

}  // TEST_SUITE cnn

TEST_SUITE("vit") {

TEST_CASE("token counts follow the patch arithmetic") {
  ViTConfig c;
  c.patch = 16;
  CHECK(c.tokens() == 196);
  c.patch = 32;
  CHECK(c.tokens() == 49);
  c.use_cls_token = true;
  CHECK(c.tokens() == 50);
  c.patch = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero image with bias-free projection reproduces the position embedding") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;
  ParamStore store(15);
  ViTEncoder enc(c, store);
  store.find("vit.patch_embed.bias").vec().assign(static_cast<std::size_t>(c.dim), 0.f);
  Tensor tokens = enc.patchify(Tensor::zeros({2, 3, 64, 64}));
  const Tensor pos = store.find("vit.pos_embed");
  for (int b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < pos.numel(); ++i) {
      CHECK(tokens.data()[b * pos.numel() + i] == pos.data()[i]);
    }
}

TEST_CASE("attention collapses to the value path for a single key") {
  ParamStore store(16);
  MultiHeadAttention mha(store, "attn", 8, 2);
  Rng rng(17);
  Tensor q = Tensor::randn({2, 3, 8}, rng);
  Tensor kv = Tensor::randn({2, 1, 8}, rng);
  auto res = mha.forward(q, kv);
  for (std::int64_t i = 0; i < res.weights.numel(); ++i) CHECK(res.weights.data()[i] == 1.f);
  // output is independent of the queries
  Tensor q2 = Tensor::randn({2, 3, 8}, rng);
  auto res2 = mha.forward(q2, kv);
  CHECK(oracle::max_abs_diff(res.output, res2.output) < 1e-6);
}

TEST_CASE("equal rows give uniform attention") {
  ParamStore store(18);
  MultiHeadAttention mha(store, "attn", 8, 2);
  Rng rng(19);
  Tensor row = Tensor::randn({1, 1, 8}, rng);
  Tensor x = ops::broadcast_batch(row, 1);
  Tensor rep = ops::concat(ops::concat(x, x, 1), ops::concat(x, x, 1), 1);  // [1,4,8]
  auto res = mha.forward(rep, rep);
  for (std::int64_t i = 0; i < res.weights.numel(); ++i) {
    CHECK(res.weights.data()[i] == doctest::Approx(0.25).epsilon(1e-6));
  }
}

TEST_CASE("attention matches the per-head loop oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamStore store(seed + 20);
    MultiHeadAttention mha(store, "attn", 8, 2);
    Rng rng(seed);
    Tensor q = Tensor::randn({2, 3, 8}, rng);
    Tensor kv = Tensor::randn({2, 3, 8}, rng);
    auto res = mha.forward(q, kv);
    Tensor ow;
    Tensor want = oracle::multi_head_attention(q, kv, mha, &ow);
    CHECK(oracle::max_abs_diff(want, res.output) < 1e-5);
    CHECK(oracle::max_abs_diff(ow, res.weights) < 1e-5);
  }
}

TEST_CASE("depth zero is exactly the patch embedding") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;
  c.depth = 0;
  ParamStore store(21);
  ViTEncoder enc(c, store);
  Rng rng(22);
  Tensor img = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.f, 1.f);
  Tensor out = enc.forward(img);
  Tensor want = enc.patchify(img);
  CHECK(std::memcmp(out.data(), want.data(), static_cast<std::size_t>(out.numel()) * sizeof(float)) == 0);
}

TEST_CASE("zeroed block output projections reduce to the patch embedding") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;
  ParamStore store(23);
  ViTEncoder enc(c, store);
  for (int i = 0; i < c.depth; ++i) {
    const std::string bp = "vit.block" + std::to_string(i);
    auto wo = store.find(bp + ".attn.wo.weight");
    wo.vec().assign(wo.vec().size(), 0.f);
    auto fc2 = store.find(bp + ".mlp.fc2.weight");
    fc2.vec().assign(fc2.vec().size(), 0.f);
  }
  Rng rng(24);
  Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.f, 1.f);
  Tensor out = enc.forward(img);
  Tensor want = enc.patchify(img);
  CHECK(std::memcmp(out.data(), want.data(), static_cast<std::size_t>(out.numel()) * sizeof(float)) == 0);
}

TEST_CASE("attention rows sum to one at every layer") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ParamStore store(seed);
    ViTEncoder enc(c, store);
    Rng rng(seed + 1000);
    Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.f, 1.f);
    std::map<std::string, Tensor> attn;
    enc.forward(img, nullptr, &attn);
    REQUIRE(attn.size() == 2);
    for (const auto& [name, w] : attn) {
      const int tk = w.dim(3);
      const std::int64_t rows = w.numel() / tk;
      for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int k = 0; k < tk; ++k) {
          const float v = w.data()[r * tk + k];
          CHECK(v >= 0.f);
          s += v;
        }
        CHECK_MESSAGE(std::fabs(s - 1.0) < 1e-6, name);
      }
    }
  }
}

TEST_CASE("patch permutation with matching position embeddings permutes tokens") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;  // 2x2 grid of 32px patches
  ParamStore store(25);
  ViTEncoder enc(c, store);
  Rng rng(26);
  Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.f, 1.f);
  Tensor base = enc.forward(img);

  // swap the two top patches in the image and the matching pos embed rows
  const std::vector<int> perm = {1, 0, 2, 3};
  Tensor img2 = img.clone();
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const auto at = [&](int gy, int gx, int yy, int xx) -> std::int64_t {
          return (static_cast<std::int64_t>(ch) * 64 + gy * 32 + yy) * 64 + gx * 32 + xx;
        };
        img2.data()[at(0, 0, y, x)] = img.data()[at(0, 1, y, x)];
        img2.data()[at(0, 1, y, x)] = img.data()[at(0, 0, y, x)];
      }
  Tensor pos = store.find("vit.pos_embed");
  std::vector<float> orig = pos.vec();
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < c.dim; ++d) {
      pos.data()[t * c.dim + d] = orig[static_cast<std::size_t>(perm[static_cast<std::size_t>(t)] * c.dim + d)];
    }
  Tensor swapped = enc.forward(img2);
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < c.dim; ++d) {
      CHECK(swapped.data()[t * c.dim + d] ==
            doctest::Approx(base.data()[perm[static_cast<std::size_t>(t)] * c.dim + d]).epsilon(2e-4));
    }
}

TEST_CASE("tiny encoder gradients pass finite differences") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 32;  // 1 token of 32px -> use patch 16 for 4 tokens
  c.patch = 16;
  c.dim = 16;
  ParamStore store(27);
  ViTEncoder enc(c, store);
  Rng rng(28);
  Tensor img = Tensor::rand_uniform({2, 3, 32, 32}, rng, 0.f, 1.f);
  Tensor mix = Tensor::randn({16}, rng);
  auto loss = [&]() { return ops::sum_all(ops::mul(enc.forward(img), mix)); };
  for (const char* name :
       {"vit.patch_embed.weight", "vit.pos_embed", "vit.block0.attn.wq.weight",
        "vit.block0.attn.wo.bias", "vit.block0.ln1.gain", "vit.block1.mlp.fc1.weight",
        "vit.block1.ln2.bias"}) {
    const double err = grad_check_param(loss, store.find(name), 5e-3f, 6, 55);
    CHECK_MESSAGE(err < 1e-3, name << " rel err " << err);
  }
}

}  // TEST_SUITE vit
