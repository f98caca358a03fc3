#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "fundus/augment.hpp"
#include "fundus/grad_check.hpp"
#include "fundus/serialize.hpp"
#include "fundus/thread_pool.hpp"
#include "fundus/train.hpp"
#include "test_util.hpp"

using namespace fundus;

namespace {

// tiny assets for the decoder edge cases

// 2x2 grayscale PNG, pixel values 0, 85, 170, 255
const unsigned char kGrayPng[] = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x00, 0x00, 0x00, 0x00, 0x57,
    0xdd, 0x52, 0xf8, 0x00, 0x00, 0x00, 0x0e, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x60,
    0x08, 0x65, 0x58, 0xf5, 0x1f, 0x00, 0x03, 0xad, 0x01, 0xff, 0x67, 0xfb, 0xca, 0x09, 0x00,
    0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};

// 2x2 RGBA PNG: red, half-alpha green, zero-alpha blue, (10,20,30)
const unsigned char kRgbaPng[] = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x06, 0x00, 0x00, 0x00, 0x72,
    0xb6, 0x0d, 0x24, 0x00, 0x00, 0x00, 0x1a, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8,
    0xcf, 0xc0, 0xf0, 0x9f, 0xe1, 0x3f, 0x43, 0x03, 0x03, 0x03, 0xc3, 0x7f, 0x06, 0x2e, 0x11,
    0xb9, 0xff, 0x00, 0x37, 0x80, 0x05, 0xb8, 0x70, 0x4c, 0x3d, 0x7f, 0x00, 0x00, 0x00, 0x00,
    0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};

// 8x8 solid (200,120,40) JPEG at quality 95
const unsigned char kOrangeJpg[] = {
    0xff, 0xd8, 0xff, 0xe0, 0x00, 0x10, 0x4a, 0x46, 0x49, 0x46, 0x00, 0x01, 0x01, 0x00, 0x00,
    0x01, 0x00, 0x01, 0x00, 0x00, 0xff, 0xdb, 0x00, 0x43, 0x00, 0x02, 0x01, 0x01, 0x01, 0x01,
    0x01, 0x02, 0x01, 0x01, 0x01, 0x02, 0x02, 0x02, 0x02, 0x02, 0x04, 0x03, 0x02, 0x02, 0x02,
    0x02, 0x05, 0x04, 0x04, 0x03, 0x04, 0x06, 0x05, 0x06, 0x06, 0x06, 0x05, 0x06, 0x06, 0x06,
    0x07, 0x09, 0x08, 0x06, 0x07, 0x09, 0x07, 0x06, 0x06, 0x08, 0x0b, 0x08, 0x09, 0x0a, 0x0a,
    0x0a, 0x0a, 0x0a, 0x06, 0x08, 0x0b, 0x0c, 0x0b, 0x0a, 0x0c, 0x09, 0x0a, 0x0a, 0x0a, 0xff,
    0xdb, 0x00, 0x43, 0x01, 0x02, 0x02, 0x02, 0x02, 0x02, 0x02, 0x05, 0x03, 0x03, 0x05, 0x0a,
    0x07, 0x06, 0x07, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a,
    0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a,
    0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a,
    0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0x0a, 0xff, 0xc0, 0x00, 0x11, 0x08, 0x00, 0x08,
    0x00, 0x08, 0x03, 0x01, 0x22, 0x00, 0x02, 0x11, 0x01, 0x03, 0x11, 0x01, 0xff, 0xc4, 0x00,
    0x1f, 0x00, 0x00, 0x01, 0x05, 0x01, 0x01, 0x01, 0x01, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x00, 0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08, 0x09, 0x0a, 0x0b,
    0xff, 0xc4, 0x00, 0xb5, 0x10, 0x00, 0x02, 0x01, 0x03, 0x03, 0x02, 0x04, 0x03, 0x05, 0x05,
    0x04, 0x04, 0x00, 0x00, 0x01, 0x7d, 0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21,
    0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08,
    0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a,
    0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37,
    0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56,
    0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75,
    0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93,
    0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9,
    0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6,
    0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7,
    0xf8, 0xf9, 0xfa, 0xff, 0xc4, 0x00, 0x1f, 0x01, 0x00, 0x03, 0x01, 0x01, 0x01, 0x01, 0x01,
    0x01, 0x01, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x01, 0x02, 0x03, 0x04, 0x05,
    0x06, 0x07, 0x08, 0x09, 0x0a, 0x0b, 0xff, 0xc4, 0x00, 0xb5, 0x11, 0x00, 0x02, 0x01, 0x02,
    0x04, 0x04, 0x03, 0x04, 0x07, 0x05, 0x04, 0x04, 0x00, 0x01, 0x02, 0x77, 0x00, 0x01, 0x02,
    0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71, 0x13, 0x22,
    0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0, 0x15,
    0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47,
    0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66,
    0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84,
    0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a,
    0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7,
    0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4,
    0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea,
    0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa, 0xff, 0xda, 0x00, 0x0c, 0x03, 0x01,
    0x00, 0x02, 0x11, 0x03, 0x11, 0x00, 0x3f, 0x00, 0xdc, 0xa2, 0x8a, 0x2b, 0xf8, 0xac, 0xfe,
    0xbc, 0x3f, 0xff, 0xd9};

void write_bytes(const std::string& path, const unsigned char* data, std::size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("grayscale PNGs are replicated to RGB") {
  testutil::TempDir dir("gray");
  write_bytes(dir.sub("g.png"), kGrayPng, sizeof(kGrayPng));
  ImageU8 img = decode_image(dir.sub("g.png"));
  CHECK(img.width == 2);
  CHECK(img.height == 2);
  const int want[] = {0, 85, 170, 255};
  for (int i = 0; i < 4; ++i) {
    const auto* p = img.pixel(i / 2, i % 2);
    CHECK(p[0] == want[i]);
    CHECK(p[1] == want[i]);
    CHECK(p[2] == want[i]);
  }
}

TEST_CASE("RGBA PNGs drop their alpha channel") {
  testutil::TempDir dir("rgba");
  write_bytes(dir.sub("a.png"), kRgbaPng, sizeof(kRgbaPng));
  ImageU8 img = decode_image(dir.sub("a.png"));
  CHECK(img.width == 2);
  CHECK(img.height == 2);
  CHECK(img.pixel(0, 0)[0] == 255);  // red survives
  CHECK(img.pixel(0, 1)[1] == 255);  // green survives despite alpha 128
  CHECK(img.pixel(1, 0)[2] == 255);  // blue survives despite alpha 0
  CHECK(img.pixel(1, 1)[0] == 10);
  CHECK(img.pixel(1, 1)[1] == 20);
  CHECK(img.pixel(1, 1)[2] == 30);
}

TEST_CASE("JPEG decoding is supported") {
  testutil::TempDir dir("jpg");
  write_bytes(dir.sub("o.jpg"), kOrangeJpg, sizeof(kOrangeJpg));
  ImageU8 img = decode_image(dir.sub("o.jpg"));
  CHECK(img.width == 8);
  CHECK(img.height == 8);
  // lossy, so only approximate
  CHECK(std::abs(img.pixel(4, 4)[0] - 200) <= 6);
  CHECK(std::abs(img.pixel(4, 4)[1] - 120) <= 6);
  CHECK(std::abs(img.pixel(4, 4)[2] - 40) <= 6);
}

TEST_CASE("degenerate crop windows fall back to identity") {
  Rng rng(1);
  LabeledExample ex;
  ex.label = 0;
  ex.id = "x";
  ex.image = Tensor::rand_uniform({3, 16, 16}, rng, 0.f, 1.f);
  AugmentationConfig cfg = AugmentationConfig::identity();
  cfg.crop_scale_min = 2.0f;  // side > image for every sample
  cfg.crop_scale_max = 3.0f;
  Rng arng(2);
  LabeledExample out = augment(ex, arng, cfg);
  CHECK(std::memcmp(out.image.data(), ex.image.data(),
                    static_cast<std::size_t>(ex.image.numel()) * sizeof(float)) == 0);
}

TEST_CASE("single tensor blob round trip") {
  testutil::TempDir dir("blob");
  Rng rng(3);
  NamedTensor t{"some.weight", Tensor::randn({2, 3, 4}, rng)};
  save_tensor(dir.sub("t"), t);
  NamedTensor back = load_tensor(dir.sub("t"));
  CHECK(back.name == t.name);
  CHECK(back.tensor.shape() == t.tensor.shape());
  CHECK(std::memcmp(back.tensor.data(), t.tensor.data(),
                    static_cast<std::size_t>(t.tensor.numel()) * sizeof(float)) == 0);
}

}  // TEST_SUITE pipeline

TEST_SUITE("cnn") {

TEST_CASE("the full-scale stage table builds at its published size") {
  CnnConfig b0 = CnnConfig::b0();
  CHECK(b0.output_stride() == 32);
  ParamStore store(1);
  CnnBackbone net(b0, store);
  const std::int64_t params = store.trainable_count();
  CHECK(params > 3'000'000);   // B0 feature extractor is ~4M
  CHECK(params < 6'000'000);
}

}  // TEST_SUITE cnn

TEST_SUITE("vit") {

TEST_CASE("the b16 preset has the expected geometry") {
  ViTConfig c = ViTConfig::b16();
  c.validate();
  CHECK(c.tokens() == 196);
  CHECK(c.dim == 768);
  CHECK(c.depth == 12);
}

}  // TEST_SUITE vit

TEST_SUITE("fusion") {

TEST_CASE("max pooling is selectable and differs from mean") {
  ModelConfig mc = testutil::micro_config(ModelVariant::kCrossAttention, 16);
  HybridModel mean_model(mc, 5);
  mc.fusion.max_pool = true;
  HybridModel max_model(mc, 5);
  Rng rng(6);
  Tensor images = Tensor::rand_uniform({2, 3, 16, 16}, rng, 0.f, 1.f);
  ForwardResult a = mean_model.forward(images, false);
  ForwardResult b = max_model.forward(images, false);
  bool differs = false;
  for (int i = 0; i < 2; ++i) differs |= a.logit.data()[i] != b.logit.data()[i];
  CHECK(differs);
}

}  // TEST_SUITE fusion

TEST_SUITE("train") {

TEST_CASE("coupled weight decay folds into the gradient instead") {
  ParamStore store(7);
  Tensor p = store.param("p", {1}, ParamStore::Init::kZeros);
  p.data()[0] = 2.f;
  p.grad()[0] = 0.f;
  AdamState st;
  st.init(store);
  // decoupled with zero grad: pure multiplicative shrink
  adam_step(store, st, 1e-2, 1e-2, true);
  CHECK(p.data()[0] == doctest::Approx(2.f * (1.f - 1e-4f)).epsilon(1e-7));

  ParamStore store2(8);
  Tensor q = store2.param("q", {1}, ParamStore::Init::kZeros);
  q.data()[0] = 2.f;
  q.grad()[0] = 0.f;
  AdamState st2;
  st2.init(store2);
  // coupled: wd*p becomes the gradient, so the first Adam step moves by ~lr
  adam_step(store2, st2, 1e-2, 1e-2, false);
  CHECK(q.data()[0] == doctest::Approx(2.f - 1e-2f).epsilon(1e-3));
}

}  // TEST_SUITE train

TEST_SUITE("gradcheck") {

TEST_CASE("the step size contract is enforced") {
  Tensor x = Tensor::zeros({2});
  auto f = [](const Tensor& t) { return ops::sum_all(t); };
  CHECK_THROWS_AS(grad_check(f, x, 1e-5f), ContractError);
  CHECK_THROWS_AS(grad_check(f, x, 0.5f), ContractError);
  CHECK(grad_check(f, x, 1e-2f) <= 1e-6);
}

}  // TEST_SUITE gradcheck

TEST_SUITE("tensor") {

TEST_CASE("kernel results are bitwise invariant to the thread count") {
  const int saved = num_threads();
  ModelConfig mc = testutil::micro_config(ModelVariant::kCrossAttention, 16);
  Rng rng(11);
  Tensor images = Tensor::rand_uniform({4, 3, 16, 16}, rng, 0.f, 1.f);

  set_num_threads(1);
  HybridModel serial_model(mc, 12);
  ForwardResult serial = serial_model.forward(images, false);

  set_num_threads(4);
  HybridModel parallel_model(mc, 12);
  ForwardResult parallel = parallel_model.forward(images, false);

  set_num_threads(saved);
  CHECK(std::memcmp(serial.logit.data(), parallel.logit.data(), 4 * sizeof(float)) == 0);
  const Tensor& fa = serial.taps.at("cnn.features");
  const Tensor& fb = parallel.taps.at("cnn.features");
  CHECK(std::memcmp(fa.data(), fb.data(),
                    static_cast<std::size_t>(fa.numel()) * sizeof(float)) == 0);
}

TEST_CASE("parallel_for covers every index exactly once under load") {
  const int saved = num_threads();
  set_num_threads(4);
  for (int round = 0; round < 200; ++round) {
    const std::int64_t n = 1 + round * 7 % 1000;
    std::vector<int> hits(static_cast<std::size_t>(n), 0);
    parallel_for(n, 8, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t i = b; i < e; ++i) hits[static_cast<std::size_t>(i)]++;
    });
    for (std::int64_t i = 0; i < n; ++i) REQUIRE(hits[static_cast<std::size_t>(i)] == 1);
  }
  set_num_threads(saved);
}

}  // TEST_SUITE tensor

TEST_SUITE("vit") {

TEST_CASE("the optional cls token prepends and pools correctly") {
  ViTConfig c = ViTConfig::tiny();
  c.image_size = 64;
  c.use_cls_token = true;
  CHECK(c.tokens() == 5);
  ParamStore store(31);
  ViTEncoder enc(c, store);
  Rng rng(32);
  Tensor img = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.f, 1.f);
  Tensor tokens = enc.forward(img);
  CHECK(tokens.shape() == Shape{2, 5, c.dim});

  // VIT_ONLY pools the cls token when it exists
  ModelConfig mc = testutil::micro_config(ModelVariant::kVitOnly, 16);
  mc.vit.use_cls_token = true;
  HybridModel model(mc, 33);
  Tensor images = Tensor::rand_uniform({2, 3, 16, 16}, rng, 0.f, 1.f);
  ForwardResult fwd = model.forward(images, false);
  CHECK(fwd.logit.shape() == Shape{2});
  CHECK(fwd.prob.all_finite());
}

}  // TEST_SUITE vit
