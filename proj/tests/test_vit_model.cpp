#include <fstream>
#include <numeric>

#include "doctest.h"
#include "evtforce/binary_io.hpp"
#include "evtforce/param_io.hpp"
#include "evtforce/train_eval.hpp"
#include "evtforce/vit_model.hpp"
#include "test_support.hpp"

using namespace evtforce;
using vit::ViTConfig;

namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.in_channels = 2;
  c.embed_dim = 8;
  c.depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 4;
  return c;
}

ViTConfig small() {
  ViTConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.in_channels = 2;
  c.embed_dim = 16;
  c.depth = 2;
  c.num_heads = 4;
  c.mlp_ratio = 2;
  return c;
}

ad::Tensor<double> random_images(std::mt19937_64& rng, const ViTConfig& c, std::size_t batch) {
  return testing::random_tensor(rng, {batch, std::size_t(c.in_channels), std::size_t(c.image_size),
                                      std::size_t(c.image_size)},
                                false);
}

template <typename T>
void fill(ad::Tensor<T>& t, T v) {
  for (auto& x : t.mutable_data()) x = v;
}

std::string blob_of(const vit::ViTModel<float>& m) {
  std::string out;
  for (const auto& [name, p] : m.named_parameters()) {
    for (float v : p->data()) binary::put_f32(out, v);
  }
  return out;
}

}  // namespace

TEST_CASE("config: patch counts and validation") {
  auto base = vit::base_patch8_224();
  CHECK(base.num_patches() == 784);
  CHECK(ViTConfig{}.num_patches() == 64);

  ViTConfig c;
  c.image_size = 60;
  try {
    c.validate();
    FAIL("expected failure");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).starts_with("model.image_size"));
  }
  c = {};
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(vit::config_from_json(vit::to_json(small())) == small());
}

TEST_CASE("parameter count matches the closed form") {
  auto by_formula = [](const ViTConfig& c) {
    const std::size_t d = c.embed_dim, p = c.patch_size, n = c.num_patches();
    const std::size_t pd = c.in_channels * p * p, hid = d * c.mlp_ratio;
    const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d);
    return (pd * d + d) + d + (n + 1) * d + c.depth * block + 2 * d + (d + 1);
  };
  ViTConfig desk;
  CHECK(by_formula(desk) == 818433);
  CHECK(vit::parameter_count(desk) == 818433);
  CHECK(vit::init_params<float>(desk, 0).parameter_count() == 818433);
  CHECK(vit::parameter_count(tiny()) == by_formula(tiny()));
  CHECK(vit::init_params<double>(small(), 1).parameter_count() == by_formula(small()));
  CHECK(vit::parameter_count(vit::base_patch8_224(3)) == by_formula(vit::base_patch8_224(3)));
}

TEST_CASE("init_params: seeded and distributed as declared") {
  ViTConfig desk;
  auto a = vit::init_params<float>(desk, 7);
  auto b = vit::init_params<float>(desk, 7);
  auto c = vit::init_params<float>(desk, 8);
  CHECK(blob_of(a) == blob_of(b));
  CHECK(blob_of(a) != blob_of(c));

  for (float v : a.patch_bias.data()) CHECK(v == 0.0f);
  for (float v : a.norm_gamma.data()) CHECK(v == 1.0f);
  for (float v : a.blocks[0].ln1_beta.data()) CHECK(v == 0.0f);
  double sq = 0;
  float worst = 0;
  for (float v : a.blocks[1].fc1_weight.data()) {
    sq += double(v) * v;
    worst = std::max(worst, std::abs(v));
  }
  const double sd = std::sqrt(sq / a.blocks[1].fc1_weight.numel());
  CHECK(sd == doctest::Approx(0.02 * 0.88).epsilon(0.05));
  CHECK(worst <= 0.04f);
  sq = 0;
  for (float v : a.pos_embed.data()) sq += double(v) * v;
  CHECK(std::sqrt(sq / a.pos_embed.numel()) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("patch_embed: token count and linearity") {
  auto m = vit::init_params<double>(ViTConfig{}, 1);
  auto zero = ad::Tensor<double>::zeros({2, 64, 64});
  auto tokens = vit::patch_embed(zero, m);
  CHECK(tokens.shape() == ad::Shape{64, 128});
  for (double v : tokens.data()) CHECK(v == 0.0);

  auto base = vit::init_params<double>(vit::base_patch8_224(2), 1);
  auto big = vit::patch_embed(ad::Tensor<double>::zeros({2, 224, 224}), base);
  CHECK(big.dim(0) == 784);
  CHECK_THROWS_AS(vit::patch_embed(ad::Tensor<double>::zeros({2, 60, 60}), m), ad::ShapeError);
}

TEST_CASE("patchify: channel-major patch layout") {
  ViTConfig c = tiny();
  std::vector<double> v(2 * 16 * 16);
  std::iota(v.begin(), v.end(), 0.0);
  auto img = ad::Tensor<double>::from({1, 2, 16, 16}, v);
  auto p = vit::patchify(img, c);
  CHECK(p.shape() == ad::Shape{4, 128});
  // patch 1 is the top-right block; element (c=1, dy=2, dx=3)
  CHECK(p.data()[1 * 128 + (1 * 8 + 2) * 8 + 3] == (1 * 16 + 2) * 16 + 8 + 3);
}

TEST_CASE("encoder_block: zero weights give the identity") {
  std::mt19937_64 rng(2);
  auto c = small();
  auto m = vit::init_params<double>(c, 3);
  auto& blk = m.blocks[0];
  for (auto* t : {&blk.q_weight, &blk.q_bias, &blk.k_weight, &blk.k_bias, &blk.v_weight,
                  &blk.v_bias, &blk.proj_weight, &blk.proj_bias, &blk.fc1_weight, &blk.fc1_bias,
                  &blk.fc2_weight, &blk.fc2_bias}) {
    fill(*t, 0.0);
  }
  auto x = testing::random_tensor(rng, {2 * 17, 16}, false);
  auto y = vit::encoder_block(x, blk, c, 2);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("encoder_block: a single token attends to itself with weight 1") {
  std::mt19937_64 rng(3);
  auto c = small();
  auto m = vit::init_params<double>(c, 4);
  int calls = 0;
  vit::AttentionProbe probe = [&](int, std::size_t, int, std::span<const double> w,
                                  std::size_t tokens) {
    ++calls;
    REQUIRE(tokens == 1);
    CHECK(w[0] == 1.0);
  };
  vit::encoder_block(testing::random_tensor(rng, {1, 16}, false), m.blocks[0], c, 1, 0, &probe);
  CHECK(calls == c.num_heads);
}

TEST_CASE("attention rows are distributions at every layer and head") {
  std::mt19937_64 rng(4);
  auto c = small();
  auto m = vit::init_params<double>(c, 5);
  for (auto& blk : m.blocks) {
    for (auto& v : blk.q_weight.mutable_data()) v *= 50;
  }
  std::size_t rows = 0;
  vit::AttentionProbe probe = [&](int, std::size_t, int, std::span<const double> w,
                                  std::size_t tokens) {
    for (std::size_t r = 0; r < tokens; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < tokens; ++k) {
        CHECK(w[r * tokens + k] >= 0.0);
        s += w[r * tokens + k];
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
      ++rows;
    }
  };
  vit::ForwardOptions opts;
  opts.probe = &probe;
  for (int trial = 0; trial < 3; ++trial) vit::forward(random_images(rng, c, 3), m, opts);
  CHECK(rows == 3u * 3 * c.depth * c.num_heads * c.num_tokens());
}

TEST_CASE("forward: shape and per-sample determinism") {
  std::mt19937_64 rng(5);
  auto c = small();
  auto m = vit::init_params<float>(c, 6);
  auto one = testing::random_tensor(rng, {1, 2, 32, 32}, false);
  std::vector<float> two;
  for (int k = 0; k < 2; ++k) two.insert(two.end(), one.data().begin(), one.data().end());
  auto out = vit::forward(ad::Tensor<float>::from({2, 2, 32, 32}, two), m);
  CHECK(out.shape() == ad::Shape{2, 1});
  CHECK(out.data()[0] == out.data()[1]);
  CHECK(std::isfinite(out.data()[0]));
  CHECK_THROWS_AS(vit::forward(ad::Tensor<float>::zeros({1, 1, 32, 32}), m), ad::ShapeError);
}

TEST_CASE("forward: patch permutation with and without position embeddings") {
  std::mt19937_64 rng(6);
  auto c = small();
  auto m = vit::init_params<double>(c, 7);
  std::vector<std::size_t> order(c.num_patches());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  vit::ForwardOptions permuted;
  permuted.patch_order = &order;
  auto images = random_images(rng, c, 4);

  auto with_pos_a = vit::forward(images, m);
  auto with_pos_b = vit::forward(images, m, permuted);
  double diff = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    diff = std::max(diff, std::abs(with_pos_a.data()[i] - with_pos_b.data()[i]));
  }
  CHECK(diff > 1e-6);

  fill(m.pos_embed, 0.0);
  auto a = vit::forward(images, m);
  auto b = vit::forward(images, m, permuted);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-5);
}

TEST_CASE("forward + MSE gradient on the tiny config") {
  std::mt19937_64 rng(7);
  auto c = tiny();
  auto m = vit::init_params<double>(c, 8);
  for (auto& [name, p] : m.named_parameters()) {
    for (auto& v : p->mutable_data()) v += std::normal_distribution<double>(0, 0.3)(rng);
  }
  auto images = random_images(rng, c, 3);
  auto target = testing::random_tensor(rng, {3, 1}, false);
  std::vector<ad::Tensor<double>*> leaves;
  for (auto& [name, p] : m.named_parameters()) leaves.push_back(p);
  auto err = testing::gradient_error(
      leaves, [&] { return train::mse_loss(vit::forward(images, m), target); });
  CHECK(err <= 1e-4);
}

TEST_CASE("key bias shifts every score in a row equally, so its gradient vanishes") {
  std::mt19937_64 rng(9);
  auto m = vit::init_params<double>(tiny(), 2);
  for (auto& v : m.blocks[0].k_bias.mutable_data()) v = std::normal_distribution<double>(0, 1)(rng);
  auto images = random_images(rng, tiny(), 2);
  auto target = testing::random_tensor(rng, {2, 1}, false);
  const double before = vit::forward(images, m).data()[0];
  ad::backward(train::mse_loss(vit::forward(images, m), target));
  for (double g : m.blocks[0].k_bias.grad()) CHECK(std::abs(g) <= 1e-12);
  for (auto& v : m.blocks[0].k_bias.mutable_data()) v += 3.0;
  CHECK(vit::forward(images, m).data()[0] == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("view shares values, separates gradients") {
  auto m = vit::init_params<float>(tiny(), 1);
  auto v = m.view();
  v.head_bias.mutable_data()[0] = 0.5f;
  CHECK(m.head_bias.data()[0] == 0.5f);
  auto images = ad::Tensor<float>::zeros({1, 2, 16, 16});
  ad::backward(ad::sum(vit::forward(images, v)));
  CHECK(v.head_bias.grad()[0] == 1.0f);
  CHECK_FALSE(m.head_bias.has_grad());
  auto copy = m.clone();
  copy.head_bias.mutable_data()[0] = 2.0f;
  CHECK(m.head_bias.data()[0] == 0.5f);
}

TEST_CASE("checkpoint round trip and errors") {
  testing::TempDir dir("ckpt");
  auto m = vit::init_params<float>(small(), 9);
  vit::save_checkpoint(m, dir / "m", {{"note", "x"}});
  nlohmann::json extra;
  auto back = vit::load_checkpoint(dir / "m", &extra);
  CHECK(back.config == m.config);
  CHECK(blob_of(back) == blob_of(m));
  CHECK(extra.at("note") == "x");

  using Kind = vit::CheckpointError::Kind;
  auto kind_of = [&](const std::filesystem::path& p) {
    try {
      vit::load_checkpoint(p);
    } catch (const vit::CheckpointError& e) {
      return e.kind();
    }
    FAIL("expected failure");
    return Kind::unwritable_path;
  };
  CHECK(kind_of(dir / "absent") == Kind::missing_file);

  std::string blob;
  REQUIRE(binary::read_file(vit::checkpoint_blob_path(dir / "m"), blob));
  REQUIRE(binary::write_file(vit::checkpoint_blob_path(dir / "m"), blob.substr(0, 100)));
  CHECK(kind_of(dir / "m") == Kind::corrupt);

  REQUIRE(binary::write_file(vit::checkpoint_index_path(dir / "m"), "{not json"));
  CHECK(kind_of(dir / "m") == Kind::corrupt);

  try {
    vit::save_checkpoint(m, dir / "nope" / "m");
    FAIL("expected failure");
  } catch (const vit::CheckpointError& e) {
    CHECK(e.kind() == Kind::unwritable_path);
  }
}

TEST_CASE("parameter blob encoding") {
  std::vector<ParameterRecord> params = {{"a", {2, 2}, {1, 2, 3, 4}}, {"b", {3}, {-1, 0.5f, 7}}};
  auto enc = encode_parameters(params);
  CHECK(enc.blob.size() == 7 * 4);
  CHECK(enc.index["b"]["offset"] == 16);
  CHECK(enc.index["a"]["shape"] == nlohmann::json::array({2, 2}));
  auto back = decode_parameters(enc.blob, enc.index);
  REQUIRE(back.size() == 2);
  CHECK(back[1].name == "b");
  CHECK(back[1].values == params[1].values);
  CHECK_THROWS_AS(decode_parameters(enc.blob.substr(4), enc.index), ParameterIoError);
}
