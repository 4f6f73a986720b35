#include <cmath>

#include "bdb/errors.hpp"
#include "bdb/model.hpp"
#include "doctest.h"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace bdb;
using namespace bdb::testing;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor images_for(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({batch, cfg.backbone.patches(), cfg.backbone.in_patch_dim}, rng, false);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("full model gradients match finite differences") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      CAPTURE(seed);
      CHECK(model_grad_error(seed) < kNonlinearTol);
    }
  }

  TEST_CASE("default descriptor is 512 + 1024") {
    ModelConfig cfg;
    cfg.backbone.feat_channels = 8;
    CHECK(cfg.descriptor_dim() == 1536);
    Model model(cfg, 1);
    const ModelOutput out = model.forward(images_for(cfg, 2, 1), Mode::eval);
    CHECK(out.descriptor.shape() == Shape{2, 1536});
    CHECK(out.drop_feat.shape() == Shape{2, 1024});
    CHECK(out.global_feat.shape() == Shape{2, 512});
  }

  TEST_CASE("train mode yields two features and two logits") {
    const ModelConfig cfg = tiny_model_config();
    Model model(cfg, 2);
    Rng rng(3);
    const ModelOutput out = model.forward(images_for(cfg, 4, 2), Mode::train, &rng);
    CHECK(out.global_feat.defined());
    CHECK(out.drop_feat.defined());
    CHECK(out.global_logits.shape() == Shape{4, 3});
    CHECK(out.drop_logits.shape() == Shape{4, 3});
    CHECK_FALSE(out.descriptor.defined());
    CHECK_THROWS_AS(model.forward(images_for(cfg, 4, 2), Mode::train), SpecError);
  }

  TEST_CASE("eval forward is deterministic and mask-free") {
    const ModelConfig cfg = tiny_model_config();
    Model model(cfg, 5);
    const Tensor x = images_for(cfg, 3, 5);
    Rng a(1), b(999);
    const auto first = values(model.forward(x, Mode::eval, &a).descriptor);
    const auto second = values(model.forward(x, Mode::eval, &b).descriptor);
    CHECK(first == second);
    CHECK(values(model.forward(x, Mode::eval).descriptor) == first);
  }

  TEST_CASE("disabling the drop branch gives the global-branch baseline") {
    ModelConfig full = tiny_model_config();
    ModelConfig base = full;
    base.branches.use_drop_branch = false;
    Model m_full(full, 11), m_base(base, 11);
    const Tensor x = images_for(full, 4, 11);
    const ModelOutput o = m_base.forward(x, Mode::eval);
    CHECK(values(o.descriptor) == values(o.global_feat));
    CHECK(values(o.global_feat) == values(m_full.forward(x, Mode::eval).global_feat));
    CHECK(base.descriptor_dim() == 3);

    auto full_params = m_full.parameters();
    for (const auto& [name, t] : m_base.parameters()) {
      const auto it = std::find_if(full_params.begin(), full_params.end(), [&](const auto& p) { return p.first == name; });
      REQUIRE(it != full_params.end());
      CHECK(values(*t) == values(*it->second));
      CHECK(name.rfind("drop.", 0) != 0);
    }
  }

  TEST_CASE("dropping the whole map feeds the zero vector to the reduction") {
    ModelConfig cfg = tiny_model_config();
    cfg.branches.drop_spec.r_h = 1.0;
    cfg.branches.drop_spec.r_w = 1.0;
    Model model(cfg, 6);
    Rng rng(1);
    const ModelOutput out = model.forward(images_for(cfg, 4, 6), Mode::train, &rng);
    for (std::size_t b = 1; b < 4; ++b)
      for (std::size_t f = 0; f < 4; ++f) CHECK(out.drop_feat.at({b, f}) == out.drop_feat.at({0, f}));
  }

  TEST_CASE("GMP routes the gradient to one location per channel") {
    const ModelConfig cfg = tiny_model_config();
    Model model(cfg, 7);
    const Tensor fmap = model.backbone_forward(images_for(cfg, 3, 7));
    Tensor bottleneck;
    const auto [feat, logits] = model.drop_branch(fmap, Mode::eval, nullptr, &bottleneck);
    weighted_sum(feat, 1).backward();
    const auto g = bottleneck.grad();
    const std::size_t hw = 6;
    for (std::size_t bc = 0; bc < 3 * 4; ++bc) {
      std::size_t nonzero = 0;
      for (std::size_t p = 0; p < hw; ++p) nonzero += g[bc * hw + p] != 0.0;
      CHECK(nonzero <= 1);
    }
  }

  TEST_CASE("global branch GAP of a constant map") {
    ModelConfig cfg = tiny_model_config();
    Model model(cfg, 8);
    NoGradGuard no_grad;
    const auto [a, la] = model.global_branch(Tensor::full({2, 4, 3, 2}, 0.7), Mode::eval);
    const auto [b, lb] = model.global_branch(Tensor::full({2, 4, 1, 1}, 0.7), Mode::eval);
    const auto va = values(a), vb = values(b);
    REQUIRE(va.size() == vb.size());
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == doctest::Approx(vb[i]).epsilon(1e-14));
  }

  TEST_CASE("backbone locality") {
    const ModelConfig cfg = tiny_model_config();
    Model model(cfg, 9);
    Tensor x = images_for(cfg, 2, 9);
    const Tensor before = model.backbone_forward(x);
    const std::size_t cell = 4;  // (row 2, col 0)
    for (std::size_t k = 0; k < 5; ++k) x.mutable_data()[(1 * 6 + cell) * 5 + k] += 0.5;
    const Tensor after = model.backbone_forward(x);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 2; ++j) {
            const bool touched = b == 1 && i * 2 + j == cell;
            if (!touched) CHECK(after.at({b, c, i, j}) == before.at({b, c, i, j}));
          }
    CHECK_THROWS_AS(model.backbone_forward(Tensor::zeros({1, 5, 5})), DimensionError);
  }

  TEST_CASE("zero input gives a deterministic backbone output") {
    const ModelConfig cfg = tiny_model_config();
    Model a(cfg, 3), b(cfg, 3);
    const Tensor z = Tensor::zeros({2, 6, 5});
    CHECK(values(a.backbone_forward(z)) == values(b.backbone_forward(z)));
  }

  TEST_CASE("spatial energy maps") {
    std::vector<double> one_hot(1 * 3 * 4 * 5, 0.0);
    for (std::size_t c = 0; c < 3; ++c) one_hot[(c * 4 + 2) * 5 + 1] = 1.0 + c;
    const EnergyMaps e1 = spatial_energy_map(Tensor::from({1, 3, 4, 5}, one_hot));
    CHECK(e1.entropy[0] == 0.0);
    CHECK(e1.energy[2 * 5 + 1] == 1.0);

    const EnergyMaps eu = spatial_energy_map(Tensor::full({2, 3, 4, 5}, -0.3));
    CHECK(eu.entropy[1] == doctest::Approx(std::log(20.0)).epsilon(1e-14));
    const EnergyMaps ez = spatial_energy_map(Tensor::zeros({1, 3, 4, 5}));
    CHECK(ez.entropy[0] == doctest::Approx(std::log(20.0)).epsilon(1e-14));

    std::mt19937_64 rng(4);
    const Tensor r = random_tensor({3, 4, 2, 3}, rng, false);
    const EnergyMaps er = spatial_energy_map(r);
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<double> norms;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < 4; ++c) s += r.at({b, c, i, j}) * r.at({b, c, i, j});
          norms.push_back(std::sqrt(s));
        }
      double total = 0, h = 0;
      for (double n : norms) total += n;
      for (double n : norms) h -= n / total * std::log(n / total);
      CHECK(er.entropy[b] == doctest::Approx(h).epsilon(1e-13));
      CHECK(er.entropy[b] <= std::log(6.0) + 1e-12);
    }
  }

  TEST_CASE("state round-trip is bit-exact") {
    ModelConfig cfg = tiny_model_config();
    cfg.branches.drop_pooling = Pooling::gap;
    Model model(cfg, 12);
    Rng rng(1);
    model.forward(images_for(cfg, 4, 1), Mode::train, &rng);  // moves the running statistics
    const Model copy = Model::from_state_json(nlohmann::json::parse(model.state_json().dump()));
    Model c = copy;
    const Tensor x = images_for(cfg, 3, 2);
    CHECK(values(c.forward(x, Mode::eval).descriptor) == values(model.forward(x, Mode::eval).descriptor));
    CHECK(c.config().branches.drop_pooling == Pooling::gap);
  }

  TEST_CASE("config validation") {
    ModelConfig cfg = tiny_model_config();
    cfg.branches.use_global_branch = false;
    cfg.branches.use_drop_branch = false;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(parse_pooling("avg"), Error);
    CHECK(parse_pooling("gmp") == Pooling::gmp);
  }
}
