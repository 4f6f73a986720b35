#include <map>
#include <set>
#include <sstream>

#include "bdb/data.hpp"
#include "bdb/errors.hpp"
#include "bdb/eval.hpp"
#include "doctest.h"

using namespace bdb;

namespace {

Record record(std::string id, int identity, int camera, std::size_t values, double fill) {
  return {std::move(id), identity, camera, std::vector<double>(values, fill)};
}

DatasetSplit tiny_split() {
  DatasetSplit s;
  s.geometry = {2, 2, 2};
  const std::size_t v = s.geometry.values();
  s.train = {record("t0", 0, 0, v, 0.5), record("t1", 0, 1, v, -0.25), record("t2", 1, 0, v, 1.0),
             record("t3", 1, 1, v, 2.0)};
  s.query = {record("q0", 5, 0, v, 0.1)};
  s.gallery = {record("g0", 5, 1, v, 0.2), record("g1", 6, 0, v, 0.3)};
  return s;
}

std::string manifest_text(const DatasetSplit& s) {
  std::ostringstream out;
  write_manifest(out, s);
  return out.str();
}

SyntheticConfig small_synthetic() {
  SyntheticConfig c;
  c.train_ids = 6;
  c.test_ids = 5;
  return c;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("manifest fixture parses") {
    std::istringstream in(
        "bdb-manifest v1 grid_h=2 grid_w=1 patch_dim=1\n"
        "{\"id\":\"a\",\"identity\":0,\"camera\":0,\"split\":\"train\",\"patches\":[1,2]}\n"
        "\n"
        "{\"id\":\"b\",\"identity\":0,\"camera\":1,\"split\":\"train\",\"patches\":[3,4]}\n"
        "{\"id\":\"c\",\"identity\":1,\"camera\":0,\"split\":\"query\",\"patches\":[0.5,-1e-3]}\n"
        "{\"id\":\"d\",\"identity\":1,\"camera\":1,\"split\":\"gallery\",\"patches\":[0,0]}\n");
    const DatasetSplit s = read_manifest(in);
    CHECK(s.geometry == Geometry{2, 1, 1});
    CHECK(s.train.size() == 2);
    CHECK(s.query[0].patches == std::vector<double>{0.5, -1e-3});
    CHECK(s.gallery[0].camera_id == 1);
  }

  TEST_CASE("manifest round-trip is exact") {
    DatasetSplit s = tiny_split();
    s.train[0].patches[3] = 0.1 + 0.2;
    s.train[1].patches[0] = 1.0 / 3.0;
    std::istringstream in(manifest_text(s));
    CHECK(read_manifest(in) == s);

    const DatasetSplit gen = gen_synthetic(small_synthetic());
    std::istringstream gin(manifest_text(gen));
    CHECK(read_manifest(gin) == gen);
  }

  TEST_CASE("parse errors carry the line number") {
    auto line_of = [](const std::string& text) -> std::size_t {
      std::istringstream in(text);
      try {
        read_manifest(in);
      } catch (const ParseError& e) {
        return e.line();
      }
      return 0;
    };
    const std::string header = "bdb-manifest v1 grid_h=1 grid_w=1 patch_dim=1\n";
    const std::string ok = "{\"id\":\"a\",\"identity\":0,\"camera\":0,\"split\":\"train\",\"patches\":[1]}\n";
    CHECK(line_of("bdb-manifest v2 grid_h=1 grid_w=1 patch_dim=1\n") == 1);
    CHECK(line_of("bdb-manifest v1 grid_h=0 grid_w=1 patch_dim=1\n") == 1);
    CHECK(line_of(header + ok + "{not json}\n") == 3);
    CHECK(line_of(header + ok + ok + "{\"id\":\"b\",\"identity\":0,\"camera\":0,\"split\":\"dev\",\"patches\":[1]}\n") == 4);
    CHECK(line_of("") == 1);
  }

  TEST_CASE("dataset invariants") {
    DatasetSplit s = tiny_split();
    CHECK_NOTHROW(s.validate());

    DatasetSplit empty = s;
    empty.train.clear();
    CHECK_THROWS_WITH_AS(empty.validate(), doctest::Contains("train split is empty"), DatasetError);

    DatasetSplit overlap = s;
    overlap.gallery[1].identity = 1;
    CHECK_THROWS_WITH_AS(overlap.validate(), doctest::Contains("disjoint"), DatasetError);

    DatasetSplit same_cam = s;
    same_cam.gallery[0].camera_id = 0;
    CHECK_THROWS_WITH_AS(same_cam.validate(), doctest::Contains("different camera"), DatasetError);

    DatasetSplit dup = s;
    dup.gallery[1].sample_id = "t0";
    CHECK_THROWS_WITH_AS(dup.validate(), doctest::Contains("duplicate"), DatasetError);

    DatasetSplit wrong = s;
    wrong.query[0].patches.pop_back();
    CHECK_THROWS_AS(wrong.validate(), DatasetError);
  }

  TEST_CASE("P×K sampler composition") {
    const std::size_t v = 1;
    std::vector<Record> recs;
    for (int i = 0; i < 5; ++i) recs.push_back(record("a" + std::to_string(i), 0, 0, v, 0));
    for (int i = 0; i < 4; ++i) recs.push_back(record("b" + std::to_string(i), 1, 0, v, 0));
    for (int i = 0; i < 4; ++i) recs.push_back(record("c" + std::to_string(i), 2, 0, v, 0));
    PKSampler sampler(recs, {2, 4}, 3);
    CHECK(sampler.batches_per_epoch() == 1);
    for (int epoch = 0; epoch < 20; ++epoch) {
      for (const auto& batch : sampler.next_epoch()) {
        REQUIRE(batch.size() == 8);
        std::map<int, std::set<std::size_t>> by_id;
        for (std::size_t k = 0; k < 8; ++k) {
          CHECK(recs[batch[k]].identity == recs[batch[k / 4 * 4]].identity);
          by_id[recs[batch[k]].identity].insert(batch[k]);
        }
        CHECK(by_id.size() == 2);
        for (const auto& [id, members] : by_id) CHECK(members.size() == 4);  // no duplicates when K fit
      }
    }
  }

  TEST_CASE("sampler falls back to replacement for small identities") {
    std::vector<Record> recs{record("a0", 0, 0, 1, 0), record("a1", 0, 0, 1, 0), record("b0", 1, 0, 1, 0),
                             record("b1", 1, 0, 1, 0)};
    PKSampler sampler(recs, {2, 4}, 1);
    const auto batch = sampler.next_epoch().at(0);
    CHECK(batch.size() == 8);
    CHECK(std::set<std::size_t>(batch.begin(), batch.end()).size() <= 4);
    CHECK_THROWS_AS(PKSampler(recs, {3, 2}, 1), SamplerError);
    CHECK_THROWS_AS(PKSampler(recs, {1, 2}, 1), SamplerError);
  }

  TEST_CASE("sampler is deterministic given the seed") {
    const DatasetSplit s = gen_synthetic(small_synthetic());
    PKSampler a(s.train, {3, 4}, 9), b(s.train, {3, 4}, 9);
    for (int i = 0; i < 5; ++i) CHECK(a.next_epoch() == b.next_epoch());
  }

  TEST_CASE("augmentation properties") {
    const Geometry g{4, 3, 2};
    Record r{"x", 7, 2, {}};
    for (std::size_t i = 0; i < g.values(); ++i) r.patches.push_back(static_cast<double>(i));
    CHECK(flip_horizontal(flip_horizontal(r, g), g) == r);
    const Record f = flip_horizontal(r, g);
    CHECK(f.patches[0] == r.patches[(0 * 3 + 2) * 2]);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      const Record c = cutout(r, g, 0.5, rng);
      std::size_t zero_cells = 0;
      for (std::size_t cell = 0; cell < g.cells(); ++cell)
        if (c.patches[cell * 2] == 0.0 && c.patches[cell * 2 + 1] == 0.0) ++zero_cells;
      // side = max(1, floor(0.5·min(4, 3))) = 1
      CHECK(zero_cells == 1);
      const Record e = random_erasing(r, g, rng);
      for (std::size_t i = 0; i < e.patches.size(); ++i)
        CHECK((e.patches[i] == r.patches[i] || (e.patches[i] >= -1.0 && e.patches[i] <= 1.0)));

      const Normalizer n = Normalizer::fit({r, f}, 2);
      AugmentSpec spec;
      spec.normalizer = &n;
      spec.cutout = true;
      spec.random_erasing = true;
      const Record a = augment(r, spec, g, rng);
      CHECK(a.identity == r.identity);
      CHECK(a.camera_id == r.camera_id);
      CHECK(a.sample_id == r.sample_id);
      CHECK(a.patches.size() == r.patches.size());
    }
  }

  TEST_CASE("normalizer statistics") {
    const std::vector<Record> recs{{"a", 0, 0, {1, 10, 3, 10}}, {"b", 0, 0, {5, 10, 7, 10}}};
    const Normalizer n = Normalizer::fit(recs, 2);
    CHECK(n.mean == std::vector<double>{4, 10});
    CHECK(n.stddev[0] == doctest::Approx(std::sqrt(5.0)));
    CHECK(n.stddev[1] == 1.0);
    CHECK_THROWS_AS(Normalizer::fit({}, 2), DatasetError);
  }

  TEST_CASE("synthetic generator determinism and layout") {
    const SyntheticConfig cfg = small_synthetic();
    const DatasetSplit a = gen_synthetic(cfg), b = gen_synthetic(cfg);
    CHECK(a == b);
    CHECK(manifest_text(a) == manifest_text(b));
    CHECK(a.train.size() == 6 * 8);
    CHECK(a.query.size() == 5 * 2);
    CHECK(a.gallery.size() == 5 * 6);
    SyntheticConfig other = cfg;
    other.seed = 2;
    CHECK_FALSE(gen_synthetic(other) == a);
  }

  TEST_CASE("without occlusion and noise two images differ only by camera bias") {
    SyntheticConfig cfg = small_synthetic();
    cfg.noise = 0;
    cfg.occlusion_rate = 0;
    cfg.query_occluded = 0;
    cfg.camera_scale = 0;
    const DatasetSplit s = gen_synthetic(cfg);
    CHECK(s.train[0].patches == s.train[1].patches);
    CHECK(s.query[0].patches == s.gallery[0].patches);
    CHECK_FALSE(s.train[0].patches == s.train[8].patches);
  }

  TEST_CASE("infeasible generator settings") {
    SyntheticConfig cfg;
    cfg.cameras = 1;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("cameras"), ConfigError);
    cfg = {};
    cfg.upper_rows = cfg.geometry.grid_h;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.occlusion_rate = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.images_per_id = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("the lower part alone identifies people") {
    const SyntheticConfig cfg;
    const DatasetSplit s = gen_synthetic(cfg);
    const Geometry& g = s.geometry;
    auto lower = [&](const std::vector<Record>& recs) {
      std::vector<EmbeddingRecord> out;
      for (const auto& r : recs) {
        EmbeddingRecord e{r.sample_id, r.identity, r.camera_id, {}};
        for (std::size_t row = cfg.upper_rows; row < g.grid_h; ++row)
          for (std::size_t col = 0; col < g.grid_w; ++col)
            for (std::size_t k = g.patch_dim / 2; k < g.patch_dim; ++k)
              e.vector.push_back(r.patches[(row * g.grid_w + col) * g.patch_dim + k]);
        out.push_back(std::move(e));
      }
      return out;
    };
    CHECK(reid_metrics(lower(s.query), lower(s.gallery), 1).rank1 > 0.9);
  }

  TEST_CASE("to_batch stacks records") {
    const DatasetSplit s = tiny_split();
    const Tensor t = to_batch({&s.train[0], &s.train[2]}, s.geometry);
    CHECK(t.shape() == Shape{2, 4, 2});
    CHECK(t.at({1, 3, 1}) == 1.0);
    const Record bad{"bad", 0, 0, {1}};
    CHECK_THROWS_AS(to_batch({&bad}, s.geometry), DimensionError);
  }
}
