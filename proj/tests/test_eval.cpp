#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "pvae/error.hpp"
#include "pvae/eval.hpp"
#include "test_util.hpp"

using namespace pvae;
using pvae::testing::scratch_dir;
using pvae::testing::short_data;
using pvae::testing::tiny_arch;

namespace {

// Brute-force purity: count every (cluster, label) pair with a map.
double purity_oracle(const std::vector<std::size_t>& a, const std::vector<int>& labels) {
  std::map<std::size_t, std::map<int, int>> counts;
  for (std::size_t i = 0; i < a.size(); ++i) ++counts[a[i]][labels[i]];
  int majority = 0;
  for (const auto& [cluster, by_label] : counts) {
    int best = 0;
    for (const auto& [label, n] : by_label) best = std::max(best, n);
    majority += best;
  }
  return static_cast<double>(majority) / static_cast<double>(a.size());
}

// `k` blobs at distance 100 apart with unit spread; labels are blob ids.
Points blobs(std::size_t k, std::size_t per, std::size_t dim, std::mt19937_64& rng, std::vector<int>* labels) {
  std::normal_distribution<double> n(0, 1);
  Points p;
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t i = 0; i < per; ++i) {
      std::vector<double> x(dim);
      for (std::size_t d = 0; d < dim; ++d) x[d] = n(rng) + (d == b % dim ? 100.0 * static_cast<double>(1 + b / dim) : 0.0);
      p.push_back(std::move(x));
      if (labels) labels->push_back(static_cast<int>(b));
    }
  return p;
}

Points random_points(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Points p(n, std::vector<double>(dim));
  for (auto& x : p)
    for (auto& v : x) v = u(rng);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Eval, PuritySpotValues) {
  const std::vector<std::size_t> a{0, 0, 0, 1, 1};
  const std::vector<int> l{0, 0, 1, 1, 1};
  EXPECT_DOUBLE_EQ(weighted_purity(a, l), 0.8);
  const std::vector<std::size_t> pure{2, 2, 5, 5};
  const std::vector<int> pl{7, 7, 1, 1};
  EXPECT_DOUBLE_EQ(weighted_purity(pure, pl), 1.0);
  std::vector<std::size_t> one(100, 0);
  std::vector<int> uniform(100);
  for (int i = 0; i < 100; ++i) uniform[static_cast<std::size_t>(i)] = i % 10;
  EXPECT_DOUBLE_EQ(weighted_purity(one, uniform), 0.1);
  EXPECT_THROW(weighted_purity(a, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(weighted_purity(std::vector<std::size_t>{}, std::vector<int>{}), RangeError);
}

// Property: equals the brute-force count and ignores cluster relabelling.
TEST(Eval, PurityMatchesBruteForceAndIsPermutationInvariant) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng() % 200, k = 1 + rng() % 12, classes = 1 + rng() % 10;
    std::vector<std::size_t> a(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng() % k;
      l[i] = static_cast<int>(rng() % classes);
    }
    const double p = weighted_purity(a, l);
    EXPECT_DOUBLE_EQ(p, purity_oracle(a, l));
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> relabelled(n);
    for (std::size_t i = 0; i < n; ++i) relabelled[i] = perm[a[i]] + 1000;
    EXPECT_DOUBLE_EQ(weighted_purity(relabelled, l), p);
    EXPECT_GE(p, 1.0 / static_cast<double>(classes) - 1e-12);
    EXPECT_LE(p, 1.0);
  }
}

TEST(Eval, KmeansEdgeCases) {
  std::mt19937_64 rng(2);
  const Points p = random_points(12, 3, rng);
  const ClusterResult all = kmeans(p, 12, 1);
  EXPECT_NEAR(all.inertia, 0.0, 1e-20);

  const ClusterResult one = kmeans(p, 1, 1);
  std::vector<double> mean(3, 0.0);
  for (const auto& x : p)
    for (std::size_t d = 0; d < 3; ++d) mean[d] += x[d] / 12.0;
  double ss = 0;
  for (const auto& x : p)
    for (std::size_t d = 0; d < 3; ++d) ss += (x[d] - mean[d]) * (x[d] - mean[d]);
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(one.centroids[0][d], mean[d], 1e-12);
  EXPECT_NEAR(one.inertia, ss, 1e-12);

  EXPECT_THROW(kmeans(p, 13, 1), RangeError);
  EXPECT_THROW(kmeans(p, 0, 1), RangeError);
  Points mixed = p;
  mixed[3].push_back(1.0);
  EXPECT_THROW(kmeans(mixed, 2, 1), ShapeError);
}

TEST(Eval, KmeansRecoversBlobs) {
  std::mt19937_64 rng(3);
  std::vector<int> labels;
  const Points p = blobs(4, 30, 2, rng, &labels);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ClusterResult r = kmeans(p, 4, seed);
    EXPECT_DOUBLE_EQ(weighted_purity(r.assignments, labels), 1.0);
    // Each blob maps to exactly one cluster.
    std::set<std::size_t> used(r.assignments.begin(), r.assignments.end());
    EXPECT_EQ(used.size(), 4u);
  }
}

// Property: Lloyd never raises inertia, the reported inertia is
// recomputable, and every assignment is a valid index.
TEST(Eval, LloydInvariants) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n = 5 + rng() % 80, dim = 1 + rng() % 4, k = 1 + rng() % std::min<std::size_t>(n, 8);
    const Points p = random_points(n, dim, rng);
    const ClusterResult r = kmeans(p, k, rng());
    for (std::size_t i = 1; i < r.inertia_trace.size(); ++i) EXPECT_LE(r.inertia_trace[i], r.inertia_trace[i - 1]);
    EXPECT_NEAR(r.inertia, inertia_of(p, r.assignments, r.centroids), 1e-9);
    for (auto a : r.assignments) EXPECT_LT(a, k);
    EXPECT_EQ(r.centroids.size(), k);
    EXPECT_LE(r.iterations, 300u);
  }
}

TEST(Eval, LloydTiesGoToLowestIndex) {
  // Both centroids equidistant from the point at 1.0.
  const ClusterResult r = lloyd(Points{{0.0}, {1.0}, {2.0}}, Points{{0.0}, {2.0}}, 1);
  EXPECT_EQ(r.assignments[1], 0u);
}

TEST(Eval, LloydReseedsEmptyCluster) {
  const Points p{{0.0}, {0.1}, {5.0}, {5.1}};
  const ClusterResult r = lloyd(p, Points{{0.05}, {100.0}});
  std::set<std::size_t> used(r.assignments.begin(), r.assignments.end());
  EXPECT_EQ(used.size(), 2u);
  EXPECT_NEAR(r.inertia, 0.01, 1e-12);
}

TEST(Eval, KmeansIsDeterministic) {
  std::mt19937_64 rng(5);
  const Points p = random_points(60, 3, rng);
  const ClusterResult a = kmeans(p, 5, 42), b = kmeans(p, 5, 42);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.inertia, b.inertia);
  const ClusterResult best = kmeans_best(p, 5, 42, 5);
  EXPECT_EQ(best.inertia, kmeans_best(p, 5, 42, 5).inertia);
}

TEST(Eval, InertiaCurveIsMonotoneAndReachesZero) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    const Points p = random_points(15, 2, rng);
    const auto curve = inertia_curve(p, 1, 15, rng(), 3);
    ASSERT_EQ(curve.size(), 15u);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      EXPECT_EQ(curve[i].k, curve[i - 1].k + 1);
      EXPECT_LE(curve[i].inertia, curve[i - 1].inertia);
    }
    EXPECT_NEAR(curve.back().inertia, 0.0, 1e-20);
  }
  EXPECT_THROW(inertia_curve(random_points(5, 2, rng), 3, 2, 1), RangeError);
}

TEST(Eval, InertiaElbowOnTenBlobs) {
  std::mt19937_64 rng(7);
  const Points p = blobs(10, 40, 5, rng, nullptr);
  const auto curve = inertia_curve(p, 8, 12, 1);
  const auto at = [&](std::size_t k) { return curve[k - 8].inertia; };
  const double drop_910 = (at(9) - at(10)) / at(9), drop_1011 = (at(10) - at(11)) / at(10);
  EXPECT_LT(drop_1011, 0.5 * drop_910);
}

TEST(Eval, SpearmanValues) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> up{2, 4, 9, 16, 100}, down{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman(a, up), 1.0);
  EXPECT_DOUBLE_EQ(spearman(a, down), -1.0);
  // Ties get the average rank: ranks of b are {1.5, 1.5, 3, 4, 5}.
  const std::vector<double> b{7, 7, 8, 9, 10};
  const double ra[] = {1, 2, 3, 4, 5}, rb[] = {1.5, 1.5, 3, 4, 5};
  double ma = 3, mb = 3, sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 5; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  EXPECT_NEAR(spearman(a, b), sab / std::sqrt(saa * sbb), 1e-12);
  EXPECT_THROW(spearman(a, std::vector<double>{1}), ShapeError);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), RangeError);
}

// Property: invariant under any strictly increasing transform.
TEST(Eval, SpearmanRankInvariance) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(20), b(20), eb(20);
    for (std::size_t i = 0; i < 20; ++i) {
      a[i] = n(rng);
      b[i] = a[i] + n(rng);
      eb[i] = std::exp(3 * b[i]) + 1;
    }
    EXPECT_NEAR(spearman(a, b), spearman(a, eb), 1e-12);
    EXPECT_NEAR(spearman(a, b), spearman(b, a), 1e-12);
  }
}

TEST(Eval, ModalityNames) {
  EXPECT_EQ(modality_from_string("audio"), Modality::audio);
  EXPECT_EQ(to_string(Modality::image), "image");
  EXPECT_THROW(modality_from_string("video"), ConfigError);
}

TEST(Eval, EncodeAndSelectLatents) {
  const Dataset d = generate_dataset(short_data(25), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  for (Modality mod : {Modality::audio, Modality::image}) {
    const LatentSet s = encode_unimodal(m, d, mod, 7);
    ASSERT_EQ(s.zs.size(), 25u);
    EXPECT_EQ(s.zs[0].size(), 4u);
    EXPECT_EQ(s.style[0].size(), 4u);
    EXPECT_EQ(s.labels[13], 3);
    // Batching does not change the means.
    const LatentSet whole = encode_unimodal(m, d, mod, 100);
    for (std::size_t i = 0; i < 25; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s.zs[i][j], whole.zs[i][j], 1e-12);
    EXPECT_EQ(latent_names(m, mod).size(), 2u);
  }
  const PvaeModel base(tiny_arch(), ModelKind::vae_audio, 1);
  EXPECT_EQ(latent_names(base, Modality::audio), (std::vector<std::string>{"zs", "za", "z"}));
  const LatentSet bs = encode_unimodal(base, d, Modality::audio);
  EXPECT_EQ(select_latent(bs, "z")[0].size(), 8u);
  EXPECT_THROW(select_latent(bs, "zq"), ConfigError);
  EXPECT_THROW(encode_unimodal(base, d, Modality::image), ShapeError);
}

TEST(Eval, PurityTableAndCsv) {
  const auto dir = scratch_dir("eval-csv");
  const Dataset d = generate_dataset(short_data(40), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  EvalConfig c;
  c.restarts = 2;
  const auto rows = purity_table(m, d, c, "pvae");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].modality, "audio");
  EXPECT_EQ(rows[3].latent, "zi");
  for (const auto& r : rows) {
    EXPECT_GE(r.purity, 0.1);
    EXPECT_LE(r.purity, 1.0);
    EXPECT_EQ(r.dataset, "test");
  }
  write_metrics_csv(rows, dir / "metrics.csv");
  const std::string text = slurp(dir / "metrics.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

TEST(Eval, ExportLatents) {
  const auto dir = scratch_dir("eval-export");
  const Dataset d = generate_dataset(short_data(30), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  export_latents(m, d, Modality::image, "zs", dir / "a.csv");
  export_latents(m, d, Modality::image, "zs", dir / "b.csv");
  const std::string a = slurp(dir / "a.csv");
  EXPECT_EQ(a, slurp(dir / "b.csv"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 31);
  const std::string header = a.substr(0, a.find('\n'));
  // index, identity, six image style fields, four latent coordinates.
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 2 + 6 + 4 - 1);
  export_latents(m, d, Modality::audio, "za", dir / "c.csv");
  const std::string c = slurp(dir / "c.csv");
  const std::string ch = c.substr(0, c.find('\n'));
  EXPECT_EQ(std::count(ch.begin(), ch.end(), ','), 2 + 4 + 4 - 1);
}

TEST(Eval, GridShapes) {
  const Dataset d = generate_dataset(short_data(30), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  const std::vector<std::size_t> sem{0, 1, 2}, sty{3, 14};
  for (Modality mod : {Modality::audio, Modality::image}) {
    const GenerationGrid w = style_transfer_grid(m, d, mod, sem, sty);
    ASSERT_EQ(w.cells.size(), 2u);
    EXPECT_EQ(w.cells[0].size(), 3u);
    EXPECT_EQ(w.semantic_sources.size(), 3u);
    EXPECT_EQ(w.output_modality, mod);
    const GenerationGrid x = cross_modal_grid(m, d, mod, sem, sty);
    EXPECT_NE(x.output_modality, mod);
    EXPECT_EQ(x.semantic_modality, mod);
    for (std::size_t r = 0; r < 2; ++r)
      for (const Signal& s : x.cells[r]) {
        if (x.output_modality == Modality::audio) {
          EXPECT_EQ(s.rows, d.audio[sty[r]].frames);  // length from the style source
          EXPECT_EQ(s.cols, 8u);
        } else {
          EXPECT_EQ(s.rows, 28u);
          EXPECT_EQ(s.values.size(), 28u * 28u);
        }
      }
  }
  EXPECT_THROW(style_transfer_grid(m, d, Modality::image, {}, sty), RangeError);
  const PvaeModel base(tiny_arch(), ModelKind::vae_image, 1);
  EXPECT_THROW(cross_modal_grid(base, d, Modality::audio, sem, sty), ShapeError);
}

// Cells of one column share z^s; cells of one row share the style latent.
TEST(Eval, GridCellsDecodeTheirSources) {
  const Dataset d = generate_dataset(short_data(30), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  const std::vector<std::size_t> sem{0, 5}, sty{7, 9};
  const GenerationGrid g = style_transfer_grid(m, d, Modality::image, sem, sty);
  const std::vector<std::size_t> one_sem{5}, one_sty{9};
  const GenerationGrid single = style_transfer_grid(m, d, Modality::image, one_sem, one_sty);
  for (std::size_t i = 0; i < 28 * 28; ++i) EXPECT_NEAR(g.cells[1][1].values[i], single.cells[0][0].values[i], 1e-12);
}

TEST(Eval, RenderPgm) {
  const auto dir = scratch_dir("eval-pgm");
  const Dataset d = generate_dataset(short_data(30), 1, "test");
  const PvaeModel m(tiny_arch(), ModelKind::pvae, 1);
  const std::vector<std::size_t> sem{0, 1, 2}, sty{3, 4};
  render_grid_pgm(style_transfer_grid(m, d, Modality::image, sem, sty), dir / "img.pgm");
  const std::string img = slurp(dir / "img.pgm");
  // 4 x 3 tiles of 28 px with 1-px separators.
  const std::string head = "P5\n" + std::to_string(4 * 28 + 3) + " " + std::to_string(3 * 28 + 2) + "\n255\n";
  ASSERT_EQ(img.substr(0, head.size()), head);
  EXPECT_EQ(img.size(), head.size() + (4 * 28 + 3) * (3 * 28 + 2));
  // Top-left corner tile is empty; the first semantic source is copied verbatim.
  EXPECT_EQ(static_cast<unsigned char>(img[head.size()]), 0);
  const auto& src = d.images[0].pixels;
  for (std::size_t y = 0; y < 28; ++y)
    for (std::size_t x = 0; x < 28; ++x)
      EXPECT_EQ(static_cast<unsigned char>(img[head.size() + y * (4 * 28 + 3) + 29 + x]),
                std::lround(std::clamp(src[y * 28 + x], 0.0, 1.0) * 255.0));

  const GenerationGrid audio = style_transfer_grid(m, d, Modality::audio, sem, sty);
  render_grid_pgm(audio, dir / "audio.pgm");
  render_grid_pgm(audio, dir / "audio2.pgm");
  EXPECT_EQ(slurp(dir / "audio.pgm"), slurp(dir / "audio2.pgm"));
  std::size_t t_max = 0;
  for (auto i : {0, 1, 2, 3, 4}) t_max = std::max(t_max, d.audio[static_cast<std::size_t>(i)].frames);
  const std::string ah = "P5\n" + std::to_string(4 * t_max + 3) + " " + std::to_string(3 * 8 + 2) + "\n255\n";
  EXPECT_EQ(slurp(dir / "audio.pgm").substr(0, ah.size()), ah);
}
