#include "pvae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "pvae/error.hpp"

namespace pvae {

// ---------------------------------------------------------------------------
// k-means

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double x = a[d] - b[d];
    s += x * x;
  }
  return s;
}

std::size_t nearest(const std::vector<double>& x, const Points& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(x, centroids[c]);
    if (d < best_d) {  // strict: ties stay with the lower index
      best_d = d;
      best = c;
    }
  }
  return best;
}

void check_points(const Points& points, std::size_t k) {
  if (k == 0) throw RangeError("k-means needs k >= 1");
  if (points.size() < k)
    throw RangeError("k-means needs at least k points (N = " + std::to_string(points.size()) +
                     ", k = " + std::to_string(k) + ")");
  const std::size_t dim = points[0].size();
  for (const auto& p : points)
    if (p.size() != dim) throw ShapeError("k-means points have mixed dimensions");
}

Points means(const Points& points, std::span<const std::size_t> assign, std::size_t k, std::vector<std::size_t>& counts) {
  const std::size_t dim = points[0].size();
  Points c(k, std::vector<double>(dim, 0.0));
  counts.assign(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    ++counts[assign[i]];
    for (std::size_t d = 0; d < dim; ++d) c[assign[i]][d] += points[i][d];
  }
  for (std::size_t j = 0; j < k; ++j)
    if (counts[j] > 0)
      for (auto& v : c[j]) v /= static_cast<double>(counts[j]);
  return c;
}

// Moves the point farthest from its centroid into each empty cluster.
void reseed_empty(const Points& points, std::vector<std::size_t>& assign, Points& centroids) {
  const std::size_t k = centroids.size();
  std::vector<std::size_t> counts;
  for (std::size_t pass = 0; pass < k; ++pass) {
    centroids = means(points, assign, k, counts);
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      any = true;
      std::size_t far = points.size();
      double far_d = -1;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (counts[assign[i]] <= 1) continue;
        const double d = sq_dist(points[i], centroids[assign[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far == points.size()) break;
      --counts[assign[far]];
      assign[far] = j;
      counts[j] = 1;
    }
    if (!any) return;
  }
  centroids = means(points, assign, k, counts);
}

constexpr double kMonotoneSlack = 1e-12;

}  // namespace

double inertia_of(const Points& points, std::span<const std::size_t> assignments, const Points& centroids) {
  if (assignments.size() != points.size()) throw ShapeError("inertia: assignment count differs from point count");
  double s = 0;
  for (std::size_t i = 0; i < points.size(); ++i) s += sq_dist(points[i], centroids.at(assignments[i]));
  return s;
}

ClusterResult lloyd(const Points& points, Points centroids, std::size_t max_iter) {
  check_points(points, centroids.size());
  ClusterResult r;
  r.assignments.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) r.assignments[i] = nearest(points[i], centroids);
  while (r.iterations < std::max<std::size_t>(max_iter, 1)) {
    ++r.iterations;
    reseed_empty(points, r.assignments, centroids);
    const double inertia = inertia_of(points, r.assignments, centroids);
    if (!r.inertia_trace.empty() && inertia > r.inertia_trace.back() * (1 + kMonotoneSlack) + 1e-300)
      throw NumericError("Lloyd iteration " + std::to_string(r.iterations) + " increased inertia");
    r.inertia_trace.push_back(inertia);
    std::vector<std::size_t> next(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) next[i] = nearest(points[i], centroids);
    if (next == r.assignments) break;
    if (r.iterations == max_iter) break;
    r.assignments = std::move(next);
  }
  r.centroids = std::move(centroids);
  r.inertia = inertia_of(points, r.assignments, r.centroids);
  return r;
}

ClusterResult kmeans(const Points& points, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  check_points(points, k);
  std::mt19937_64 rng(seed);
  const std::size_t n = points.size();
  Points centroids;
  centroids.push_back(points[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], centroids[0]);
  while (centroids.size() < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n - 1;
    if (total > 0) {
      const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      double run = 0;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (u < run) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centroids.back()));
  }
  ClusterResult r = lloyd(points, std::move(centroids), max_iter);
  r.seed = seed;
  return r;
}

namespace {

std::uint64_t restart_seed(std::uint64_t seed, std::size_t k, std::size_t restart) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(restart)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

ClusterResult kmeans_best(const Points& points, std::size_t k, std::uint64_t seed, std::size_t restarts,
                          std::size_t max_iter) {
  ClusterResult best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    ClusterResult c = kmeans(points, k, restart_seed(seed, k, r), max_iter);
    if (!have || c.inertia < best.inertia) {
      best = std::move(c);
      have = true;
    }
  }
  return best;
}

double weighted_purity(std::span<const std::size_t> assignments, std::span<const int> labels) {
  if (assignments.size() != labels.size())
    throw ShapeError("weighted_purity: " + std::to_string(assignments.size()) + " assignments for " +
                     std::to_string(labels.size()) + " labels");
  if (assignments.empty()) throw RangeError("weighted_purity of an empty set");
  std::map<std::size_t, std::map<int, std::size_t>> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) ++counts[assignments[i]][labels[i]];
  std::size_t majority = 0;
  for (const auto& [cluster, by_label] : counts) {
    std::size_t m = 0;
    for (const auto& [label, n] : by_label) m = std::max(m, n);
    majority += m;
  }
  return static_cast<double>(majority) / static_cast<double>(labels.size());
}

std::vector<InertiaPoint> inertia_curve(const Points& points, std::size_t k_min, std::size_t k_max,
                                        std::uint64_t seed, std::size_t restarts, std::size_t max_iter) {
  if (k_min == 0 || k_max < k_min) throw RangeError("inertia_curve needs 1 <= k_min <= k_max");
  check_points(points, k_max);
  std::vector<InertiaPoint> curve;
  ClusterResult prev;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    ClusterResult best = kmeans_best(points, k, seed, restarts, max_iter);
    if (k > k_min) {
      // Warm start: previous optimum plus the point it fits worst.
      Points init = prev.centroids;
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = sq_dist(points[i], prev.centroids[prev.assignments[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      init.push_back(points[far]);
      ClusterResult warm = lloyd(points, std::move(init), max_iter);
      if (warm.inertia < best.inertia) best = std::move(warm);
      if (best.inertia > curve.back().inertia * (1 + kMonotoneSlack))
        throw NumericError("inertia increased from k = " + std::to_string(k - 1) + " to k = " + std::to_string(k));
    }
    curve.push_back({k, best.inertia});
    prev = std::move(best);
  }
  return curve;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  if (a.size() < 2) throw RangeError("spearman needs at least two observations");
  auto ranks = [](std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Latents

std::string to_string(Modality m) { return m == Modality::audio ? "audio" : "image"; }

Modality modality_from_string(const std::string& name) {
  if (name == "audio") return Modality::audio;
  if (name == "image") return Modality::image;
  throw ConfigError("unknown modality '" + name + "' (expected audio or image)");
}

namespace {

Points rows_of(const Tensor& t) {
  const std::size_t n = t.dim(0), d = t.dim(1);
  auto v = t.data();
  Points out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(v.begin() + static_cast<std::ptrdiff_t>(i * d),
                                                     v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  return out;
}

void check_modality(const PvaeModel& model, Modality m) {
  if ((m == Modality::audio && !model.has_audio()) || (m == Modality::image && !model.has_image()))
    throw ShapeError(to_string(model.kind()) + " model has no " + to_string(m) + " encoder");
}

UnimodalPosterior encode_ids(const PvaeModel& model, const Dataset& dataset, Modality m,
                             std::span<const std::size_t> ids) {
  if (m == Modality::audio) {
    std::vector<const AudioSample*> s;
    for (auto i : ids) s.push_back(&dataset.audio.at(i));
    return infer_unimodal_audio(model, make_audio_batch(s));
  }
  std::vector<const ImageSample*> s;
  for (auto i : ids) s.push_back(&dataset.images.at(i));
  return infer_unimodal_image(model, make_image_batch(s, model.arch().image_side));
}

}  // namespace

LatentSet encode_unimodal(const PvaeModel& model, const Dataset& dataset, Modality modality, std::size_t batch_size) {
  check_modality(model, modality);
  const std::size_t n = modality == Modality::audio ? dataset.audio.size() : dataset.images.size();
  LatentSet out;
  for (std::size_t begin = 0; begin < n; begin += std::max<std::size_t>(batch_size, 1)) {
    const std::size_t end = std::min(n, begin + std::max<std::size_t>(batch_size, 1));
    std::vector<std::size_t> ids(end - begin);
    std::iota(ids.begin(), ids.end(), begin);
    UnimodalPosterior r = encode_ids(model, dataset, modality, ids);
    for (auto& p : rows_of(r.zs.mean)) out.zs.push_back(std::move(p));
    for (auto& p : rows_of(r.style.mean)) out.style.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < n; ++i)
    out.labels.push_back(modality == Modality::audio ? dataset.audio[i].identity : dataset.images[i].identity);
  return out;
}

std::vector<std::string> latent_names(const PvaeModel& model, Modality modality) {
  std::vector<std::string> names{"zs", modality == Modality::audio ? "za" : "zi"};
  if (model.kind() != ModelKind::pvae) names.push_back("z");
  return names;
}

Points select_latent(const LatentSet& set, const std::string& name) {
  if (name == "zs") return set.zs;
  if (name == "za" || name == "zi") return set.style;
  if (name == "z") {
    Points out = set.zs;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].insert(out[i].end(), set.style[i].begin(), set.style[i].end());
    return out;
  }
  throw ConfigError("unknown latent '" + name + "' (expected zs, za, zi or z)");
}

std::vector<PurityRow> purity_table(const PvaeModel& model, const Dataset& dataset, const EvalConfig& config,
                                    const std::string& model_name) {
  std::vector<PurityRow> rows;
  for (Modality m : {Modality::audio, Modality::image}) {
    if ((m == Modality::audio && !model.has_audio()) || (m == Modality::image && !model.has_image())) continue;
    const LatentSet set = encode_unimodal(model, dataset, m);
    for (const auto& name : latent_names(model, m)) {
      const Points pts = select_latent(set, name);
      const ClusterResult c = kmeans_best(pts, config.k, config.seed, config.restarts, config.max_iter);
      rows.push_back({model_name, dataset.split, to_string(m), name, config.k,
                      weighted_purity(c.assignments, set.labels), config.seed});
    }
  }
  return rows;
}

const char* const kMetricsHeader = "model,dataset,modality,latent,k,purity,seed";

void write_metrics_csv(std::span<const PurityRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kMetricsHeader << '\n';
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.purity);
    out << r.model << ',' << r.dataset << ',' << r.modality << ',' << r.latent << ',' << r.k << ',' << buf << ','
        << r.seed << '\n';
  }
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void export_latents(const PvaeModel& model, const Dataset& dataset, Modality modality, const std::string& latent,
                    const std::filesystem::path& path) {
  const LatentSet set = encode_unimodal(model, dataset, modality);
  const Points pts = select_latent(set, latent);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,identity";
  if (modality == Modality::audio)
    out << ",duration,amplitude,pitch_offset,onset";
  else
    out << ",tilt,thickness,scale,offset_x,offset_y,intensity";
  const std::size_t dim = pts.empty() ? 0 : pts[0].size();
  for (std::size_t d = 0; d < dim; ++d) out << ',' << latent << '_' << d;
  out << '\n';
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out << i << ',' << set.labels[i];
    if (modality == Modality::audio) {
      const auto& s = dataset.audio[i].style;
      out << ',' << s.duration << ',' << fmt(s.amplitude) << ',' << s.pitch_offset << ',' << s.onset;
    } else {
      const auto& s = dataset.images[i].style;
      out << ',' << fmt(s.tilt) << ',' << fmt(s.thickness) << ',' << fmt(s.scale) << ',' << fmt(s.offset_x) << ','
          << fmt(s.offset_y) << ',' << fmt(s.intensity);
    }
    for (double v : pts[i]) out << ',' << fmt(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Generation grids

namespace {

Signal source_signal(const Dataset& dataset, Modality m, std::size_t id) {
  if (m == Modality::audio) {
    const auto& s = dataset.audio.at(id);
    return {s.frames, s.values.size() / std::max<std::size_t>(s.frames, 1), s.values};
  }
  const auto& s = dataset.images.at(id);
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(s.pixels.size()))));
  return {side, side, s.pixels};
}

Tensor repeat_rows(const Tensor& t, std::size_t times) {
  std::vector<Tensor> parts(times, t);
  return concat_rows(parts);
}

GenerationGrid make_grid(const PvaeModel& model, const Dataset& dataset, Modality sem_m, Modality out_m,
                         std::span<const std::size_t> semantic_ids, std::span<const std::size_t> style_ids) {
  if (semantic_ids.empty() || style_ids.empty()) throw RangeError("a generation grid needs semantic and style sources");
  check_modality(model, sem_m);
  check_modality(model, out_m);
  GenerationGrid g;
  g.semantic_modality = sem_m;
  g.output_modality = out_m;
  g.semantic_ids.assign(semantic_ids.begin(), semantic_ids.end());
  g.style_ids.assign(style_ids.begin(), style_ids.end());
  for (auto id : semantic_ids) g.semantic_sources.push_back(source_signal(dataset, sem_m, id));
  for (auto id : style_ids) g.style_sources.push_back(source_signal(dataset, out_m, id));

  const Tensor zs = encode_ids(model, dataset, sem_m, semantic_ids).zs.mean.detach();
  const Tensor style = encode_ids(model, dataset, out_m, style_ids).style.mean.detach();
  const std::size_t ns = semantic_ids.size(), ds = style.dim(1);
  g.cells.resize(style_ids.size());
  for (std::size_t r = 0; r < style_ids.size(); ++r) {
    std::vector<double> sv(style.data().begin() + static_cast<std::ptrdiff_t>(r * ds),
                           style.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * ds));
    const Tensor styles = repeat_rows(Tensor(Shape{1, ds}, sv), ns);
    if (out_m == Modality::image) {
      const Tensor img = decode_image(model, styles, zs);
      const std::size_t px = model.arch().image_pixels(), side = model.arch().image_side;
      for (std::size_t c = 0; c < ns; ++c)
        g.cells[r].push_back({side, side,
                              std::vector<double>(img.data().begin() + static_cast<std::ptrdiff_t>(c * px),
                                                  img.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * px))});
    } else {
      const std::size_t T = dataset.audio.at(style_ids[r]).frames, f = model.arch().audio_feat_dim;
      const Tensor frames = decode_audio(model, styles, zs, T);  // [T x ns x F]
      auto v = frames.data();
      for (std::size_t c = 0; c < ns; ++c) {
        Signal s{T, f, std::vector<double>(T * f)};
        for (std::size_t t = 0; t < T; ++t)
          std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((t * ns + c) * f), f,
                      s.values.begin() + static_cast<std::ptrdiff_t>(t * f));
        g.cells[r].push_back(std::move(s));
      }
    }
  }
  return g;
}

}  // namespace

GenerationGrid style_transfer_grid(const PvaeModel& model, const Dataset& dataset, Modality modality,
                                   std::span<const std::size_t> semantic_ids, std::span<const std::size_t> style_ids) {
  return make_grid(model, dataset, modality, modality, semantic_ids, style_ids);
}

GenerationGrid cross_modal_grid(const PvaeModel& model, const Dataset& dataset, Modality semantic_modality,
                                std::span<const std::size_t> semantic_ids, std::span<const std::size_t> style_ids) {
  if (model.kind() != ModelKind::pvae) throw ShapeError("cross-modal generation needs a two-modality PVAE");
  const Modality out = semantic_modality == Modality::audio ? Modality::image : Modality::audio;
  return make_grid(model, dataset, semantic_modality, out, semantic_ids, style_ids);
}

namespace {

struct Tile {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> px;
};

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Tile tile_of(const Signal& s, Modality m) {
  Tile t;
  if (m == Modality::image) {
    t.h = s.rows;
    t.w = s.cols;
    for (double v : s.values) t.px.push_back(to_byte(v));
    return t;
  }
  // Audio: channel on the vertical axis (highest on top), time horizontal.
  t.h = s.cols;
  t.w = s.rows;
  const auto [lo, hi] = std::minmax_element(s.values.begin(), s.values.end());
  const double range = s.values.empty() ? 0.0 : *hi - *lo;
  t.px.resize(t.h * t.w);
  for (std::size_t time = 0; time < s.rows; ++time)
    for (std::size_t ch = 0; ch < s.cols; ++ch) {
      const double v = s.values[time * s.cols + ch];
      t.px[(t.h - 1 - ch) * t.w + time] = to_byte(range > 0 ? (v - *lo) / range : 0.0);
    }
  return t;
}

}  // namespace

void render_grid_pgm(const GenerationGrid& grid, const std::filesystem::path& path) {
  const std::size_t rows = grid.style_sources.size() + 1, cols = grid.semantic_sources.size() + 1;
  std::vector<std::vector<Tile>> tiles(rows, std::vector<Tile>(cols));
  for (std::size_t c = 0; c < grid.semantic_sources.size(); ++c)
    tiles[0][c + 1] = tile_of(grid.semantic_sources[c], grid.semantic_modality);
  for (std::size_t r = 0; r < grid.style_sources.size(); ++r) {
    tiles[r + 1][0] = tile_of(grid.style_sources[r], grid.output_modality);
    for (std::size_t c = 0; c < grid.cells.at(r).size(); ++c)
      tiles[r + 1][c + 1] = tile_of(grid.cells[r][c], grid.output_modality);
  }
  std::size_t cell_h = 0, cell_w = 0;
  for (const auto& row : tiles)
    for (const auto& t : row) {
      cell_h = std::max(cell_h, t.h);
      cell_w = std::max(cell_w, t.w);
    }
  const std::size_t width = cols * cell_w + (cols - 1), height = rows * cell_h + (rows - 1);
  std::vector<std::uint8_t> img(width * height, 0);
  // Separators are mid-grey so they stay visible on black tiles.
  for (std::size_t r = 1; r < rows; ++r)
    std::fill_n(img.begin() + static_cast<std::ptrdiff_t>((r * (cell_h + 1) - 1) * width), width, 128);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t c = 1; c < cols; ++c) img[y * width + c * (cell_w + 1) - 1] = 128;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Tile& t = tiles[r][c];
      const std::size_t y0 = r * (cell_h + 1), x0 = c * (cell_w + 1);
      for (std::size_t y = 0; y < t.h; ++y)
        for (std::size_t x = 0; x < t.w; ++x) img[(y0 + y) * width + x0 + x] = t.px[y * t.w + x];
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace pvae
