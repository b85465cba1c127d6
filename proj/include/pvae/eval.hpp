#pragma once

// Clustering analysis of inferred latents, generation grids and their
// file exports.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pvae/config.hpp"
#include "pvae/data.hpp"
#include "pvae/networks.hpp"

namespace pvae {

using Points = std::vector<std::vector<double>>;  // N rows of D coordinates

struct ClusterResult {
  std::vector<std::size_t> assignments;
  Points centroids;
  double inertia = 0;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  std::vector<double> inertia_trace;  // after every Lloyd update
};

/// Sum of squared distances of every point to its assigned centroid.
double inertia_of(const Points& points, std::span<const std::size_t> assignments, const Points& centroids);

/// k-means++ seeding then Lloyd iterations to an assignment fixpoint or
/// `max_iter`. Ties go to the lowest centroid index; an empty cluster is
/// re-seeded at the point farthest from its centroid. Throws RangeError if
/// N < k or k == 0, NumericError if an iteration increases inertia.
ClusterResult kmeans(const Points& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 300);

/// Lloyd iterations from given centroids (no seeding).
ClusterResult lloyd(const Points& points, Points centroids, std::size_t max_iter = 300);

/// Best inertia of `restarts` runs with seeds derived from `seed`.
ClusterResult kmeans_best(const Points& points, std::size_t k, std::uint64_t seed, std::size_t restarts = 5,
                          std::size_t max_iter = 300);

/// (1/N) * sum over clusters of the majority label count.
double weighted_purity(std::span<const std::size_t> assignments, std::span<const int> labels);

struct InertiaPoint {
  std::size_t k;
  double inertia;
};

/// Best-of-restarts inertia for k_min..k_max. Each k > k_min also runs
/// from the k-1 solution plus its farthest point, so the curve is
/// non-increasing; a violation throws NumericError.
std::vector<InertiaPoint> inertia_curve(const Points& points, std::size_t k_min, std::size_t k_max,
                                        std::uint64_t seed, std::size_t restarts = 5, std::size_t max_iter = 300);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

// --- Latents

enum class Modality { audio, image };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& name);

/// Posterior means from the unimodal encoder of `modality` (the sole encoder
/// for a baseline). `style` is z^a or z^i.
struct LatentSet {
  Points zs, style;
  std::vector<int> labels;
};

LatentSet encode_unimodal(const PvaeModel& model, const Dataset& dataset, Modality modality,
                          std::size_t batch_size = 100);

/// Names of the latents reported for a model and modality: zs and za/zi,
/// plus the concatenated z for the single-modality baselines.
std::vector<std::string> latent_names(const PvaeModel& model, Modality modality);
Points select_latent(const LatentSet& set, const std::string& name);

struct PurityRow {
  std::string model, dataset, modality, latent;
  std::size_t k = 10;
  double purity = 0;
  std::uint64_t seed = 0;
};

std::vector<PurityRow> purity_table(const PvaeModel& model, const Dataset& dataset, const EvalConfig& config,
                                    const std::string& model_name);

extern const char* const kMetricsHeader;  // model,dataset,modality,latent,k,purity,seed
void write_metrics_csv(std::span<const PurityRow> rows, const std::filesystem::path& path);

/// One row per sample: index, identity, style metadata, latent means.
void export_latents(const PvaeModel& model, const Dataset& dataset, Modality modality, const std::string& latent,
                    const std::filesystem::path& path);

// --- Generation grids

struct Signal {
  std::size_t rows = 0, cols = 0;  // image: side x side; audio: frames x feat_dim
  std::vector<double> values;
};

/// Row 0 holds the semantic sources, column 0 the style sources;
/// cells[r][c] decodes z^s of semantic source c with the style of source r.
struct GenerationGrid {
  Modality semantic_modality = Modality::image;
  Modality output_modality = Modality::image;
  std::vector<std::size_t> semantic_ids, style_ids;  // dataset indices
  std::vector<Signal> semantic_sources, style_sources;
  std::vector<std::vector<Signal>> cells;
};

/// Semantic and style sources from the same modality.
GenerationGrid style_transfer_grid(const PvaeModel& model, const Dataset& dataset, Modality modality,
                                   std::span<const std::size_t> semantic_ids, std::span<const std::size_t> style_ids);

/// z^s from `semantic_modality` sources, style and output in the other one.
GenerationGrid cross_modal_grid(const PvaeModel& model, const Dataset& dataset, Modality semantic_modality,
                                std::span<const std::size_t> semantic_ids, std::span<const std::size_t> style_ids);

/// 8-bit binary PGM. Images are clamped to [0, 1]; audio tiles are
/// min-max normalized with time running left to right. 1-px separators.
void render_grid_pgm(const GenerationGrid& grid, const std::filesystem::path& path);

}  // namespace pvae
