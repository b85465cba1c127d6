#include "pvae/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>

#include "pvae/data.hpp"
#include "pvae/error.hpp"
#include "pvae/eval.hpp"
#include "pvae/gaussian.hpp"
#include "pvae/objectives.hpp"
#include "pvae/reference.hpp"

namespace pvae {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct MeanSe {
  double mean = 0, se = 0;
};

MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  const double n = static_cast<double>(v.size());
  for (double x : v) r.mean += x;
  r.mean /= n;
  double ss = 0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.se = v.size() > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
  return r;
}

GeneratorConfig short_sequences(std::size_t samples, std::size_t feat_dim) {
  GeneratorConfig g;
  g.samples = samples;
  g.feat_dim = feat_dim;
  g.t_min = 20;
  g.t_max = 26;
  g.onset_max = 3;
  return g;
}

}  // namespace

ArchConfig gradient_check_arch() {
  ArchConfig a;
  a.latent_dim_s = a.latent_dim_a = a.latent_dim_i = 16;
  a.lstm_cells = 32;
  return a;
}

CheckResult check_gradients(const ArchConfig& arch, std::size_t num_params, std::uint64_t seed, double tolerance) {
  CheckResult r{"gradient_check", false, 0, tolerance, ""};
  const Dataset data = generate_dataset(short_sequences(20, arch.audio_feat_dim), seed, "gradcheck");
  PvaeModel model(arch, ModelKind::pvae, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  const auto pairs = pair_epoch(data, rng);
  const std::vector<PairIndex> anchors(pairs.begin(), pairs.begin() + 3);
  const auto negs = negative_for(anchors, pairs, data, NegativeMode::label_filtered, rng);
  const Batch batch = make_batch(data, anchors), neg_batch = make_batch(data, negs);
  const ElboNoise noise = ElboNoise::draw(model, anchors.size(), rng);
  const ObjectiveWeights w;
  model.zero_grad();
  const double library_value = total_objective(model, batch, neg_batch, w, noise).total.item();
  backward(total_objective(model, batch, neg_batch, w, noise).total);

  // Finite differences run on the long-double re-derivation; it must first
  // reproduce the library's objective.
  ReferenceObjective reference(model, batch, neg_batch, w, noise);
  const double forward_gap = std::abs(static_cast<double>(reference.value()) - library_value) /
                             std::max(1.0, std::abs(library_value));
  const std::uint64_t base_pattern = reference.last_pattern();
  std::size_t shrunk = 0, unresolved = 0;

  std::vector<std::vector<std::size_t>> groups(3);
  const auto& reg = model.parameters();
  for (std::size_t i = 0; i < reg.size(); ++i) groups[static_cast<std::size_t>(reg[i].group)].push_back(i);

  double worst = 0;
  std::string worst_name;
  std::size_t checked_per_group[3] = {0, 0, 0};
  for (std::size_t n = 0; n < num_params; ++n) {
    const std::size_t g = n % 3;
    std::size_t total = 0;
    for (auto i : groups[g]) total += reg[i].tensor.size();
    std::size_t flat = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng), which = 0;
    for (auto i : groups[g]) {
      if (flat < reg[i].tensor.size()) {
        which = i;
        break;
      }
      flat -= reg[i].tensor.size();
    }
    const auto grad = reg[which].tensor.grad();
    const double analytic = grad.empty() ? 0.0 : grad[flat];
    // Shrink the step until both shifted points lie on the base point's
    // smooth piece; a ReLU or hinge flip inside the window invalidates the
    // central difference.
    const long double scale = std::max(1.0L, std::abs(static_cast<long double>(reg[which].tensor.data()[flat])));
    long double h = 1e-5L * scale, up = 0, down = 0;
    for (int attempt = 0;; ++attempt) {
      up = reference.value_shifted(which, flat, h);
      const bool up_same = reference.last_pattern() == base_pattern;
      down = reference.value_shifted(which, flat, -h);
      if ((up_same && reference.last_pattern() == base_pattern) || attempt == 3) {
        if (attempt > 0) ++shrunk;
        if (attempt == 3 && !(up_same && reference.last_pattern() == base_pattern)) ++unresolved;
        break;
      }
      h /= 10;
    }
    const double numeric = static_cast<double>((up - down) / (2 * h));
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    if (rel > worst) {
      worst = rel;
      worst_name = reg[which].name + "[" + std::to_string(flat) + "] analytic " + fmt("%.10g", analytic) +
                   " numeric " + fmt("%.10g", numeric);
    }
    ++checked_per_group[g];
  }
  if (forward_gap > 1e-12) {
    r.value = forward_gap;
    r.detail = "long-double reference objective disagrees with the library by " + fmt("%.3g", forward_gap);
    return r;
  }
  r.value = worst;
  r.passed = worst <= tolerance;
  r.detail = std::to_string(num_params) + " parameters (theta " + std::to_string(checked_per_group[0]) + ", phi " +
             std::to_string(checked_per_group[1]) + ", psi " + std::to_string(checked_per_group[2]) +
             "); " + std::to_string(shrunk) + " steps shrunk near a kink, " + std::to_string(unresolved) +
             " unresolved; worst " + worst_name;
  return r;
}

CheckResult check_kl_monte_carlo(std::size_t pairs, std::size_t samples, std::size_t dim, std::uint64_t seed) {
  CheckResult r{"kl_monte_carlo", true, 0, 3.0, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::size_t failures = 0;
  for (std::size_t k = 0; k < pairs; ++k) {
    std::vector<double> mq(dim), lq(dim), mp(dim), lp(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      mq[d] = normal(rng);
      mp[d] = normal(rng);
      lq[d] = unif(rng);
      lp[d] = unif(rng);
    }
    const double closed = kl_divergence(mq, lq, mp, lp);
    std::vector<double> diffs(samples);
    for (std::size_t s = 0; s < samples; ++s) {
      double lq_z = 0, lp_z = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double z = mq[d] + std::exp(0.5 * lq[d]) * normal(rng);
        const double uq = (z - mq[d]), up = (z - mp[d]);
        lq_z += -0.5 * (std::log(2 * std::numbers::pi) + lq[d] + uq * uq / std::exp(lq[d]));
        lp_z += -0.5 * (std::log(2 * std::numbers::pi) + lp[d] + up * up / std::exp(lp[d]));
      }
      diffs[s] = lq_z - lp_z;
    }
    const MeanSe mc = mean_se(diffs);
    const double z = std::abs(closed - mc.mean) / mc.se;
    r.value = std::max(r.value, z);
    if (z > 3.0) ++failures;
  }
  r.passed = failures == 0;
  r.detail = std::to_string(pairs) + " pairs, D = " + std::to_string(dim) + ", " + std::to_string(samples) +
             " samples each; " + std::to_string(failures) + " outside 3 SE";
  return r;
}

CheckResult check_gaussian_spot_values() {
  CheckResult r{"gaussian_spot_values", true, 0, 1e-9, ""};
  const double ln2pi = std::log(2 * std::numbers::pi);
  struct Case {
    const char* name;
    double got, want;
  };
  auto one = [](double m, double lv) { return DiagGaussian::from_values({m}, {lv}); };
  const Tensor x0(Shape{1, 1}, std::vector<double>{0.3});
  const Tensor x1(Shape{1, 1}, std::vector<double>{1.3});
  const Tensor a(Shape{1, 2}, std::vector<double>{1.0, 0.0});
  const Tensor b(Shape{1, 2}, std::vector<double>{0.0, 1.0});
  // Unit vectors scaled so the positive and negative kernels are both 0.9.
  const double d = std::sqrt(-2 * std::log(0.9));
  const Tensor ma(Shape{1, 1}, std::vector<double>{0.0});
  const Tensor mi(Shape{1, 1}, std::vector<double>{d});
  const Tensor neg(Shape{1, 1}, std::vector<double>{-d});
  const Case cases[] = {
      {"kl(N(0,1)||N(0,1))", kl_divergence(one(0, 0), one(0, 0)).item(), 0.0},
      {"kl(N(1,1)||N(0,1))", kl_divergence(one(1, 0), one(0, 0)).item(), 0.5},
      {"kl_to_standard(log_var=1)", kl_to_standard(one(0, 1)).item(), 0.5 * (std::exp(1.0) - 2.0)},
      {"log_prob(x=mean)", log_prob(x0, one(0.3, 0)).item(), -0.5 * ln2pi},
      {"log_prob(x=mean+1)", log_prob(x1, one(0.3, 0)).item(), -0.5 * ln2pi - 0.5},
      {"rbf(a,a)", rbf_kernel(a, a).item(), 1.0},
      {"rbf(|a-b|^2=2)", rbf_kernel(a, b).item(), std::exp(-1.0)},
      {"contrastive(0.9,0.9)", contrastive_from_means(ma, mi, ma, neg, 0.5).item(), -0.5},
  };
  std::string bad;
  for (const auto& c : cases) {
    const double err = std::abs(c.got - c.want);
    r.value = std::max(r.value, err);
    if (err > 1e-9) bad += std::string(bad.empty() ? "" : "; ") + c.name + " = " + fmt("%.12g", c.got);
  }
  r.passed = bad.empty();
  r.detail = bad.empty() ? std::to_string(std::size(cases)) + " values" : bad;
  return r;
}

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.latent_dim_s = a.latent_dim_a = a.latent_dim_i = 4;
  a.lstm_cells = 8;
  a.preenc_out = 8;
  a.conv_channels = {2, 4};
  a.deconv_channels = {4, 1};
  a.fc_units = {16, 7 * 7 * 4};
  return a;
}

Tensor repeat_rows(const Tensor& t, std::size_t times) {
  std::vector<Tensor> parts(times, t);
  return concat_rows(parts);
}

AudioBatch repeat_audio(const AudioBatch& a, std::size_t times) {
  AudioBatch out;
  out.feat_dim = a.feat_dim;
  for (std::size_t k = 0; k < times; ++k) {
    out.lengths.insert(out.lengths.end(), a.lengths.begin(), a.lengths.end());
    out.frames.insert(out.frames.end(), a.frames.begin(), a.frames.end());
  }
  return out;
}

Tensor std_noise(std::size_t rows, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * dim);
  for (auto& x : v) x = n(rng);
  return Tensor(Shape{rows, dim}, std::move(v));
}

// Batch mean over examples of log (1/K) sum_k p(X, z_k) / q(z_k | X).
double iw_bound(const PvaeModel& model, const Batch& batch, std::size_t K, std::mt19937_64& rng) {
  const MultimodalPosterior q = infer_multimodal(model, batch);
  const std::size_t B = batch.size(), KB = K * B;
  double log_w_total = 0;
  std::vector<double> log_w(KB, 0.0);
  auto add_latent = [&](const DiagGaussian& post) {
    const DiagGaussian rep{repeat_rows(post.mean, K), repeat_rows(post.log_var, K)};
    const Tensor z = sample_reparam(rep, std_noise(KB, post.dim(), rng));
    const Tensor lp = log_prob(z, DiagGaussian::standard(KB, post.dim()));
    const Tensor lq = log_prob(z, rep);
    for (std::size_t j = 0; j < KB; ++j) log_w[j] += lp.at(j) - lq.at(j);
    return z;
  };
  const Tensor zs = add_latent(q.zs);
  const Tensor za = add_latent(q.za);
  const Tensor zi = add_latent(q.zi);

  const AudioBatch audio = repeat_audio(batch.audio, K);
  const std::size_t T = audio.max_len(), F = audio.feat_dim;
  const Tensor frames = reshape(decode_audio(model, za, zs, T), Shape{T * KB, F});
  const Tensor per_frame = unit_log_prob(audio.time_major(), frames, audio.time_major_mask());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < KB; ++j) log_w[j] += per_frame.at(t * KB + j);

  const std::size_t px = model.arch().image_pixels();
  const Tensor images = reshape(repeat_rows(reshape(batch.images, Shape{B, px}), K), Shape{KB, px});
  const Tensor means = reshape(decode_image(model, zi, zs), Shape{KB, px});
  const Tensor per_image = unit_log_prob(images, means);
  for (std::size_t j = 0; j < KB; ++j) log_w[j] += per_image.at(j);

  for (std::size_t b = 0; b < B; ++b) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, log_w[k * B + b]);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(log_w[k * B + b] - mx);
    log_w_total += mx + std::log(s / static_cast<double>(K));
  }
  return log_w_total / static_cast<double>(B);
}

}  // namespace

CheckResult check_elbo_bound(std::size_t models, std::size_t importance_samples, std::uint64_t seed) {
  CheckResult r{"elbo_bound", true, -INFINITY, 0, ""};
  const ArchConfig arch = tiny_arch();
  const Dataset data = generate_dataset(short_sequences(10, arch.audio_feat_dim), seed, "bound");
  std::mt19937_64 rng(seed);
  std::size_t failures = 0;
  double mean_gap = 0;
  for (std::size_t m = 0; m < models; ++m) {
    PvaeModel model(arch, ModelKind::pvae, seed * 1000 + m);
    const auto pairs = pair_epoch(data, rng);
    const std::vector<PairIndex> sub(pairs.begin(), pairs.begin() + 4);
    const Batch batch = make_batch(data, sub);
    std::vector<double> elbos, bounds;
    for (int i = 0; i < 64; ++i)
      elbos.push_back(elbo(model, batch, ElboNoise::draw(model, batch.size(), rng)).parts.elbo());
    for (int i = 0; i < 8; ++i) bounds.push_back(iw_bound(model, batch, importance_samples, rng));
    const MeanSe e = mean_se(elbos), b = mean_se(bounds);
    const double combined = std::sqrt(e.se * e.se + b.se * b.se);
    // Margin by which the ELBO stays below the bound, in combined SEs.
    const double excess = (e.mean - b.mean) / std::max(combined, 1e-12);
    r.value = std::max(r.value, excess);
    mean_gap += b.mean - e.mean;
    if (e.mean > b.mean + 3 * combined) ++failures;
  }
  r.threshold = 3.0;
  r.passed = failures == 0;
  r.detail = std::to_string(models) + " models, K = " + std::to_string(importance_samples) + "; mean bound gap " +
             fmt("%.4g", mean_gap / static_cast<double>(models)) + " nats; " + std::to_string(failures) + " violations";
  return r;
}

CheckResult check_purity_bruteforce(std::size_t instances, std::size_t max_points, std::uint64_t seed) {
  CheckResult r{"purity_bruteforce", true, 0, 0, ""};
  std::mt19937_64 rng(seed);
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, max_points)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const int labels_n = std::uniform_int_distribution<int>(1, 10)(rng);
    std::vector<std::size_t> assign(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
      labels[i] = std::uniform_int_distribution<int>(0, labels_n - 1)(rng);
    }
    std::size_t majority = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t best = 0;
      for (int l = 0; l < labels_n; ++l) {
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i) count += (assign[i] == c && labels[i] == l);
        best = std::max(best, count);
      }
      majority += best;
    }
    const double want = static_cast<double>(majority) / static_cast<double>(n);
    const double got = weighted_purity(assign, labels);
    r.value = std::max(r.value, std::abs(got - want));
    if (got != want) ++mismatches;
  }
  r.passed = mismatches == 0;
  r.detail = std::to_string(instances) + " instances, " + std::to_string(mismatches) + " mismatches";
  return r;
}

CheckResult check_lloyd_monotone(std::size_t instances, std::uint64_t seed) {
  CheckResult r{"lloyd_monotone", true, 0, 0, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t iterations = 0, violations = 0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(20, 200)(rng);
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    Points pts(n, std::vector<double>(dim));
    for (auto& p : pts)
      for (auto& v : p) v = normal(rng);
    // Start from a deliberately poor initialization so Lloyd has work to do.
    Points init(pts.begin(), pts.begin() + static_cast<std::ptrdiff_t>(k));
    for (auto& c : init)
      for (auto& v : c) v += 3.0;
    const ClusterResult c = lloyd(pts, init);
    iterations += c.inertia_trace.size();
    for (std::size_t i = 1; i < c.inertia_trace.size(); ++i) {
      const double rise = c.inertia_trace[i] - c.inertia_trace[i - 1];
      if (rise > 0) {
        r.value = std::max(r.value, rise / c.inertia_trace[i - 1]);
        if (rise > 1e-12 * c.inertia_trace[i - 1]) ++violations;
      }
    }
  }
  r.threshold = 1e-12;
  r.passed = violations == 0;
  r.detail = std::to_string(instances) + " runs, " + std::to_string(iterations) + " logged iterations, " +
             std::to_string(violations) + " increases";
  return r;
}

CheckResult check_kmeans_blobs(std::uint64_t seed) {
  CheckResult r{"kmeans_blobs", false, 0, 1.0, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> spread(0.0, 0.5);
  const double centres[4][2] = {{-10, -10}, {-10, 10}, {10, -10}, {10, 10}};
  Points pts;
  std::vector<int> labels;
  for (int b = 0; b < 4; ++b)
    for (int i = 0; i < 50; ++i) {
      pts.push_back({centres[b][0] + spread(rng), centres[b][1] + spread(rng)});
      labels.push_back(b);
    }
  const ClusterResult c = kmeans(pts, 4, seed);
  // Agreement: every cluster pure and every blob in exactly one cluster.
  std::vector<int> owner(4, -1);
  bool one_to_one = true;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    auto& o = owner[static_cast<std::size_t>(labels[i])];
    if (o == -1) o = static_cast<int>(c.assignments[i]);
    one_to_one = one_to_one && o == static_cast<int>(c.assignments[i]);
  }
  std::sort(owner.begin(), owner.end());
  one_to_one = one_to_one && std::adjacent_find(owner.begin(), owner.end()) == owner.end();
  r.value = weighted_purity(c.assignments, labels);
  r.passed = one_to_one && r.value == 1.0;
  r.detail = std::string("4 blobs x 50 points, ") + (one_to_one ? "partition recovered" : "partition differs");
  return r;
}

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>((v >> 16) & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
  s.push_back(static_cast<char>(v & 0xFF));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + p.string());
}

}  // namespace

CheckResult check_idx_roundtrip(const std::filesystem::path& scratch_dir) {
  CheckResult r{"idx_roundtrip", false, 0, 0, ""};
  std::filesystem::create_directories(scratch_dir);
  std::string images;
  put_be32(images, 0x00000803);
  put_be32(images, 2);
  put_be32(images, 28);
  put_be32(images, 28);
  for (int i = 0; i < 2 * 28 * 28; ++i) images.push_back(static_cast<char>((i * 37 + i / 28) & 0xFF));
  std::string labels;
  put_be32(labels, 0x00000801);
  put_be32(labels, 2);
  labels.push_back(7);
  labels.push_back(2);

  const auto img_in = scratch_dir / "fixture-images.idx", img_out = scratch_dir / "fixture-images-rt.idx";
  const auto lab_in = scratch_dir / "fixture-labels.idx", lab_out = scratch_dir / "fixture-labels-rt.idx";
  spit(img_in, images);
  spit(lab_in, labels);
  const IdxImages parsed = read_idx_images(img_in);
  const auto parsed_labels = read_idx_labels(lab_in);
  write_idx_images(parsed, img_out);
  write_idx_labels(parsed_labels, lab_out);

  bool pixels_ok = parsed.count == 2 && parsed.rows == 28 && parsed.cols == 28 && parsed.pixels.size() == 2 * 784;
  for (std::size_t i = 0; pixels_ok && i < parsed.pixels.size(); ++i)
    pixels_ok = parsed.pixels[i] == static_cast<unsigned char>(images[16 + i]) / 255.0;
  const bool bytes_ok = slurp(img_out) == images && slurp(lab_out) == labels;
  const bool labels_ok = parsed_labels == std::vector<std::uint8_t>{7, 2};
  r.passed = pixels_ok && bytes_ok && labels_ok;
  r.value = r.passed ? 0 : 1;
  r.detail = std::string("images ") + (pixels_ok ? "ok" : "wrong") + ", labels " + (labels_ok ? "ok" : "wrong") +
             ", re-written bytes " + (bytes_ok ? "identical" : "differ");
  return r;
}

CheckResult check_conv_adjoint(std::uint64_t seed) {
  CheckResult r{"conv_adjoint", false, 0, 1e-10, ""};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = normal(rng);
    return Tensor(std::move(s), std::move(v));
  };
  const Tensor x = random({2, 3, 8, 8});
  const Tensor k = random({4, 3, 4, 4});
  const Tensor y = random({2, 4, 4, 4});
  const Tensor cx = conv2d(x, k), ty = conv2d_transposed(y, k);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.at(i) * y.at(i);
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.at(i) * ty.at(i);
  r.value = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
  r.passed = r.value <= r.threshold;
  r.detail = "<conv x, y> = " + fmt("%.12g", lhs) + ", <x, conv^T y> = " + fmt("%.12g", rhs);
  return r;
}

std::vector<CheckResult> run_verify(VerifyLevel level, const std::filesystem::path& scratch_dir) {
  const bool full = level == VerifyLevel::full;
  std::vector<CheckResult> out;
  out.push_back(check_gradients(gradient_check_arch(), full ? 200 : 30, 1));
  out.push_back(full ? check_kl_monte_carlo(50, 100000, 16, 2) : check_kl_monte_carlo(10, 20000, 16, 2));
  out.push_back(check_gaussian_spot_values());
  out.push_back(check_elbo_bound(full ? 20 : 3, 64, 3));
  out.push_back(check_purity_bruteforce(100, 200, 4));
  out.push_back(check_lloyd_monotone(full ? 100 : 20, 5));
  out.push_back(check_kmeans_blobs(6));
  out.push_back(check_idx_roundtrip(scratch_dir));
  out.push_back(check_conv_adjoint(7));
  return out;
}

std::string format_check(const CheckResult& r) {
  std::ostringstream s;
  s << (r.passed ? "PASS " : "FAIL ") << r.name << ": value " << fmt("%.6g", r.value) << " (threshold "
    << fmt("%.6g", r.threshold) << "); " << r.detail;
  return s.str();
}

}  // namespace pvae
