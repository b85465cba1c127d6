#include "pvae/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "pvae/config.hpp"
#include "pvae/error.hpp"

namespace pvae {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be positive and finite");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!std::isfinite(clip_norm)) throw ConfigError("clip_norm must be finite");
  weights.validate();
}

AdamState AdamState::zeros(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& c, std::span<const std::string> names) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("Adam state holds " + std::to_string(state.m.size()) + " moments for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (double g : params[k].grad())
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter " +
                           (k < names.size() ? names[k] : "#" + std::to_string(k)));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = params[k].grad();
    if (g.empty()) continue;  // no gradient reached this parameter
    auto p = params[k].mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw ShapeError("Adam moment size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = io::round_f32(c.beta1 * m[i] + (1 - c.beta1) * g[i]);
      v[i] = io::round_f32(c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p[i] = io::round_f32(p[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

namespace {

std::vector<Tensor> param_tensors(const PvaeModel& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

std::vector<std::string> param_names(const PvaeModel& model) {
  std::vector<std::string> out;
  for (const auto& p : model.parameters()) out.push_back(p.name);
  return out;
}

void accumulate(ObjectiveBreakdown& acc, const ObjectiveBreakdown& x, double w) {
  acc.recon_audio += w * x.recon_audio;
  acc.recon_image += w * x.recon_image;
  acc.kl_za += w * x.kl_za;
  acc.kl_zi += w * x.kl_zi;
  acc.kl_zs += w * x.kl_zs;
  acc.coherence += w * x.coherence;
  acc.contrastive += w * x.contrastive;
  acc.total += w * x.total;
}

json pairs_json(std::span<const PairIndex> pairs) {
  json a = json::array();
  for (const auto& p : pairs) a.push_back({p.audio, p.image});
  return a;
}

void write_failed_batch(const std::filesystem::path& dir, std::size_t epoch, std::size_t batch,
                        std::span<const PairIndex> anchors, std::span<const PairIndex> negatives,
                        const std::string& reason) {
  if (dir.empty()) return;
  json j = {{"epoch", epoch},
            {"batch", batch},
            {"reason", reason},
            {"pairs", pairs_json(anchors)},
            {"negatives", pairs_json(negatives)}};
  write_json(j, dir / "failed_batch.json");
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_epoch_%04zu.pvae", epoch);
  return buf;
}

}  // namespace

TrainState TrainState::initial(const PvaeModel& model, const TrainConfig& config) {
  TrainState s;
  auto params = param_tensors(model);
  s.adam = AdamState::zeros(params);
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32), 0x7472u};
  s.rng.seed(seq);
  return s;
}

const char* const kTrainLogHeader =
    "epoch,recon_audio,recon_image,kl_za,kl_zi,kl_zs,coherence,contrastive,total,wall_time_s";

std::string format_log_row(const EpochLog& log) {
  const auto& m = log.mean;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", log.epoch,
                m.recon_audio, m.recon_image, m.kl_za, m.kl_zi, m.kl_zs, m.coherence, m.contrastive, m.total,
                log.wall_time_s);
  return buf;
}

std::vector<EpochLog> fit(PvaeModel& model, const Dataset& dataset, const TrainConfig& config, TrainState& state,
                          const FitOptions& options) {
  config.validate();
  if (dataset.audio.empty() || dataset.images.empty()) throw ShapeError("fit needs a dataset with both modalities");
  auto params = param_tensors(model);
  const auto names = param_names(model);
  if (state.adam.m.size() != params.size()) throw ShapeError("training state does not match the model parameters");

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "train_log.csv";
    const bool append = state.epoch > 0 && std::filesystem::exists(log_path);
    log_file.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + log_path.string());
    if (!append) log_file << kTrainLogHeader << '\n';
  }

  const bool contrast = model.kind() == ModelKind::pvae && config.weights.alpha_cm != 0.0;
  std::vector<EpochLog> logs;
  while (state.epoch < config.epochs) {
    const std::size_t epoch = state.epoch + 1;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<PairIndex> pairs = pair_epoch(dataset, state.rng);
    std::shuffle(pairs.begin(), pairs.end(), state.rng);
    if (model.kind() == ModelKind::vae_image) {
      // The image baseline visits every image once instead of the pairing.
      std::vector<std::size_t> order(dataset.images.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), state.rng);
      pairs.resize(std::min(pairs.size(), order.size()));
      for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].image = order[i];
    }

    ObjectiveBreakdown acc;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t begin = 0; begin < pairs.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(pairs.size(), begin + config.batch_size);
      std::span<const PairIndex> anchors(pairs.data() + begin, end - begin);
      std::vector<PairIndex> negs;
      if (contrast) negs = negative_for(anchors, pairs, dataset, config.negatives, state.rng);
      Batch batch = make_batch(dataset, anchors);
      Batch neg_batch = contrast ? make_batch(dataset, negs) : batch;
      ElboNoise noise = ElboNoise::draw(model, anchors.size(), state.rng);

      ObjectiveResult res;
      try {
        res = total_objective(model, batch, neg_batch, config.weights, noise);
        if (!std::isfinite(res.parts.total)) throw NumericError("objective is not finite");
        model.zero_grad();
        backward(-res.total);
        clip_global_norm(params, config.clip_norm);
        adam_step(params, state.adam, config, names);
      } catch (const NumericError& e) {
        write_failed_batch(options.out_dir, epoch, batch_index, anchors, negs, e.what());
        throw TrainingError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " +
                                e.what(),
                            epoch, batch_index);
      }
      accumulate(acc, res.parts, static_cast<double>(anchors.size()));
      seen += anchors.size();
    }
    ObjectiveBreakdown mean;
    accumulate(mean, acc, 1.0 / static_cast<double>(std::max<std::size_t>(seen, 1)));

    state.epoch = epoch;
    EpochLog log{epoch, mean,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    logs.push_back(log);
    if (log_file.is_open()) log_file << format_log_row(log) << "\n" << std::flush;
    if (!options.out_dir.empty() && config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0)
      save_checkpoint(options.out_dir / checkpoint_name(epoch), model, config, state);
    if (options.on_epoch) options.on_epoch(log);
  }
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "final.pvae", model, config, state);
  return logs;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header line, then float32 parameters, Adam m, Adam v.

namespace {

constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PvaeModel& model, const TrainConfig& train,
                     const TrainState& state) {
  const auto& reg = model.parameters();
  if (state.adam.m.size() != reg.size() || state.adam.v.size() != reg.size())
    throw ShapeError("training state does not match the model parameters");
  std::ostringstream rng;
  rng << state.rng;
  json tensors = json::array();
  std::size_t floats = 0;
  for (const auto& p : reg) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"count", p.tensor.size()}});
    floats += p.tensor.size();
  }
  json h = {{"format", "pvae-checkpoint"},
            {"version", kCheckpointVersion},
            {"model", to_string(model.kind())},
            {"arch", to_json(model.arch())},
            {"train", to_json(train)},
            {"epoch", state.epoch},
            {"adam_step", state.adam.step},
            {"rng", rng.str()},
            {"tensors", std::move(tensors)},
            {"payload_floats", 3 * floats}};

  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out << h.dump() << '\n';
    for (const auto& p : reg) io::write_f32(out, p.tensor.data());
    for (const auto& m : state.adam.m) io::write_f32(out, m);
    for (const auto& v : state.adam.v) io::write_f32(out, v);
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw TruncatedError("checkpoint " + path.string() + " is empty");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception&) {
    throw MagicError("not a pvae checkpoint: " + path.string());
  }
  if (!h.is_object() || h.value("format", "") != "pvae-checkpoint")
    throw MagicError("not a pvae checkpoint: " + path.string());
  if (h.value("version", -1) != kCheckpointVersion)
    throw VersionError("checkpoint version " + h["version"].dump() + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");

  try {
    const ArchConfig arch = arch_from_json(h.at("arch"));
    TrainConfig train = train_from_json(h.at("train"));
    PvaeModel model(arch, model_kind_from_string(h.at("model").get<std::string>()), 0);
    const auto& reg = model.parameters();
    const json& tensors = h.at("tensors");
    if (tensors.size() != reg.size())
      throw ShapeError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                       std::to_string(reg.size()));
    std::size_t floats = 0;
    for (std::size_t i = 0; i < reg.size(); ++i) {
      const auto& t = tensors[i];
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      if (name != reg[i].name || shape != reg[i].tensor.shape())
        throw ShapeError("checkpoint tensor " + name + " " + to_string(shape) + " does not match " + reg[i].name +
                         " " + to_string(reg[i].tensor.shape()));
      if (t.at("count").get<std::size_t>() != numel(shape))
        throw TruncatedError("checkpoint tensor " + name + " count disagrees with its shape");
      floats += numel(shape);
    }
    if (h.at("payload_floats").get<std::size_t>() != 3 * floats)
      throw TruncatedError("checkpoint payload size disagrees with its tensor table");

    const std::string what = "checkpoint " + path.string();
    for (const auto& p : reg) {
      auto values = io::read_f32(in, p.tensor.size(), what);
      auto dst = Tensor(p.tensor).mutable_data();
      std::copy(values.begin(), values.end(), dst.begin());
    }
    TrainState state;
    state.epoch = h.at("epoch").get<std::size_t>();
    state.adam.step = h.at("adam_step").get<std::size_t>();
    for (const auto& p : reg) state.adam.m.push_back(io::read_f32(in, p.tensor.size(), what));
    for (const auto& p : reg) state.adam.v.push_back(io::read_f32(in, p.tensor.size(), what));
    if (in.peek() != std::char_traits<char>::eof()) throw TruncatedError(what + " has trailing bytes");
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> state.rng;
    if (!rng) throw ConfigError(what + ": unreadable RNG state");
    return Checkpoint{std::move(model), std::move(train), std::move(state)};
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + " header is malformed: " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.model.arch() == expected))
    throw ConfigError("checkpoint architecture " + to_json(c.model.arch()).dump() + " differs from the configured " +
                      to_json(expected).dump());
  return c;
}

}  // namespace pvae
