#include "pvae/config.hpp"

#include <fstream>
#include <set>

#include "pvae/error.hpp"

namespace pvae {

using nlohmann::json;

namespace {

class StrictReader {
 public:
  StrictReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void get_with(const char* key, T& out, T (*parse)(const json&)) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) out = parse(*it);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> known_;
};

template <class T, std::size_t N>
void get_array(StrictReader& r, const char* key, std::array<T, N>& out) {
  std::vector<T> v(out.begin(), out.end());
  r.get(key, v);
  if (v.size() != N) throw ConfigError(std::string(key) + " must have " + std::to_string(N) + " entries");
  std::copy(v.begin(), v.end(), out.begin());
}

ObjectiveWeights weights_from_json(const json& j) {
  ObjectiveWeights w;
  StrictReader r(j, "train.weights");
  r.get("alpha_ch", w.alpha_ch);
  r.get("alpha_cm", w.alpha_cm);
  r.get("margin", w.margin);
  r.finish();
  return w;
}

}  // namespace

json to_json(const ArchConfig& c) {
  return {{"latent_dim_s", c.latent_dim_s}, {"latent_dim_a", c.latent_dim_a},
          {"latent_dim_i", c.latent_dim_i}, {"lstm_cells", c.lstm_cells},
          {"preenc_out", c.preenc_out},     {"image_side", c.image_side},
          {"audio_feat_dim", c.audio_feat_dim}, {"conv_channels", c.conv_channels},
          {"deconv_channels", c.deconv_channels}, {"fc_units", c.fc_units}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig c;
  StrictReader r(j, "arch");
  r.get("latent_dim_s", c.latent_dim_s);
  r.get("latent_dim_a", c.latent_dim_a);
  r.get("latent_dim_i", c.latent_dim_i);
  r.get("lstm_cells", c.lstm_cells);
  r.get("preenc_out", c.preenc_out);
  r.get("image_side", c.image_side);
  r.get("audio_feat_dim", c.audio_feat_dim);
  get_array(r, "conv_channels", c.conv_channels);
  get_array(r, "deconv_channels", c.deconv_channels);
  get_array(r, "fc_units", c.fc_units);
  r.finish();
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"weights", {{"alpha_ch", c.weights.alpha_ch}, {"alpha_cm", c.weights.alpha_cm}, {"margin", c.weights.margin}}},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"clip_norm", c.clip_norm},
          {"negatives", to_string(c.negatives)}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  StrictReader r(j, "train");
  r.get("lr", c.lr);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get_with("weights", c.weights, &weights_from_json);
  r.get("seed", c.seed);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("clip_norm", c.clip_norm);
  std::string neg = to_string(c.negatives);
  r.get("negatives", neg);
  c.negatives = negative_mode_from_string(neg);
  r.finish();
  c.validate();
  return c;
}

json to_json(const GeneratorConfig& c) {
  return {{"samples", c.samples},          {"feat_dim", c.feat_dim},
          {"t_min", c.t_min},              {"t_max", c.t_max},
          {"tilt_max", c.tilt_max},        {"thickness_min", c.thickness_min},
          {"thickness_max", c.thickness_max}, {"scale_min", c.scale_min},
          {"scale_max", c.scale_max},      {"offset_max", c.offset_max},
          {"intensity_min", c.intensity_min}, {"intensity_max", c.intensity_max},
          {"pixel_noise", c.pixel_noise},  {"onset_max", c.onset_max},
          {"amplitude_min", c.amplitude_min}, {"amplitude_max", c.amplitude_max},
          {"pitch_max", c.pitch_max},      {"feature_noise", c.feature_noise}};
}

GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig c;
  StrictReader r(j, "data");
  r.get("samples", c.samples);
  r.get("feat_dim", c.feat_dim);
  r.get("t_min", c.t_min);
  r.get("t_max", c.t_max);
  r.get("tilt_max", c.tilt_max);
  r.get("thickness_min", c.thickness_min);
  r.get("thickness_max", c.thickness_max);
  r.get("scale_min", c.scale_min);
  r.get("scale_max", c.scale_max);
  r.get("offset_max", c.offset_max);
  r.get("intensity_min", c.intensity_min);
  r.get("intensity_max", c.intensity_max);
  r.get("pixel_noise", c.pixel_noise);
  r.get("onset_max", c.onset_max);
  r.get("amplitude_min", c.amplitude_min);
  r.get("amplitude_max", c.amplitude_max);
  r.get("pitch_max", c.pitch_max);
  r.get("feature_noise", c.feature_noise);
  r.finish();
  c.validate();
  return c;
}

json to_json(const EvalConfig& c) {
  return {{"k", c.k},         {"k_min", c.k_min},       {"k_max", c.k_max},
          {"restarts", c.restarts}, {"max_iter", c.max_iter}, {"seed", c.seed}};
}

EvalConfig eval_from_json(const json& j) {
  EvalConfig c;
  StrictReader r(j, "eval");
  r.get("k", c.k);
  r.get("k_min", c.k_min);
  r.get("k_max", c.k_max);
  r.get("restarts", c.restarts);
  r.get("max_iter", c.max_iter);
  r.get("seed", c.seed);
  r.finish();
  if (c.k == 0 || c.k_min == 0 || c.k_max < c.k_min || c.restarts == 0 || c.max_iter == 0)
    throw ConfigError("eval: k, k_min <= k_max, restarts and max_iter must be positive");
  return c;
}

json to_json(const RunConfig& c) {
  return {{"model", c.model},
          {"arch", to_json(c.arch)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)},
          {"test_samples", c.test_samples},
          {"eval", to_json(c.eval)}};
}

void RunConfig::validate() const {
  (void)model_kind_from_string(model);
  arch.validate();
  train.validate();
  data.validate();
  if (test_samples == 0) throw ConfigError("test_samples must be positive");
  if (arch.audio_feat_dim != data.feat_dim)
    throw ConfigError("arch.audio_feat_dim (" + std::to_string(arch.audio_feat_dim) + ") differs from data.feat_dim (" +
                      std::to_string(data.feat_dim) + ")");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  r.get("model", c.model);
  r.get_with("arch", c.arch, &arch_from_json);
  r.get_with("train", c.train, &train_from_json);
  r.get_with("data", c.data, &generator_from_json);
  r.get("test_samples", c.test_samples);
  r.get_with("eval", c.eval, &eval_from_json);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace pvae
