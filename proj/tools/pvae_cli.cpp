// pvae: data generation, training, evaluation, generation grids and the
// oracle suites as subcommands of one binary.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pvae/config.hpp"
#include "pvae/error.hpp"
#include "pvae/eval.hpp"
#include "pvae/trainer.hpp"
#include "pvae/verify.hpp"

namespace fs = std::filesystem;
using namespace pvae;

namespace {

RunConfig base_config(const std::string& path) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  c.validate();
  return c;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_metadata(const Dataset& d, const fs::path& dir) {
  std::ofstream a(dir / (d.split + "_audio.csv"));
  a << "index,identity,frames,duration,amplitude,pitch_offset,onset\n";
  for (std::size_t i = 0; i < d.audio.size(); ++i) {
    const auto& s = d.audio[i];
    a << i << ',' << s.identity << ',' << s.frames << ',' << s.style.duration << ',' << num(s.style.amplitude) << ','
      << s.style.pitch_offset << ',' << s.style.onset << '\n';
  }
  std::ofstream im(dir / (d.split + "_images.csv"));
  im << "index,identity,tilt,thickness,scale,offset_x,offset_y,intensity\n";
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    const auto& s = d.images[i];
    im << i << ',' << s.identity << ',' << num(s.style.tilt) << ',' << num(s.style.thickness) << ','
       << num(s.style.scale) << ',' << num(s.style.offset_x) << ',' << num(s.style.offset_y) << ','
       << num(s.style.intensity) << '\n';
  }
  if (!a || !im) throw IoError("cannot write metadata CSV into " + dir.string());
}

std::string model_label(const Checkpoint& c) {
  std::string name = to_string(c.model.kind());
  if (c.model.kind() == ModelKind::pvae) {
    if (c.train.weights.alpha_cm == 0) name += "-no-cm";
    if (c.train.weights.alpha_ch == 0) name += "-no-ch";
  }
  return name;
}

std::vector<std::size_t> parse_ids(const std::string& text, const char* flag) {
  std::vector<std::size_t> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      ids.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (ids.empty()) throw ConfigError(std::string(flag) + " needs at least one index");
  return ids;
}

std::string one_line(std::string msg) {
  for (auto& ch : msg)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return msg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partitioned VAE: data, training, evaluation and generation"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, checkpoint, resume, model_kind, level = "fast";
  std::uint64_t seed = 0;
  bool seed_set = false, no_cm = false, no_ch = false;
  std::size_t epochs = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/test datasets");
  gen->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();
  auto* gen_seed = gen->add_option("--seed", seed, "Dataset seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--data", data_dir, "Directory written by gen-data")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--model", model_kind, "pvae | vae-sp | vae-im");
  train->add_flag("--no-cm", no_cm, "Set alpha_cm = 0");
  train->add_flag("--no-ch", no_ch, "Set alpha_ch = 0");
  auto* train_epochs = train->add_option("--epochs", epochs, "Override the epoch count");
  auto* train_seed = train->add_option("--seed", seed, "Override the training seed");

  auto* eval = app.add_subcommand("eval", "Purity, inertia curves and latent exports");
  eval->add_option("--config", config_path, "JSON run config (eval section is used)")->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Directory written by gen-data")->required();
  eval->add_option("--out", out, "Output directory")->required();

  std::string mode = "within", modality = "image", semantic_ids, style_ids;
  auto* generate = app.add_subcommand("generate", "Emit a generation grid as PGM");
  generate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  generate->add_option("--data", data_dir, "Directory written by gen-data")->required();
  generate->add_option("--mode", mode, "within | cross")->check(CLI::IsMember({"within", "cross"}));
  generate->add_option("--modality", modality, "Generated modality: audio | image")
      ->check(CLI::IsMember({"audio", "image"}));
  generate->add_option("--semantic-ids", semantic_ids, "Comma-separated test-split indices")->required();
  generate->add_option("--style-ids", style_ids, "Comma-separated test-split indices")->required();
  generate->add_option("--out", out, "Output directory")->required();

  auto* verify = app.add_subcommand("verify", "Run the oracle suites");
  verify->add_option("--level", level, "fast | full")->check(CLI::IsMember({"fast", "full"}));
  verify->add_option("--scratch", out, "Scratch directory for fixtures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = base_config(config_path);
      seed_set = gen_seed->count() > 0;
      const std::uint64_t data_seed = seed_set ? seed : cfg.train.seed;
      fs::create_directories(out);
      const Dataset tr = generate_dataset(cfg.data, data_seed, "train");
      GeneratorConfig test_cfg = cfg.data;
      test_cfg.samples = cfg.test_samples;
      const Dataset te = generate_dataset(test_cfg, data_seed, "test");
      save_dataset(tr, fs::path(out) / "train.pvd");
      save_dataset(te, fs::path(out) / "test.pvd");
      write_metadata(tr, out);
      write_metadata(te, out);
      auto j = to_json(cfg);
      j["data_seed"] = data_seed;
      write_json(j, fs::path(out) / "config.json");
      std::cout << "wrote " << tr.audio.size() << " train and " << te.audio.size() << " test pairs to " << out << '\n';
    } else if (train->parsed()) {
      RunConfig cfg = base_config(config_path);
      if (!model_kind.empty()) cfg.model = model_kind;
      if (no_cm) cfg.train.weights.alpha_cm = 0;
      if (no_ch) cfg.train.weights.alpha_ch = 0;
      if (train_epochs->count()) cfg.train.epochs = epochs;
      if (train_seed->count()) cfg.train.seed = seed;
      cfg.validate();
      const fs::path data_file = fs::path(data_dir) / "train.pvd";
      require_file(data_file, "training data");
      const Dataset data = load_dataset(data_file);
      if (data.config.feat_dim != cfg.arch.audio_feat_dim)
        throw ConfigError("dataset feat_dim " + std::to_string(data.config.feat_dim) +
                          " differs from arch.audio_feat_dim " + std::to_string(cfg.arch.audio_feat_dim));
      fs::create_directories(out);
      write_json(to_json(cfg), fs::path(out) / "config.json");

      PvaeModel model(cfg.arch, model_kind_from_string(cfg.model), cfg.train.seed);
      TrainState state = TrainState::initial(model, cfg.train);
      if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume, cfg.arch);
        if (ck.model.kind() != model.kind())
          throw ConfigError("checkpoint holds a " + to_string(ck.model.kind()) + " model, config asks for " + cfg.model);
        model = std::move(ck.model);
        state = std::move(ck.state);
      }
      FitOptions opts;
      opts.out_dir = out;
      opts.on_epoch = [&](const EpochLog& log) {
        std::cout << "epoch " << log.epoch << "/" << cfg.train.epochs << "  objective " << num(log.mean.total)
                  << "  elbo " << num(log.mean.elbo()) << '\n'
                  << std::flush;
      };
      fit(model, data, cfg.train, state, opts);
    } else if (eval->parsed()) {
      RunConfig cfg = base_config(config_path);
      require_file(checkpoint, "checkpoint");
      const fs::path data_file = fs::path(data_dir) / "test.pvd";
      require_file(data_file, "test data");
      Checkpoint ck = load_checkpoint(checkpoint);
      const Dataset data = load_dataset(data_file);
      fs::create_directories(out);
      const std::string label = model_label(ck);
      const auto rows = purity_table(ck.model, data, cfg.eval, label);
      write_metrics_csv(rows, fs::path(out) / "metrics.csv");

      std::ofstream inertia(fs::path(out) / "inertia.csv");
      inertia << "model,dataset,modality,latent,k,inertia\n";
      for (Modality m : {Modality::audio, Modality::image}) {
        if ((m == Modality::audio && !ck.model.has_audio()) || (m == Modality::image && !ck.model.has_image()))
          continue;
        const LatentSet set = encode_unimodal(ck.model, data, m);
        for (const auto& name : latent_names(ck.model, m)) {
          const auto curve = inertia_curve(select_latent(set, name), cfg.eval.k_min, cfg.eval.k_max, cfg.eval.seed,
                                           cfg.eval.restarts, cfg.eval.max_iter);
          for (const auto& p : curve)
            inertia << label << ',' << data.split << ',' << to_string(m) << ',' << name << ',' << p.k << ','
                    << num(p.inertia) << '\n';
          export_latents(ck.model, data, m, name,
                         fs::path(out) / ("latents_" + to_string(m) + "_" + name + ".csv"));
        }
      }
      if (!inertia) throw IoError("cannot write inertia.csv");
      auto j = to_json(cfg.eval);
      write_json({{"checkpoint", checkpoint}, {"data", data_dir}, {"model", label}, {"eval", j}},
                 fs::path(out) / "config.json");
      for (const auto& r : rows)
        std::cout << r.modality << ' ' << r.latent << " purity " << num(r.purity) << '\n';
    } else if (generate->parsed()) {
      require_file(checkpoint, "checkpoint");
      const fs::path data_file = fs::path(data_dir) / "test.pvd";
      require_file(data_file, "test data");
      Checkpoint ck = load_checkpoint(checkpoint);
      const Dataset data = load_dataset(data_file);
      const auto sem = parse_ids(semantic_ids, "--semantic-ids");
      const auto sty = parse_ids(style_ids, "--style-ids");
      const Modality target = modality_from_string(modality);
      const Modality source = mode == "within" ? target : (target == Modality::audio ? Modality::image : Modality::audio);
      const std::size_t sem_n = source == Modality::audio ? data.audio.size() : data.images.size();
      const std::size_t sty_n = target == Modality::audio ? data.audio.size() : data.images.size();
      for (auto i : sem)
        if (i >= sem_n) throw RangeError("--semantic-ids: index " + std::to_string(i) + " is out of range");
      for (auto i : sty)
        if (i >= sty_n) throw RangeError("--style-ids: index " + std::to_string(i) + " is out of range");
      const GenerationGrid grid = mode == "within" ? style_transfer_grid(ck.model, data, target, sem, sty)
                                                  : cross_modal_grid(ck.model, data, source, sem, sty);
      fs::create_directories(out);
      const fs::path pgm = fs::path(out) / (mode + "_" + modality + ".pgm");
      render_grid_pgm(grid, pgm);
      write_json({{"checkpoint", checkpoint},
                  {"data", data_dir},
                  {"mode", mode},
                  {"modality", modality},
                  {"semantic_ids", sem},
                  {"style_ids", sty}},
                 fs::path(out) / "config.json");
      std::cout << "wrote " << pgm.string() << '\n';
    } else if (verify->parsed()) {
      const fs::path scratch = out.empty() ? fs::temp_directory_path() / "pvae-verify" : fs::path(out);
      const auto results = run_verify(level == "full" ? VerifyLevel::full : VerifyLevel::fast, scratch);
      bool ok = true;
      for (const auto& r : results) {
        std::cout << format_check(r) << '\n';
        ok = ok && r.passed;
      }
      return ok ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error[" << e.kind() << "]: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
