#include "app.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "odseg/config.hpp"
#include "odseg/manifest.hpp"
#include "odseg/runtime.hpp"
#include "odseg/text.hpp"

#ifndef ODSEG_BUILD_ID
#define ODSEG_BUILD_ID "unknown"
#endif

namespace odseg::cli {

namespace fs = std::filesystem;

const char* build_id() { return ODSEG_BUILD_ID; }

namespace {

struct Context {
  std::string command;
  RunConfig cfg;
  std::ostream& out;
};

const std::string& require(const std::string& value, const char* key, const std::string& command) {
  if (value.empty()) throw ConfigError(std::string(key) + " is required for '" + command + "'");
  return value;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& body) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << body;
  if (!f) throw FormatError("cannot write '" + path + "'");
}

void write_run_log(const Context& ctx, const std::string& dir) {
  write_text(join(dir, "run_" + ctx.command + ".log"), std::string("odseg ") + build_id() + "\ncommand = " +
                                                            ctx.command + "\n\n" + format_config(ctx.cfg));
}

Volume load_input(const std::string& path, const RunConfig& cfg) {
  Volume v = load_volume(path);
  if (!cfg.data.normalize) return v;
  const auto fg = nonzero_mask(v);
  if (fg.empty()) throw ValueError("volume '" + path + "' has no non-zero voxel to normalise over");
  return zscore_normalize(v, fg);
}

void check_channels(const Volume& v, const NetworkConfig& net, const std::string& id) {
  if (v.channels != net.in_channels)
    throw ChannelMismatchError("case " + id + " has " + std::to_string(v.channels) + " channels, network expects " +
                               std::to_string(net.in_channels));
}

std::map<std::string, ManifestEntry> by_id(const std::vector<ManifestEntry>& entries) {
  std::map<std::string, ManifestEntry> out;
  for (const auto& e : entries) out.emplace(e.case_id, e);
  return out;
}

// ---------------------------------------------------------------------------

void gen_data(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const std::string dir = require(cfg.paths.data_dir, "paths.data_dir", ctx.command);
  fs::create_directories(dir);
  std::vector<ManifestEntry> entries;
  const int width = std::max<int>(3, static_cast<int>(std::to_string(cfg.data.count - 1).size()));
  for (Index i = 0; i < cfg.data.count; ++i) {
    PhantomSpec spec = cfg.phantom;
    spec.seed = cfg.data.seed + static_cast<std::uint64_t>(i);
    const auto [vol, mask] = generate_phantom(spec);
    std::ostringstream id;
    id << cfg.data.prefix << "_" << std::setw(width) << std::setfill('0') << i;
    ManifestEntry e{id.str(), join(dir, id.str() + "_vol.odsv"), join(dir, id.str() + "_mask.odsv")};
    save_volume(vol, e.volume);
    save_mask(mask, e.mask);
    entries.push_back(e);
  }
  write_manifest(join(dir, "manifest.csv"), entries);
  write_run_log(ctx, dir);
  ctx.out << "wrote " << entries.size() << " phantom cases to " << dir << "\n";
}

struct TrainingCase {
  std::string id;
  Volume volume;
  LabelMask mask;
};

void train(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const std::string manifest = require(cfg.paths.manifest, "paths.manifest", ctx.command);
  const std::string out = require(cfg.paths.out_dir, "paths.out_dir", ctx.command);

  std::unique_ptr<Network<float>> net;
  std::unique_ptr<Trainer<float>> trainer;
  if (!cfg.paths.resume.empty()) {
    // The checkpoint's network and optimiser settings are authoritative.
    const auto data = read_checkpoint(cfg.paths.resume);
    net = std::make_unique<Network<float>>(network_from_checkpoint<float>(data));
    trainer = std::make_unique<Trainer<float>>(*net, data.trainer, data.seed);
    restore_trainer(*trainer, data);
  } else {
    net = std::make_unique<Network<float>>(Network<float>::build(cfg.network, cfg.train.seed));
    trainer = std::make_unique<Trainer<float>>(*net, cfg.trainer, cfg.train.seed);
  }
  const NetworkConfig& ncfg = net->config();

  std::vector<TrainingCase> cases;
  for (const auto& e : read_manifest(manifest)) {
    if (e.mask.empty()) throw FormatError("manifest case " + e.case_id + " has no mask");
    TrainingCase c{e.case_id, load_input(e.volume, cfg), load_mask(e.mask)};
    check_channels(c.volume, ncfg, c.id);
    require_same_extents(c.volume.extents, c.mask.extents, ("case " + c.id).c_str());
    cases.push_back(std::move(c));
  }
  if (cases.empty()) throw FormatError("manifest '" + manifest + "' lists no cases");

  fs::create_directories(out);
  write_run_log(ctx, out);
  const std::int64_t total = trainer->config().total_steps;
  const std::int64_t target = cfg.train.stop_at > 0 ? std::min(cfg.train.stop_at, total) : total;

  const std::string log_path = join(out, "loss_log.csv");
  const bool fresh = trainer->steps_done() == 0 || !fs::exists(log_path);
  std::ofstream loss_log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!loss_log) throw FormatError("cannot write '" + log_path + "'");
  if (fresh) loss_log << "step,lr,loss,dice_term,ce_term\n";

  const Grid patch = ncfg.patch_size;
  const auto checkpoint_path = [&](std::int64_t step) {
    std::ostringstream name;
    name << "checkpoint_" << std::setw(6) << std::setfill('0') << step << ".odsc";
    return join(out, name.str());
  };
  std::int64_t last_saved = -1;
  while (trainer->steps_done() < target) {
    std::vector<TrainingSample<float>> batch;
    for (Index b = 0; b < cfg.train.batch_size; ++b) {
      auto& rng = trainer->rng();
      const auto& c = cases[static_cast<std::size_t>(rng() % cases.size())];
      auto [pv, pm] = draw_training_patch(c.volume, c.mask, patch, cfg.train.patch_margin, cfg.augment,
                                          cfg.train.foreground_bias, rng);
      batch.push_back({Tensor<float>::from_data({pv.channels, patch[0], patch[1], patch[2]}, std::move(pv.values)),
                       std::move(pm.labels)});
    }
    const StepReport r = trainer->step(batch);
    loss_log << r.step << "," << text::format_double(r.lr) << "," << text::format_double(r.loss) << ","
             << text::format_double(r.dice_term) << "," << text::format_double(r.ce_term) << "\n";
    loss_log.flush();
    const std::int64_t done = trainer->steps_done();
    if (cfg.train.checkpoint_interval > 0 && done % cfg.train.checkpoint_interval == 0) {
      save_checkpoint(checkpoint_path(done), *trainer);
      last_saved = done;
    }
    if (cfg.train.log_interval > 0 && (done % cfg.train.log_interval == 0 || done == target))
      ctx.out << "step " << done << "/" << total << " lr " << text::format_double(r.lr) << " loss "
              << text::format_double(r.loss) << "\n";
  }
  const std::int64_t done = trainer->steps_done();
  if (last_saved != done) save_checkpoint(checkpoint_path(done), *trainer);
  save_checkpoint(join(out, "latest.odsc"), *trainer);
  ctx.out << "trained to step " << done << "; checkpoint " << join(out, "latest.odsc") << "\n";
}

template <typename T>
void predict_with(Context& ctx, const Network<T>& net) {
  const auto& cfg = ctx.cfg;
  const std::string out = cfg.paths.out_dir;
  std::vector<ManifestEntry> written;
  for (const auto& e : read_manifest(require(cfg.paths.manifest, "paths.manifest", ctx.command))) {
    const Volume v = load_input(e.volume, cfg);
    check_channels(v, net.config(), e.case_id);
    Volume probs = sliding_window_predict(net, v);
    probs.spacing = v.spacing;
    LabelMask mask = logits_to_mask(probs);
    mask.spacing = v.spacing;
    ManifestEntry w{e.case_id, join(out, e.case_id + "_prob.odsv"), join(out, e.case_id + "_pred.odsv")};
    save_volume(probs, w.volume);
    save_mask(mask, w.mask);
    written.push_back(w);
    ctx.out << "predicted " << e.case_id << "\n";
  }
  write_manifest(join(out, "predictions.csv"), written);
}

void predict(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto data = read_checkpoint(require(cfg.paths.checkpoint, "paths.checkpoint", ctx.command));
  require(cfg.paths.manifest, "paths.manifest", ctx.command);
  fs::create_directories(require(cfg.paths.out_dir, "paths.out_dir", ctx.command));
  write_run_log(ctx, cfg.paths.out_dir);
  if (data.precision == 8) predict_with(ctx, network_from_checkpoint<double>(data));
  else predict_with(ctx, network_from_checkpoint<float>(data));
}

void postprocess(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto entries = read_manifest(require(cfg.paths.manifest, "paths.manifest", ctx.command));
  const std::string out = require(cfg.paths.out_dir, "paths.out_dir", ctx.command);
  fs::create_directories(out);
  write_run_log(ctx, out);
  std::vector<ManifestEntry> written;
  for (const auto& e : entries) {
    LabelMask m;
    if (cfg.postprocess.thresholds && !e.volume.empty()) {
      const Volume probs = load_volume(e.volume);
      m = threshold_probs(probs, cfg.postprocess);
    } else {
      if (e.mask.empty()) throw FormatError("manifest case " + e.case_id + " has no mask");
      m = load_mask(e.mask);
    }
    const LabelMask refined = postprocess_mask(m, cfg.postprocess);
    ManifestEntry w{e.case_id, e.volume, join(out, e.case_id + "_post.odsv")};
    save_mask(refined, w.mask);
    written.push_back(w);
  }
  write_manifest(join(out, "postprocessed.csv"), written);
  ctx.out << "post-processed " << written.size() << " cases\n";
}

void merge(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto a = read_manifest(require(cfg.paths.manifest, "paths.manifest", ctx.command));
  const auto b = by_id(read_manifest(require(cfg.paths.manifest_b, "paths.manifest_b", ctx.command)));
  const std::string out = require(cfg.paths.out_dir, "paths.out_dir", ctx.command);
  fs::create_directories(out);
  write_run_log(ctx, out);
  std::vector<ManifestEntry> written;
  for (const auto& e : a) {
    const auto it = b.find(e.case_id);
    if (it == b.end()) throw FormatError("case " + e.case_id + " is missing from " + cfg.paths.manifest_b);
    const auto merged = merge_label(load_mask(e.mask), load_mask(it->second.mask),
                                    static_cast<std::uint8_t>(cfg.merge.label), cfg.merge.mode);
    ManifestEntry w{e.case_id, "", join(out, e.case_id + "_merged.odsv")};
    save_mask(merged, w.mask);
    written.push_back(w);
  }
  write_manifest(join(out, "merged.csv"), written);
  ctx.out << "merged label " << cfg.merge.label << " for " << written.size() << " cases\n";
}

void evaluate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto preds = read_manifest(require(cfg.paths.manifest, "paths.manifest", ctx.command));
  const auto refs = by_id(read_manifest(require(cfg.paths.reference, "paths.reference", ctx.command)));
  const std::string out = require(cfg.paths.out_dir, "paths.out_dir", ctx.command);
  std::vector<CasePair> pairs;
  for (const auto& e : preds) {
    const auto it = refs.find(e.case_id);
    if (it == refs.end()) throw FormatError("case " + e.case_id + " is missing from " + cfg.paths.reference);
    pairs.push_back({e.case_id, load_mask(e.mask), load_mask(it->second.mask)});
  }
  const auto report = evaluate_set(pairs, cfg.metrics);
  fs::create_directories(out);
  write_run_log(ctx, out);
  write_text(join(out, "metrics.csv"), report_csv(report));
  write_text(join(out, "metrics.json"), report_json(report));
  ctx.out << "cases " << report.cases.size() << "\n";
  for (Region r : kRegions) {
    const auto& m = report.mean[static_cast<std::size_t>(r)];
    ctx.out << region_name(r) << " dice " << text::format_double(m.dice) << " lesion_dice "
            << text::format_double(m.lesion_dice) << " hd95 " << text::format_double(m.hd95) << "\n";
  }
}

void overlay(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto cases = read_manifest(require(cfg.paths.manifest, "paths.manifest", ctx.command));
  std::map<std::string, ManifestEntry> preds;
  if (!cfg.paths.predictions.empty()) preds = by_id(read_manifest(cfg.paths.predictions));
  const std::string out = require(cfg.paths.out_dir, "paths.out_dir", ctx.command);
  fs::create_directories(out);
  write_run_log(ctx, out);
  for (const auto& e : cases) {
    const Volume v = load_volume(e.volume);
    const Index z = v.extents[0] / 2;
    for (Index c = 0; c < v.channels; ++c)
      write_pnm(render_intensity(v, c, z), join(out, e.case_id + "_ch" + std::to_string(c) + ".pgm"));
    if (!e.mask.empty()) write_pnm(render_labels(load_mask(e.mask), z), join(out, e.case_id + "_gt.ppm"));
    if (const auto it = preds.find(e.case_id); it != preds.end())
      write_pnm(render_labels(load_mask(it->second.mask), z), join(out, e.case_id + "_pred.ppm"));
  }
  ctx.out << "rendered mid-slice images for " << cases.size() << " cases\n";
}

ConfigEntries parse_overrides(const std::vector<std::string>& extras) {
  ConfigEntries out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() < 3) throw ConfigError("unexpected argument '" + tok + "'");
    const std::string body = tok.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("option '" + tok + "' needs a value");
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Brain tumor segmentation with omni-dimensional dynamic convolutions", "odseg"};
  app.set_version_flag("--version", build_id());
  app.require_subcommand(1, 1);
  std::string config_path;
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"gen-data", "write synthetic phantom cases and a manifest"},
      {"train", "train a network on a manifest"},
      {"predict", "sliding-window prediction for every case of a manifest"},
      {"postprocess", "threshold, morphology and small-component removal"},
      {"merge", "replace one label of model A's masks with model B's"},
      {"evaluate", "Dice, lesion-wise Dice and HD95 against a reference manifest"},
      {"overlay", "mid-slice images of each channel, ground truth and prediction"},
  };
  for (const auto& [name, help] : commands) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", config_path, "config file (sections of key = value)");
    sc->allow_extras();
    sc->footer("Any config key can be overridden with --<section>.<key> <value>.");
  }

  std::vector<std::string> argv_store{"odseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  CLI::App* sc = app.get_subcommands().front();
  try {
    Context ctx{sc->get_name(), load_config(config_path, parse_overrides(sc->remaining())), out};
    runtime().threads = ctx.cfg.train.threads;
    runtime().deterministic = ctx.cfg.train.deterministic;
    const std::string& cmd = ctx.command;
    if (cmd == "gen-data") gen_data(ctx);
    else if (cmd == "train") train(ctx);
    else if (cmd == "predict") predict(ctx);
    else if (cmd == "postprocess") postprocess(ctx);
    else if (cmd == "merge") merge(ctx);
    else if (cmd == "evaluate") evaluate(ctx);
    else if (cmd == "overlay") overlay(ctx);
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ChannelMismatchError& e) {
    err << "channel mismatch: " << e.what() << "\n";
    return kChannelMismatch;
  } catch (const FormatError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace odseg::cli
