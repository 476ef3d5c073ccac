// facseq command-line driver.
//
// Exit codes: 0 success, 1 verification or training failure, 2 usage or
// configuration error, 3 I/O or file-format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "facseq/experiment.hpp"
#include "facseq/facseq.hpp"
#include "facseq/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace facseq;

namespace {

enum ExitCode { kOk = 0, kFailed = 1, kUsage = 2, kIo = 3 };

std::uint64_t fnv1a(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// Config layering: defaults < --config file < --set pairs < dedicated flags.
struct ConfigSources {
  std::string file;
  std::vector<std::string> sets;
  KeyValueDoc flags;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value experiment file");
    cmd->add_option("--set", sets, "override one key, as key=value (repeatable)");
  }

  KeyValueDoc resolve() const {
    KeyValueDoc d;
    if (!file.empty()) d.merge(KeyValueDoc::load(file));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      auto trim = [](std::string v) {
        const auto b = v.find_first_not_of(" \t");
        const auto e = v.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
      };
      d.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    d.merge(flags);
    return d;
  }
};

/// Registers an option whose value, when given, is written into `doc` under `key`.
template <class T>
CLI::Option* doc_option(CLI::App* cmd, const std::string& name, KeyValueDoc& doc, const std::string& key,
                        const std::string& help) {
  return cmd->add_option_function<T>(name, [&doc, key](const T& v) { doc.set(key, v); }, help + " [" + key + "]");
}

/// Frame shape comes from the dataset; an explicit conflicting model setting is an error.
void adopt_frame_shape(const KeyValueDoc& doc, ModelConfig& m, const VideoDataset& data) {
  const std::pair<const char*, std::size_t> dims[] = {
      {"model.channels", data.channels}, {"model.height", data.height}, {"model.width", data.width}};
  for (const auto& [key, value] : dims) {
    if (doc.has(key) && doc.get(key, std::size_t{0}) != value) {
      throw ConfigError(std::string(key) + " conflicts with the dataset's frame shape");
    }
  }
  m.channels = data.channels;
  m.height = data.height;
  m.width = data.width;
}

void print_table_row(const std::string& name, const MiTable& t) {
  std::printf("%-10s same_factor_mi %.4f  cross_factor_mi %.4f  elbo %.3f\n", name.c_str(), t.same_factor_mi,
              t.cross_factor_mi, t.elbo);
}

// ---------------------------------------------------------------- generate-data

struct GenerateArgs {
  ConfigSources src;
  std::string out;
  std::string digit_images, digit_labels;
};

int run_generate(const GenerateArgs& a) {
  const KeyValueDoc doc = a.src.resolve();
  const auto cfg = ExperimentConfig::from_doc(doc);
  std::optional<DigitSet> digits;
  if (!a.digit_images.empty() || !a.digit_labels.empty()) {
    if (a.digit_images.empty() || a.digit_labels.empty()) throw ConfigError("--digit-images and --digit-labels go together");
    digits = load_idx_digits(a.digit_images, a.digit_labels);
  }
  const auto ds = make_dataset(cfg.data, cfg.sequences, RngStream(cfg.data_seed), digits ? &digits->glyphs : nullptr);
  const fs::path out(a.out);
  if (out.has_parent_path()) make_dir(out.parent_path());
  save_container(ds, out);
  std::printf("sequences %zu frames %zu channels %zu size %zux%zu fnv1a64 %s\n", ds.size(), ds.seq_len, ds.channels,
              ds.height, ds.width, hex(fnv1a(out)).c_str());
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  ConfigSources src;
  std::string data, out_dir;
  bool entangled = false;
  bool no_wall_time = false;
  bool quiet = false;
};

/// Trains one model into `dir`; returns the trained bundle or nullopt on a non-finite abort.
std::optional<ModelBundle<float>> train_into(const ExperimentConfig& cfg, const VideoDataset& data, const fs::path& dir,
                                             bool no_wall_time, bool quiet) {
  make_dir(dir);
  cfg.model.validate();
  cfg.train.validate();
  write_text(dir / "experiment.txt", cfg.to_doc().str());
  RngStream init(cfg.init_seed);
  auto bundle = build_bundle<float>(cfg.model, init);
  TrainOutputs outputs;
  outputs.log_path = dir / "train_log.csv";
  outputs.checkpoint_dir = dir / "checkpoint";
  outputs.record_wall_time = !no_wall_time;
  if (!quiet) {
    outputs.on_epoch = [](const EpochRecord& r) {
      std::printf("epoch %zu elbo %.3f recon %.3f kl %.3f (%.1fs)\n", r.epoch, r.mean_elbo, r.mean_recon, r.mean_kl,
                  r.wall_seconds);
      std::fflush(stdout);
    };
  }
  auto result = train(std::move(bundle), data, cfg.train, outputs);
  save_checkpoint(result.bundle, dir / "checkpoint");
  if (result.status != TrainStatus::Completed) {
    std::fprintf(stderr, "training aborted: %s\n", result.message.c_str());
    return std::nullopt;
  }
  return std::move(result.bundle);
}

ExperimentConfig training_config(const KeyValueDoc& doc, const VideoDataset& data, bool entangled) {
  auto cfg = ExperimentConfig::from_doc(doc);
  adopt_frame_shape(doc, cfg.model, data);
  if (entangled) cfg.model = entangled_twin(cfg.model);
  return cfg;
}

int run_train(const TrainArgs& a) {
  const KeyValueDoc doc = a.src.resolve();
  const auto data = load_container(a.data);
  const auto cfg = training_config(doc, data, a.entangled);
  const auto bundle = train_into(cfg, data, a.out_dir, a.no_wall_time, a.quiet);
  return bundle ? kOk : kFailed;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  ConfigSources src;
  std::string checkpoint, data, out_dir;
};

MiReport evaluate_into(const ModelBundle<float>& b, const VideoDataset& data, const ExperimentConfig& cfg,
                       const fs::path& dir) {
  make_dir(dir);
  RngStream rng(cfg.eval_seed);
  auto rep = mi_table(b, data, cfg.eval, rng);
  write_text(dir / "mi_table.csv", mi_table_csv({{b.config.entangled ? "entangled" : "factored", rep.table}}));
  write_text(dir / "partition.txt", rep.partition.str() + "\n");
  std::string units = "unit,same_unit_mi\n";
  for (std::size_t i = 0; i < rep.unit_mi.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "u%zu,%.10g\n", i, rep.unit_mi[i]);
    units += buf;
  }
  write_text(dir / "unit_mi.csv", units);
  heatmap(corr_matrix(rep.samples), dir / "correlation.ppm");
  return rep;
}

int run_eval(const EvalArgs& a) {
  const KeyValueDoc doc = a.src.resolve();
  const auto cfg = ExperimentConfig::from_doc(doc);
  const auto b = load_checkpoint<float>(a.checkpoint);
  const auto data = load_container(a.data);
  const auto rep = evaluate_into(b, data, cfg, a.out_dir);
  print_table_row(b.config.entangled ? "entangled" : "factored", rep.table);
  std::printf("partition %s\n", rep.partition.str().c_str());
  return kOk;
}

// ---------------------------------------------------------------- render

struct RenderArgs {
  ConfigSources src;
  std::string checkpoint, data, out_dir;
  std::string factor = "all";
  std::size_t sequences = 4;
};

int run_render(const RenderArgs& a) {
  const KeyValueDoc doc = a.src.resolve();
  const auto cfg = ExperimentConfig::from_doc(doc);
  const auto b = load_checkpoint<float>(a.checkpoint);
  FactorSelection factor = FactorSelection::all();
  if (a.factor == "none") {
    factor = FactorSelection::none();
  } else if (a.factor != "all") {
    std::size_t pos = 0;
    long v = -1;
    try {
      v = std::stol(a.factor, &pos);
    } catch (const std::exception&) {
    }
    if (pos != a.factor.size() || v < 0 || static_cast<std::size_t>(v) >= b.config.k_factors) {
      throw ConfigError("--factor must be 'all', 'none' or an index below " + std::to_string(b.config.k_factors));
    }
    factor = FactorSelection::only(static_cast<std::size_t>(v));
  }
  const auto data = load_container(a.data);
  make_dir(a.out_dir);
  const std::string ext = b.config.channels == 1 ? ".pgm" : ".ppm";
  const std::string tag = factor.kind == FactorSelection::Kind::One ? "factor" + std::to_string(factor.index)
                          : factor.kind == FactorSelection::Kind::None ? "none"
                                                                        : "all";
  RngStream rng(cfg.eval_seed);
  for (std::size_t q = 0; q < std::min(a.sequences, data.size()); ++q) {
    auto seq_rng = rng.split(q);
    const auto grid = independent_generation(b, data.sequences[q], factor, seq_rng);
    char name[64];
    std::snprintf(name, sizeof name, "generation_%04zu_%s", q, tag.c_str());
    write_image(grid, fs::path(a.out_dir) / (name + ext));
    std::printf("%s%s rows %zu cols %zu\n", name, ext.c_str(), grid.rows, grid.cols);
  }
  return kOk;
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
  std::string out_dir;
  std::size_t instances = 100;
  std::size_t mc = 10000;
  std::size_t grad_seeds = 10;
  std::uint64_t seed = 0;
  std::string fault;
};

int run_verify(const VerifyArgs& a) {
  if (!a.fault.empty() && a.fault != "kl-sign") throw ConfigError("unknown fault '" + a.fault + "'");
  make_dir(a.out_dir);
  EstimatorOptions opts;
  if (a.fault == "kl-sign") opts.kl_scale = -1.0;

  struct Instance {
    LinearGaussianModel model;
    std::size_t n = 0;
    BoundReport report;
  };
  std::vector<Instance> inst(a.instances);
  const RngStream root(a.seed);
  parallel_for(a.instances, [&](std::size_t i) {
    auto rng = root.split(i);
    const auto z = static_cast<Eigen::Index>(1 + rng.below(2));
    const auto o = static_cast<Eigen::Index>(1 + rng.below(2));
    inst[i].n = 1 + rng.below(5);
    inst[i].model = random_linear_model(z, o, rng);
    const auto q = random_q(inst[i].model, inst[i].n, rng);
    inst[i].report = verify_bound(inst[i].model, q, inst[i].n, a.mc, rng, opts);
  });

  std::vector<GradCheckResult> grads(a.grad_seeds);
  parallel_for(a.grad_seeds, [&](std::size_t s) {
    grads[s] = elbo_gradient_check(tiny_model_config(), 3, 2, root.split(1'000'000 + s));
  });

  std::string report = "# bound: instance, elbo_mean, elbo_se, exact_loglik, pass\n";
  std::size_t bound_fail = 0, grad_fail = 0;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    report += std::to_string(i) + ", " + inst[i].report.line() + "\n";
    if (!inst[i].report.pass) {
      ++bound_fail;
      std::ostringstream dump;
      dump << "bound FAILED instance " << i << " (n=" << inst[i].n << "): " << inst[i].report.line() << "\n  A=["
           << inst[i].model.A.reshaped().transpose() << "] Q=[" << inst[i].model.Q.transpose() << "] C=["
           << inst[i].model.C.reshaped().transpose() << "] R=[" << inst[i].model.R.transpose() << "]\n";
      std::fputs(dump.str().c_str(), stderr);
    }
  }
  report += "# gradient: seed, parameters, max_rel_error, worst_tensor, pass\n";
  for (std::size_t s = 0; s < grads.size(); ++s) {
    const bool ok = grads[s].max_rel_error < 1e-4;
    grad_fail += !ok;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu, %zu, %.3e, %s, %s\n", s, grads[s].parameters, grads[s].max_rel_error,
                  grads[s].worst_tensor.c_str(), ok ? "pass" : "fail");
    report += buf;
    if (!ok) std::fprintf(stderr, "gradient FAILED seed %zu: %s", s, buf);
  }
  write_text(fs::path(a.out_dir) / "verify_report.txt", report);
  std::printf("bound %zu/%zu pass, gradient %zu/%zu pass\n", inst.size() - bound_fail, inst.size(),
              grads.size() - grad_fail, grads.size());
  return bound_fail + grad_fail == 0 ? kOk : kFailed;
}

// ---------------------------------------------------------------- compare

struct CompareArgs {
  ConfigSources src;
  std::string data, out_dir;
  bool no_wall_time = false;
  bool quiet = false;
};

int run_compare(const CompareArgs& a) {
  const KeyValueDoc doc = a.src.resolve();
  const auto data = load_container(a.data);
  std::vector<std::pair<std::string, MiTable>> rows;
  for (const bool ent : {false, true}) {
    const std::string name = ent ? "entangled" : "factored";
    const auto cfg = training_config(doc, data, ent);
    const auto b = train_into(cfg, data, fs::path(a.out_dir) / name, a.no_wall_time, a.quiet);
    if (!b) return kFailed;
    const auto rep = evaluate_into(*b, data, cfg, fs::path(a.out_dir) / name);
    rows.emplace_back(name, rep.table);
  }
  write_text(fs::path(a.out_dir) / "compare.csv", mi_table_csv(rows));
  for (const auto& [name, t] : rows) print_table_row(name, t);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factored sequential VAE: data, training, evaluation and verification"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "write a DVIP sprite-video dataset");
  gen.src.attach(g);
  g->add_option("--out", gen.out, "output container path")->required();
  doc_option<std::uint64_t>(g, "--seed", gen.src.flags, "data.seed", "generator seed");
  doc_option<std::size_t>(g, "--sequences", gen.src.flags, "data.sequences", "number of sequences");
  doc_option<std::size_t>(g, "--frames", gen.src.flags, "data.seq_len", "frames per sequence");
  auto* size_opt = g->add_option_function<std::size_t>(
      "--size",
      [&gen](const std::size_t& v) {
        gen.src.flags.set("data.height", v);
        gen.src.flags.set("data.width", v);
      },
      "square frame size in pixels [data.height, data.width]");
  (void)size_opt;
  doc_option<std::size_t>(g, "--sprite-size", gen.src.flags, "data.sprite_size", "sprite edge in pixels");
  g->add_option("--digit-images", gen.digit_images, "IDX image file to use as sprite glyphs");
  g->add_option("--digit-labels", gen.digit_labels, "IDX label file matching --digit-images");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on a DVIP dataset");
  tr.src.attach(t);
  t->add_option("--data", tr.data, "DVIP dataset")->required();
  t->add_option("--out-dir", tr.out_dir, "output directory")->required();
  t->add_flag("--entangled", tr.entangled, "single-factor baseline with the same total latent dimension");
  t->add_flag("--no-wall-time", tr.no_wall_time, "log 0 for wall_seconds so reruns are byte-identical");
  t->add_flag("--quiet", tr.quiet, "no per-epoch progress on stdout");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "train and evaluate factored and entangled twins");
  cmp.src.attach(c);
  c->add_option("--data", cmp.data, "DVIP dataset")->required();
  c->add_option("--out-dir", cmp.out_dir, "output directory")->required();
  c->add_flag("--no-wall-time", cmp.no_wall_time, "log 0 for wall_seconds so reruns are byte-identical");
  c->add_flag("--quiet", cmp.quiet, "no per-epoch progress on stdout");

  for (auto& [cmd, src] : {std::pair{t, &tr.src}, std::pair{c, &cmp.src}}) {
    auto& flags = src->flags;
    doc_option<std::size_t>(cmd, "--epochs", flags, "train.epochs", "training epochs");
    doc_option<double>(cmd, "--lr", flags, "train.learning_rate", "ADAM learning rate");
    doc_option<std::size_t>(cmd, "--batch-size", flags, "train.batch_size", "minibatch size");
    doc_option<std::size_t>(cmd, "--factors", flags, "model.k_factors", "latent factors");
    doc_option<std::size_t>(cmd, "--factor-dim", flags, "model.factor_dim", "units per factor");
    doc_option<double>(cmd, "--obs-variance", flags, "model.obs_variance", "fixed pixel variance");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&flags](const std::uint64_t& v) {
          flags.set("train.seed", v);
          flags.set("model.init_seed", v);
        },
        "training and initialization seed [train.seed, model.init_seed]");
  }

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "MI table and lag-one correlation of a checkpoint");
  ev.src.attach(e);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
  e->add_option("--data", ev.data, "DVIP dataset")->required();
  e->add_option("--out-dir", ev.out_dir, "output directory")->required();
  doc_option<std::uint64_t>(e, "--seed", ev.src.flags, "eval.seed", "sampling seed");
  doc_option<std::size_t>(e, "--mi-pairs", ev.src.flags, "eval.mi_pairs", "latent pairs used by the estimator");
  doc_option<int>(e, "--ksg-k", ev.src.flags, "eval.ksg_k", "nearest-neighbour count");
  doc_option<std::size_t>(e, "--trials", ev.src.flags, "eval.partition_trials", "random partitions (entangled)");

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "independent-generation image grids");
  rd.src.attach(r);
  r->add_option("--checkpoint", rd.checkpoint, "checkpoint directory")->required();
  r->add_option("--data", rd.data, "DVIP dataset")->required();
  r->add_option("--out-dir", rd.out_dir, "output directory")->required();
  r->add_option("--factor", rd.factor, "factor index to vary, 'all', or 'none' (everything frozen)")->capture_default_str();
  r->add_option("--sequences", rd.sequences, "number of leading sequences to render")->capture_default_str();
  doc_option<std::uint64_t>(r, "--seed", rd.src.flags, "eval.seed", "sampling seed");

  VerifyArgs vf;
  auto* v = app.add_subcommand("verify", "bound and gradient certificates");
  v->add_option("--out-dir", vf.out_dir, "output directory")->required();
  v->add_option("--instances", vf.instances, "random linear-Gaussian instances")->capture_default_str();
  v->add_option("--mc", vf.mc, "Monte-Carlo samples per instance")->capture_default_str();
  v->add_option("--grad-seeds", vf.grad_seeds, "finite-difference gradient checks")->capture_default_str();
  v->add_option("--seed", vf.seed, "seed")->capture_default_str();
  v->add_option("--inject-fault", vf.fault, "corrupt the estimator on purpose (kl-sign)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*c) return run_compare(cmp);
    if (*e) return run_eval(ev);
    if (*r) return run_render(rd);
    if (*v) return run_verify(vf);
  } catch (const IoError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kIo;
  } catch (const FormatError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kIo;
  } catch (const NumericalError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kFailed;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  }
  return kUsage;
}
