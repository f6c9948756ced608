// pointgmm command-line interface.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pointgmm/pointgmm.hpp"

namespace fs = std::filesystem;
using namespace pointgmm;
using io::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::vector<int> parse_branching(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : split(s, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(tok, &used);
      if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--branching must be a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("--branching is empty");
  return out;
}

/// "low-high" or a single value; both in (0, 1].
std::pair<double, double> parse_coverage(const std::string& s) {
  const auto parts = split(s, '-');
  try {
    if (parts.size() == 1) {
      const double v = std::stod(parts[0]);
      return {v, v};
    }
    if (parts.size() == 2) return {std::stod(parts[0]), std::stod(parts[1])};
  } catch (const std::exception&) {
  }
  throw UsageError("--coverage must look like '0.3-0.8', got '" + s + "'");
}

void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(flag) + ": no such file '" + path + "'");
}

void require_writable(const std::string& path, const char* flag) {
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent))
    throw UsageError(std::string(flag) + ": directory '" + parent.string() + "' does not exist");
  if (fs::is_directory(path)) throw UsageError(std::string(flag) + ": '" + path + "' is a directory");
}

// ---- corpora -------------------------------------------------------------------

struct Corpus {
  std::vector<ProceduralShape> shapes;  // procedural source
  std::vector<PointCloud> clouds;       // directory source
  bool procedural() const { return !shapes.empty(); }
};

/// `procedural:fam1,fam2:count[:seed]` or a directory of .xyz/.ply files.
Corpus load_corpus(const std::string& arg) {
  Corpus c;
  if (arg.rfind("procedural:", 0) == 0) {
    const auto parts = split(arg, ':');
    if (parts.size() < 3 || parts.size() > 4)
      throw UsageError("--corpus must be 'procedural:families:count[:seed]' or a directory");
    std::vector<ShapeFamily> fams;
    for (const auto& f : split(parts[1], ',')) fams.push_back(parse_family(f));
    std::size_t count = 0;
    std::uint64_t seed = 0;
    try {
      count = std::stoul(parts[2]);
      if (parts.size() == 4) seed = std::stoull(parts[3]);
    } catch (const std::exception&) {
      throw UsageError("--corpus: invalid count or seed in '" + arg + "'");
    }
    if (count == 0) throw UsageError("--corpus: count must be >= 1");
    c.shapes = procedural_corpus(fams, count, seed);
    return c;
  }
  if (!fs::is_directory(arg)) throw UsageError("--corpus: '" + arg + "' is neither procedural:... nor a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(arg)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".xyz" || io::is_ply(e.path()))) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("--corpus: no .xyz or .ply files in '" + arg + "'");
  for (const auto& f : files) c.clouds.push_back(io::read_cloud(f));
  return c;
}

std::vector<PointCloud> corpus_clouds(const Corpus& c, const TrainConfig& cfg) {
  if (c.procedural()) return sample_corpus(c.shapes, cfg.points_per_cloud, cfg.seed);
  std::vector<PointCloud> out;
  for (const auto& cloud : c.clouds) out.push_back(cloud.translated(-cloud.centroid()));
  return out;
}

// ---- configs -------------------------------------------------------------------

struct RunConfig {
  TrainConfig train;
  json model = json::object();
};

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  const json j = io::read_json(path);
  if (!j.is_object()) throw ParseError(path + ": config must be a JSON object");
  try {
    rc.train = train_config_from_json(j);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (j.contains("model")) rc.model = j.at("model");
  rc.train.validate();
  return rc;
}

template <class T>
T model_value(const json& model, const char* key, T fallback) {
  try {
    return model.contains(key) ? model.at(key).get<T>() : fallback;
  } catch (const json::exception& e) {
    throw ParseError(std::string("config model.") + key + ": " + e.what());
  }
}

VaeModel make_vae(const json& model, std::uint64_t seed, std::optional<bool> hierarchical = std::nullopt,
                  std::optional<bool> attention = std::nullopt) {
  VaeModel base = VaeModel::desk({4, 4}, 0);
  DecoderConfig dec = base.decoder;
  dec.branching = model_value(model, "branching", dec.branching);
  dec.latent_dim = model_value(model, "latent_dim", dec.latent_dim);
  dec.feature_dim = model_value(model, "feature_dim", dec.feature_dim);
  dec.d_k = model_value(model, "d_k", dec.d_k);
  dec.use_attention = attention.value_or(model_value(model, "use_attention", dec.use_attention));
  dec.hierarchical = hierarchical.value_or(model_value(model, "hierarchical", dec.hierarchical));
  dec.validate();
  PointNetConfig enc = base.encoder;
  enc.widths = model_value(model, "encoder_widths", enc.widths);
  return VaeModel::create(enc, dec, seed);
}

RegModel make_reg(const json& model, std::uint64_t seed) {
  RegModel base = RegModel::desk(0);
  DecoderConfig dec = base.decoder;
  dec.branching = model_value(model, "branching", dec.branching);
  dec.feature_dim = model_value(model, "feature_dim", dec.feature_dim);
  dec.d_k = model_value(model, "d_k", dec.d_k);
  dec.use_attention = model_value(model, "use_attention", dec.use_attention);
  dec.hierarchical = model_value(model, "hierarchical", dec.hierarchical);
  RegEncoderConfig enc = base.encoder;
  enc.widths = model_value(model, "encoder_widths", enc.widths);
  enc.transform_dim = model_value(model, "transform_dim", enc.transform_dim);
  enc.shape_dim = model_value(model, "shape_dim", enc.shape_dim);
  const auto hidden = model_value(model, "transform_hidden", base.transform_hidden);
  dec.latent_dim = enc.transform_dim + enc.shape_dim;
  dec.validate();
  return RegModel::create(enc, dec, hidden, seed);
}

void log_epoch(const EpochRecord& r, int epochs) {
  if (r.epoch % 10 == 0 || r.epoch + 1 == epochs)
    std::fprintf(stderr, "epoch %d loss %.6g\n", r.epoch, r.loss_total);
}

// ---- subcommands -----------------------------------------------------------------

struct FitEmArgs {
  std::string input, branching = "8,4,4,4", output;
  int iters = 50;
  double tol = 1e-6;
  std::uint64_t seed = 0;
};

void run_fit_em(const FitEmArgs& a) {
  require_file(a.input, "--input");
  require_writable(a.output, "--output");
  EmConfig cfg;
  cfg.branching = parse_branching(a.branching);
  cfg.max_iters = a.iters;
  cfg.tol = a.tol;
  cfg.seed = a.seed;
  cfg.validate();
  const PointCloud cloud = io::read_cloud(a.input);
  const HgmmTree tree = fit_tree(cloud, cfg);
  io::write_tree(a.output, tree);
  for (int l = 1; l <= tree.depth(); ++l)
    std::cout << "depth " << l << " log-likelihood " << io::format_double(depth_log_likelihood(tree, cloud, l))
              << "\n";
}

struct TrainArgs {
  std::string corpus, config, checkpoint_out, metrics_csv;
};

void run_train_vae(const TrainArgs& a) {
  if (!a.config.empty()) require_file(a.config, "--config");
  require_writable(a.checkpoint_out, "--checkpoint-out");
  if (!a.metrics_csv.empty()) require_writable(a.metrics_csv, "--metrics-csv");
  const RunConfig rc = load_config(a.config);
  const Corpus corpus = load_corpus(a.corpus);
  VaeModel m = make_vae(rc.model, rc.train.seed);
  const auto clouds = corpus_clouds(corpus, rc.train);
  const auto history = train_vae(m, clouds, rc.train, [&](const EpochRecord& r) { log_epoch(r, rc.train.epochs); });
  io::write_json(a.checkpoint_out, m.to_json());
  if (!a.metrics_csv.empty()) io::detail::write_file(a.metrics_csv, format_csv(history, false));
}

struct SampleArgs {
  std::string model, output;
  std::size_t count = 2048;
  std::uint64_t seed = 0;
};

void run_sample(const SampleArgs& a) {
  require_file(a.model, "--model");
  require_writable(a.output, "--output");
  if (a.count == 0) throw UsageError("--count must be >= 1");
  const json j = io::read_json(a.model);
  HgmmTree tree({1});
  if (j.contains("kind") && j.at("kind") == "vae") {
    const VaeModel m = VaeModel::from_json(j);
    tree = decode_tree(m.params, standard_normal(1, m.decoder.latent_dim, derive_seed(a.seed, 0x2)), m.decoder);
  } else if (j.contains("levels")) {
    tree = io::tree_from_json(j);
  } else {
    throw ParseError(a.model + ": expected an hGMM tree or a VAE checkpoint");
  }
  io::write_cloud(a.output, sample_points(tree, a.count, a.seed));
}

struct InterpolateArgs {
  std::string model, cloud_a, cloud_b, outdir;
  int steps = 5;
  std::size_t count = 2048;
  std::uint64_t seed = 0;
};

void run_interpolate(const InterpolateArgs& a) {
  require_file(a.model, "--model");
  require_file(a.cloud_a, "--cloud-a");
  require_file(a.cloud_b, "--cloud-b");
  if (!fs::is_directory(a.outdir)) throw UsageError("--outdir: '" + a.outdir + "' is not a directory");
  if (a.steps < 2) throw UsageError("--steps must be >= 2");
  if (a.count == 0) throw UsageError("--count must be >= 1");
  const VaeModel m = VaeModel::from_json(io::read_json(a.model));
  const PointCloud ca = io::read_cloud(a.cloud_a), cb = io::read_cloud(a.cloud_b);
  const ad::Tensor za = encode_mean(m, ca.translated(-ca.centroid()));
  const ad::Tensor zb = encode_mean(m, cb.translated(-cb.centroid()));
  std::vector<PointCloud> frames;
  for (int s = 0; s < a.steps; ++s) {
    const double t = static_cast<double>(s) / static_cast<double>(a.steps - 1);
    ad::Tensor z(1, za.cols());
    for (std::size_t k = 0; k < za.cols(); ++k) z[k] = (1.0 - t) * za[k] + t * zb[k];
    frames.push_back(sample_points(decode_tree(m.params, z, m.decoder), a.count, a.seed));
  }
  for (int s = 0; s < a.steps; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "interp_%03d.xyz", s);
    io::write_cloud(fs::path(a.outdir) / name, frames[static_cast<std::size_t>(s)]);
  }
}

struct TrainRegArgs {
  std::string corpus, config, coverage, checkpoint_out, metrics_csv;
  std::optional<double> max_rotation_deg;
};

void apply_overrides(TrainConfig& cfg, const std::optional<double>& max_rotation_deg, const std::string& coverage) {
  if (max_rotation_deg) {
    if (!(*max_rotation_deg >= 0.0 && *max_rotation_deg <= 180.0))
      throw UsageError("--max-rotation must be in [0, 180] degrees");
    cfg.max_rotation = *max_rotation_deg * std::numbers::pi / 180.0;
  }
  if (!coverage.empty()) std::tie(cfg.coverage_low, cfg.coverage_high) = parse_coverage(coverage);
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
}

void run_train_reg(const TrainRegArgs& a) {
  if (!a.config.empty()) require_file(a.config, "--config");
  require_writable(a.checkpoint_out, "--checkpoint-out");
  if (!a.metrics_csv.empty()) require_writable(a.metrics_csv, "--metrics-csv");
  RunConfig rc = load_config(a.config);
  apply_overrides(rc.train, a.max_rotation_deg, a.coverage);
  const Corpus corpus = load_corpus(a.corpus);
  RegModel m = make_reg(rc.model, rc.train.seed);
  const auto cb = [&](const EpochRecord& r) { log_epoch(r, rc.train.epochs); };
  const auto history = corpus.procedural() ? train_registration(m, corpus.shapes, rc.train, cb)
                                           : train_registration(m, corpus.clouds, rc.train, cb);
  io::write_json(a.checkpoint_out, m.to_json());
  if (!a.metrics_csv.empty()) io::detail::write_file(a.metrics_csv, format_csv(history, true));
}

struct RegisterArgs {
  std::string model, source, target, json_out;
};

void run_register(const RegisterArgs& a) {
  require_file(a.model, "--model");
  require_file(a.source, "--source");
  require_file(a.target, "--target");
  require_writable(a.json_out, "--json-out");
  const RegModel m = RegModel::from_json(io::read_json(a.model));
  const PointCloud src = io::read_cloud(a.source), tgt = io::read_cloud(a.target);
  const RigidTransform t = register_clouds(src, tgt, m);
  json out = {{"phi", t.phi}, {"v", {t.v.x(), t.v.y(), t.v.z()}}};
  // Index-paired MSE is only defined for clouds with matching point counts.
  out["mse"] = src.size() == tgt.size() ? json(registration_mse(src, tgt, t)) : json(nullptr);
  io::write_json(a.json_out, out);
}

struct EvalRegArgs {
  std::string model, corpus = "procedural:chair:50:1000", coverage, csv_out, config;
  std::size_t pairs = 200;
  std::optional<double> max_rotation_deg;
  std::uint64_t seed = 12345;
};

void run_eval_reg(const EvalRegArgs& a) {
  require_file(a.model, "--model");
  if (!a.config.empty()) require_file(a.config, "--config");
  if (!a.csv_out.empty()) require_writable(a.csv_out, "--csv-out");
  if (a.pairs == 0) throw UsageError("--pairs must be >= 1");
  RunConfig rc = load_config(a.config);
  apply_overrides(rc.train, a.max_rotation_deg, a.coverage);
  const Corpus corpus = load_corpus(a.corpus);
  if (!corpus.procedural()) throw UsageError("eval-reg needs a procedural corpus (surfaces are resampled per pair)");
  const RegModel m = RegModel::from_json(io::read_json(a.model));
  const RegistrationEval ev = evaluate_registration(m, corpus.shapes, rc.train, a.pairs, a.seed);
  std::string csv = "pair,mse,identity_mse,random_mse,angle_error,true_angle\n";
  for (std::size_t i = 0; i < ev.mse.size(); ++i)
    csv += std::to_string(i) + ',' + io::format_double(ev.mse[i]) + ',' + io::format_double(ev.identity_mse[i]) +
           ',' + io::format_double(ev.random_mse[i]) + ',' + io::format_double(ev.angle_error[i]) + ',' +
           io::format_double(ev.true_angle[i]) + '\n';
  using E = RegistrationEval;
  csv += "mean," + io::format_double(E::mean(ev.mse)) + ',' + io::format_double(E::mean(ev.identity_mse)) + ',' +
         io::format_double(E::mean(ev.random_mse)) + ',' + io::format_double(E::mean(ev.angle_error)) + ',' +
         io::format_double(E::mean(ev.true_angle)) + '\n';
  if (!a.csv_out.empty()) io::detail::write_file(a.csv_out, csv);
  std::cout << "mean_mse " << io::format_double(E::mean(ev.mse)) << "\nidentity_mse "
            << io::format_double(E::mean(ev.identity_mse)) << "\nrandom_mse "
            << io::format_double(E::mean(ev.random_mse)) << "\n";
}

struct AblateArgs {
  std::string mode = "hgmm", attention = "on", corpus = "procedural:table,chair,airplane:32", config, csv_out;
  std::optional<std::uint64_t> seed;
};

void run_ablate(const AblateArgs& a) {
  if (!a.config.empty()) require_file(a.config, "--config");
  if (!a.csv_out.empty()) require_writable(a.csv_out, "--csv-out");
  RunConfig rc = load_config(a.config);
  if (a.seed) rc.train.seed = *a.seed;
  const Corpus corpus = load_corpus(a.corpus);
  VaeModel m = make_vae(rc.model, rc.train.seed, a.mode == "hgmm", a.attention == "on");
  const auto clouds = corpus_clouds(corpus, rc.train);
  const auto history = train_vae(m, clouds, rc.train, [&](const EpochRecord& r) { log_epoch(r, rc.train.epochs); });
  if (!a.csv_out.empty()) io::detail::write_file(a.csv_out, format_csv(history, false));
  std::cout << "leaf_log_likelihood " << io::format_double(mean_leaf_log_likelihood(m, clouds)) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical GMM point cloud generation and registration"};
  app.require_subcommand(1);

  FitEmArgs fit;
  auto* c_fit = app.add_subcommand("fit-em", "Fit an hGMM tree to one cloud with hierarchical hard EM");
  c_fit->add_option("--input", fit.input, "Point cloud (.xyz or .ply)")->required();
  c_fit->add_option("--branching", fit.branching, "Comma-separated branching factors")->capture_default_str();
  c_fit->add_option("--iters", fit.iters, "Maximum EM iterations per node")->capture_default_str();
  c_fit->add_option("--tol", fit.tol, "Objective tolerance")->capture_default_str();
  c_fit->add_option("--seed", fit.seed, "RNG seed")->capture_default_str();
  c_fit->add_option("--output", fit.output, "Tree JSON output")->required();

  TrainArgs tv;
  auto* c_tv = app.add_subcommand("train-vae", "Train the hGMM variational autoencoder");
  c_tv->add_option("--corpus", tv.corpus, "procedural:families:count[:seed] or a directory of clouds")->required();
  c_tv->add_option("--config", tv.config, "Training config JSON");
  c_tv->add_option("--checkpoint-out", tv.checkpoint_out, "Checkpoint JSON output")->required();
  c_tv->add_option("--metrics-csv", tv.metrics_csv, "Per-epoch loss trace");

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample", "Sample points from a tree or from a random VAE latent");
  c_sa->add_option("--model", sa.model, "Tree JSON or VAE checkpoint")->required();
  c_sa->add_option("--count", sa.count, "Number of points")->capture_default_str();
  c_sa->add_option("--seed", sa.seed, "RNG seed")->capture_default_str();
  c_sa->add_option("--output", sa.output, "Point cloud output")->required();

  InterpolateArgs ia;
  auto* c_ia = app.add_subcommand("interpolate", "Decode linear interpolations between two encodings");
  c_ia->add_option("--model", ia.model, "VAE checkpoint")->required();
  c_ia->add_option("--cloud-a", ia.cloud_a, "First cloud")->required();
  c_ia->add_option("--cloud-b", ia.cloud_b, "Second cloud")->required();
  c_ia->add_option("--steps", ia.steps, "Number of frames including both ends")->capture_default_str();
  c_ia->add_option("--count", ia.count, "Points per frame")->capture_default_str();
  c_ia->add_option("--seed", ia.seed, "Sampling seed")->capture_default_str();
  c_ia->add_option("--outdir", ia.outdir, "Existing output directory")->required();

  TrainRegArgs tr;
  auto* c_tr = app.add_subcommand("train-reg", "Train the registration model");
  c_tr->add_option("--corpus", tr.corpus, "procedural:families:count[:seed] or a directory of clouds")->required();
  c_tr->add_option("--config", tr.config, "Training config JSON");
  c_tr->add_option("--max-rotation", tr.max_rotation_deg, "Maximum rotation in degrees");
  c_tr->add_option("--coverage", tr.coverage, "Partial-view coverage range, e.g. 0.3-0.8");
  c_tr->add_option("--checkpoint-out", tr.checkpoint_out, "Checkpoint JSON output")->required();
  c_tr->add_option("--metrics-csv", tr.metrics_csv, "Per-epoch loss trace");

  RegisterArgs ra;
  auto* c_ra = app.add_subcommand("register", "Estimate the rigid transform mapping source onto target");
  c_ra->add_option("--model", ra.model, "Registration checkpoint")->required();
  c_ra->add_option("--source", ra.source, "Source cloud")->required();
  c_ra->add_option("--target", ra.target, "Target cloud")->required();
  c_ra->add_option("--json-out", ra.json_out, "Result JSON {phi, v, mse}")->required();

  EvalRegArgs er;
  auto* c_er = app.add_subcommand("eval-reg", "Evaluate registration on synthesized held-out pairs");
  c_er->add_option("--model", er.model, "Registration checkpoint")->required();
  c_er->add_option("--pairs", er.pairs, "Number of test pairs")->capture_default_str();
  c_er->add_option("--max-rotation", er.max_rotation_deg, "Maximum rotation in degrees");
  c_er->add_option("--coverage", er.coverage, "Partial-view coverage range, e.g. 0.5-0.8");
  c_er->add_option("--corpus", er.corpus, "Held-out procedural corpus")->capture_default_str();
  c_er->add_option("--config", er.config, "Config JSON (points_per_cloud, noise_sigma, ...)");
  c_er->add_option("--seed", er.seed, "Pair synthesis seed")->capture_default_str();
  c_er->add_option("--csv-out", er.csv_out, "Per-pair CSV with a trailing mean row");

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "Train a hierarchical or vanilla decoder and report leaf likelihood");
  c_ab->add_option("--mode", ab.mode, "hgmm or vanilla")->check(CLI::IsMember({"hgmm", "vanilla"}))->capture_default_str();
  c_ab->add_option("--attention", ab.attention, "on or off")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  c_ab->add_option("--corpus", ab.corpus, "Training corpus")->capture_default_str();
  c_ab->add_option("--config", ab.config, "Training config JSON");
  c_ab->add_option("--seed", ab.seed, "Overrides the config seed");
  c_ab->add_option("--csv-out", ab.csv_out, "Per-epoch loss trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (c_fit->parsed()) run_fit_em(fit);
    else if (c_tv->parsed()) run_train_vae(tv);
    else if (c_sa->parsed()) run_sample(sa);
    else if (c_ia->parsed()) run_interpolate(ia);
    else if (c_tr->parsed()) run_train_reg(tr);
    else if (c_ra->parsed()) run_register(ra);
    else if (c_er->parsed()) run_eval_reg(er);
    else if (c_ab->parsed()) run_ablate(ab);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitData;
  } catch (const InvalidModelError& e) {
    std::cerr << "invalid model: " << e.what() << "\n";
    return kExitData;
  } catch (const DomainError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
