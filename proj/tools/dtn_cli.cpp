// dtn_cli: degeneracy checks, gradient checks, toy training, analysis and
// complexity reports. Exit 0 when every check passes, 1 on the first failed
// property, 2 on usage or configuration errors.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dtn/dtn.hpp"

using namespace dtn;
namespace fs = std::filesystem;

namespace {

using Span = std::span<const PositionalAttention<double>>;

constexpr const char* kUsage =
    "usage: dtn_cli <command> [options]\n"
    "commands:\n"
    "  equiv       degeneracy suite (DTN vs LN, DTN vs IN, banded vs IN)\n"
    "  gradcheck   finite-difference gradient certification\n"
    "  train       toy training, writes a checkpoint and the lambda trace\n"
    "  analyze     attention distance, variation coefficient, token magnitudes\n"
    "  complexity  FLOP and parameter accounting for vit-t / vit-s / vit-b\n"
    "  export-p    positional attention heatmaps, at init or from a checkpoint\n"
    "run `dtn_cli <command> --help` for the options of one command.\n";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a checked property does not hold.
struct PropertyFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
};

fs::path output_dir(const Common& c) {
  fs::path dir = "dtn_out";
  if (const char* env = std::getenv("DTN_OUTPUT_DIR"); env && *env) dir = env;
  if (!c.out.empty()) dir = c.out;
  fs::create_directories(dir);
  return dir;
}

std::string seeded(const std::string& stem, std::uint64_t seed, const std::string& ext) {
  return stem + "_seed" + std::to_string(seed) + ext;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

void add_common(CLI::App* sub, Common& c, bool config) {
  sub->add_option("--seed", c.seed, "random seed, recorded in every output");
  sub->add_option("--out", c.out, "output directory (overrides DTN_OUTPUT_DIR)");
  if (config) sub->add_option("--config", c.config, "JSON config; command-line flags win");
}

/// Fills options that were not given on the command line from a JSON
/// object whose keys are option names with '_' for '-'. Unknown keys fail.
void apply_config(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  const json j = parse_json_text(read_text_file(path), path);
  if (!j.is_object()) throw UsageError(path + ": config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (name == "config" || name == "out" || name == "help") {
      throw UsageError(path + ": key \"" + key + "\" is not allowed in a config file");
    }
    CLI::Option* opt = sub->get_option_no_throw("--" + name);
    if (!opt) throw UsageError(path + ": unknown key \"" + key + "\"");
    if (opt->count() > 0) continue;
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_number() || value.is_boolean()) {
      text = value.dump();
    } else {
      throw UsageError(path + ": key \"" + key + "\" must be a string, number or boolean");
    }
    opt->add_result(text);
    opt->run_callback();
  }
}

// ---------------------------------------------------------------------------
// equiv

struct EquivArgs {
  Common common;
  double tol = 1e-9;
  std::size_t trials = 20;
};

int run_equiv(const EquivArgs& a) {
  double d_ln = 0, d_in = 0, d_band = 0;
  for (std::size_t trial = 0; trial < a.trials; ++trial) {
    std::seed_seq seq{a.common.seed, static_cast<std::uint64_t>(trial)};
    std::mt19937_64 rng(seq);
    const std::size_t heads = std::array<std::size_t, 3>{1, 2, 4}[rng() % 3];
    const std::size_t c = heads * (1 + rng() % 8);
    const std::size_t rows = 1 + rng() % 8, cols = 2 + rng() % 7, batch = 1 + rng() % 4;
    const GridGeometry g{rows, cols, heads, 1};
    std::normal_distribution<double> n(0.0, 1.0 + static_cast<double>(trial % 4));
    Tensor x({batch, g.tokens(), c});
    for (auto& v : x.storage()) v = n(rng);
    auto p = DtnParams::init(c, heads);
    for (auto& v : p.affine.gamma) v = n(rng);
    for (auto& v : p.affine.beta) v = n(rng);
    const auto attn = build_all_positional_attention(build_rel_pos(g), p);
    const Tensor ln = layer_norm(x, p.affine);
    const Tensor in = instance_norm(x, p.affine);
    const auto one = MixingWeights<double>::constant(heads, 1.0);
    const auto zero = MixingWeights<double>::constant(heads, 0.0);
    d_ln = std::max(d_ln, max_abs_diff(dtn_forward_with(x, one, Span(attn), p.affine, g), ln));
    const auto uniform = as_positional_attention<double>({uniform_matrix(g.tokens())}, heads);
    d_in = std::max(d_in, max_abs_diff(dtn_forward_with(x, zero, Span(uniform), p.affine, g), in));
    const auto band =
        as_positional_attention<double>({banded_matrix(g.tokens(), 2 * g.tokens() - 1)}, heads);
    d_band = std::max(d_band, max_abs_diff(dtn_forward_with(x, zero, Span(band), p.affine, g), in));
  }
  const std::pair<const char*, double> rows[] = {
      {"dtn(lambda=1) vs ln", d_ln},
      {"dtn(lambda=0, uniform P) vs in", d_in},
      {"dtn(lambda=0, full band) vs in", d_band}};
  std::ostringstream csv;
  csv << "seed,property,max_deviation\n";
  std::cout << "seed " << a.common.seed << ", " << a.trials << " random inputs\n";
  for (const auto& [name, dev] : rows) {
    std::cout << name << ": max deviation " << sci(dev) << '\n';
    csv << a.common.seed << ',' << name << ',' << real_to_string(dev) << '\n';
  }
  write_text_file(output_dir(a.common) / seeded("equiv", a.common.seed, ".csv"), csv.str());
  for (const auto& [name, dev] : rows)
    if (!(dev < a.tol)) throw PropertyFailure(std::string(name) + ": deviation " + sci(dev) +
                                              " not below " + sci(a.tol));
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradArgs {
  Common common;
  DtnGradcheckConfig layer;
  std::size_t seeds = 20;
  double tol = 1e-4;
  double model_tol = 1e-3;
  bool skip_model = false;
};

int run_gradcheck(const GradArgs& a) {
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  std::ostringstream csv;
  csv << "seed,target,group,relative_error\n";
  auto record = [&](std::uint64_t seed, const std::string& target,
                    const std::vector<GroupError>& errs) {
    for (const auto& e : errs) {
      const std::string key = target + " " + e.group;
      if (!worst.contains(key)) order.push_back(key);
      worst[key] = std::max(worst[key], e.relative_error);
      csv << seed << ',' << target << ',' << e.group << ',' << real_to_string(e.relative_error)
          << '\n';
    }
  };
  for (std::uint64_t s = a.common.seed; s < a.common.seed + a.seeds; ++s) {
    record(s, "layer", dtn_layer_gradcheck(s, a.layer));
    if (!a.skip_model) {
      ModelGradcheckConfig mc;
      mc.model.eps = a.layer.eps;
      mc.step = a.layer.step;
      record(s, "model", model_gradcheck(s, mc));
    }
  }
  write_text_file(output_dir(a.common) / seeded("gradcheck", a.common.seed, ".csv"), csv.str());
  std::cout << "seeds " << a.common.seed << ".." << a.common.seed + a.seeds - 1 << ", step "
            << a.layer.step << "; max relative error per group\n";
  for (const auto& key : order) std::cout << "  " << key << ": " << sci(worst[key]) << '\n';
  for (const auto& key : order) {
    const double tol = key.starts_with("layer") ? a.tol : a.model_tol;
    if (!(worst[key] < tol))
      throw PropertyFailure("gradient of " + key + ": relative error " + sci(worst[key]) +
                            " not below " + sci(tol));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string task = "local-texture";
  std::string norm = "dtn";
  std::optional<std::uint64_t> data_seed;
  std::size_t samples = 2000;
  std::size_t threads = 1;
  ModelConfig model;
  std::optional<std::size_t> l_dtn;
  TrainConfig train;
};

int run_train(TrainArgs a) {
  TaskOptions opts;
  opts.rows = a.model.rows;
  opts.cols = a.model.cols;
  opts.samples = a.samples;
  const std::uint64_t data_seed = a.data_seed.value_or(a.common.seed);
  const Dataset ds = toy_task_generator(a.task, data_seed, opts);
  a.model.early_norm = norm_kind_from_string(a.norm);
  a.model.patch_dim = ds.patch_dim();
  a.model.classes = ds.classes;
  a.model.l_dtn = a.l_dtn.value_or(ModelConfig::default_l_dtn(a.model.layers));
  a.train.seed = a.common.seed;
  a.train.eval_threads = a.threads;
  const auto res = train_toy(a.model, ds, a.train);

  const fs::path dir = output_dir(a.common);
  const std::uint64_t seed = a.common.seed;
  ToyTransformer final_model = res.model;
  write_text_file(dir / seeded("checkpoint", seed, ".json"),
                  checkpoint_to_json(final_model, seed, res.steps_done).dump(1));
  std::ostringstream losses;
  losses << "seed,step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i)
    losses << seed << ',' << i << ',' << real_to_string(res.losses[i]) << '\n';
  write_text_file(dir / seeded("losses", seed, ".csv"), losses.str());
  const double departure = max_lambda_departure(res.lambda_trace);
  if (!res.lambda_trace.empty()) {
    write_text_file(dir / seeded("lambda_trace", seed, ".csv"), lambda_trace_csv(res.lambda_trace));
    write_text_file(dir / seeded("lambda_summary", seed, ".csv"),
                    lambda_summary_csv(summarize_lambda(res.lambda_trace)));
  }
  std::ostringstream metrics;
  metrics << "seed,data_seed,task,norm,steps_done,final_loss,train_accuracy,test_accuracy,"
             "diverged,max_lambda_departure\n"
          << seed << ',' << data_seed << ',' << a.task << ',' << a.norm << ',' << res.steps_done
          << ',' << real_to_string(res.final_loss) << ',' << real_to_string(res.train_accuracy)
          << ',' << real_to_string(res.test_accuracy) << ',' << (res.diverged ? 1 : 0) << ','
          << real_to_string(departure) << '\n';
  write_text_file(dir / seeded("train_metrics", seed, ".csv"), metrics.str());

  std::cout << a.task << " / " << a.norm << ", seed " << seed << ": " << res.steps_done
            << " steps, final loss " << sci(res.final_loss) << ", train acc "
            << res.train_accuracy << ", test acc " << res.test_accuracy;
  if (!res.lambda_trace.empty()) std::cout << ", max |lambda-0.5| " << departure;
  std::cout << "\noutputs in " << dir.string() << '\n';
  if (res.diverged) {
    throw PropertyFailure("finite training loss: diverged after step " +
                          std::to_string(res.steps_done) + ", checkpoint holds the last epoch");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  Common common;
  std::string checkpoint;
  std::string task = "local-texture";
  std::optional<std::uint64_t> data_seed;
  std::size_t samples = 64;
  bool seed_given = false;
};

Tensor norm_output(const ToyTransformer& m, const Tensor& x, std::size_t block) {
  const auto& cfg = m.config();
  const NormWeights& n = m.weights().blocks[block].norm1;
  switch (cfg.block_norm(block)) {
    case NormKind::kDynamic:
      return dtn_forward(x, dtn_params_of(n), cfg.geometry(), cfg.eps);
    case NormKind::kInstance: {
      AffineParams p(cfg.channels);
      p.gamma = n.gamma.storage();
      p.beta = n.beta.storage();
      return instance_norm(x, p, cfg.eps);
    }
    case NormKind::kLayer:
      break;
  }
  AffineParams p(cfg.channels);
  p.gamma = n.gamma.storage();
  p.beta = n.beta.storage();
  return layer_norm(x, p, cfg.eps);
}

int run_analyze(const AnalyzeArgs& a) {
  const auto loaded = checkpoint_from_json(parse_json_text(read_text_file(a.checkpoint),
                                                           a.checkpoint));
  const ToyTransformer& m = loaded.model;
  const auto& cfg = m.config();
  const std::uint64_t seed = a.seed_given ? a.common.seed : loaded.seed;
  TaskOptions opts;
  opts.rows = cfg.rows;
  opts.cols = cfg.cols;
  const Dataset ds = toy_task_generator(a.task, a.data_seed.value_or(seed), opts);
  if (ds.patch_dim() != cfg.patch_dim) throw UsageError("checkpoint does not fit task " + a.task);
  const std::size_t n = std::min(a.samples, ds.size() - ds.train_count);
  if (n == 0) throw UsageError("no held-out samples to analyze");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), ds.train_count);
  const Tensor patches = ds.batch(idx);
  const fs::path dir = output_dir(a.common);

  // Attention distance per block and head.
  std::vector<AttentionRecord> trace;
  ForwardOptions opt;
  opt.attention_trace = &trace;
  const Tensor logits = model_forward(m, patches, opt);
  std::ostringstream dist;
  dist << "seed,block,head,mean_attention_distance\n";
  std::cout << "checkpoint " << a.checkpoint << " (step " << loaded.step << "), " << n
            << " held-out samples, seed " << seed << '\n';
  for (const auto& rec : trace) {
    const auto d = mean_attention_distance_per_head(rec.weights, cfg.geometry());
    std::cout << "block " << rec.layer << " attention distance:";
    for (std::size_t h = 0; h < d.size(); ++h) {
      std::cout << ' ' << sci(d[h]);
      dist << seed << ',' << rec.layer << ',' << h << ',' << real_to_string(d[h]) << '\n';
      if (!std::isfinite(d[h])) throw PropertyFailure("finite attention distance");
    }
    std::cout << '\n';
  }
  write_text_file(dir / seeded("attention_distance", seed, ".csv"), dist.str());

  // Variation coefficient of each estimator's means on the block-0 input.
  const Tensor x = m.embed(patches);
  const DtnParams p = cfg.block_norm(0) == NormKind::kDynamic
                          ? dtn_params_of(m.weights().blocks[0].norm1)
                          : DtnParams::init(cfg.channels, cfg.heads);
  const GridGeometry g = cfg.geometry();
  const auto attn = build_all_positional_attention(build_rel_pos(g), p);
  const std::pair<const char*, double> vcs[] = {
      {"ln", variation_coefficient(x, ln_stats(x))},
      {"in", variation_coefficient(x, in_stats(x))},
      {"dtn", variation_coefficient(x, dtn_stats(x, p, Span(attn), g))}};
  std::ostringstream vc;
  vc << "seed,stats,variation_coefficient\n";
  std::cout << "variation coefficient on block-0 input:";
  for (const auto& [name, v] : vcs) {
    std::cout << ' ' << name << ' ' << sci(v);
    vc << seed << ',' << name << ',' << real_to_string(v) << '\n';
    if (!std::isfinite(v)) throw PropertyFailure("finite variation coefficient");
  }
  std::cout << '\n';
  write_text_file(dir / seeded("variation", seed, ".csv"), vc.str());

  // Per-head token magnitudes after block 0's first normalizer, sample 0.
  const Tensor mag = token_magnitude(norm_output(m, x, 0), cfg.heads);
  std::ostringstream mags;
  mags << "seed,head,token,magnitude\n";
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    std::vector<double> map(cfg.tokens());
    for (std::size_t t = 0; t < cfg.tokens(); ++t) {
      map[t] = mag[h * cfg.tokens() + t];
      mags << seed << ',' << h << ',' << t << ',' << real_to_string(map[t]) << '\n';
    }
    const std::string stem = seeded("magnitude_head" + std::to_string(h), seed, "");
    write_heatmap((dir / stem).string(),
                  make_heatmap(map, cfg.rows, cfg.cols,
                               "token magnitude after block 0 norm1, head " + std::to_string(h) +
                                   ", sample 0, seed " + std::to_string(seed)));
  }
  write_text_file(dir / seeded("magnitude", seed, ".csv"), mags.str());
  for (double v : logits.storage())
    if (!std::isfinite(v)) throw PropertyFailure("finite logits");
  std::cout << "outputs in " << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// complexity

struct ComplexityArgs {
  Common common;
  std::string model = "all";
  std::size_t pool = 1;
  double tol = 0.2;
};

int run_complexity(const ComplexityArgs& a) {
  std::vector<VitPreset> chosen;
  if (a.model == "all") {
    chosen = vit_presets();
  } else if (auto p = find_vit_preset(a.model)) {
    chosen.push_back(*p);
  } else {
    std::string names;
    for (const auto& p : vit_presets()) names += " " + p.name;
    throw UsageError("unknown model \"" + a.model + "\"; presets:" + names);
  }
  std::ostringstream csv;
  csv << "seed,model,pool_s,dtn_layers,delta_gflops,reported_delta_gflops,core_params,"
         "mixture_logits,added_params_total,added_fraction\n";
  std::string failure;
  for (const auto& p : chosen) {
    const auto r = complexity_report(p.geometry(a.pool), p.channels, p.heads, p.layers, p.l_dtn);
    const double delta = r.flops_delta_total / 1e9;
    const double reported = p.reported_dtn_gflops - p.reported_ln_gflops;
    const double frac = static_cast<double>(r.added_params_total) / vit_param_count(p);
    char line[160];
    std::snprintf(line, sizeof line, "%s: \xce\x94" "FLOPs \xe2\x89\x88 %.2fG (paper: %.2fG\xe2\x86\x92%.2fG)",
                  p.name.c_str(), delta, p.reported_ln_gflops, p.reported_dtn_gflops);
    std::cout << line << '\n';
    std::cout << "  per DTN layer: 2C+3H = " << r.core_params_per_layer << " (+"
              << r.mixture_logits_per_layer << " mixture logits), " << r.added_params_per_layer
              << " more than LN; " << r.added_params_total << " added over " << r.dtn_layers
              << " layers = " << 100.0 * frac << "% of " << p.reported_params_m << "M\n";
    csv << a.common.seed << ',' << p.name << ',' << a.pool << ',' << r.dtn_layers << ','
        << real_to_string(delta) << ',' << real_to_string(reported) << ','
        << r.core_params_per_layer << ',' << r.mixture_logits_per_layer << ','
        << r.added_params_total << ',' << real_to_string(frac) << '\n';
    if (a.pool == 1 && failure.empty() && std::abs(delta / reported - 1.0) > a.tol) {
      failure = p.name + " FLOP delta " + std::to_string(delta) + "G outside " +
                std::to_string(a.tol) + " of reported " + std::to_string(reported) + "G";
    }
    if (failure.empty() && !(frac < 1e-4)) {
      failure = p.name + " added parameters are not below 0.01% of the model";
    }
  }
  write_text_file(output_dir(a.common) / seeded("complexity", a.common.seed, ".csv"), csv.str());
  if (!failure.empty()) throw PropertyFailure(failure);
  return 0;
}

// ---------------------------------------------------------------------------
// export-p

struct ExportArgs {
  Common common;
  std::string checkpoint;
  GridGeometry geometry{6, 6, 4, 1};
  std::optional<std::size_t> token;
  double tol = 1e-9;
  bool seed_given = false;
};

void export_maps(const fs::path& dir, const std::string& stem, const GridGeometry& g,
                 const DtnParams& p, std::size_t token, double tol, std::uint64_t seed) {
  const auto attn = build_all_positional_attention(build_rel_pos(g), p);
  const std::size_t n = g.pooled_tokens();
  for (std::size_t h = 0; h < attn.size(); ++h) {
    std::vector<double> row(n);
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += row[j] = attn[h].p(token, j);
    if (!(std::abs(sum - 1.0) < tol)) {
      throw PropertyFailure(stem + " head " + std::to_string(h) + ": row " +
                            std::to_string(token) + " sums to " + std::to_string(sum));
    }
    const std::string name = seeded(stem + "_head" + std::to_string(h), seed, "");
    write_heatmap((dir / name).string(),
                  make_heatmap(row, g.pooled_rows(), g.pooled_cols(),
                               stem + ", head " + std::to_string(h) + ", row of pooled token " +
                                   std::to_string(token) + ", seed " + std::to_string(seed)));
    std::cout << "  " << name << ".pgm\n";
  }
}

int run_export(ExportArgs a) {
  const fs::path dir = output_dir(a.common);
  std::optional<LoadedCheckpoint> loaded;
  if (!a.checkpoint.empty()) {
    loaded.emplace(checkpoint_from_json(parse_json_text(read_text_file(a.checkpoint),
                                                        a.checkpoint)));
    a.geometry = loaded->model.config().geometry();
    if (!a.seed_given) a.common.seed = loaded->seed;
  }
  const GridGeometry& g = a.geometry;
  g.validate(true);
  const std::size_t token = a.token.value_or((g.pooled_rows() / 2) * g.pooled_cols() +
                                             g.pooled_cols() / 2);
  if (token >= g.pooled_tokens()) {
    throw UsageError("token " + std::to_string(token) + " outside the pooled grid");
  }
  std::cout << "P rows of pooled token " << token << " on a " << g.pooled_rows() << "x"
            << g.pooled_cols() << " grid\n";
  export_maps(dir, "p_init", g, DtnParams::init(g.heads, g.heads), token, a.tol, a.common.seed);
  if (loaded) {
    const auto& m = loaded->model;
    if (m.config().early_norm != NormKind::kDynamic || m.config().l_dtn == 0) {
      std::cout << "checkpoint has no DTN layers; only the init maps were written\n";
    }
    const std::uint64_t seed = a.common.seed;
    for (std::size_t b = 0; b < m.config().l_dtn && m.config().early_norm == NormKind::kDynamic;
         ++b) {
      const auto& blk = m.weights().blocks[b];
      export_maps(dir, "p_block" + std::to_string(b) + "_norm1", g, dtn_params_of(blk.norm1),
                  token, a.tol, seed);
      export_maps(dir, "p_block" + std::to_string(b) + "_norm2", g, dtn_params_of(blk.norm2),
                  token, a.tol, seed);
    }
  }
  return 0;
}

bool known_command(const std::string& s) {
  for (const char* c : {"equiv", "gradcheck", "train", "analyze", "complexity", "export-p"})
    if (s == c) return true;
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string first = argv[1];
  if (first == "-h" || first == "--help") {
    std::cout << kUsage;
    return 0;
  }
  if (!known_command(first)) {
    std::cerr << "unknown command \"" << first << "\"\n" << kUsage;
    return 2;
  }

  CLI::App app{"Dynamic token normalization toolkit", "dtn_cli"};
  app.require_subcommand(1);

  EquivArgs eq;
  auto* equiv = app.add_subcommand("equiv", "degeneracy suite");
  add_common(equiv, eq.common, false);
  equiv->add_option("--tol", eq.tol, "largest allowed deviation");
  equiv->add_option("--trials", eq.trials, "random inputs");

  GradArgs gr;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient certification");
  add_common(grad, gr.common, true);
  grad->add_option("--tol", gr.tol, "layer tolerance");
  grad->add_option("--model-tol", gr.model_tol, "toy-model tolerance");
  grad->add_option("--seeds", gr.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
  grad->add_option("--rows", gr.layer.rows);
  grad->add_option("--cols", gr.layer.cols);
  grad->add_option("--channels", gr.layer.channels);
  grad->add_option("--heads", gr.layer.heads);
  grad->add_option("--pool-s", gr.layer.pool);
  grad->add_option("--batch", gr.layer.batch);
  grad->add_option("--eps", gr.layer.eps);
  grad->add_option("--step", gr.layer.step, "finite-difference step");
  grad->add_flag("--skip-model", gr.skip_model, "layer only");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "toy training");
  add_common(train, tr.common, true);
  train->add_option("--task", tr.task)->check(CLI::IsMember(task_names()));
  train->add_option("--norm", tr.norm, "dtn, ln or in for the early blocks")
      ->check(CLI::IsMember({"dtn", "ln", "in"}));
  train->add_option("--data-seed", tr.data_seed, "dataset seed (default: --seed)");
  train->add_option("--samples", tr.samples);
  train->add_option("--threads", tr.threads, "evaluation threads")->check(CLI::PositiveNumber);
  train->add_option("--layers", tr.model.layers);
  train->add_option("--l-dtn", tr.l_dtn, "leading normalized blocks (default floor(5L/6))");
  train->add_option("--heads", tr.model.heads);
  train->add_option("--channels", tr.model.channels);
  train->add_option("--rows", tr.model.rows);
  train->add_option("--cols", tr.model.cols);
  train->add_option("--pool-s", tr.model.pool);
  train->add_option("--steps", tr.train.steps);
  train->add_option("--batch", tr.train.batch_size);
  train->add_option("--lr", tr.train.lr);
  train->add_option("--warmup", tr.train.warmup);
  train->add_option("--weight-decay", tr.train.weight_decay);
  train->add_option("--mixture-lr-scale", tr.train.mixture_lr_scale);

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "metrics from a checkpoint");
  add_common(analyze, an.common, false);
  analyze->add_option("--checkpoint", an.checkpoint)->required();
  analyze->add_option("--task", an.task)->check(CLI::IsMember(task_names()));
  analyze->add_option("--data-seed", an.data_seed, "dataset seed (default: checkpoint seed)");
  analyze->add_option("--samples", an.samples, "held-out samples");

  ComplexityArgs cx;
  auto* complexity = app.add_subcommand("complexity", "FLOP and parameter accounting");
  add_common(complexity, cx.common, false);
  complexity->add_option("--model", cx.model, "preset name or all");
  complexity->add_option("--pool-s", cx.pool);
  complexity->add_option("--tol", cx.tol, "relative tolerance against reported deltas");

  ExportArgs ex;
  auto* exportp = app.add_subcommand("export-p", "positional attention heatmaps");
  add_common(exportp, ex.common, false);
  exportp->add_option("--checkpoint", ex.checkpoint);
  exportp->add_option("--rows", ex.geometry.rows);
  exportp->add_option("--cols", ex.geometry.cols);
  exportp->add_option("--heads", ex.geometry.heads);
  exportp->add_option("--pool-s", ex.geometry.pool);
  exportp->add_option("--token", ex.token, "pooled token whose row is drawn");
  exportp->add_option("--tol", ex.tol, "row-sum tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*equiv) return run_equiv(eq);
    if (*grad) {
      apply_config(grad, gr.common.config);
      return run_gradcheck(gr);
    }
    if (*train) {
      apply_config(train, tr.common.config);
      return run_train(tr);
    }
    if (*analyze) {
      an.seed_given = analyze->get_option("--seed")->count() > 0;
      return run_analyze(an);
    }
    if (*complexity) return run_complexity(cx);
    if (*exportp) {
      ex.seed_given = exportp->get_option("--seed")->count() > 0;
      return run_export(ex);
    }
  } catch (const PropertyFailure& e) {
    std::cerr << "FAIL: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
