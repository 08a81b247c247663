#include "boed/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "boed/estimators.hpp"
#include "boed/oracle.hpp"
#include "boed/posterior.hpp"

namespace boed {

namespace {

using nlohmann::json;
using clock_type = std::chrono::steady_clock;

double elapsed(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

void require_keys(const json& j, const char* section,
                  std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section +
                                        "' must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("unknown key '" + item.key() + "' in config section '" + section + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

ExperimentConfig::Kind kind_from_string(const std::string& s) {
  if (s == "amortization") return ExperimentConfig::Kind::amortization;
  if (s == "model") return ExperimentConfig::Kind::model;
  if (s == "archstudy") return ExperimentConfig::Kind::archstudy;
  if (s == "oracle-check") return ExperimentConfig::Kind::oracle_check;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

void parse_model_block(const json& j, ExperimentConfig& cfg) {
  require_keys(j, "model",
               {"family", "n_predictors", "prior_var", "sigma", "a_p", "b_p", "n_trials",
                "n_classes"});
  std::string fam = family_to_string(cfg.family);
  read_opt(j, "family", fam);
  try {
    cfg.family = family_from_string(fam);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  read_opt(j, "n_predictors", cfg.n_predictors);
  read_opt(j, "prior_var", cfg.prior_var);
  read_opt(j, "sigma", cfg.glm.sigma);
  read_opt(j, "a_p", cfg.glm.a_p);
  read_opt(j, "b_p", cfg.glm.b_p);
  read_opt(j, "n_trials", cfg.glm.n_trials);
  read_opt(j, "n_classes", cfg.glm.n_classes);
  if (cfg.prior_var <= 0.0) throw ConfigError("prior_var must be > 0");
  if (cfg.n_predictors == 0) throw ConfigError("n_predictors must be >= 1");
}

void parse_encoder_block(const json& j, EncoderConfig& e) {
  require_keys(j, "encoder",
               {"kind", "embed_blocks", "embed_width", "token_width", "attn_layers", "attn_heads",
                "head_dim", "post_attn_projection", "dropout_p", "emitter_blocks", "emitter_width",
                "residual_blocks", "residual_width"});
  std::string kind = encoder_kind_to_string(e.kind);
  read_opt(j, "kind", kind);
  try {
    e.kind = encoder_kind_from_string(kind);
  } catch (const std::exception& ex) {
    throw ConfigError(ex.what());
  }
  read_opt(j, "embed_blocks", e.embed_blocks);
  read_opt(j, "embed_width", e.embed_width);
  read_opt(j, "token_width", e.token_width);
  read_opt(j, "attn_layers", e.attn_layers);
  read_opt(j, "attn_heads", e.attn_heads);
  read_opt(j, "head_dim", e.head_dim);
  read_opt(j, "post_attn_projection", e.post_attn_projection);
  read_opt(j, "dropout_p", e.dropout_p);
  read_opt(j, "emitter_blocks", e.emitter_blocks);
  read_opt(j, "emitter_width", e.emitter_width);
  read_opt(j, "residual_blocks", e.residual_blocks);
  read_opt(j, "residual_width", e.residual_width);
  if (e.attn_heads * e.head_dim != e.token_width)
    throw ConfigError("encoder: attn_heads * head_dim must equal token_width");
}

void parse_flow_block(const json& j, FlowConfig& f) {
  require_keys(j, "flow",
               {"kind", "n_transforms", "coupling_net_blocks", "coupling_net_width",
                "base_net_blocks", "base_net_width", "spline_bins"});
  std::string kind = flow_kind_to_string(f.kind);
  read_opt(j, "kind", kind);
  try {
    f.kind = flow_kind_from_string(kind);
  } catch (const std::exception& ex) {
    throw ConfigError(ex.what());
  }
  read_opt(j, "n_transforms", f.n_transforms);
  read_opt(j, "coupling_net_blocks", f.coupling_net_blocks);
  read_opt(j, "coupling_net_width", f.coupling_net_width);
  read_opt(j, "base_net_blocks", f.base_net_blocks);
  read_opt(j, "base_net_width", f.base_net_width);
  read_opt(j, "spline_bins", f.spline_bins);
}

void parse_train_block(const json& j, TrainConfig& t) {
  require_keys(j, "train",
               {"steps", "designs_per_step", "mc_N", "design_units", "learning_rate", "beta1",
                "beta2", "weight_decay", "clip_norm", "checkpoint_every"});
  read_opt(j, "steps", t.steps);
  read_opt(j, "designs_per_step", t.designs_per_step);
  read_opt(j, "mc_N", t.mc_N);
  read_opt(j, "design_units", t.design_units);
  read_opt(j, "learning_rate", t.learning_rate);
  read_opt(j, "beta1", t.beta1);
  read_opt(j, "beta2", t.beta2);
  read_opt(j, "weight_decay", t.weight_decay);
  read_opt(j, "clip_norm", t.clip_norm);
  read_opt(j, "checkpoint_every", t.checkpoint_every);
  if (t.steps == 0 || t.designs_per_step == 0 || t.mc_N == 0 || t.design_units == 0)
    throw ConfigError("train: all counts must be >= 1");
  if (t.learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
}

void parse_eval_block(const json& j, ExperimentConfig& cfg) {
  require_keys(j, "evaluation",
               {"eval_units", "n_eval_designs", "n_runs", "posterior_N", "vnmc_N", "vnmc_M",
                "nmc_N", "nmc_M", "oracle_N"});
  read_opt(j, "eval_units", cfg.eval_units);
  read_opt(j, "n_eval_designs", cfg.n_eval_designs);
  read_opt(j, "n_runs", cfg.n_runs);
  read_opt(j, "posterior_N", cfg.budgets.posterior_N);
  read_opt(j, "vnmc_N", cfg.budgets.vnmc_N);
  read_opt(j, "vnmc_M", cfg.budgets.vnmc_M);
  read_opt(j, "nmc_N", cfg.budgets.nmc_N);
  read_opt(j, "nmc_M", cfg.budgets.nmc_M);
  read_opt(j, "oracle_N", cfg.budgets.oracle_N);
  const EvalBudgets& b = cfg.budgets;
  if (cfg.eval_units == 0 || cfg.n_eval_designs == 0 || cfg.n_runs == 0 || b.posterior_N == 0 ||
      b.vnmc_N == 0 || b.vnmc_M == 0 || b.nmc_N == 0 || b.nmc_M == 0 || b.oracle_N == 0)
    throw ConfigError("evaluation: all counts must be >= 1");
}

// Runs fn(0..n) across up to `workers` threads; per-index work must derive
// its own rng so the schedule cannot affect results.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> ts;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) ts.emplace_back(body);
  for (auto& t : ts) t.join();
  if (err) std::rethrow_exception(err);
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// --- CSV/SVG helpers -------------------------------------------------------

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  return rows;
}

const char* series_color(const std::string& name, std::size_t fallback_idx) {
  if (name == "nmc-upper") return "#1f77b4";
  if (name == "nmc-lower") return "#ff7f0e";
  if (name == "posterior") return "#2ca02c";
  if (name == "vnmc-upper") return "#d62728";
  if (name == "cvnmc-lower") return "#9467bd";
  if (name == "baseline") return "#8c564b";
  if (name == "oracle") return "#000000";
  static const char* cycle[6] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                 "#d62728", "#9467bd", "#8c564b"};
  return cycle[fallback_idx % 6];
}

struct Series {
  std::string name;
  std::vector<double> mean, sd;  // indexed by sorted design position
};

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt4g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// Shared SVG renderer: polylines over a common x grid with optional bands.
std::string render_series_svg(const std::vector<Series>& series, std::size_t n_x,
                              const std::string& x_label) {
  const double W = 860, H = 520, l = 64, r = 20, top = 20, bot = 44;
  double ymin = 0.0, ymax = 1.0;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.mean.size(); ++i) {
      const double lo = s.mean[i] - s.sd[i], hi = s.mean[i] + s.sd[i];
      if (first) {
        ymin = lo;
        ymax = hi;
        first = false;
      } else {
        ymin = std::min(ymin, lo);
        ymax = std::max(ymax, hi);
      }
    }
  if (ymax - ymin < 1e-12) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  auto xf = [&](std::size_t i) {
    return l + (n_x > 1 ? double(i) * (W - l - r) / double(n_x - 1) : (W - l - r) / 2.0);
  };
  auto yf = [&](double v) { return top + (ymax - v) / (ymax - ymin) * (H - top - bot); };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"860\" height=\"520\" "
         "viewBox=\"0 0 860 520\">\n";
  out += "<rect width=\"860\" height=\"520\" fill=\"white\"/>\n";
  // axes
  out += "<line x1=\"" + fmt2(l) + "\" y1=\"" + fmt2(top) + "\" x2=\"" + fmt2(l) + "\" y2=\"" +
         fmt2(H - bot) + "\" stroke=\"#333\"/>\n";
  out += "<line x1=\"" + fmt2(l) + "\" y1=\"" + fmt2(H - bot) + "\" x2=\"" + fmt2(W - r) +
         "\" y2=\"" + fmt2(H - bot) + "\" stroke=\"#333\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymin + (ymax - ymin) * t / 4.0;
    out += "<text x=\"" + fmt2(l - 6) + "\" y=\"" + fmt2(yf(v) + 4) +
           "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" + fmt4g(v) +
           "</text>\n";
    out += "<line x1=\"" + fmt2(l - 3) + "\" y1=\"" + fmt2(yf(v)) + "\" x2=\"" + fmt2(l) +
           "\" y2=\"" + fmt2(yf(v)) + "\" stroke=\"#333\"/>\n";
  }
  out += "<text x=\"" + fmt2((l + W - r) / 2) + "\" y=\"" + fmt2(H - 10) +
         "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" + x_label +
         "</text>\n";
  out += "<text x=\"14\" y=\"" + fmt2((top + H - bot) / 2) +
         "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 14 " +
         fmt2((top + H - bot) / 2) + ")\">nats</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    const char* color = series_color(s.name, si);
    bool has_band = false;
    for (double v : s.sd)
      if (v > 0.0) has_band = true;
    if (has_band) {
      std::string pts;
      for (std::size_t i = 0; i < s.mean.size(); ++i)
        pts += fmt2(xf(i)) + "," + fmt2(yf(s.mean[i] + s.sd[i])) + " ";
      for (std::size_t i = s.mean.size(); i-- > 0;)
        pts += fmt2(xf(i)) + "," + fmt2(yf(s.mean[i] - s.sd[i])) + " ";
      out += "<polygon points=\"" + pts + "\" fill=\"" + color +
             "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t i = 0; i < s.mean.size(); ++i)
      pts += fmt2(xf(i)) + "," + fmt2(yf(s.mean[i])) + " ";
    out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
    // legend
    const double ly = top + 16.0 * double(si) + 8.0;
    out += "<line x1=\"" + fmt2(W - r - 150) + "\" y1=\"" + fmt2(ly) + "\" x2=\"" +
           fmt2(W - r - 130) + "\" y2=\"" + fmt2(ly) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + fmt2(W - r - 124) + "\" y=\"" + fmt2(ly + 4) +
           "\" font-size=\"11\" font-family=\"sans-serif\">" + s.name + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
}

}  // namespace

GlmModel make_model(const ExperimentConfig& cfg) {
  return GlmModel::make(cfg.family, cfg.n_predictors, cfg.prior_var, cfg.glm);
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  require_keys(j, "top level",
               {"experiment", "seed", "output_dir", "model", "encoder", "flow", "train",
                "evaluation", "workers", "retrain_per_run", "no_train", "checkpoint"});
  ExperimentConfig cfg;
  if (!j.contains("experiment")) throw ConfigError("config is missing 'experiment'");
  std::string kind;
  read_opt(j, "experiment", kind);
  cfg.kind = kind_from_string(kind);
  read_opt(j, "seed", cfg.seed);
  read_opt(j, "output_dir", cfg.out_dir);
  read_opt(j, "workers", cfg.workers);
  read_opt(j, "retrain_per_run", cfg.retrain_per_run);
  read_opt(j, "no_train", cfg.no_train);
  read_opt(j, "checkpoint", cfg.checkpoint_path);
  if (j.contains("model")) parse_model_block(j.at("model"), cfg);
  if (j.contains("encoder")) parse_encoder_block(j.at("encoder"), cfg.encoder);
  if (j.contains("flow")) parse_flow_block(j.at("flow"), cfg.flow);
  if (j.contains("train")) parse_train_block(j.at("train"), cfg.train);
  if (j.contains("evaluation")) parse_eval_block(j.at("evaluation"), cfg);
  cfg.train.seed = cfg.seed;
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_desk_scale(ExperimentConfig& cfg) {
  cfg.train.steps = 500;
  cfg.train.designs_per_step = 10;
  cfg.train.mc_N = 25;
  cfg.budgets.posterior_N = 1000;
  cfg.budgets.vnmc_N = 200;
  cfg.budgets.vnmc_M = 15;
  cfg.budgets.nmc_N = 5000;
  cfg.budgets.nmc_M = 70;
}

void write_results_csv(const std::string& path, const ResultTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "design,estimator,run,value,std_err,N,M,seconds\n";
  for (const ResultRow& r : table.rows) {
    if (!std::isfinite(r.value) || !std::isfinite(r.std_err))
      throw std::runtime_error("non-finite result for estimator " + r.estimator);
    out << r.design << ',' << r.estimator << ',' << r.run << ',' << fmt17(r.value) << ','
        << fmt17(r.std_err) << ',' << r.N << ',' << r.M << ",0\n";
  }
}

void emit_chart(const std::string& csv_path, const std::string& svg_path) {
  const auto rows = read_csv(csv_path);
  if (rows.size() < 2) throw std::runtime_error("results CSV is empty");
  // per estimator, per design: values across runs
  std::vector<std::string> order;
  std::map<std::string, std::map<std::size_t, std::vector<double>>> data;
  std::size_t n_designs = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() < 8) throw std::runtime_error("malformed results CSV row");
    const std::size_t d = std::stoul(f[0]);
    const std::string& est = f[1];
    if (!data.count(est)) order.push_back(est);
    data[est][d].push_back(std::stod(f[3]));
    n_designs = std::max(n_designs, d + 1);
  }
  for (const auto& [est, per_design] : data)
    if (per_design.size() != n_designs)
      throw std::runtime_error("results CSV is missing designs for estimator " + est);

  // sort designs by the reference series
  const std::string ref = data.count("oracle") ? "oracle" : "nmc-upper";
  std::vector<std::pair<double, std::size_t>> keyed(n_designs);
  for (std::size_t d = 0; d < n_designs; ++d) {
    double m = 0.0;
    if (data.count(ref)) {
      const auto& v = data.at(ref).at(d);
      for (double x : v) m += x / double(v.size());
    }
    keyed[d] = {m, d};
  }
  std::stable_sort(keyed.begin(), keyed.end());

  std::vector<Series> series;
  for (std::size_t si = 0; si < order.size(); ++si) {
    Series s;
    s.name = order[si];
    for (std::size_t p = 0; p < n_designs; ++p) {
      const auto& v = data.at(s.name).at(keyed[p].second);
      double m = 0.0;
      for (double x : v) m += x / double(v.size());
      double sd = 0.0;
      if (v.size() > 1) {
        for (double x : v) sd += (x - m) * (x - m);
        sd = std::sqrt(sd / double(v.size() - 1));
      }
      s.mean.push_back(m);
      s.sd.push_back(sd);
    }
    series.push_back(std::move(s));
  }
  write_text(svg_path, render_series_svg(series, n_designs, "design (sorted by " + ref + ")"));
}

void emit_loss_chart(const std::string& csv_path, const std::string& svg_path) {
  const auto rows = read_csv(csv_path);
  if (rows.size() < 2) throw std::runtime_error("loss CSV is empty");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> traces;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() < 3) throw std::runtime_error("malformed loss CSV row");
    if (!traces.count(f[0])) order.push_back(f[0]);
    traces[f[0]].push_back(std::stod(f[2]));
  }
  std::size_t n_x = 0;
  std::vector<Series> series;
  for (std::size_t si = 0; si < order.size(); ++si) {
    Series s;
    s.name = order[si];
    s.mean = traces.at(s.name);
    s.sd.assign(s.mean.size(), 0.0);
    n_x = std::max(n_x, s.mean.size());
    series.push_back(std::move(s));
  }
  write_text(svg_path, render_series_svg(series, n_x, "step"));
}

namespace {

std::vector<Design> eval_designs(const ExperimentConfig& cfg, const GlmModel& model) {
  RngStream rng = RngStream(cfg.seed).fork(0xD51);
  return sample_designs(cfg.n_eval_designs, cfg.eval_units, model.n_predictors(), rng);
}

// Oracle rows where a ground truth exists (one per design, run index 0).
void append_oracle_rows(ResultTable& table, const ExperimentConfig& cfg, const GlmModel& model,
                        const std::vector<Design>& designs) {
  for (std::size_t i = 0; i < designs.size(); ++i) {
    ResultRow row;
    row.design = i;
    row.estimator = "oracle";
    const auto t0 = clock_type::now();
    if (cfg.family == Family::normal) {
      row.value = linear_gaussian_eig(designs[i], model.prior_cov(), model.options().sigma);
    } else if (cfg.family == Family::normal_unknown) {
      RngStream rng = RngStream(cfg.seed).fork(0x04AC).fork(i);
      EigEstimate e = linear_unknown_eig_mc(model, designs[i], cfg.budgets.oracle_N, rng);
      row.value = e.value;
      row.std_err = e.std_err;
      row.N = e.N;
    } else {
      return;  // no ground truth for the discrete-response families
    }
    row.seconds = elapsed(t0);
    table.rows.push_back(std::move(row));
  }
}

struct TrainedPosterior {
  std::unique_ptr<AmortizedPosterior> q;
  double train_seconds = 0.0;
};

TrainedPosterior obtain_posterior(const ExperimentConfig& cfg, const GlmModel& model,
                                  std::uint64_t seed, bool write_artifacts) {
  namespace fs = std::filesystem;
  TrainedPosterior out;
  EncoderConfig enc = cfg.encoder;
  FlowConfig fl = cfg.flow;
  const std::string ckpt =
      cfg.checkpoint_path.empty() ? cfg.out_dir + "/checkpoint.bin" : cfg.checkpoint_path;
  FlowParams params;
  if (cfg.no_train) {
    if (!fs::exists(ckpt)) throw CheckpointError("missing checkpoint " + ckpt);
    std::uint64_t ckpt_seed = 0;
    params = load_checkpoint(ckpt, &enc, &fl, &ckpt_seed);
  } else {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    LossTrace trace;
    const auto t0 = clock_type::now();
    params = train(model, enc, fl, tc, &trace);
    out.train_seconds = elapsed(t0);
    if (write_artifacts) {
      save_checkpoint(ckpt, params, enc, fl, tc.seed);
      write_loss_trace(cfg.out_dir + "/loss_trace.csv", trace);
    }
  }
  out.q = std::make_unique<AmortizedPosterior>(model, enc, fl, std::move(params));
  return out;
}

ResultRow eval_one(const GlmModel& model, const Design& d, const PosteriorApprox& q,
                   const ExperimentConfig& cfg, std::size_t design_idx, std::size_t run,
                   std::size_t est_idx) {
  RngStream rng = RngStream(cfg.seed).fork(0xE7A1).fork(design_idx * cfg.n_runs + run)
                      .fork(est_idx);
  const EvalBudgets& b = cfg.budgets;
  const auto t0 = clock_type::now();
  EigEstimate e;
  switch (est_idx) {
    case 0: e = nmc(model, d, b.nmc_N, b.nmc_M, /*upper=*/true, rng); break;
    case 1: e = nmc(model, d, b.nmc_N, b.nmc_M, /*upper=*/false, rng); break;
    case 2: e = posterior_bound(model, d, q, b.posterior_N, rng); break;
    case 3: e = vnmc_upper(model, d, q, b.vnmc_N, b.vnmc_M, rng); break;
    default: e = cvnmc_lower(model, d, q, b.vnmc_N, b.vnmc_M, rng); break;
  }
  ResultRow row;
  row.design = design_idx;
  row.estimator = estimator_tag_name(e.tag);
  row.run = run;
  row.value = e.value;
  row.std_err = e.std_err;
  row.N = e.N;
  row.M = e.M;
  row.seconds = elapsed(t0);
  return row;
}

void write_timing(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "# wall-clock timing (seconds)\n";
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

ResultTable run_model_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  GlmModel model = make_model(cfg);
  std::vector<Design> designs = eval_designs(cfg, model);

  std::vector<TrainedPosterior> qs;
  if (cfg.retrain_per_run) {
    for (std::size_t r = 0; r < cfg.n_runs; ++r)
      qs.push_back(obtain_posterior(cfg, model, cfg.seed + r, /*write_artifacts=*/r == 0));
  } else {
    qs.push_back(obtain_posterior(cfg, model, cfg.seed, /*write_artifacts=*/true));
  }
  double train_seconds = 0.0;
  for (const auto& t : qs) train_seconds += t.train_seconds;

  const std::size_t n_pairs = designs.size() * cfg.n_runs;
  std::vector<ResultRow> flat(n_pairs * 5);
  const auto t_eval = clock_type::now();
  parallel_for(n_pairs, cfg.workers, [&](std::size_t pair) {
    const std::size_t i = pair / cfg.n_runs;
    const std::size_t r = pair % cfg.n_runs;
    const PosteriorApprox& q = *qs[cfg.retrain_per_run ? r : 0].q;
    for (std::size_t k = 0; k < 5; ++k)
      flat[pair * 5 + k] = eval_one(model, designs[i], q, cfg, i, r, k);
  });
  const double eval_seconds = elapsed(t_eval);

  ResultTable table;
  for (std::size_t i = 0; i < designs.size(); ++i)
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t r = 0; r < cfg.n_runs; ++r)
        table.rows.push_back(flat[(i * cfg.n_runs + r) * 5 + k]);
  append_oracle_rows(table, cfg, model, designs);

  const std::string csv = cfg.out_dir + "/results.csv";
  write_results_csv(csv, table);
  emit_chart(csv, cfg.out_dir + "/chart.svg");
  write_timing(cfg.out_dir + "/timing.txt",
               {"train " + fmt17(train_seconds), "eval " + fmt17(eval_seconds),
                "total " + fmt17(train_seconds + eval_seconds)});
  return table;
}

ResultTable run_amortization_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.family != Family::normal)
    throw ConfigError("amortization comparison requires the known-noise linear model");
  fs::create_directories(cfg.out_dir);
  GlmModel model = make_model(cfg);
  std::vector<Design> designs = eval_designs(cfg, model);

  TrainedPosterior amortized = obtain_posterior(cfg, model, cfg.seed, /*write_artifacts=*/true);

  // one baseline fit per design: the linear map q = N(Ay, Sigma) cannot
  // share parameters across designs
  std::vector<std::unique_ptr<LinearBaselineApprox>> baselines(designs.size());
  std::vector<double> fit_seconds(designs.size(), 0.0);
  parallel_for(designs.size(), cfg.workers, [&](std::size_t i) {
    TrainConfig tc = cfg.train;
    tc.learning_rate = 1e-3;
    tc.seed = cfg.seed + 0x6A5E + i;
    const auto t0 = clock_type::now();
    baselines[i] =
        std::make_unique<LinearBaselineApprox>(train_baseline(model, designs[i], tc, nullptr));
    fit_seconds[i] = elapsed(t0);
  });
  double baseline_train_total = 0.0;
  for (double s : fit_seconds) baseline_train_total += s;

  const std::size_t n_pairs = designs.size() * cfg.n_runs;
  std::vector<ResultRow> amort(n_pairs), base(n_pairs);
  const auto t_eval = clock_type::now();
  parallel_for(n_pairs, cfg.workers, [&](std::size_t pair) {
    const std::size_t i = pair / cfg.n_runs;
    const std::size_t r = pair % cfg.n_runs;
    amort[pair] = eval_one(model, designs[i], *amortized.q, cfg, i, r, 2);
    ResultRow row = eval_one(model, designs[i], *baselines[i], cfg, i, r, 2);
    row.estimator = "baseline";
    base[pair] = row;
  });
  const double eval_seconds = elapsed(t_eval);

  ResultTable table;
  for (std::size_t i = 0; i < designs.size(); ++i)
    for (std::size_t r = 0; r < cfg.n_runs; ++r) table.rows.push_back(amort[i * cfg.n_runs + r]);
  for (std::size_t i = 0; i < designs.size(); ++i)
    for (std::size_t r = 0; r < cfg.n_runs; ++r) table.rows.push_back(base[i * cfg.n_runs + r]);
  append_oracle_rows(table, cfg, model, designs);

  const std::string csv = cfg.out_dir + "/results.csv";
  write_results_csv(csv, table);
  emit_chart(csv, cfg.out_dir + "/chart.svg");
  write_timing(
      cfg.out_dir + "/timing.txt",
      {"reference full-scale comparison: amortized 293 s vs per-design baseline 920 s",
       "amortized_train " + fmt17(amortized.train_seconds),
       "baseline_train_total " + fmt17(baseline_train_total),
       "baseline_train_mean_fit " + fmt17(baseline_train_total / double(designs.size())),
       "eval " + fmt17(eval_seconds), "n_designs " + std::to_string(designs.size())});
  return table;
}

std::vector<std::pair<std::string, double>> run_archstudy(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  GlmModel model = make_model(cfg);

  struct Variant {
    EncoderConfig::Kind enc;
    FlowConfig::Kind flow;
    std::size_t transforms;  // ignored for kind none
  };
  std::vector<Variant> grid;
  for (EncoderConfig::Kind ek : {EncoderConfig::Kind::attention, EncoderConfig::Kind::residual}) {
    for (FlowConfig::Kind fk : {FlowConfig::Kind::affine_coupling, FlowConfig::Kind::rq_spline})
      for (std::size_t nt : {std::size_t{4}, std::size_t{8}}) grid.push_back({ek, fk, nt});
    grid.push_back({ek, FlowConfig::Kind::none, 0});
  }

  std::vector<std::pair<std::string, double>> summary(grid.size());
  std::vector<LossTrace> traces(grid.size());
  std::vector<std::string> labels(grid.size());
  parallel_for(grid.size(), cfg.workers, [&](std::size_t gi) {
    const Variant& v = grid[gi];
    EncoderConfig enc = cfg.encoder;
    enc.kind = v.enc;
    FlowConfig fl = cfg.flow;
    fl.kind = v.flow;
    if (v.flow != FlowConfig::Kind::none) fl.n_transforms = v.transforms;
    std::string label = encoder_kind_to_string(v.enc) + "/" + flow_kind_to_string(v.flow);
    if (v.flow != FlowConfig::Kind::none) label += "-" + std::to_string(v.transforms);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    train(model, enc, fl, tc, &traces[gi]);
    const std::vector<double>& loss = traces[gi].loss;
    const std::size_t tail = std::min<std::size_t>(50, loss.size());
    double m = 0.0;
    for (std::size_t i = loss.size() - tail; i < loss.size(); ++i) m += loss[i] / double(tail);
    labels[gi] = label;
    summary[gi] = {label, m};
  });

  {
    std::ofstream out(cfg.out_dir + "/arch_loss.csv", std::ios::binary);
    out << "variant,step,loss\n";
    for (std::size_t gi = 0; gi < grid.size(); ++gi)
      for (std::size_t s = 0; s < traces[gi].loss.size(); ++s)
        out << labels[gi] << ',' << s << ',' << fmt17(traces[gi].loss[s]) << "\n";
  }
  {
    std::ofstream out(cfg.out_dir + "/arch_summary.csv", std::ios::binary);
    out << "variant,final50_mean_loss\n";
    for (const auto& [label, m] : summary) out << label << ',' << fmt17(m) << "\n";
  }
  emit_loss_chart(cfg.out_dir + "/arch_loss.csv", cfg.out_dir + "/arch_loss.svg");
  return summary;
}

ResultTable run_oracle_check(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.family != Family::normal && cfg.family != Family::normal_unknown)
    throw ConfigError("oracle-check requires a family with a ground-truth EIG");
  fs::create_directories(cfg.out_dir);
  GlmModel model = make_model(cfg);
  std::vector<Design> designs = eval_designs(cfg, model);
  ResultTable table;
  append_oracle_rows(table, cfg, model, designs);
  write_results_csv(cfg.out_dir + "/oracle.csv", table);
  return table;
}

}  // namespace boed
