#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "crf_refine/metrics.hpp"
#include "crf_refine/parallel.hpp"
#include "json.hpp"

namespace crf_refine::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// -------------------------------------------------------------------- config

RunConfig default_config() {
  RunConfig c;
  if (const char* env = std::getenv("CRF_REFINE_THREADS")) {
    char* end = nullptr;
    const unsigned long long n = std::strtoull(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1 && n <= 1024) c.threads = static_cast<std::size_t>(n);
  }
  return c;
}

namespace {

void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown config key '" + where + "/" + key + "'");
  }
}

template <typename T>
T number_at(const nlohmann::json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError("config key '" + where + "' must be a number");
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_unsigned()) throw ConfigError("config key '" + where + "' must be a non-negative integer");
  }
  return v.get<T>();
}

template <typename T>
std::vector<T> list_at(const nlohmann::json& v, const std::string& where) {
  if (!v.is_array() || v.empty()) throw ConfigError("config key '" + where + "' must be a non-empty array");
  std::vector<T> out;
  for (const auto& x : v) out.push_back(number_at<T>(x, where));
  return out;
}

FilterMode parse_filter(const std::string& s) {
  if (s == "lattice") return FilterMode::Lattice;
  if (s == "brute") return FilterMode::BruteForce;
  throw ConfigError("filter must be 'lattice' or 'brute', got '" + s + "'");
}

}  // namespace

void apply_config_json(RunConfig& config, const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(doc, {"crf", "floor", "hu_window", "sweep", "seed", "threads", "out", "filter",
                   "positive_label"},
             "");
  if (doc.contains("crf")) {
    const auto& c = doc["crf"];
    if (!c.is_object()) throw ConfigError("config key '/crf' must be an object");
    check_keys(c, {"w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma", "iterations"}, "/crf");
    if (c.contains("w1")) config.crf.w1 = number_at<double>(c["w1"], "/crf/w1");
    if (c.contains("w2")) config.crf.w2 = number_at<double>(c["w2"], "/crf/w2");
    if (c.contains("sigma_alpha")) config.crf.sigma_alpha = number_at<double>(c["sigma_alpha"], "/crf/sigma_alpha");
    if (c.contains("sigma_beta")) config.crf.sigma_beta = number_at<double>(c["sigma_beta"], "/crf/sigma_beta");
    if (c.contains("sigma_gamma")) config.crf.sigma_gamma = number_at<double>(c["sigma_gamma"], "/crf/sigma_gamma");
    if (c.contains("iterations")) config.crf.iterations = number_at<std::size_t>(c["iterations"], "/crf/iterations");
  }
  if (doc.contains("floor")) config.floor = number_at<double>(doc["floor"], "/floor");
  if (doc.contains("hu_window")) {
    const auto& w = doc["hu_window"];
    if (!w.is_object()) throw ConfigError("config key '/hu_window' must be an object");
    check_keys(w, {"enabled", "center", "width"}, "/hu_window");
    if (w.contains("enabled")) {
      if (!w["enabled"].is_boolean()) throw ConfigError("config key '/hu_window/enabled' must be a boolean");
      config.apply_window = w["enabled"].get<bool>();
    }
    if (w.contains("center")) config.window.center = number_at<double>(w["center"], "/hu_window/center");
    if (w.contains("width")) config.window.width = number_at<double>(w["width"], "/hu_window/width");
  }
  if (doc.contains("sweep")) {
    const auto& g = doc["sweep"];
    if (!g.is_object()) throw ConfigError("config key '/sweep' must be an object");
    check_keys(g, {"w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma", "iterations"}, "/sweep");
    if (g.contains("w1")) config.grid.w1 = list_at<double>(g["w1"], "/sweep/w1");
    if (g.contains("w2")) config.grid.w2 = list_at<double>(g["w2"], "/sweep/w2");
    if (g.contains("sigma_alpha")) config.grid.sigma_alpha = list_at<double>(g["sigma_alpha"], "/sweep/sigma_alpha");
    if (g.contains("sigma_beta")) config.grid.sigma_beta = list_at<double>(g["sigma_beta"], "/sweep/sigma_beta");
    if (g.contains("sigma_gamma")) config.grid.sigma_gamma = list_at<double>(g["sigma_gamma"], "/sweep/sigma_gamma");
    if (g.contains("iterations")) config.grid.iterations = list_at<std::size_t>(g["iterations"], "/sweep/iterations");
  }
  if (doc.contains("seed")) config.seed = number_at<std::uint64_t>(doc["seed"], "/seed");
  if (doc.contains("threads")) config.threads = std::max<std::size_t>(1, number_at<std::size_t>(doc["threads"], "/threads"));
  if (doc.contains("out")) {
    if (!doc["out"].is_string()) throw ConfigError("config key '/out' must be a string");
    config.out_dir = doc["out"].get<std::string>();
  }
  if (doc.contains("filter")) {
    if (!doc["filter"].is_string()) throw ConfigError("config key '/filter' must be a string");
    config.filter = parse_filter(doc["filter"].get<std::string>());
  }
  if (doc.contains("positive_label")) {
    const auto v = number_at<std::size_t>(doc["positive_label"], "/positive_label");
    if (v > 255) throw ConfigError("positive_label must be < 256");
    config.positive_label = static_cast<std::uint8_t>(v);
  }
}

fs::path prediction_path(const fs::path& dir, const std::string& case_id, std::size_t slice_index,
                         std::size_t labels) {
  char name[32];
  std::snprintf(name, sizeof name, "slice_%03zu.%s", slice_index, labels > 2 ? "dten" : "pgm");
  return dir / case_id / name;
}

SliceData load_slice(const CaseManifest& manifest, std::size_t case_index, std::size_t slice_index,
                     const RunConfig& config) {
  const SliceEntry& e = manifest.cases.at(case_index).slices.at(slice_index);
  SliceImage image = load_slice_image(manifest.resolve(e.image_path));
  if (config.apply_window)
    image = hu_window(image.height(), image.width(), image.intensity(), config.window);
  ProbabilityMap prob = load_probability_map(manifest.resolve(e.prob_path));
  std::optional<LabelMask> truth;
  if (e.truth_path) truth = load_label_mask(manifest.resolve(*e.truth_path));
  if (prob.height() != image.height() || prob.width() != image.width())
    throw InvalidInput("probability map and image shapes disagree");
  if (truth && (truth->height() != image.height() || truth->width() != image.width()))
    throw InvalidInput("truth mask and image shapes disagree");
  return {std::move(image), std::move(prob), std::move(truth)};
}

namespace {

// Identifies one slice of a manifest in flattened order.
struct SliceRef {
  std::size_t case_index;
  std::size_t slice_index;
};

std::vector<SliceRef> flatten(const CaseManifest& m) {
  std::vector<SliceRef> refs;
  for (std::size_t c = 0; c < m.cases.size(); ++c)
    for (std::size_t s = 0; s < m.cases[c].slices.size(); ++s) refs.push_back({c, s});
  return refs;
}

std::string slice_label(const CaseManifest& m, const SliceRef& r) {
  return m.cases[r.case_index].case_id + "/" + std::to_string(r.slice_index);
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

LabelMask read_prediction(const fs::path& dir, const std::string& case_id, std::size_t slice) {
  const fs::path pgm = prediction_path(dir, case_id, slice, 2);
  if (fs::exists(pgm)) return read_pgm_mask(pgm);
  const fs::path dten = prediction_path(dir, case_id, slice, 3);
  if (fs::exists(dten)) return LabelMask::from_tensor(read_tensor(dten));
  throw ParseError(ParseError::Kind::Io, ParseError::npos, "missing prediction " + pgm.string());
}

// Shared CLI flags. Optional values record whether the user passed them.
struct Flags {
  std::string manifest;
  std::string config;
  std::optional<std::string> out;
  std::optional<double> w1, w2, sigma_alpha, sigma_beta, sigma_gamma, floor;
  std::optional<std::size_t> iterations, threads, positive_label;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> filter;
};

void add_crf_flags(CLI::App* app, Flags& f) {
  app->add_option("--w1", f.w1, "Appearance kernel weight");
  app->add_option("--w2", f.w2, "Smoothness kernel weight");
  app->add_option("--sigma-alpha", f.sigma_alpha, "Appearance spatial bandwidth (pixels)");
  app->add_option("--sigma-beta", f.sigma_beta, "Appearance intensity bandwidth (0-255 scale)");
  app->add_option("--sigma-gamma", f.sigma_gamma, "Smoothness spatial bandwidth (pixels)");
  app->add_option("--iterations", f.iterations, "Mean-field iterations");
  app->add_option("--floor", f.floor, "Probability floor before the log");
  app->add_option("--filter", f.filter, "Message-passing filter")
      ->check(CLI::IsMember({"lattice", "brute"}));
}

void add_common_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config file");
  app->add_option("--out", f.out, "Output directory or file");
  app->add_option("--seed", f.seed, "Random seed");
  app->add_option("--threads", f.threads, "Worker threads (default: CRF_REFINE_THREADS or 1)");
  app->add_option("--positive-label", f.positive_label, "Label scored as positive");
}

RunConfig resolve(const Flags& f) {
  RunConfig c = default_config();
  if (!f.config.empty()) {
    Bytes bytes;
    try {
      bytes = read_file_bytes(f.config);
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
    apply_config_json(c, std::string(bytes.begin(), bytes.end()));
  }
  if (f.out) c.out_dir = *f.out;
  if (f.w1) c.crf.w1 = *f.w1;
  if (f.w2) c.crf.w2 = *f.w2;
  if (f.sigma_alpha) c.crf.sigma_alpha = *f.sigma_alpha;
  if (f.sigma_beta) c.crf.sigma_beta = *f.sigma_beta;
  if (f.sigma_gamma) c.crf.sigma_gamma = *f.sigma_gamma;
  if (f.iterations) c.crf.iterations = *f.iterations;
  if (f.floor) c.floor = *f.floor;
  if (f.seed) c.seed = *f.seed;
  if (f.threads) c.threads = std::max<std::size_t>(1, *f.threads);
  if (f.filter) c.filter = parse_filter(*f.filter);
  if (f.positive_label) {
    if (*f.positive_label > 255) throw ConfigError("--positive-label must be < 256");
    c.positive_label = static_cast<std::uint8_t>(*f.positive_label);
  }
  try {
    c.crf.validate();
  } catch (const InvalidParameter& e) {
    throw ConfigError(e.what());
  }
  if (!(c.floor > 0.0 && c.floor < 1.0)) throw ConfigError("--floor must lie in (0, 1)");
  return c;
}

FoldAssignment folds_or_single(const CaseManifest& m) {
  if (m.folds) return *m.folds;
  FoldAssignment a;
  a.k = 1;
  for (const auto& c : m.cases) a.mapping.emplace(c.case_id, 0);
  return a;
}

ojson stats_json(const SummaryStats& s) {
  ojson j;
  j["n"] = s.n;
  j["mean"] = s.mean;
  j["std"] = s.std;
  return j;
}

std::string render_report(const ojson& report) {
  std::ostringstream os;
  std::size_t width = 7;
  for (const auto& c : report["cases"]) width = std::max(width, c["case_id"].get<std::string>().size());
  os << std::left << std::setw(static_cast<int>(width) + 2) << "case" << std::setw(6) << "fold"
     << "dsc\n";
  for (const auto& c : report["cases"])
    os << std::left << std::setw(static_cast<int>(width) + 2) << c["case_id"].get<std::string>()
       << std::setw(6) << c["fold"].get<std::size_t>() << fixed(c["dsc"].get<double>()) << "\n";
  os << "\n";
  for (const auto& f : report["folds"])
    os << "fold " << f["fold"].get<std::size_t>() << "  mean " << fixed(f["mean"].get<double>())
       << " +/- " << fixed(f["std"].get<double>()) << "  (n=" << f["n"].get<std::size_t>() << ")\n";
  const auto& o = report["overall"];
  os << "overall mean " << fixed(o["mean"].get<double>()) << " +/- "
     << fixed(o["std"].get<double>()) << "  (n=" << o["n"].get<std::size_t>() << ")\n";
  if (report.contains("comparison")) {
    const auto& cmp = report["comparison"];
    if (cmp.contains("error"))
      os << "paired t-test: " << cmp["error"].get<std::string>() << "\n";
    else
      os << "paired t-test: t = " << fixed(cmp["t"].get<double>(), 4)
         << ", p = " << cmp["p"].get<double>() << ", n = " << cmp["n"].get<std::size_t>() << "\n";
  }
  return os.str();
}

ojson comparison_json(std::span<const double> a, std::span<const double> b, std::ostream& err) {
  ojson j;
  try {
    const TTestResult r = paired_t_test(a, b);
    j["t"] = r.t;
    j["p"] = r.p;
    j["n"] = r.n;
  } catch (const UndefinedTest& e) {
    err << "warning: " << e.what() << "\n";
    j["error"] = e.what();
  }
  return j;
}

// ------------------------------------------------------------------ commands

int cmd_refine(const Flags& flags, bool dump_q, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(flags);
  const CaseManifest manifest = read_manifest(flags.manifest, {.check_files = false});
  const auto refs = flatten(manifest);

  std::vector<std::string> failures(refs.size());
  RefineOptions options;
  options.floor = cfg.floor;
  options.inference.mode = cfg.filter;
  parallel_for(refs.size(), cfg.threads, [&](std::size_t k) {
    const SliceRef& r = refs[k];
    const std::string& case_id = manifest.cases[r.case_index].case_id;
    try {
      const SliceData slice = load_slice(manifest, r.case_index, r.slice_index, cfg);
      const UnaryField unary = unary_from_probabilities(slice.prob, cfg.floor);
      const ProbabilityMap q = mean_field_infer(unary, slice.image, cfg.crf, options.inference);
      const LabelMask mask = argmax_labels(q);
      const fs::path path = prediction_path(cfg.out_dir, case_id, r.slice_index, mask.labels());
      if (mask.labels() > 2)
        write_tensor(mask.to_tensor(), path);
      else
        write_pgm_mask(mask, path);
      if (dump_q) {
        fs::path qpath = path;
        qpath.replace_filename(path.stem().string() + "_q.dten");
        write_tensor(q.to_tensor(), qpath);
      }
    } catch (const std::exception& e) {
      failures[k] = e.what();
    }
  });

  std::size_t failed = 0;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (failures[k].empty()) continue;
    ++failed;
    err << "error: " << slice_label(manifest, refs[k]) << ": " << failures[k] << "\n";
  }
  out << "refined " << refs.size() - failed << " of " << refs.size() << " slices into "
      << cfg.out_dir.string() << "\n";
  return failed == 0 ? kSuccess : kDataFailure;
}

// Per-case scores of the predictions in `dir`; missing slices are appended to `missing`.
std::vector<CaseScore> score_directory(const CaseManifest& m, const fs::path& dir,
                                       const RunConfig& cfg, std::vector<std::string>& problems) {
  const auto refs = flatten(m);
  std::vector<std::optional<LabelMask>> preds(refs.size());
  std::vector<std::optional<LabelMask>> truths(refs.size());
  std::vector<std::string> errors(refs.size());
  parallel_for(refs.size(), cfg.threads, [&](std::size_t k) {
    const SliceRef& r = refs[k];
    const SliceEntry& e = m.cases[r.case_index].slices[r.slice_index];
    try {
      if (!e.truth_path) throw InvalidInput("slice has no truth_path");
      truths[k] = load_label_mask(m.resolve(*e.truth_path));
      preds[k] = read_prediction(dir, m.cases[r.case_index].case_id, r.slice_index);
    } catch (const std::exception& ex) {
      errors[k] = ex.what();
    }
  });
  for (std::size_t k = 0; k < refs.size(); ++k)
    if (!errors[k].empty()) problems.push_back(slice_label(m, refs[k]) + ": " + errors[k]);
  if (!problems.empty()) return {};

  std::vector<CaseScore> scores;
  std::size_t k = 0;
  for (const auto& c : m.cases) {
    std::vector<SlicePair> pairs;
    for (std::size_t s = 0; s < c.slices.size(); ++s, ++k) pairs.push_back({&*preds[k], &*truths[k]});
    scores.push_back(case_dice(c.case_id, pairs, cfg.positive_label));
  }
  std::sort(scores.begin(), scores.end(),
            [](const CaseScore& a, const CaseScore& b) { return a.case_id < b.case_id; });
  return scores;
}

ojson build_report(const std::vector<CaseScore>& scores, const FoldAssignment& folds,
                   std::uint8_t positive_label) {
  const FoldReport fr = fold_report(scores, folds);
  ojson report;
  report["positive_label"] = positive_label;
  report["cases"] = ojson::array();
  for (const auto& s : scores) {
    ojson c;
    c["case_id"] = s.case_id;
    c["fold"] = folds.mapping.at(s.case_id);
    c["dsc"] = s.dsc;
    c["tp"] = s.counts.tp;
    c["fp"] = s.counts.fp;
    c["fn"] = s.counts.fn;
    c["tn"] = s.counts.tn;
    report["cases"].push_back(std::move(c));
  }
  report["folds"] = ojson::array();
  for (std::size_t f = 0; f < fr.folds.size(); ++f) {
    ojson j = stats_json(fr.folds[f]);
    j["fold"] = f;
    report["folds"].push_back(std::move(j));
  }
  report["overall"] = stats_json(fr.overall);
  return report;
}

void emit_report(const ojson& report, const std::optional<std::string>& out_dir, const char* stem,
                 std::ostream& out) {
  const std::string text = render_report(report);
  out << text;
  if (out_dir) {
    write_text(fs::path(*out_dir) / (std::string(stem) + ".json"), report.dump(2) + "\n");
    write_text(fs::path(*out_dir) / (std::string(stem) + ".txt"), text);
  }
}

int cmd_eval(const Flags& flags, const std::string& pred_dir, const std::string& compare_dir,
             std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(flags);
  const CaseManifest manifest = read_manifest(flags.manifest, {.check_files = false});
  std::vector<std::string> problems;
  const auto scores = score_directory(manifest, pred_dir, cfg, problems);
  std::vector<CaseScore> other;
  if (!compare_dir.empty() && problems.empty())
    other = score_directory(manifest, compare_dir, cfg, problems);
  if (!problems.empty()) {
    for (const auto& p : problems) err << "error: " << p << "\n";
    return kDataFailure;
  }
  ojson report = build_report(scores, folds_or_single(manifest), cfg.positive_label);
  if (!compare_dir.empty()) {
    std::vector<double> a, b;
    for (std::size_t k = 0; k < scores.size(); ++k) {
      a.push_back(scores[k].dsc);
      b.push_back(other[k].dsc);
    }
    report["comparison"] = comparison_json(a, b, err);
  }
  emit_report(report, flags.out, "eval", out);
  return kSuccess;
}

std::vector<Fixture> load_corpus(const CaseManifest& m, const RunConfig& cfg) {
  const auto refs = flatten(m);
  std::vector<std::optional<Fixture>> loaded(refs.size());
  parallel_for(refs.size(), cfg.threads, [&](std::size_t k) {
    SliceData d = load_slice(m, refs[k].case_index, refs[k].slice_index, cfg);
    if (!d.truth) throw InvalidInput(slice_label(m, refs[k]) + ": slice has no truth_path");
    loaded[k] = Fixture{std::move(d.image), std::move(d.prob), std::move(*d.truth),
                        m.cases[refs[k].case_index].case_id, refs[k].slice_index};
  });
  std::vector<Fixture> corpus;
  for (auto& f : loaded) corpus.push_back(std::move(*f));
  return corpus;
}

int cmd_sweep(const Flags& flags, std::ostream& out) {
  RunConfig cfg = resolve(flags);
  // An explicit CRF flag pins that grid axis to the one value.
  if (flags.w1) cfg.grid.w1 = {*flags.w1};
  if (flags.w2) cfg.grid.w2 = {*flags.w2};
  if (flags.sigma_alpha) cfg.grid.sigma_alpha = {*flags.sigma_alpha};
  if (flags.sigma_beta) cfg.grid.sigma_beta = {*flags.sigma_beta};
  if (flags.sigma_gamma) cfg.grid.sigma_gamma = {*flags.sigma_gamma};
  if (flags.iterations) cfg.grid.iterations = {*flags.iterations};
  const CaseManifest manifest = read_manifest(flags.manifest);
  const std::vector<Fixture> corpus = load_corpus(manifest, cfg);
  SweepOptions options;
  options.floor = cfg.floor;
  options.mode = cfg.filter;
  options.threads = cfg.threads;
  const auto ranked = sweep(cfg.grid, corpus, cfg.positive_label, options);

  ojson rows = ojson::array();
  out << "rank  w1        w2        s_alpha   s_beta    s_gamma   iters  mean_dsc\n";
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const CrfParams& p = ranked[r].params;
    out << std::left << std::setw(6) << r + 1 << std::setw(10) << fixed(p.w1, 3) << std::setw(10)
        << fixed(p.w2, 3) << std::setw(10) << fixed(p.sigma_alpha, 3) << std::setw(10)
        << fixed(p.sigma_beta, 3) << std::setw(10) << fixed(p.sigma_gamma, 3) << std::setw(7)
        << p.iterations << fixed(ranked[r].mean_dsc) << "\n";
    ojson row;
    row["rank"] = r + 1;
    row["grid_index"] = ranked[r].grid_index;
    row["w1"] = p.w1;
    row["w2"] = p.w2;
    row["sigma_alpha"] = p.sigma_alpha;
    row["sigma_beta"] = p.sigma_beta;
    row["sigma_gamma"] = p.sigma_gamma;
    row["iterations"] = p.iterations;
    row["mean_dsc"] = ranked[r].mean_dsc;
    rows.push_back(std::move(row));
  }
  if (flags.out) write_text(fs::path(*flags.out) / "sweep.json", rows.dump(2) + "\n");
  return kSuccess;
}

struct SynthFlags {
  std::size_t count = 10;
  std::size_t height = 64;
  std::size_t width = 64;
  double noise = 0.05;
  std::size_t slices_per_case = 1;
};

int cmd_synth(const Flags& flags, const SynthFlags& s, std::ostream& out) {
  const RunConfig cfg = resolve(flags);
  FixtureConfig fc;
  fc.slices_per_case = s.slices_per_case;
  const auto fixtures = synth_fixtures(cfg.seed, s.count, s.height, s.width, s.noise, fc);
  CaseManifest m;
  m.base_dir = cfg.out_dir;
  for (const auto& f : fixtures) {
    if (m.cases.empty() || m.cases.back().case_id != f.case_id) m.cases.push_back({f.case_id, {}});
    char stem[48];
    std::snprintf(stem, sizeof stem, "%s/slice_%03zu", f.case_id.c_str(), f.slice_index);
    SliceEntry e{std::string(stem) + "_image.dten", std::string(stem) + "_prob.dten",
                 std::string(stem) + "_truth.pgm"};
    write_tensor(f.image.to_tensor(), m.resolve(e.image_path));
    write_tensor(f.prob.to_tensor(), m.resolve(e.prob_path));
    write_pgm_mask(f.truth, m.resolve(*e.truth_path));
    m.cases.back().slices.push_back(std::move(e));
  }
  write_manifest(m, cfg.out_dir / "manifest.json");
  out << "wrote " << fixtures.size() << " fixtures to " << (cfg.out_dir / "manifest.json").string()
      << "\n";
  return kSuccess;
}

int cmd_folds(const Flags& flags, std::size_t k, std::ostream& out) {
  const RunConfig cfg = resolve(flags);
  CaseManifest m = read_manifest(flags.manifest, {.check_files = false});
  m.folds = assign_folds(m.case_ids(), k, cfg.seed);
  if (flags.out) {
    // Paths inside the manifest stay relative to the original directory.
    const fs::path target = *flags.out;
    const fs::path target_dir = fs::absolute(target).parent_path();
    const fs::path source_dir = fs::absolute(m.base_dir);
    if (target_dir.lexically_normal() != source_dir.lexically_normal()) {
      for (auto& c : m.cases)
        for (auto& s : c.slices) {
          auto rebase = [&](std::string& p) {
            if (!fs::path(p).is_absolute())
              p = fs::relative(source_dir / p, target_dir).generic_string();
          };
          rebase(s.image_path);
          rebase(s.prob_path);
          if (s.truth_path) rebase(*s.truth_path);
        }
    }
    write_manifest(m, target);
  } else {
    out << manifest_to_json(m);
  }
  return kSuccess;
}

int cmd_report(const std::string& input, const std::string& compare, const Flags& flags,
               std::ostream& out, std::ostream& err) {
  auto load = [](const std::string& path) {
    const Bytes b = read_file_bytes(path);
    try {
      return ojson::parse(std::string(b.begin(), b.end()));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    }
  };
  ojson report = load(input);
  if (!report.contains("cases") || !report.contains("folds") || !report.contains("overall"))
    throw ConfigError(input + ": not an eval report");
  if (!compare.empty()) {
    const ojson other = load(compare);
    std::map<std::string, double> theirs;
    for (const auto& c : other.at("cases")) theirs[c.at("case_id").get<std::string>()] = c.at("dsc").get<double>();
    std::vector<double> a, b;
    for (const auto& c : report["cases"]) {
      const auto id = c.at("case_id").get<std::string>();
      const auto it = theirs.find(id);
      if (it == theirs.end()) {
        err << "error: case '" << id << "' missing from " << compare << "\n";
        return kDataFailure;
      }
      a.push_back(c.at("dsc").get<double>());
      b.push_back(it->second);
    }
    report["comparison"] = comparison_json(a, b, err);
  }
  emit_report(report, flags.out, "report", out);
  return kSuccess;
}

int cmd_overlay(const std::string& image_path, const std::string& pred_path,
                const std::string& truth_path, const std::string& out_path,
                std::uint8_t positive_label, std::ostream& out) {
  const SliceImage image = load_slice_image(image_path);
  const LabelMask pred = load_label_mask(pred_path);
  const LabelMask truth = load_label_mask(truth_path);
  if (pred.height() != image.height() || pred.width() != image.width() ||
      truth.height() != image.height() || truth.width() != image.width())
    throw InvalidInput("overlay inputs have different shapes");
  const auto gray = rescale_to_byte_range(image.intensity());
  std::vector<std::uint8_t> rgb(image.pixel_count() * 3);
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    const bool p = pred.values()[i] == positive_label;
    const bool t = truth.values()[i] == positive_label;
    std::uint8_t* px = rgb.data() + 3 * i;
    if (p && t) {  // true positive: green
      px[0] = 0, px[1] = 255, px[2] = 0;
    } else if (p) {  // false positive: red
      px[0] = 255, px[1] = 0, px[2] = 0;
    } else if (t) {  // false negative: cyan
      px[0] = 0, px[1] = 255, px[2] = 255;
    } else {
      px[0] = px[1] = px[2] = gray[i];
    }
  }
  write_file_bytes(out_path, encode_ppm(image.height(), image.width(), rgb));
  out << "wrote " << out_path << "\n";
  return kSuccess;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dense-CRF refinement and evaluation of segmentation probability maps",
               "crf_refine"};
  app.require_subcommand(1);
  Flags flags;
  bool dump_q = false;
  std::string pred_dir, compare_dir, report_input, report_compare;
  std::string overlay_image, overlay_pred, overlay_truth;
  std::size_t k = 5;
  SynthFlags synth;

  auto* refine = app.add_subcommand("refine", "Refine every slice of a manifest with the CRF");
  refine->add_option("--manifest", flags.manifest, "Case manifest (JSON)")->required();
  add_common_flags(refine, flags);
  add_crf_flags(refine, flags);
  refine->add_flag("--dump-q", dump_q, "Also write the final Q as <slice>_q.dten");

  auto* eval = app.add_subcommand("eval", "Score predictions against manifest truths");
  eval->add_option("--manifest", flags.manifest, "Case manifest with truth_path entries")->required();
  eval->add_option("--pred", pred_dir, "Prediction directory written by refine")->required();
  eval->add_option("--compare", compare_dir, "Second prediction directory for a paired t-test");
  add_common_flags(eval, flags);

  auto* sweep_cmd = app.add_subcommand("sweep", "Rank CRF parameter grid points by mean case Dice");
  sweep_cmd->add_option("--manifest", flags.manifest, "Case manifest with truth_path entries")->required();
  add_common_flags(sweep_cmd, flags);
  add_crf_flags(sweep_cmd, flags);

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic fixture corpus and manifest");
  add_common_flags(synth_cmd, flags);
  synth_cmd->add_option("--count", synth.count, "Number of slices")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--height", synth.height, "Slice height")->check(CLI::Range(16, 8192));
  synth_cmd->add_option("--width", synth.width, "Slice width")->check(CLI::Range(16, 8192));
  synth_cmd->add_option("--noise", synth.noise, "Probability flip rate")->check(CLI::Range(0.0, 1.0));
  synth_cmd->add_option("--slices-per-case", synth.slices_per_case, "Slices grouped per case")
      ->check(CLI::PositiveNumber);

  auto* folds_cmd = app.add_subcommand("folds", "Assign cases to seeded folds");
  folds_cmd->add_option("--manifest", flags.manifest, "Case manifest")->required();
  folds_cmd->add_option("-k,--folds", k, "Fold count")->check(CLI::Range(2, 1000));
  add_common_flags(folds_cmd, flags);

  auto* report_cmd = app.add_subcommand("report", "Render an eval report, optionally comparing two");
  report_cmd->add_option("--input", report_input, "eval.json written by eval")->required();
  report_cmd->add_option("--compare", report_compare, "Second eval.json for a paired t-test");
  add_common_flags(report_cmd, flags);

  auto* overlay_cmd = app.add_subcommand("overlay", "Colour TP/FP/FN over the image as a PPM");
  overlay_cmd->add_option("--image", overlay_image, "Slice image (.dten or .pgm)")->required();
  overlay_cmd->add_option("--pred", overlay_pred, "Predicted mask")->required();
  overlay_cmd->add_option("--truth", overlay_truth, "Ground-truth mask")->required();
  add_common_flags(overlay_cmd, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsageError;
  }

  try {
    if (*refine) return cmd_refine(flags, dump_q, out, err);
    if (*eval) return cmd_eval(flags, pred_dir, compare_dir, out, err);
    if (*sweep_cmd) return cmd_sweep(flags, out);
    if (*synth_cmd) return cmd_synth(flags, synth, out);
    if (*folds_cmd) return cmd_folds(flags, k, out);
    if (*report_cmd) return cmd_report(report_input, report_compare, flags, out, err);
    if (*overlay_cmd) {
      if (!flags.out) throw ConfigError("overlay needs --out <file.ppm>");
      const RunConfig cfg = resolve(flags);
      return cmd_overlay(overlay_image, overlay_pred, overlay_truth, *flags.out,
                         cfg.positive_label, out);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ManifestError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataFailure;
  }
  return kUsageError;
}

}  // namespace crf_refine::cli
