#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "crf_refine/io_formats.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace crf_refine;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "crf_refine");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string read_text(const fs::path& p) {
  const Bytes b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

void write_text(const fs::path& p, const std::string& s) {
  write_file_bytes(p, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// Writes a synthetic corpus under dir/corpus and returns the manifest path.
fs::path synth_corpus(const test_support::TempDir& dir, std::size_t count, std::size_t size,
                      double noise, std::size_t per_case = 1, const std::string& seed = "42") {
  const fs::path corpus = dir / "corpus";
  const auto r = run_cli({"synth", "--out", corpus.string(), "--count", std::to_string(count),
                          "--height", std::to_string(size), "--width", std::to_string(size),
                          "--noise", std::to_string(noise), "--slices-per-case",
                          std::to_string(per_case), "--seed", seed});
  REQUIRE(r.code == 0);
  return corpus / "manifest.json";
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~EnvGuard() {
    if (old_.empty())
      ::unsetenv(name_);
    else
      ::setenv(name_, old_.c_str(), 1);
  }

 private:
  const char* name_;
  std::string old_;
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth writes a readable corpus") {
  test_support::TempDir dir("cli_synth");
  const fs::path manifest = synth_corpus(dir, 4, 24, 0.1, 2);
  const CaseManifest m = read_manifest(manifest);
  REQUIRE(m.cases.size() == 2);
  CHECK(m.cases[0].slices.size() == 2);
  const auto fx = synth_fixture(42, 3, 24, 24, 0.1, {.slices_per_case = 2});
  const auto slice = cli::load_slice(m, 1, 1, cli::default_config());
  CHECK(slice.image == fx.image);
  CHECK(slice.prob == fx.prob);
  CHECK(*slice.truth == fx.truth);
}

TEST_CASE("refine matches the library bit exactly") {
  test_support::TempDir dir("cli_refine");
  const fs::path manifest = synth_corpus(dir, 3, 32, 0.15);
  const fs::path pred = dir / "pred";
  const auto r = run_cli({"refine", "--manifest", manifest.string(), "--out", pred.string(),
                          "--dump-q"});
  REQUIRE(r.code == 0);
  const CaseManifest m = read_manifest(manifest);
  for (std::size_t c = 0; c < m.cases.size(); ++c) {
    const auto s = cli::load_slice(m, c, 0, cli::default_config());
    const LabelMask lib = refine_segmentation(s.prob, s.image, CrfParams{});
    const fs::path out = cli::prediction_path(pred, m.cases[c].case_id, 0);
    CHECK(read_pgm_mask(out) == lib);
    const auto q = ProbabilityMap::from_tensor(
        read_tensor(out.parent_path() / (out.stem().string() + "_q.dten")));
    CHECK(q == mean_field_infer(unary_from_probabilities(s.prob), s.image, CrfParams{}));
  }
}

TEST_CASE("refine with zero iterations gives the input argmax") {
  test_support::TempDir dir("cli_iter0");
  const fs::path manifest = synth_corpus(dir, 2, 20, 0.3);
  const auto r = run_cli({"refine", "--manifest", manifest.string(), "--out",
                          (dir / "pred").string(), "--iterations", "0"});
  REQUIRE(r.code == 0);
  const CaseManifest m = read_manifest(manifest);
  for (std::size_t c = 0; c < m.cases.size(); ++c) {
    const auto s = cli::load_slice(m, c, 0, cli::default_config());
    CHECK(read_pgm_mask(cli::prediction_path(dir / "pred", m.cases[c].case_id, 0)) ==
          argmax_labels(s.prob));
  }
}

TEST_CASE("refine keeps going past a missing probability file") {
  test_support::TempDir dir("cli_missing");
  const fs::path manifest = synth_corpus(dir, 3, 16, 0.1);
  const CaseManifest m = read_manifest(manifest);
  fs::remove(m.resolve(m.cases[1].slices[0].prob_path));
  const auto r = run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "pred").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find(m.cases[1].case_id + "/0") != std::string::npos);
  CHECK(fs::exists(cli::prediction_path(dir / "pred", m.cases[0].case_id, 0)));
  CHECK(fs::exists(cli::prediction_path(dir / "pred", m.cases[2].case_id, 0)));
  CHECK_FALSE(fs::exists(cli::prediction_path(dir / "pred", m.cases[1].case_id, 0)));
}

TEST_CASE("eval of the truths scores one everywhere") {
  test_support::TempDir dir("cli_eval_truth");
  const fs::path manifest = synth_corpus(dir, 4, 16, 0.1, 2);
  const CaseManifest m = read_manifest(manifest);
  for (std::size_t c = 0; c < m.cases.size(); ++c)
    for (std::size_t s = 0; s < m.cases[c].slices.size(); ++s)
      fs::copy_file(m.resolve(*m.cases[c].slices[s].truth_path),
                    [&] {
                      const auto p = cli::prediction_path(dir / "pred", m.cases[c].case_id, s);
                      fs::create_directories(p.parent_path());
                      return p;
                    }());
  const auto r = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "pred").string(),
                          "--out", (dir / "report").string()});
  REQUIRE(r.code == 0);
  const auto report = read_json(dir / "report" / "eval.json");
  for (const auto& c : report["cases"]) CHECK(c["dsc"].get<double>() == 1.0);
  CHECK(report["overall"]["mean"].get<double>() == 1.0);
  CHECK(report["overall"]["std"].get<double>() == 0.0);
  CHECK(read_text(dir / "report" / "eval.txt") == r.out);
}

TEST_CASE("eval reports three known case scores") {
  test_support::TempDir dir("cli_eval_known");
  // truth has 10 foreground pixels; predictions give tp=9,fn=1,fp=1 (0.9), tp=8,fn=2,fp=2 (0.8)
  // and a perfect match (1.0)
  std::vector<std::uint8_t> truth(25, 0);
  for (int k = 0; k < 10; ++k) truth[k] = 1;
  auto shifted = [&](int moved) {
    auto v = truth;
    for (int k = 0; k < moved; ++k) {
      v[k] = 0;
      v[10 + k] = 1;
    }
    return LabelMask(5, 5, 2, v);
  };
  const LabelMask t(5, 5, 2, truth);
  std::string cases;
  const char* ids[] = {"p1", "p2", "p3"};
  const int moved[] = {1, 2, 0};
  for (int c = 0; c < 3; ++c) {
    write_tensor(SliceImage(5, 5, std::vector<float>(25, 1.0f)).to_tensor(), dir / (std::string(ids[c]) + "_i.dten"));
    write_tensor(ProbabilityMap(5, 5, 2, std::vector<float>(50, 0.5f)).to_tensor(), dir / (std::string(ids[c]) + "_p.dten"));
    write_pgm_mask(t, dir / (std::string(ids[c]) + "_t.pgm"));
    write_pgm_mask(shifted(moved[c]), cli::prediction_path(dir / "pred", ids[c], 0));
    cases += std::string(c ? "," : "") + R"({"case_id": ")" + ids[c] + R"(", "slices": [{"image_path": ")" +
             ids[c] + R"(_i.dten", "prob_path": ")" + ids[c] + R"(_p.dten", "truth_path": ")" + ids[c] +
             R"(_t.pgm"}]})";
  }
  write_text(dir / "m.json", R"({"schema_version": 1, "cases": [)" + cases + "]}");
  const auto r = run_cli({"eval", "--manifest", (dir / "m.json").string(), "--pred",
                          (dir / "pred").string(), "--out", (dir / "rep").string()});
  REQUIRE(r.code == 0);
  const auto report = read_json(dir / "rep" / "eval.json");
  CHECK(report["cases"][0]["dsc"].get<double>() == doctest::Approx(0.9));
  CHECK(report["cases"][1]["dsc"].get<double>() == doctest::Approx(0.8));
  CHECK(report["overall"]["mean"].get<double>() == doctest::Approx(0.9));
  CHECK(report["overall"]["std"].get<double>() == doctest::Approx(0.1));
  CHECK(r.out.find("overall mean 0.900000 +/- 0.100000  (n=3)") != std::string::npos);
}

TEST_CASE("eval comparing a directory with itself warns") {
  test_support::TempDir dir("cli_eval_self");
  const fs::path manifest = synth_corpus(dir, 3, 16, 0.2);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "pred").string()}).code == 0);
  const auto r = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "pred").string(),
                          "--compare", (dir / "pred").string()});
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
  CHECK(r.out.find("paired t-test: ") != std::string::npos);
}

TEST_CASE("eval fails on missing predictions and names the slice") {
  test_support::TempDir dir("cli_eval_missing");
  const fs::path manifest = synth_corpus(dir, 2, 16, 0.1);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "pred").string()}).code == 0);
  const CaseManifest m = read_manifest(manifest);
  fs::remove(cli::prediction_path(dir / "pred", m.cases[0].case_id, 0));
  const auto r = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "pred").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find(m.cases[0].case_id + "/0") != std::string::npos);
}

TEST_CASE("report re-renders and compares eval output") {
  test_support::TempDir dir("cli_report");
  const fs::path manifest = synth_corpus(dir, 4, 24, 0.2);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "crf").string()}).code == 0);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "raw").string(),
                   "--iterations", "0"}).code == 0);
  const auto a = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "crf").string(),
                          "--out", (dir / "a").string()});
  const auto b = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "raw").string(),
                          "--out", (dir / "b").string()});
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  const auto plain = run_cli({"report", "--input", (dir / "a" / "eval.json").string()});
  CHECK(plain.code == 0);
  CHECK(plain.out == a.out);
  const auto cmp = run_cli({"report", "--input", (dir / "a" / "eval.json").string(), "--compare",
                            (dir / "b" / "eval.json").string()});
  CHECK(cmp.code == 0);
  CHECK(cmp.out.find("paired t-test: ") != std::string::npos);
  const auto direct = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "crf").string(),
                               "--compare", (dir / "raw").string()});
  CHECK(direct.out == cmp.out);
}

TEST_CASE("folds are deterministic and written next to the manifest") {
  test_support::TempDir dir("cli_folds");
  const fs::path manifest = synth_corpus(dir, 10, 16, 0.0);
  const auto a = run_cli({"folds", "--manifest", manifest.string(), "-k", "5", "--seed", "42"});
  const auto b = run_cli({"folds", "--manifest", manifest.string(), "-k", "5", "--seed", "42"});
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  const auto m = parse_manifest(a.out, manifest.parent_path(), {false});
  REQUIRE(m.folds.has_value());
  CHECK(m.folds->mapping == assign_folds(m.case_ids(), 5, 42).mapping);

  const fs::path elsewhere = dir / "other" / "folded.json";
  fs::create_directories(elsewhere.parent_path());
  REQUIRE(run_cli({"folds", "--manifest", manifest.string(), "--out", elsewhere.string()}).code == 0);
  const CaseManifest moved = read_manifest(elsewhere);
  CHECK(moved.folds->k == 5);
  CHECK(check_manifest_files(moved).empty());
}

TEST_CASE("eval uses the manifest folds") {
  test_support::TempDir dir("cli_eval_folds");
  const fs::path manifest = synth_corpus(dir, 6, 16, 0.2);
  REQUIRE(run_cli({"folds", "--manifest", manifest.string(), "-k", "3", "--out",
                   (dir / "corpus" / "folded.json").string()}).code == 0);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "pred").string()}).code == 0);
  const auto r = run_cli({"eval", "--manifest", (dir / "corpus" / "folded.json").string(), "--pred",
                          (dir / "pred").string(), "--out", (dir / "rep").string()});
  REQUIRE(r.code == 0);
  const auto report = read_json(dir / "rep" / "eval.json");
  CHECK(report["folds"].size() == 3);
  for (const auto& f : report["folds"]) CHECK(f["n"].get<std::size_t>() == 2);
}

TEST_CASE("overlay colours") {
  test_support::TempDir dir("cli_overlay");
  const SliceImage img(2, 2, {0.0f, 50.0f, 100.0f, 200.0f});
  write_tensor(img.to_tensor(), dir / "img.dten");
  const LabelMask truth(2, 2, 2, {1, 1, 0, 0});
  const LabelMask pred(2, 2, 2, {1, 0, 1, 0});
  write_pgm_mask(truth, dir / "t.pgm");
  write_pgm_mask(pred, dir / "p.pgm");

  auto pixels = [&](const std::string& pred_file) {
    const auto r = run_cli({"overlay", "--image", (dir / "img.dten").string(), "--pred",
                            (dir / pred_file).string(), "--truth", (dir / "t.pgm").string(), "--out",
                            (dir / "o.ppm").string()});
    REQUIRE(r.code == 0);
    const Bytes b = read_file_bytes(dir / "o.ppm");
    REQUIRE(b.size() == 11 + 12);
    CHECK(std::string(b.begin(), b.begin() + 11) == "P6\n2 2\n255\n");
    return Bytes(b.begin() + 11, b.end());
  };
  CHECK(pixels("p.pgm") == Bytes{0, 255, 0, 0, 255, 255, 255, 0, 0, 255, 255, 255});

  const Bytes same = pixels("t.pgm");
  for (std::size_t i = 0; i < 4; ++i) {
    const std::uint8_t* px = same.data() + 3 * i;
    const bool red = px[0] == 255 && px[1] == 0 && px[2] == 0;
    const bool cyan = px[0] == 0 && px[1] == 255 && px[2] == 255;
    CHECK_FALSE(red);
    CHECK_FALSE(cyan);
  }
  CHECK(same[6] == 128);  // background gray from the rescaled image
}

TEST_CASE("single point sweep matches eval") {
  test_support::TempDir dir("cli_sweep");
  const fs::path manifest = synth_corpus(dir, 4, 24, 0.15, 2);
  const auto s = run_cli({"sweep", "--manifest", manifest.string(), "--out", (dir / "sw").string()});
  REQUIRE(s.code == 0);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "pred").string()}).code == 0);
  REQUIRE(run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "pred").string(), "--out",
                   (dir / "ev").string()}).code == 0);
  const auto rows = read_json(dir / "sw" / "sweep.json");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]["mean_dsc"].get<double>() == read_json(dir / "ev" / "eval.json")["overall"]["mean"].get<double>());
  CHECK(rows[0]["w1"].get<double>() == 3.0);
}

TEST_CASE("sweep grid from config with a pinned flag") {
  test_support::TempDir dir("cli_sweep_grid");
  const fs::path manifest = synth_corpus(dir, 3, 16, 0.2);
  write_text(dir / "cfg.json", R"({"sweep": {"w1": [0, 3], "iterations": [0, 5]}})");
  const auto r = run_cli({"sweep", "--manifest", manifest.string(), "--config", (dir / "cfg.json").string(),
                          "--iterations", "5", "--out", (dir / "sw").string()});
  REQUIRE(r.code == 0);
  const auto rows = read_json(dir / "sw" / "sweep.json");
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) CHECK(row["iterations"].get<std::size_t>() == 5);
}

TEST_CASE("outputs are identical for any thread count") {
  test_support::TempDir dir("cli_threads");
  const fs::path manifest = synth_corpus(dir, 6, 24, 0.2, 2);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "p1").string(), "--threads", "1", "--dump-q"}).code == 0);
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--out", (dir / "p8").string(), "--threads", "8", "--dump-q"}).code == 0);
  for (const auto& entry : fs::recursive_directory_iterator(dir / "p1")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), dir / "p1");
    CHECK(read_file_bytes(entry.path()) == read_file_bytes(dir / "p8" / rel));
  }
  const auto e1 = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "p1").string(), "--threads", "1", "--out", (dir / "e1").string()});
  const auto e8 = run_cli({"eval", "--manifest", manifest.string(), "--pred", (dir / "p1").string(), "--threads", "8", "--out", (dir / "e8").string()});
  CHECK(e1.out == e8.out);
  CHECK(read_text(dir / "e1" / "eval.json") == read_text(dir / "e8" / "eval.json"));
}

TEST_CASE("config precedence") {
  test_support::TempDir dir("cli_config");
  {
    EnvGuard env("CRF_REFINE_THREADS", "3");
    CHECK(cli::default_config().threads == 3);
  }
  {
    EnvGuard env("CRF_REFINE_THREADS", "zero");
    CHECK(cli::default_config().threads == 1);
  }
  cli::RunConfig c = cli::default_config();
  CHECK(c.crf == CrfParams{});
  cli::apply_config_json(c, R"({"crf": {"w1": 5, "iterations": 3}, "threads": 2, "filter": "brute",
                                "hu_window": {"enabled": true, "center": 40, "width": 400}})");
  CHECK(c.crf.w1 == 5.0);
  CHECK(c.crf.iterations == 3);
  CHECK(c.crf.sigma_beta == 26.0);
  CHECK(c.threads == 2);
  CHECK(c.filter == FilterMode::BruteForce);
  CHECK(c.apply_window);
  CHECK(c.window.width == 400.0);
  CHECK_THROWS_AS(cli::apply_config_json(c, R"({"crf": {"w3": 1}})"), cli::ConfigError);
  CHECK_THROWS_AS(cli::apply_config_json(c, R"({"crf": {"iterations": -1}})"), cli::ConfigError);
  CHECK_THROWS_AS(cli::apply_config_json(c, R"({"sweep": {"w1": []}})"), cli::ConfigError);
  CHECK_THROWS_AS(cli::apply_config_json(c, "not json"), cli::ConfigError);

  // file beats environment; flag beats file
  const fs::path manifest = synth_corpus(dir, 2, 16, 0.3);
  write_text(dir / "cfg.json", R"({"crf": {"iterations": 0}, "out": ")" + (dir / "from_cfg").generic_string() + R"("})");
  EnvGuard env("CRF_REFINE_THREADS", "4");
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--config", (dir / "cfg.json").string()}).code == 0);
  const CaseManifest m = read_manifest(manifest);
  const auto s = cli::load_slice(m, 0, 0, cli::default_config());
  CHECK(read_pgm_mask(cli::prediction_path(dir / "from_cfg", m.cases[0].case_id, 0)) == argmax_labels(s.prob));
  REQUIRE(run_cli({"refine", "--manifest", manifest.string(), "--config", (dir / "cfg.json").string(),
                   "--iterations", "10", "--out", (dir / "from_flag").string()}).code == 0);
  CHECK(read_pgm_mask(cli::prediction_path(dir / "from_flag", m.cases[0].case_id, 0)) ==
        refine_segmentation(s.prob, s.image, CrfParams{}));
}

TEST_CASE("hu window from config is applied to images") {
  test_support::TempDir dir("cli_window");
  const fs::path manifest = synth_corpus(dir, 1, 16, 0.0);
  const CaseManifest m = read_manifest(manifest);
  cli::RunConfig c = cli::default_config();
  c.apply_window = true;
  c.window = {100.0, 100.0};
  const auto raw = cli::load_slice(m, 0, 0, cli::default_config());
  const auto windowed = cli::load_slice(m, 0, 0, c);
  CHECK(windowed.image == hu_window(16, 16, raw.image.intensity(), c.window));
}

TEST_CASE("usage errors exit with two") {
  test_support::TempDir dir("cli_usage");
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"bogus"}).code == 2);
  CHECK(run_cli({"refine"}).code == 2);
  CHECK(run_cli({"refine", "--manifest", "x.json", "--filter", "fast"}).code == 2);
  CHECK(run_cli({"synth", "--height", "8"}).code == 2);
  CHECK(run_cli({"folds", "--manifest", "x.json", "-k", "1"}).code == 2);
  const fs::path manifest = synth_corpus(dir, 2, 16, 0.1);
  CHECK(run_cli({"refine", "--manifest", manifest.string(), "--sigma-alpha", "0"}).code == 2);
  CHECK(run_cli({"refine", "--manifest", manifest.string(), "--floor", "1.5"}).code == 2);
  CHECK(run_cli({"refine", "--manifest", manifest.string(), "--config", (dir / "none.json").string()}).code == 2);
  write_text(dir / "bad.json", R"({"schema_version": 1, "cases": 4})");
  CHECK(run_cli({"refine", "--manifest", (dir / "bad.json").string()}).code == 2);
  CHECK(run_cli({"overlay", "--image", "a", "--pred", "b", "--truth", "c"}).code == 2);
  const auto help = run_cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("refine") != std::string::npos);
}

}  // TEST_SUITE
