#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "crf_refine/error.hpp"
#include "crf_refine/io_formats.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace crf_refine;
namespace fs = std::filesystem;

namespace {

Bytes ascii(const std::string& s) { return Bytes(s.begin(), s.end()); }

template <class T>
std::vector<T> vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

Bytes pgm(std::size_t w, std::size_t h, std::size_t maxval, const Bytes& pixels) {
  Bytes out = ascii("P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
                    std::to_string(maxval) + "\n");
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

template <class Fn>
ParseError::Kind parse_kind(Fn&& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.kind();
  }
  FAIL("expected a parse error");
  return ParseError::Kind::Io;
}

template <class Fn>
std::size_t parse_offset(Fn&& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.offset();
  }
  FAIL("expected a parse error");
  return 0;
}

std::vector<ManifestIssue> manifest_issues(const std::string& text, const fs::path& base,
                                           bool check_files = false) {
  try {
    parse_manifest(text, base, {check_files});
  } catch (const ManifestError& e) {
    return e.issues();
  }
  return {};
}

void write_slice(const fs::path& dir, const std::string& stem, std::size_t h, std::size_t w,
                 std::size_t prob_h) {
  write_tensor(SliceImage(h, w, std::vector<float>(h * w, 10.0f)).to_tensor(),
               dir / (stem + "_img.dten"));
  write_tensor(ProbabilityMap(prob_h, w, 2, std::vector<float>(prob_h * w * 2, 0.5f)).to_tensor(),
               dir / (stem + "_prob.dten"));
  write_pgm_mask(LabelMask(h, w, 2, std::vector<std::uint8_t>(h * w, 0)),
                 dir / (stem + "_truth.pgm"));
}

std::string one_slice_manifest(const std::string& stem) {
  return R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": ")" +
         stem + R"(_img.dten", "prob_path": ")" + stem + R"(_prob.dten", "truth_path": ")" + stem +
         R"(_truth.pgm"}]}]})";
}

}  // namespace

TEST_SUITE("io_formats") {

TEST_CASE("tensor header bytes") {
  const DenseTensor t({3, 2}, std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6});
  const Bytes b = encode_tensor(t);
  const Bytes header = {0x44, 0x54, 0x45, 0x4E, 0x01, 0x02, 0x02, 0x03,
                        0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00};
  REQUIRE(b.size() == header.size() + 6);
  CHECK(Bytes(b.begin(), b.begin() + 15) == header);
  CHECK(Bytes(b.begin() + 15, b.end()) == Bytes{1, 2, 3, 4, 5, 6});
  const TensorHeader h = decode_tensor_header(b);
  CHECK(h.dtype == DType::UInt8);
  CHECK(h.dims == std::vector<std::size_t>{3, 2});
  CHECK(h.payload_offset == 15);
}

TEST_CASE("tensor payload is little endian") {
  const Bytes f = encode_tensor(DenseTensor({1}, std::vector<float>{1.0f}));
  CHECK(f[5] == 0x01);
  CHECK(Bytes(f.begin() + 11, f.end()) == Bytes{0x00, 0x00, 0x80, 0x3F});
  const Bytes u = encode_tensor(DenseTensor({1}, std::vector<std::uint16_t>{0x1234}));
  CHECK(u[5] == 0x03);
  CHECK(Bytes(u.begin() + 11, u.end()) == Bytes{0x34, 0x12});
}

TEST_CASE("tensor round trips bit exactly") {
  test_support::TempDir dir("dten");
  const auto vals = test_support::random_floats(2 * 3 * 4, 30, -1e6f, 1e6f);
  std::vector<float> special = {0.0f, -0.0f, 1e-40f, std::numeric_limits<float>::quiet_NaN()};
  const DenseTensor cases[] = {
      DenseTensor({2, 2}, std::vector<float>{1.5f, -2.25f, 3e-8f, 7.0f}),
      DenseTensor({2, 3, 4}, vals),
      DenseTensor({4}, special),
      DenseTensor({5, 1}, std::vector<std::uint16_t>{0, 1, 65535, 256, 42}),
      DenseTensor({1, 1, 1, 3}, std::vector<std::uint8_t>{0, 128, 255}),
  };
  for (const auto& t : cases) {
    CHECK(decode_tensor(encode_tensor(t)) == t);
    write_tensor(t, dir.path() / "t.dten");
    CHECK(read_tensor(dir.path() / "t.dten") == t);
  }
}

TEST_CASE("tensor parse errors name the offset") {
  const Bytes good = encode_tensor(DenseTensor({3, 2}, std::vector<std::uint8_t>(6, 9)));

  Bytes truncated(good.begin(), good.end() - 1);
  CHECK(parse_kind([&] { decode_tensor(truncated); }) == ParseError::Kind::Truncated);
  CHECK(parse_offset([&] { decode_tensor(truncated); }) == 20);

  Bytes magic = good;
  magic[0] = 'X';
  CHECK(parse_kind([&] { decode_tensor(magic); }) == ParseError::Kind::BadMagic);
  CHECK(parse_offset([&] { decode_tensor(magic); }) == 0);

  Bytes version = good;
  version[4] = 2;
  CHECK(parse_kind([&] { decode_tensor(version); }) == ParseError::Kind::BadVersion);
  CHECK(parse_offset([&] { decode_tensor(version); }) == 4);

  Bytes dtype = good;
  dtype[5] = 7;
  CHECK(parse_kind([&] { decode_tensor(dtype); }) == ParseError::Kind::BadDtype);
  CHECK(parse_offset([&] { decode_tensor(dtype); }) == 5);

  Bytes trailing = good;
  trailing.push_back(0);
  CHECK(parse_kind([&] { decode_tensor(trailing); }) == ParseError::Kind::TrailingBytes);
  CHECK(parse_offset([&] { decode_tensor(trailing); }) == 21);

  Bytes header_cut(good.begin(), good.begin() + 9);
  CHECK(parse_kind([&] { decode_tensor(header_cut); }) == ParseError::Kind::Truncated);

  Bytes zero_dim = good;
  zero_dim[6] = 0;
  CHECK(parse_kind([&] { decode_tensor(zero_dim); }) == ParseError::Kind::BadHeader);

  Bytes zero_extent = good;
  zero_extent[7] = 0;
  CHECK(parse_kind([&] { decode_tensor(zero_extent); }) == ParseError::Kind::BadHeader);
  CHECK(parse_offset([&] { decode_tensor(zero_extent); }) == 7);

  CHECK(parse_kind([&] { decode_tensor(Bytes{}); }) == ParseError::Kind::BadMagic);
}

TEST_CASE("tensor file errors") {
  test_support::TempDir dir("dten_missing");
  CHECK(parse_kind([&] { read_tensor(dir.path() / "absent.dten"); }) == ParseError::Kind::Io);
}

TEST_CASE("pgm mask thresholds") {
  CHECK(vec(decode_pgm_mask(pgm(2, 2, 255, {255, 255, 255, 255})).values()) ==
        std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(vec(decode_pgm_mask(pgm(3, 1, 255, {0, 128, 200})).values()) ==
        std::vector<std::uint8_t>{0, 1, 1});
  const Bytes amb = pgm(2, 1, 255, {0, 100});
  CHECK(parse_kind([&] { decode_pgm_mask(amb); }) == ParseError::Kind::AmbiguousValue);
  CHECK(parse_offset([&] { decode_pgm_mask(amb); }) == pgm(2, 1, 255, {}).size() + 1);
  CHECK(parse_kind([&] { decode_pgm_mask(pgm(1, 1, 255, {127})); }) ==
        ParseError::Kind::AmbiguousValue);
}

TEST_CASE("pgm mask format errors") {
  CHECK(parse_kind([&] { decode_pgm_mask(ascii("P2\n1 1\n255\n0\n")); }) ==
        ParseError::Kind::UnsupportedFormat);
  CHECK(parse_kind([&] { decode_pgm_mask(pgm(1, 1, 15, {0})); }) ==
        ParseError::Kind::UnsupportedFormat);
  CHECK(parse_kind([&] { decode_pgm_mask(ascii("JUNK")); }) == ParseError::Kind::BadMagic);
  CHECK(parse_kind([&] { decode_pgm_mask(pgm(2, 2, 255, {0, 0, 0})); }) ==
        ParseError::Kind::Truncated);
  CHECK(parse_kind([&] { decode_pgm_mask(pgm(1, 1, 255, {0, 0})); }) ==
        ParseError::Kind::TrailingBytes);
  Bytes rgb = ascii("P6\n1 1\n255\n");
  rgb.insert(rgb.end(), {0, 0, 0});
  CHECK(parse_kind([&] { decode_pgm_mask(rgb); }) == ParseError::Kind::UnsupportedFormat);
}

TEST_CASE("pgm header comments and whitespace") {
  Bytes b = ascii("P5 # a comment\n  3\t# width\n2\n255\n");
  b.insert(b.end(), {0, 255, 0, 255, 0, 255});
  const PnmHeader h = decode_pnm_header(b);
  CHECK(h.kind == '5');
  CHECK(h.width == 3);
  CHECK(h.height == 2);
  CHECK(decode_pgm_mask(b).at(1, 0) == 1);
}

TEST_CASE("pgm mask round trip") {
  test_support::TempDir dir("pgm");
  std::mt19937 rng(31);
  std::vector<std::uint8_t> v(7 * 5);
  for (auto& x : v) x = rng() & 1;
  const LabelMask m(7, 5, 2, v);
  const Bytes enc = encode_pgm_mask(m);
  CHECK(Bytes(enc.begin(), enc.begin() + 11) == ascii("P5\n5 7\n255\n"));
  for (std::size_t k = 0; k < v.size(); ++k) CHECK(enc[11 + k] == (v[k] ? 255 : 0));
  write_pgm_mask(m, dir.path() / "m.pgm");
  CHECK(read_pgm_mask(dir.path() / "m.pgm") == m);
  CHECK(load_label_mask(dir.path() / "m.pgm") == m);
  CHECK_THROWS_AS(encode_pgm_mask(LabelMask(1, 1, 3, {2})), InvalidInput);
}

TEST_CASE("pgm images keep raw intensities") {
  const SliceImage img = decode_pgm_image(pgm(3, 1, 255, {0, 100, 255}));
  CHECK(img.intensity()[1] == 100.0f);
  Bytes wide = ascii("P5\n2 1\n65535\n");
  wide.insert(wide.end(), {0x01, 0x02, 0xFF, 0xFF});
  const SliceImage w = decode_pgm_image(wide);
  CHECK(w.intensity()[0] == 258.0f);
  CHECK(w.intensity()[1] == 65535.0f);
}

TEST_CASE("ppm encoding") {
  const Bytes p = encode_ppm(1, 2, std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6});
  CHECK(p == [] {
    Bytes b = ascii("P6\n2 1\n255\n");
    b.insert(b.end(), {1, 2, 3, 4, 5, 6});
    return b;
  }());
  CHECK_THROWS_AS(encode_ppm(1, 2, std::vector<std::uint8_t>(5)), InvalidInput);
}

TEST_CASE("slice loaders dispatch on extension") {
  test_support::TempDir dir("load");
  write_file_bytes(dir.path() / "i.pgm", pgm(2, 1, 255, {7, 9}));
  CHECK(load_slice_image(dir.path() / "i.pgm").intensity()[1] == 9.0f);
  const ProbabilityMap p(1, 2, 2, {0.25f, 0.75f, 1.0f, 0.0f});
  write_tensor(p.to_tensor(), dir.path() / "p.dten");
  CHECK(load_probability_map(dir.path() / "p.dten") == p);
  write_tensor(DenseTensor({1, 2}, std::vector<std::uint8_t>{0, 1}), dir.path() / "m.dten");
  CHECK(load_label_mask(dir.path() / "m.dten").values()[1] == 1);
}

TEST_CASE("minimal manifest parses") {
  const auto m = parse_manifest(
      R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": "a.dten", "prob_path": "p.dten"}]}]})",
      "/data", {false});
  REQUIRE(m.cases.size() == 1);
  CHECK(m.cases[0].case_id == "A");
  CHECK_FALSE(m.cases[0].slices[0].truth_path.has_value());
  CHECK(m.resolve("a.dten") == fs::path("/data/a.dten"));
  CHECK(m.resolve("/abs/x.dten") == fs::path("/abs/x.dten"));
  CHECK_FALSE(m.folds.has_value());
}

TEST_CASE("manifest schema errors name the json path") {
  const fs::path base = "/data";
  auto path_of = [&](const std::string& text) {
    const auto issues = manifest_issues(text, base);
    REQUIRE(issues.size() == 1);
    return issues[0].json_path;
  };
  CHECK(path_of(R"({"cases": []})") == "/schema_version");
  CHECK(path_of(R"({"schema_version": 2, "cases": []})") == "/schema_version");
  CHECK(path_of(R"({"schema_version": 1, "cases": {}})") == "/cases");
  CHECK(path_of(R"({"schema_version": 1, "cases": [{"slices": []}]})") == "/cases/0/case_id");
  CHECK(path_of(R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": []}]})") ==
        "/cases/0/slices");
  CHECK(path_of(R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": "a", "prob_path": 3}]}]})") ==
        "/cases/0/slices/0/prob_path");
  CHECK(path_of(R"({"schema_version": 1, "cases": [
      {"case_id": "A", "slices": [{"image_path": "a", "prob_path": "p"}]},
      {"case_id": "A", "slices": [{"image_path": "b", "prob_path": "q"}]}]})") ==
        "/cases/1/case_id");
  CHECK(path_of(R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": "a", "prob_path": "p"}]}],
      "folds": {"k": 2, "mapping": {"A": 5}}})") == "/folds/mapping/A");
  CHECK(path_of(R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": "a", "prob_path": "p"}]}],
      "folds": {"k": 2, "mapping": {"A": 0, "B": 1}}})") == "/folds/mapping/B");
  CHECK(path_of(R"([1, 2])") == "");
}

TEST_CASE("manifest that is not json reports a byte offset") {
  CHECK(parse_kind([] { parse_manifest(R"({"schema_version": 1,, })", "/", {false}); }) ==
        ParseError::Kind::Schema);
  CHECK(parse_offset([] { parse_manifest(R"({"schema_version": 1,, })", "/", {false}); }) == 22);
}

TEST_CASE("manifest file checks") {
  test_support::TempDir dir("manifest");
  write_slice(dir.path(), "ok", 4, 5, 4);
  write_file_bytes(dir.path() / "m.json", ascii(one_slice_manifest("ok")));
  const auto m = read_manifest(dir.path() / "m.json");
  CHECK(m.base_dir == dir.path());
  CHECK(check_manifest_files(m).empty());

  write_slice(dir.path(), "bad", 4, 5, 3);
  const auto dims = manifest_issues(one_slice_manifest("bad"), dir.path(), true);
  REQUIRE(dims.size() == 1);
  CHECK(dims[0].json_path == "/cases/0/slices/0/prob_path");
  CHECK(dims[0].case_index == 0);

  const auto missing = manifest_issues(one_slice_manifest("nothere"), dir.path(), true);
  CHECK(missing.size() == 3);
  CHECK(missing[0].json_path == "/cases/0/slices/0/image_path");
  CHECK(missing[2].json_path == "/cases/0/slices/0/truth_path");
  CHECK_NOTHROW(parse_manifest(one_slice_manifest("nothere"), dir.path(), {false}));
}

TEST_CASE("manifest round trip") {
  CaseManifest m;
  m.cases = {{"B", {{"b0.dten", "b0p.dten", "b0t.pgm"}, {"b1.dten", "b1p.dten", std::nullopt}}},
             {"A", {{"a0.pgm", "a0p.dten", std::nullopt}}}};
  FoldAssignment folds;
  folds.k = 2;
  folds.mapping = {{"A", 1}, {"B", 0}};
  m.folds = folds;
  const std::string text = manifest_to_json(m);
  const auto back = parse_manifest(text, "", {false});
  CHECK(manifest_to_json(back) == text);
  CHECK(back.case_ids() == std::vector<std::string>{"B", "A"});
  CHECK(back.cases[0].slices[0].truth_path == std::optional<std::string>("b0t.pgm"));
  REQUIRE(back.folds.has_value());
  CHECK(back.folds->mapping == folds.mapping);

  test_support::TempDir dir("manifest_rt");
  write_manifest(m, dir.path() / "m.json");
  CHECK(manifest_to_json(read_manifest(dir.path() / "m.json", {false})) == text);
}

TEST_CASE("parsers reject arbitrary bytes without crashing") {
  std::mt19937 rng(32);
  const Bytes seeds[] = {
      encode_tensor(DenseTensor({3, 4}, std::vector<float>(12, 0.5f))),
      pgm(4, 3, 255, Bytes(12, 255)),
      ascii(R"({"schema_version": 1, "cases": [{"case_id": "A", "slices": [{"image_path": "a", "prob_path": "p"}]}]})"),
  };
  for (int iter = 0; iter < 3000; ++iter) {
    Bytes b;
    if (iter % 3 == 0) {
      b.resize(rng() % 64);
      for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    } else {
      b = seeds[rng() % 3];
      const int edits = 1 + rng() % 4;
      for (int e = 0; e < edits && !b.empty(); ++e) {
        switch (rng() % 3) {
          case 0: b[rng() % b.size()] = static_cast<std::uint8_t>(rng()); break;
          case 1: b.resize(rng() % b.size()); break;
          default: b.insert(b.begin() + rng() % (b.size() + 1), static_cast<std::uint8_t>(rng()));
        }
      }
    }
    auto guard = [&](auto&& fn) {
      try {
        fn();
      } catch (const ParseError&) {
      } catch (const InvalidInput&) {
      }
    };
    guard([&] { decode_tensor(b); });
    guard([&] { decode_pgm_mask(b); });
    guard([&] { decode_pgm_image(b); });
    guard([&] { parse_manifest(std::string(b.begin(), b.end()), "", {false}); });
  }
  // a header claiming a huge payload must not allocate it
  Bytes huge = {0x44, 0x54, 0x45, 0x4E, 0x01, 0x01, 0x01, 0xFF, 0xFF, 0xFF, 0xFF};
  CHECK(parse_kind([&] { decode_tensor(huge); }) == ParseError::Kind::Truncated);
  Bytes overflow = {0x44, 0x54, 0x45, 0x4E, 0x01, 0x01, 0x03, 0xFF, 0xFF, 0xFF, 0xFF,
                    0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF, 0xFF};
  CHECK(parse_kind([&] { decode_tensor(overflow); }) == ParseError::Kind::BadHeader);
  CHECK(parse_kind([&] { decode_pgm_mask(ascii("P5\n99999999 99999999\n255\n")); }) ==
        ParseError::Kind::Truncated);
}

}  // TEST_SUITE
