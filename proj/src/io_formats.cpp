#include "crf_refine/io_formats.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "json.hpp"

namespace crf_refine {

namespace fs = std::filesystem;
using Kind = ParseError::Kind;

Bytes read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(Kind::Io, ParseError::npos, "cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw ParseError(Kind::Io, ParseError::npos, "read failed: " + path.string());
  return bytes;
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(Kind::Io, ParseError::npos, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError(Kind::Io, ParseError::npos, "write failed: " + path.string());
}

// ---------------------------------------------------------------------- DTEN

namespace {

constexpr std::uint8_t kMagic[4] = {'D', 'T', 'E', 'N'};
constexpr std::uint8_t kVersion = 0x01;

void put_u32(Bytes& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::string at_offset(std::size_t offset) { return " at byte offset " + std::to_string(offset); }

}  // namespace

Bytes encode_tensor(const DenseTensor& t) {
  if (t.rank() > 255) throw InvalidInput("DTEN supports at most 255 dimensions");
  Bytes out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max())
      throw InvalidInput("DTEN extents must fit in 32 bits");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + t.element_count() * dtype_size(t.dtype()));
  std::visit(
      [&](const auto& v) {
        for (auto x : v) {
          using T = decltype(x);
          if constexpr (std::is_same_v<T, float>) {
            put_u32(out, std::bit_cast<std::uint32_t>(x));
          } else if constexpr (std::is_same_v<T, std::uint16_t>) {
            out.push_back(static_cast<std::uint8_t>(x & 0xFF));
            out.push_back(static_cast<std::uint8_t>(x >> 8));
          } else {
            out.push_back(x);
          }
        }
      },
      t.storage());
  return out;
}

TensorHeader decode_tensor_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ParseError(Kind::BadMagic, 0, "not a DTEN file: bad magic" + at_offset(0));
  if (bytes.size() < 5) throw ParseError(Kind::Truncated, 4, "truncated before version" + at_offset(4));
  if (bytes[4] != kVersion)
    throw ParseError(Kind::BadVersion, 4,
                     "unsupported DTEN version " + std::to_string(bytes[4]) + at_offset(4));
  if (bytes.size() < 6) throw ParseError(Kind::Truncated, 5, "truncated before dtype" + at_offset(5));
  TensorHeader h{};
  switch (bytes[5]) {
    case 0x01: h.dtype = DType::Float32; break;
    case 0x02: h.dtype = DType::UInt8; break;
    case 0x03: h.dtype = DType::UInt16; break;
    default:
      throw ParseError(Kind::BadDtype, 5, "unknown dtype code " + std::to_string(bytes[5]) + at_offset(5));
  }
  if (bytes.size() < 7) throw ParseError(Kind::Truncated, 6, "truncated before ndim" + at_offset(6));
  const std::size_t ndim = bytes[6];
  if (ndim == 0) throw ParseError(Kind::BadHeader, 6, "ndim must be >= 1" + at_offset(6));
  const std::size_t dims_end = 7 + 4 * ndim;
  if (bytes.size() < dims_end)
    throw ParseError(Kind::Truncated, bytes.size(),
                     "header truncated: extents need " + std::to_string(dims_end) + " bytes" +
                         at_offset(bytes.size()));
  std::size_t count = 1;
  for (std::size_t k = 0; k < ndim; ++k) {
    const std::size_t off = 7 + 4 * k;
    const std::size_t d = get_u32(bytes.data() + off);
    if (d == 0) throw ParseError(Kind::BadHeader, off, "zero extent" + at_offset(off));
    if (count > std::numeric_limits<std::size_t>::max() / 8 / d)
      throw ParseError(Kind::BadHeader, off, "element count overflows" + at_offset(off));
    count *= d;
    h.dims.push_back(d);
  }
  h.payload_offset = dims_end;
  return h;
}

DenseTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  TensorHeader h = decode_tensor_header(bytes);
  std::size_t count = 1;
  for (std::size_t d : h.dims) count *= d;
  const std::size_t expected_end = h.payload_offset + count * dtype_size(h.dtype);
  if (bytes.size() < expected_end)
    throw ParseError(Kind::Truncated, bytes.size(),
                     "payload truncated: expected " + std::to_string(expected_end) +
                         " bytes, data ends" + at_offset(bytes.size()));
  if (bytes.size() > expected_end)
    throw ParseError(Kind::TrailingBytes, expected_end,
                     "unexpected trailing data" + at_offset(expected_end));

  const std::uint8_t* p = bytes.data() + h.payload_offset;
  switch (h.dtype) {
    case DType::Float32: {
      std::vector<float> v(count);
      for (std::size_t k = 0; k < count; ++k) v[k] = std::bit_cast<float>(get_u32(p + 4 * k));
      return DenseTensor(std::move(h.dims), std::move(v));
    }
    case DType::UInt8:
      return DenseTensor(std::move(h.dims), std::vector<std::uint8_t>(p, p + count));
    case DType::UInt16: {
      std::vector<std::uint16_t> v(count);
      for (std::size_t k = 0; k < count; ++k)
        v[k] = static_cast<std::uint16_t>(p[2 * k] | (p[2 * k + 1] << 8));
      return DenseTensor(std::move(h.dims), std::move(v));
    }
  }
  throw ParseError(Kind::BadDtype, 5, "unknown dtype");
}

void write_tensor(const DenseTensor& t, const fs::path& path) {
  write_file_bytes(path, encode_tensor(t));
}

DenseTensor read_tensor(const fs::path& path) { return decode_tensor(read_file_bytes(path)); }

// ----------------------------------------------------------------- PGM / PPM

namespace {

class PnmCursor {
 public:
  explicit PnmCursor(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const std::uint8_t c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1'000'000'000)
        throw ParseError(Kind::BadHeader, start, std::string(what) + " too large" + at_offset(start));
      ++pos_;
    }
    if (pos_ == start) {
      if (pos_ >= bytes_.size())
        throw ParseError(Kind::Truncated, pos_, std::string("header ends before ") + what + at_offset(pos_));
      throw ParseError(Kind::BadHeader, pos_, std::string("expected ") + what + at_offset(pos_));
    }
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool is_space(std::uint8_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

Bytes pnm_header(char kind, std::size_t height, std::size_t width) {
  const std::string h = std::string("P") + kind + "\n" + std::to_string(width) + " " +
                        std::to_string(height) + "\n255\n";
  return Bytes(h.begin(), h.end());
}

std::size_t pnm_payload_size(const PnmHeader& h) {
  return h.width * h.height * (h.kind == '6' ? 3 : 1) * (h.maxval > 255 ? 2 : 1);
}

std::span<const std::uint8_t> pnm_payload(std::span<const std::uint8_t> bytes, const PnmHeader& h) {
  const std::size_t need = pnm_payload_size(h);
  if (bytes.size() - h.payload_offset < need)
    throw ParseError(Kind::Truncated, bytes.size(),
                     "pixel data truncated: expected " + std::to_string(h.payload_offset + need) +
                         " bytes, data ends" + at_offset(bytes.size()));
  if (bytes.size() - h.payload_offset > need)
    throw ParseError(Kind::TrailingBytes, h.payload_offset + need,
                     "unexpected trailing data" + at_offset(h.payload_offset + need));
  return bytes.subspan(h.payload_offset, need);
}

}  // namespace

PnmHeader decode_pnm_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P')
    throw ParseError(Kind::BadMagic, 0, "not a PNM file" + at_offset(0));
  if (bytes[1] != '5' && bytes[1] != '6') {
    if (bytes[1] == '2' || bytes[1] == '3')
      throw ParseError(Kind::UnsupportedFormat, 1, "ASCII PNM is not supported" + at_offset(1));
    throw ParseError(Kind::UnsupportedFormat, 1, "only binary P5/P6 are supported" + at_offset(1));
  }
  PnmHeader h{};
  h.kind = static_cast<char>(bytes[1]);
  PnmCursor cur(bytes);
  cur.advance();
  cur.advance();
  if (cur.pos() >= bytes.size() || !is_space(bytes[cur.pos()]) )
    throw ParseError(Kind::BadHeader, 2, "expected whitespace after magic" + at_offset(2));
  h.width = cur.number("width");
  h.height = cur.number("height");
  const std::size_t maxval_at = cur.pos();
  h.maxval = cur.number("maxval");
  if (h.width == 0 || h.height == 0)
    throw ParseError(Kind::BadHeader, maxval_at, "zero image dimension");
  if (h.maxval == 0 || h.maxval > 65535)
    throw ParseError(Kind::BadHeader, maxval_at, "maxval must be in [1, 65535]" + at_offset(maxval_at));
  if (cur.pos() >= bytes.size())
    throw ParseError(Kind::Truncated, cur.pos(), "header ends before pixel data" + at_offset(cur.pos()));
  if (!is_space(bytes[cur.pos()]))
    throw ParseError(Kind::BadHeader, cur.pos(), "expected whitespace after maxval" + at_offset(cur.pos()));
  h.payload_offset = cur.pos() + 1;
  return h;
}

Bytes encode_pgm_mask(const LabelMask& mask) {
  if (mask.labels() > 2) throw InvalidInput("PGM masks hold two labels only");
  Bytes out = pnm_header('5', mask.height(), mask.width());
  for (std::uint8_t v : mask.values()) out.push_back(v ? 255 : 0);
  return out;
}

LabelMask decode_pgm_mask(std::span<const std::uint8_t> bytes) {
  const PnmHeader h = decode_pnm_header(bytes);
  if (h.kind != '5') throw ParseError(Kind::UnsupportedFormat, 1, "mask must be a P5 graymap");
  if (h.maxval != 255)
    throw ParseError(Kind::UnsupportedFormat, h.payload_offset,
                     "mask maxval must be 255, got " + std::to_string(h.maxval));
  const auto px = pnm_payload(bytes, h);
  std::vector<std::uint8_t> labels(px.size());
  for (std::size_t k = 0; k < px.size(); ++k) {
    if (px[k] != 0 && px[k] < 128)
      throw ParseError(Kind::AmbiguousValue, h.payload_offset + k,
                       "ambiguous mask value " + std::to_string(px[k]) + at_offset(h.payload_offset + k));
    labels[k] = px[k] == 0 ? 0 : 1;
  }
  return LabelMask(h.height, h.width, 2, std::move(labels));
}

void write_pgm_mask(const LabelMask& mask, const fs::path& path) {
  write_file_bytes(path, encode_pgm_mask(mask));
}

LabelMask read_pgm_mask(const fs::path& path) { return decode_pgm_mask(read_file_bytes(path)); }

SliceImage decode_pgm_image(std::span<const std::uint8_t> bytes) {
  const PnmHeader h = decode_pnm_header(bytes);
  if (h.kind != '5') throw ParseError(Kind::UnsupportedFormat, 1, "image must be a P5 graymap");
  const auto px = pnm_payload(bytes, h);
  std::vector<float> v(h.width * h.height);
  if (h.maxval > 255) {
    for (std::size_t k = 0; k < v.size(); ++k)
      v[k] = static_cast<float>((px[2 * k] << 8) | px[2 * k + 1]);  // big-endian per netpbm
  } else {
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = px[k];
  }
  return SliceImage(h.height, h.width, std::move(v));
}

Bytes encode_ppm(std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != height * width * 3) throw InvalidInput("RGB buffer size mismatch");
  Bytes out = pnm_header('6', height, width);
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

SliceImage load_slice_image(const fs::path& path) {
  const Bytes bytes = read_file_bytes(path);
  if (path.extension() == ".pgm") return decode_pgm_image(bytes);
  return SliceImage::from_tensor(decode_tensor(bytes));
}

ProbabilityMap load_probability_map(const fs::path& path) {
  return ProbabilityMap::from_tensor(read_tensor(path));
}

LabelMask load_label_mask(const fs::path& path) {
  if (path.extension() == ".pgm") return read_pgm_mask(path);
  return LabelMask::from_tensor(read_tensor(path));
}

// ------------------------------------------------------------------ manifest

fs::path CaseManifest::resolve(const std::string& relative) const {
  const fs::path p(relative);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::string> CaseManifest::case_ids() const {
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  return ids;
}

namespace {

std::string summarize_issues(const std::vector<ManifestIssue>& issues) {
  std::string s = "manifest invalid:";
  for (const auto& i : issues) s += "\n  " + i.json_path + ": " + i.message;
  return s;
}

[[noreturn]] void schema_error(const std::string& json_path, const std::string& message) {
  throw ManifestError({{json_path, message, ParseError::npos, ParseError::npos}});
}

const nlohmann::json& require(const nlohmann::json& obj, const std::string& key,
                              const std::string& path) {
  const auto it = obj.find(key);
  if (it == obj.end()) schema_error(path + "/" + key, "required field missing");
  return *it;
}

std::string require_string(const nlohmann::json& obj, const std::string& key,
                           const std::string& path) {
  const auto& v = require(obj, key, path);
  if (!v.is_string()) schema_error(path + "/" + key, "expected a string");
  const auto& s = v.get_ref<const std::string&>();
  if (s.empty()) schema_error(path + "/" + key, "must not be empty");
  return s;
}

// (height, width[, labels]) of a slice input, read from its header only.
std::vector<std::size_t> probe_dims(const fs::path& path) {
  const Bytes bytes = read_file_bytes(path);
  if (path.extension() == ".pgm") {
    const PnmHeader h = decode_pnm_header(bytes);
    return {h.height, h.width};
  }
  return decode_tensor_header(bytes).dims;
}

}  // namespace

ManifestError::ManifestError(std::vector<ManifestIssue> issues)
    : ParseError(Kind::Schema, ParseError::npos, summarize_issues(issues)),
      issues_(std::move(issues)) {}

std::vector<ManifestIssue> check_manifest_files(const CaseManifest& manifest) {
  std::vector<ManifestIssue> issues;
  for (std::size_t c = 0; c < manifest.cases.size(); ++c) {
    const auto& kase = manifest.cases[c];
    for (std::size_t s = 0; s < kase.slices.size(); ++s) {
      const auto& slice = kase.slices[s];
      const std::string base = "/cases/" + std::to_string(c) + "/slices/" + std::to_string(s);
      auto probe = [&](const std::string& field,
                       const std::string& rel) -> std::optional<std::vector<std::size_t>> {
        try {
          return probe_dims(manifest.resolve(rel));
        } catch (const std::exception& e) {
          issues.push_back({base + "/" + field, rel + ": " + e.what(), c, s});
          return std::nullopt;
        }
      };
      const auto image = probe("image_path", slice.image_path);
      const auto prob = probe("prob_path", slice.prob_path);
      std::optional<std::vector<std::size_t>> truth;
      if (slice.truth_path) truth = probe("truth_path", *slice.truth_path);

      if (image && image->size() != 2)
        issues.push_back({base + "/image_path", "image must be 2-D", c, s});
      if (prob && prob->size() != 3)
        issues.push_back({base + "/prob_path", "probability tensor must be H x W x L", c, s});
      if (truth && truth->size() != 2)
        issues.push_back({base + "/truth_path", "truth mask must be 2-D", c, s});
      if (image && prob && image->size() == 2 && prob->size() == 3 &&
          ((*image)[0] != (*prob)[0] || (*image)[1] != (*prob)[1]))
        issues.push_back({base + "/prob_path",
                          "probability map is " + std::to_string((*prob)[0]) + "x" +
                              std::to_string((*prob)[1]) + " but image is " +
                              std::to_string((*image)[0]) + "x" + std::to_string((*image)[1]),
                          c, s});
      if (image && truth && image->size() == 2 && truth->size() == 2 && *image != *truth)
        issues.push_back({base + "/truth_path", "truth mask and image shapes disagree", c, s});
    }
  }
  return issues;
}

CaseManifest parse_manifest(std::string_view text, const fs::path& base_dir,
                            const ManifestOptions& options) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(Kind::Schema, e.byte, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) schema_error("", "manifest must be a JSON object");

  CaseManifest m;
  m.base_dir = base_dir;
  const auto& version = require(doc, "schema_version", "");
  if (!version.is_number_integer() || version.get<long long>() != kManifestSchemaVersion)
    schema_error("/schema_version", "expected " + std::to_string(kManifestSchemaVersion));

  const auto& cases = require(doc, "cases", "");
  if (!cases.is_array()) schema_error("/cases", "expected an array");
  std::set<std::string> seen;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const std::string cp = "/cases/" + std::to_string(c);
    const auto& jc = cases[c];
    if (!jc.is_object()) schema_error(cp, "expected an object");
    CaseEntry entry;
    entry.case_id = require_string(jc, "case_id", cp);
    if (!seen.insert(entry.case_id).second)
      schema_error(cp + "/case_id", "duplicate case_id '" + entry.case_id + "'");
    const auto& slices = require(jc, "slices", cp);
    if (!slices.is_array() || slices.empty()) schema_error(cp + "/slices", "expected a non-empty array");
    for (std::size_t s = 0; s < slices.size(); ++s) {
      const std::string sp = cp + "/slices/" + std::to_string(s);
      const auto& js = slices[s];
      if (!js.is_object()) schema_error(sp, "expected an object");
      SliceEntry slice;
      slice.image_path = require_string(js, "image_path", sp);
      slice.prob_path = require_string(js, "prob_path", sp);
      if (js.contains("truth_path")) slice.truth_path = require_string(js, "truth_path", sp);
      entry.slices.push_back(std::move(slice));
    }
    m.cases.push_back(std::move(entry));
  }

  if (doc.contains("folds")) {
    const auto& jf = doc["folds"];
    if (!jf.is_object()) schema_error("/folds", "expected an object");
    const auto& k = require(jf, "k", "/folds");
    if (!k.is_number_unsigned() || k.get<std::uint64_t>() < 2 || k.get<std::uint64_t>() > 1000)
      schema_error("/folds/k", "expected an integer in [2, 1000]");
    FoldAssignment fa;
    fa.k = k.get<std::size_t>();
    const auto& mapping = require(jf, "mapping", "/folds");
    if (!mapping.is_object()) schema_error("/folds/mapping", "expected an object");
    for (const auto& [id, fold] : mapping.items()) {
      const std::string fp = "/folds/mapping/" + id;
      if (!seen.contains(id)) schema_error(fp, "unknown case id");
      if (!fold.is_number_unsigned() || fold.get<std::uint64_t>() >= fa.k)
        schema_error(fp, "fold index must be an integer in [0, k)");
      fa.mapping.emplace(id, fold.get<std::size_t>());
    }
    for (const auto& id : seen)
      if (!fa.mapping.contains(id)) schema_error("/folds/mapping", "case '" + id + "' has no fold");
    m.folds = std::move(fa);
  }

  if (options.check_files) {
    auto issues = check_manifest_files(m);
    if (!issues.empty()) throw ManifestError(std::move(issues));
  }
  return m;
}

CaseManifest read_manifest(const fs::path& path, const ManifestOptions& options) {
  const Bytes bytes = read_file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  return parse_manifest(text, path.parent_path(), options);
}

std::string manifest_to_json(const CaseManifest& manifest) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = manifest.schema_version;
  doc["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : manifest.cases) {
    nlohmann::ordered_json jc;
    jc["case_id"] = c.case_id;
    jc["slices"] = nlohmann::ordered_json::array();
    for (const auto& s : c.slices) {
      nlohmann::ordered_json js;
      js["image_path"] = s.image_path;
      js["prob_path"] = s.prob_path;
      if (s.truth_path) js["truth_path"] = *s.truth_path;
      jc["slices"].push_back(std::move(js));
    }
    doc["cases"].push_back(std::move(jc));
  }
  if (manifest.folds) {
    nlohmann::ordered_json jf;
    jf["k"] = manifest.folds->k;
    jf["mapping"] = nlohmann::ordered_json::object();
    for (const auto& [id, fold] : manifest.folds->mapping) jf["mapping"][id] = fold;
    doc["folds"] = std::move(jf);
  }
  return doc.dump(2) + "\n";
}

void write_manifest(const CaseManifest& manifest, const fs::path& path) {
  const std::string text = manifest_to_json(manifest);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace crf_refine
