#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>

#include "crf_refine/dense_crf.hpp"
#include "crf_refine/error.hpp"
#include "crf_refine/experiment.hpp"
#include "crf_refine/gaussian_filter.hpp"
#include "crf_refine/io_formats.hpp"
#include "crf_refine/metrics.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace crf_refine;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <typename T>
std::vector<T> copy_values(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<T>(a.data(), a.data() + a.size());
}

template <typename T>
py::array_t<T> to_array(std::span<const T> values, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

SliceImage image_from(const FloatArray& a) {
  if (a.ndim() != 2) throw InvalidInput("image must be a 2-D array (H, W)");
  return SliceImage(a.shape(0), a.shape(1), copy_values(a));
}

ProbabilityMap prob_from(const FloatArray& a) {
  if (a.ndim() != 3) throw InvalidInput("probabilities must be a 3-D array (H, W, L)");
  return ProbabilityMap(a.shape(0), a.shape(1), a.shape(2), copy_values(a));
}

LabelMask mask_from(const ByteArray& a, std::size_t labels) {
  if (a.ndim() != 2) throw InvalidInput("mask must be a 2-D array (H, W)");
  std::vector<std::uint8_t> v = copy_values(a);
  if (v.empty()) throw InvalidInput("mask must not be empty");
  if (labels == 0) labels = std::max<std::size_t>(2, *std::max_element(v.begin(), v.end()) + 1u);
  return LabelMask(a.shape(0), a.shape(1), labels, std::move(v));
}

py::array_t<std::uint8_t> mask_array(const LabelMask& m) {
  return to_array<std::uint8_t>(m.values(), {py::ssize_t(m.height()), py::ssize_t(m.width())});
}

py::array_t<float> prob_array(const ProbabilityMap& p) {
  return to_array<float>(p.values(), {py::ssize_t(p.height()), py::ssize_t(p.width()),
                                      py::ssize_t(p.labels())});
}

FilterMode mode_from(const std::string& s) {
  if (s == "lattice") return FilterMode::Lattice;
  if (s == "brute") return FilterMode::BruteForce;
  throw InvalidParameter("mode must be 'lattice' or 'brute'");
}

py::object tensor_array(const DenseTensor& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  switch (t.dtype()) {
    case DType::Float32: return to_array<float>(t.values<float>(), shape);
    case DType::UInt8: return to_array<std::uint8_t>(t.values<std::uint8_t>(), shape);
    case DType::UInt16: return to_array<std::uint16_t>(t.values<std::uint16_t>(), shape);
  }
  throw InvalidInput("unknown dtype");
}

DenseTensor tensor_from(const py::array& a) {
  std::vector<std::size_t> dims(a.shape(), a.shape() + a.ndim());
  if (py::isinstance<py::array_t<std::uint8_t>>(a))
    return DenseTensor(dims, copy_values(ByteArray::ensure(a)));
  if (py::isinstance<py::array_t<std::uint16_t>>(a)) {
    const auto u = py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>::ensure(a);
    return DenseTensor(dims, copy_values(u));
  }
  if (py::isinstance<py::array_t<float>>(a)) return DenseTensor(dims, copy_values(FloatArray::ensure(a)));
  throw InvalidInput("DTEN holds float32, uint8 or uint16 arrays only");
}

}  // namespace

PYBIND11_MODULE(_crf_refine, m) {
  m.doc() = "Dense-CRF refinement of segmentation probability maps, with Dice evaluation";

  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<InvalidParameter>(m, "InvalidParameter", PyExc_ValueError);
  py::register_exception<SizeError>(m, "SizeError", PyExc_ValueError);
  py::register_exception<UndefinedTest>(m, "UndefinedTest", PyExc_ArithmeticError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  py::class_<CrfParams>(m, "CrfParams")
      .def(py::init([](double w1, double w2, double sigma_alpha, double sigma_beta,
                       double sigma_gamma, std::size_t iterations) {
             CrfParams p{w1, w2, sigma_alpha, sigma_beta, sigma_gamma, iterations};
             p.validate();
             return p;
           }),
           "w1"_a = 3.0, "w2"_a = 0.0, "sigma_alpha"_a = 5.0, "sigma_beta"_a = 26.0,
           "sigma_gamma"_a = 3.0, "iterations"_a = 10)
      .def_readwrite("w1", &CrfParams::w1)
      .def_readwrite("w2", &CrfParams::w2)
      .def_readwrite("sigma_alpha", &CrfParams::sigma_alpha)
      .def_readwrite("sigma_beta", &CrfParams::sigma_beta)
      .def_readwrite("sigma_gamma", &CrfParams::sigma_gamma)
      .def_readwrite("iterations", &CrfParams::iterations)
      .def("validate", &CrfParams::validate)
      .def(py::self == py::self)
      .def("__repr__", [](const CrfParams& p) {
        return "CrfParams(w1=" + py::repr(py::float_(p.w1)).cast<std::string>() +
               ", w2=" + py::repr(py::float_(p.w2)).cast<std::string>() +
               ", sigma_alpha=" + py::repr(py::float_(p.sigma_alpha)).cast<std::string>() +
               ", sigma_beta=" + py::repr(py::float_(p.sigma_beta)).cast<std::string>() +
               ", sigma_gamma=" + py::repr(py::float_(p.sigma_gamma)).cast<std::string>() +
               ", iterations=" + std::to_string(p.iterations) + ")";
      });

  m.attr("DEFAULT_FLOOR") = kDefaultProbabilityFloor;

  m.def(
      "unary",
      [](const FloatArray& prob, double floor) {
        const UnaryField u = unary_from_probabilities(prob_from(prob), floor);
        return to_array<float>(u.values(), {py::ssize_t(u.height()), py::ssize_t(u.width()),
                                            py::ssize_t(u.labels())});
      },
      "prob"_a, "floor"_a = kDefaultProbabilityFloor,
      "Negative log of the floored probabilities, shape (H, W, L).");

  m.def(
      "mean_field",
      [](const FloatArray& prob, const FloatArray& image, const CrfParams& params, double floor,
         const std::string& mode) {
        const ProbabilityMap p = prob_from(prob);
        const SliceImage img = image_from(image);
        MeanFieldOptions opt;
        opt.mode = mode_from(mode);
        std::optional<ProbabilityMap> q;
        {
          py::gil_scoped_release release;
          q = mean_field_infer(unary_from_probabilities(p, floor), img, params, opt);
        }
        return prob_array(*q);
      },
      "prob"_a, "image"_a, "params"_a = CrfParams{}, "floor"_a = kDefaultProbabilityFloor,
      "mode"_a = "lattice", "Final mean-field marginals Q, shape (H, W, L).");

  m.def(
      "refine",
      [](const FloatArray& prob, const FloatArray& image, const CrfParams& params, double floor,
         const std::string& mode) {
        const ProbabilityMap p = prob_from(prob);
        const SliceImage img = image_from(image);
        RefineOptions opt;
        opt.floor = floor;
        opt.inference.mode = mode_from(mode);
        std::optional<LabelMask> mask;
        {
          py::gil_scoped_release release;
          mask = refine_segmentation(p, img, params, opt);
        }
        return mask_array(*mask);
      },
      "prob"_a, "image"_a, "params"_a = CrfParams{}, "floor"_a = kDefaultProbabilityFloor,
      "mode"_a = "lattice", "Refined label mask, shape (H, W), uint8.");

  m.def(
      "energy",
      [](const ByteArray& labels, const FloatArray& prob, const FloatArray& image,
         const CrfParams& params, double floor) {
        const ProbabilityMap p = prob_from(prob);
        return energy(mask_from(labels, p.labels()), unary_from_probabilities(p, floor),
                      image_from(image), params);
      },
      "labels"_a, "prob"_a, "image"_a, "params"_a = CrfParams{},
      "floor"_a = kDefaultProbabilityFloor, "Exact CRF energy of a labeling (small grids only).");

  m.def(
      "argmax",
      [](const FloatArray& prob) { return mask_array(argmax_labels(prob_from(prob))); }, "prob"_a);

  m.def(
      "softmax",
      [](const FloatArray& scores) {
        if (scores.ndim() != 3) throw InvalidInput("scores must be a 3-D array (H, W, L)");
        return prob_array(
            softmax_normalize(scores.shape(0), scores.shape(1), scores.shape(2), copy_values(scores)));
      },
      "scores"_a);

  m.def(
      "gaussian_filter",
      [](const FloatArray& image, const FloatArray& values, const std::string& kernel,
         const CrfParams& params, const std::string& mode) {
        if (values.ndim() != 3) throw InvalidInput("values must be a 3-D array (H, W, C)");
        KernelKind kind;
        if (kernel == "appearance")
          kind = KernelKind::Appearance;
        else if (kernel == "smoothness")
          kind = KernelKind::Smoothness;
        else
          throw InvalidParameter("kernel must be 'appearance' or 'smoothness'");
        const FeatureField feat = build_features(image_from(image), kind, params);
        const std::vector<float> v = copy_values(values);
        const std::size_t width = values.shape(2);
        std::vector<float> out;
        {
          py::gil_scoped_release release;
          out = mode_from(mode) == FilterMode::Lattice
                    ? lattice_filter(LatticeFilter(feat), v, width)
                    : brute_force_filter(feat, v, width);
        }
        return to_array<float>(out, {values.shape(0), values.shape(1), values.shape(2)});
      },
      "image"_a, "values"_a, "kernel"_a = "appearance", "params"_a = CrfParams{},
      "mode"_a = "lattice", "Unnormalized Gaussian kernel sum over all pixels.");

  m.def(
      "confusion",
      [](const ByteArray& pred, const ByteArray& truth, std::uint8_t positive_label) {
        const ConfusionCounts c = confusion(mask_from(pred, 0), mask_from(truth, 0), positive_label);
        return py::dict("tp"_a = c.tp, "tn"_a = c.tn, "fp"_a = c.fp, "fn"_a = c.fn);
      },
      "pred"_a, "truth"_a, "positive_label"_a = 1);

  m.def(
      "dice",
      [](const ByteArray& pred, const ByteArray& truth, std::uint8_t positive_label) {
        return dice(confusion(mask_from(pred, 0), mask_from(truth, 0), positive_label));
      },
      "pred"_a, "truth"_a, "positive_label"_a = 1, "Dice of one slice; 1.0 when both are empty.");

  m.def(
      "case_dice",
      [](const std::vector<ByteArray>& preds, const std::vector<ByteArray>& truths,
         std::uint8_t positive_label) {
        if (preds.size() != truths.size()) throw InvalidInput("one truth per prediction required");
        std::vector<LabelMask> p, t;
        for (std::size_t k = 0; k < preds.size(); ++k) {
          p.push_back(mask_from(preds[k], 0));
          t.push_back(mask_from(truths[k], 0));
        }
        std::vector<SlicePair> pairs;
        for (std::size_t k = 0; k < p.size(); ++k) pairs.push_back({&p[k], &t[k]});
        return case_dice("case", pairs, positive_label).dsc;
      },
      "preds"_a, "truths"_a, "positive_label"_a = 1,
      "Dice of the pooled confusion counts over all slices of a case.");

  m.def(
      "paired_t_test",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const TTestResult r = paired_t_test(a, b);
        return py::make_tuple(r.t, r.p, r.n);
      },
      "a"_a, "b"_a, "Two-tailed paired t-test; returns (t, p, n).");

  m.def(
      "assign_folds",
      [](std::vector<std::string> ids, std::size_t k, std::uint64_t seed) {
        return assign_folds(std::move(ids), k, seed).mapping;
      },
      "case_ids"_a, "k"_a = 5, "seed"_a = 42, "Seeded case-level fold assignment {case_id: fold}.");

  m.def(
      "hu_window",
      [](const FloatArray& raw, double center, double width) {
        if (raw.ndim() != 2) throw InvalidInput("raw HU must be a 2-D array (H, W)");
        const std::vector<float> v = copy_values(raw);
        const SliceImage img = hu_window(raw.shape(0), raw.shape(1), v, {center, width});
        return to_array<float>(img.intensity(), {raw.shape(0), raw.shape(1)});
      },
      "raw"_a, "center"_a = -500.0, "width"_a = 1500.0);

  m.def(
      "synth_fixture",
      [](std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width,
         double noise) {
        const Fixture f = synth_fixture(seed, index, height, width, noise);
        return py::dict("image"_a = to_array<float>(f.image.intensity(),
                                                    {py::ssize_t(height), py::ssize_t(width)}),
                        "prob"_a = prob_array(f.prob), "truth"_a = mask_array(f.truth),
                        "case_id"_a = f.case_id);
      },
      "seed"_a, "index"_a, "height"_a = 64, "width"_a = 64, "noise"_a = 0.05,
      "Synthetic (image, prob, truth) slice; deterministic per (seed, index).");

  m.def(
      "read_tensor", [](const std::filesystem::path& path) { return tensor_array(read_tensor(path)); },
      "path"_a);
  m.def(
      "write_tensor",
      [](const py::array& a, const std::filesystem::path& path) { write_tensor(tensor_from(a), path); },
      "array"_a, "path"_a);
  m.def(
      "read_pgm_mask",
      [](const std::filesystem::path& path) { return mask_array(read_pgm_mask(path)); }, "path"_a);
  m.def(
      "write_pgm_mask",
      [](const ByteArray& mask, const std::filesystem::path& path) {
        write_pgm_mask(mask_from(mask, 2), path);
      },
      "mask"_a, "path"_a);
}
