#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gramsmear/alserver.hpp"
#include "gramsmear/error.hpp"
#include "gramsmear/evaluate.hpp"
#include "gramsmear/imaging.hpp"
#include "gramsmear/synthsmear.hpp"

namespace py = pybind11;
using namespace gramsmear;

namespace {

using ImageArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using MaskArray = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

RasterImage to_image(const ImageArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image must be an (H, W, 3) uint8 array");
  RasterImage img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

InstanceMask to_mask(const MaskArray& a) {
  if (a.ndim() != 2) throw ShapeError("mask must be an (H, W) array");
  InstanceMask m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), m.labels.begin());
  return m;
}

MaskArray from_mask(const InstanceMask& m) {
  MaskArray out({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

SegmenterParams params(double threshold, int min_area, int max_area, int connectivity) {
  SegmenterParams p{threshold, min_area, max_area, connectivity};
  validate(p);
  return p;
}

DatasetSpec spec_for(const std::string& mode) {
  return mode_from_string(mode) == Mode::bacteria ? DatasetSpec::default_bacteria() : DatasetSpec::default_fungi();
}

}  // namespace

PYBIND11_MODULE(_gramsmear, m) {
  m.doc() = "Gram-smear segmentation, MIL classification and evaluation";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "segment",
      [](const ImageArray& image, double threshold, int min_area, int max_area, int connectivity, int tile_size) {
        const auto img = to_image(image);
        const auto p = params(threshold, min_area, max_area, connectivity);
        InstanceMask mask;
        {
          py::gil_scoped_release release;
          mask = tile_size > 0 ? segment_tiled(img, p, tile_size) : segment_baseline(img, p);
        }
        return from_mask(mask);
      },
      py::arg("image"), py::arg("threshold") = 60.0, py::arg("min_area") = 12, py::arg("max_area") = 1 << 20,
      py::arg("connectivity") = 8, py::arg("tile_size") = 1024);

  m.def("relabel", [](const MaskArray& mask) { return from_mask(relabel_raster_order(to_mask(mask))); }, py::arg("mask"));
  m.def(
      "mask_diameter", [](const MaskArray& mask, std::uint32_t id) { return mask_diameter(to_mask(mask), id); }, py::arg("mask"),
      py::arg("instance"));
  m.def(
      "filter_by_diameter",
      [](const MaskArray& mask, double max_diameter) { return from_mask(filter_by_diameter(to_mask(mask), max_diameter)); },
      py::arg("mask"), py::arg("max_diameter") = 400.0);

  m.def(
      "roc_auc_ovr",
      [](const std::vector<std::vector<double>>& scores, const std::vector<int>& labels, int categories) {
        const auto r = roc_auc_ovr(scores, labels, categories);
        return py::make_tuple(r.per_category, r.macro);
      },
      py::arg("scores"), py::arg("labels"), py::arg("categories"));

  m.def(
      "matched_iou", [](const MaskArray& gt, const MaskArray& pred) { return matched_iou(to_mask(gt), to_mask(pred)); },
      py::arg("gt"), py::arg("pred"));

  m.def("default_spec_json", [](const std::string& mode) { return to_json(spec_for(mode)).dump(); }, py::arg("mode") = "bacteria");

  m.def(
      "synth",
      [](const std::filesystem::path& out, const std::string& spec_json, std::optional<std::uint64_t> seed, int threads) {
        auto spec = dataset_spec_from_json(nlohmann::json::parse(spec_json));
        if (seed) spec.seed = *seed;
        py::gil_scoped_release release;
        return generate_dataset(spec, out, threads).entries.size();
      },
      py::arg("out"), py::arg("spec_json"), py::arg("seed") = std::nullopt, py::arg("threads") = 1);

  m.def(
      "crossval",
      [](const std::filesystem::path& manifest_path, std::uint64_t seed, std::optional<int> epochs, int threads,
         std::optional<std::filesystem::path> out) {
        const auto manifest = read_manifest(manifest_path);
        auto model = ModelConfig::defaults(manifest.mode);
        model.categories = manifest.category_count();
        auto train = TrainConfig::defaults(manifest.mode);
        train.seed = seed;
        train.threads = threads;
        if (epochs) train.epochs = *epochs;
        LoadOptions load;
        load.threads = threads;
        load.context_margin = train.augment.translate_jitter;
        py::gil_scoped_release release;
        const auto bags = load_bags(manifest, manifest_path.parent_path(), load);
        const auto report = crossval(manifest, bags, model, train, CrossvalOptions{3, seed});
        if (out) write_report_bundle(*out, report);
        return to_json(report).dump();
      },
      py::arg("manifest"), py::arg("seed") = 0, py::arg("epochs") = std::nullopt, py::arg("threads") = 1,
      py::arg("out") = std::nullopt);
}
