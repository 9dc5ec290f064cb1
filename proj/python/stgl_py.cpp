// Python bindings. Images cross the boundary as float64 numpy arrays shaped
// (H, W) or (H, W, C) in [0, 1]; descriptors as float32 (N, D).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "stgl/enhance.hpp"
#include "stgl/error.hpp"
#include "stgl/evalkit.hpp"
#include "stgl/mining.hpp"
#include "stgl/pipeline.hpp"
#include "stgl/retrieval.hpp"
#include "stgl/sgm.hpp"
#include "stgl/synthmap.hpp"

namespace py = pybind11;
using namespace stgl;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

Image to_image(const F64& a) {
    if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("image must be (H, W) or (H, W, C)");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    Image img(c, h, w);
    const double* src = a.data();
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col)
            for (int ch = 0; ch < c; ++ch) img.at(ch, r, col) = src[(static_cast<std::size_t>(r) * w + col) * c + ch];
    return img;
}

F64 from_image(const Image& img) {
    std::vector<py::ssize_t> shape{img.height, img.width};
    if (img.channels > 1) shape.push_back(img.channels);
    F64 out(shape);
    double* dst = out.mutable_data();
    for (int r = 0; r < img.height; ++r)
        for (int col = 0; col < img.width; ++col)
            for (int ch = 0; ch < img.channels; ++ch)
                dst[(static_cast<std::size_t>(r) * img.width + col) * img.channels + ch] = img.at(ch, r, col);
    return out;
}

std::vector<float> rows_of(const F32& a, int& dim) {
    if (a.ndim() != 2) throw py::value_error("descriptors must be (N, D)");
    dim = static_cast<int>(a.shape(1));
    return {a.data(), a.data() + a.size()};
}

std::vector<Vec2> positions_of(const F64& a) {
    if (a.ndim() != 2 || a.shape(1) != 2) throw py::value_error("positions must be (N, 2)");
    std::vector<Vec2> out;
    for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back({a.at(i, 0), a.at(i, 1)});
    return out;
}

std::span<const float> query_of(const F32& q) {
    if (q.ndim() != 1) throw py::value_error("query must be a 1-d descriptor");
    return {q.data(), static_cast<std::size_t>(q.size())};
}

py::list neighbors(const RetrievalResult& r) {
    py::list out;
    for (const auto& n : r.neighbors) {
        out.append(py::dict(py::arg("tile_id") = n.tile_id, py::arg("x") = n.position.x, py::arg("y") = n.position.y,
                            py::arg("distance") = n.distance));
    }
    return out;
}

std::vector<sgm::Descriptor> descriptors_of(const F32& a) {
    int dim = 0;
    const auto flat = rows_of(a, dim);
    std::vector<sgm::Descriptor> out(a.shape(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i].values.assign(flat.begin() + i * dim, flat.begin() + (i + 1) * dim);
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Satellite-thermal geo-localization core";

    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

    m.def(
        "contrast_enhance", [](const F64& img, double factor) { return from_image(contrast_enhance(to_image(img), factor)); },
        py::arg("image"), py::arg("factor") = 3.0, "Scale intensities about the image mean, clipped to [0, 1].");

    m.def(
        "generate_world",
        [](std::uint64_t seed, int height, int width, double meters_per_pixel) {
            WorldSpec spec;
            spec.seed = seed;
            spec.height = height;
            spec.width = width;
            spec.meters_per_pixel = meters_per_pixel;
            const auto w = generate_world(spec);
            return py::make_tuple(from_image(w.satellite.pixels), from_image(w.thermal.pixels));
        },
        py::arg("seed") = 0, py::arg("height") = 256, py::arg("width") = 256, py::arg("meters_per_pixel") = 1.0,
        "Synthetic co-registered (satellite RGB, thermal) pair.");

    m.def(
        "tile_offsets",
        [](int height, int width, int crop, int stride) {
            RasterMap map;
            map.pixels = Image(1, height, width);
            std::vector<std::pair<int, int>> out;
            for (const auto& t : tile_map(map, crop, stride)) out.emplace_back(t.offset.row, t.offset.col);
            return out;
        },
        py::arg("height"), py::arg("width"), py::arg("crop"), py::arg("stride"),
        "Top-left pixel offsets of every fully contained crop, row-major.");

    py::class_<DescriptorIndex>(m, "DescriptorIndex")
        .def(py::init([](const F32& descriptors, const F64& positions, std::vector<std::int64_t> ids,
                         std::string fingerprint) {
                 int dim = 0;
                 auto flat = rows_of(descriptors, dim);
                 return make_index(dim, std::move(flat), positions_of(positions), std::move(ids), std::move(fingerprint));
             }),
             py::arg("descriptors"), py::arg("positions"), py::arg("tile_ids"), py::arg("fingerprint") = "")
        .def_static("load", &load_index, py::arg("path"))
        .def("save", [](const DescriptorIndex& idx, const std::filesystem::path& p) { save_index(idx, p); }, py::arg("path"))
        .def("__len__", &DescriptorIndex::size)
        .def_readonly("c_final", &DescriptorIndex::c_final)
        .def_readonly("tile_ids", &DescriptorIndex::tile_ids)
        .def_readonly("model_fingerprint", &DescriptorIndex::model_fingerprint)
        .def("knn", [](const DescriptorIndex& idx, const F32& q, int k) { return neighbors(knn(idx, query_of(q), k)); },
             py::arg("query"), py::arg("k") = 5)
        .def(
            "knn_within",
            [](const DescriptorIndex& idx, const F32& q, int k, std::pair<double, double> center, double radius) {
                return neighbors(knn_within(idx, query_of(q), k, {center.first, center.second}, radius));
            },
            py::arg("query"), py::arg("k"), py::arg("center"), py::arg("radius_m") = kPriorRadiusM);

    m.def(
        "evaluate",
        [](const DescriptorIndex& idx, const F32& queries, const F64& truths, std::vector<int> ns,
           std::vector<int> radii) {
            const auto rep = evaluate(idx, descriptors_of(queries), positions_of(truths), ns, radii);
            py::dict r_at, r_prior, l2;
            for (auto [n, v] : rep.r_at) r_at[py::int_(n)] = v;
            for (auto [key, v] : rep.r_prior_at) r_prior[py::make_tuple(key.first, key.second)] = v;
            for (auto [d, v] : rep.l2_prior) l2[py::int_(d)] = v;
            return py::dict(py::arg("r_at") = r_at, py::arg("r_prior_at") = r_prior, py::arg("l2_prior") = l2,
                            py::arg("skipped") = rep.skipped, py::arg("per_query_errors") = rep.per_query_errors);
        },
        py::arg("index"), py::arg("queries"), py::arg("truths"), py::arg("ns") = std::vector<int>{1, 5},
        py::arg("prior_radii") = std::vector<int>{512}, "Recall (percent) and prior-restricted Top-1 error (meters).");

    m.def(
        "mine_triplets",
        [](const F32& query, std::pair<double, double> qpos, const F32& cache_desc, const F64& positions,
           std::vector<std::int64_t> ids, double pos_radius, double neg_radius, int n_neg) -> py::object {
            const auto cache = make_cache(descriptors_of(cache_desc), positions_of(positions), std::move(ids));
            const auto b = mine_triplets(query_of(query), {qpos.first, qpos.second}, cache, pos_radius, neg_radius, n_neg);
            if (!b) return py::none();
            return py::dict(py::arg("positive") = b->positive_id, py::arg("negatives") = b->negative_ids);
        },
        py::arg("query"), py::arg("query_position"), py::arg("descriptors"), py::arg("positions"), py::arg("tile_ids"),
        py::arg("pos_radius_m") = 35.0, py::arg("neg_radius_m") = 50.0, py::arg("n_neg") = 10,
        "Hardest positive and negatives, or None when no positive is in range.");

    py::class_<sgm::SgmNetwork>(m, "SgmNetwork")
        .def_static(
            "load", [](const std::filesystem::path& p) { return sgm::load_sgm(p); }, py::arg("path"))
        .def_static(
            "create",
            [](const std::string& preset, std::uint64_t seed) {
                auto cfg = preset == "full" ? sgm::SgmConfig::full() : sgm::SgmConfig::desk();
                if (preset != "full" && preset != "desk") throw InputError("unknown preset '" + preset + "'");
                cfg.seed = seed;
                return std::make_unique<sgm::SgmNetwork>(cfg);
            },
            py::arg("preset") = "desk", py::arg("seed") = 0)
        .def_property_readonly("c_final", [](sgm::SgmNetwork& n) { return n.config().c_final; })
        .def(
            "embed",
            [](sgm::SgmNetwork& n, const F64& img) {
                const auto d = sgm::embed(n, to_image(img));
                return F32(static_cast<py::ssize_t>(d.values.size()), d.values.data());
            },
            py::arg("image"), "Unit-norm descriptor of one crop (sides divisible by 16).");

    m.def(
        "experiment_config",
        [](const std::string& preset) {
            const auto c = preset == "full" ? pipeline::ExperimentConfig::full() : pipeline::ExperimentConfig::desk();
            if (preset != "full" && preset != "desk") throw InputError("unknown preset '" + preset + "'");
            return py::module_::import("json").attr("loads")(nlohmann::json(c).dump());
        },
        py::arg("preset") = "desk", "Experiment config defaults as a dict.");
}
