#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "peftqa/adapters.hpp"
#include "peftqa/bench.hpp"
#include "peftqa/errors.hpp"
#include "peftqa/evaluation.hpp"
#include "peftqa/quantization.hpp"

namespace py = pybind11;
using namespace peftqa;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Shape shape_of(const FloatArray& a) { return Shape(a.shape(), a.shape() + a.ndim()); }

py::array_t<float> to_numpy(const Tensor& t) {
    py::array_t<float> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::dict row_dict(const GridRow& r) {
    py::dict d;
    d["method"] = r.method;
    d["lr"] = r.lr;
    d["epochs"] = r.epochs;
    d["preset"] = r.preset;
    d["f1"] = r.f1;
    d["em"] = r.em;
    d["time_s"] = r.time_s;
    d["peak_bytes"] = r.peak_bytes;
    d["status"] = r.status;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "NF4 quantization, QA metrics, fixture analysis and training cells";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<IndexError>(m, "IndexError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<StateError>(m, "StateError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<UnsupportedError>(m, "UnsupportedError", base.ptr());
    py::register_exception<CoverageError>(m, "CoverageError", base.ptr());
    py::register_exception<UsageError>(m, "UsageError", base.ptr());
    py::register_exception<DecodeError>(m, "DecodeError", base.ptr());

    m.def("nf4_codebook", [] {
        const auto& v = nf4_codebook().values();
        return std::vector<float>(v.begin(), v.end());
    });

    m.def(
        "nf4_roundtrip",
        [](const FloatArray& w, std::size_t block_size, bool double_quant, std::size_t dq_block_size) {
            const auto q = quantize_nf4(std::span<const float>(w.data(), w.size()), shape_of(w),
                                        {block_size, double_quant, dq_block_size});
            const auto bits = bits_per_parameter(q);
            py::dict budget;
            budget["payload"] = bits.payload;
            budget["metadata"] = bits.metadata;
            budget["total"] = bits.total;
            return py::make_tuple(to_numpy(dequantize(q)), budget);
        },
        py::arg("w"), py::arg("block_size") = 64, py::arg("double_quant") = true, py::arg("dq_block_size") = 256,
        "Quantizes to NF4 and back. Returns (reconstruction, bits-per-parameter budget).");

    m.def(
        "lora_counts",
        [](std::size_t d, std::size_t k, std::size_t rank) {
            AdaptedLinear layer(Tensor::zeros({d, k}));
            layer.attach_lora(rank, 2.0f * static_cast<float>(rank), 0.0f, 0);
            const auto c = layer.param_counts();
            return py::make_tuple(c.trainable, c.frozen);
        },
        py::arg("d"), py::arg("k"), py::arg("rank"), "(trainable, frozen) for one LoRA-adapted d x k layer.");

    m.def("default_articles", &default_articles);
    m.def("normalize_answer", [](std::string_view t, std::optional<std::vector<std::string>> arts) {
        return normalize_answer(t, arts ? *arts : default_articles());
    }, py::arg("text"), py::arg("articles") = py::none());
    m.def("token_f1", [](std::string_view p, std::vector<std::string> golds, std::optional<std::vector<std::string>> arts) {
        return token_f1(p, golds, arts ? *arts : default_articles());
    }, py::arg("prediction"), py::arg("golds"), py::arg("articles") = py::none());
    m.def("exact_match", [](std::string_view p, std::vector<std::string> golds, std::optional<std::vector<std::string>> arts) {
        return exact_match(p, golds, arts ? *arts : default_articles());
    }, py::arg("prediction"), py::arg("golds"), py::arg("articles") = py::none());

    m.def("format_hms", &format_hms);
    m.def("format_lr", &format_lr);
    m.def("percent_of_baseline", &percent_of_baseline, py::arg("cell_f1"), py::arg("baseline_f1"));

    m.def("read_grid_csv", [](const std::filesystem::path& p) {
        py::list out;
        for (const auto& r : read_grid_csv(p)) out.append(row_dict(r));
        return out;
    });
    m.def("fixture_checks", [](const std::filesystem::path& p) {
        py::list out;
        for (const auto& c : fixture_checks(read_grid_csv(p))) {
            py::dict d;
            d["label"] = c.label;
            d["expected"] = c.expected;
            d["actual"] = c.actual ? py::cast(*c.actual) : py::none();
            d["passed"] = c.passed();
            out.append(d);
        }
        return out;
    }, py::arg("fixture_csv"), "Recomputes the published derived numbers from a fixture CSV.");
    m.def("render_markdown", [](const std::filesystem::path& p) { return render_markdown(read_grid_csv(p)); });

    m.def(
        "run_cell",
        [](const std::string& method, double lr, std::size_t epochs, const std::string& preset, std::size_t num_train,
           std::size_t num_dev, std::uint64_t seed) {
            DataConfig dc;
            dc.synthetic.num_train = num_train;
            dc.synthetic.num_dev = num_dev;
            GridRow row;
            {
                py::gil_scoped_release release;
                const auto data = load_dataset(dc);
                row = run_cell({parse_method(method), lr, epochs, preset}, data, seed);
            }
            return row_dict(row);
        },
        py::arg("method"), py::arg("lr") = kHighLr, py::arg("epochs") = 1, py::arg("preset") = "micro-base",
        py::arg("num_train") = 4000, py::arg("num_dev") = 300, py::arg("seed") = 1,
        "Trains one grid cell on synthetic data and returns its result row.");
}
