// Python bindings for the core numeric operations: transport solvers,
// Gumbel straight-through sampling, and a loaded-pipeline answer entry point.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "mrlab/backbone.hpp"
#include "mrlab/checkpoint.hpp"
#include "mrlab/codebook.hpp"
#include "mrlab/infer.hpp"
#include "mrlab/ot.hpp"
#include "mrlab/sampling.hpp"
#include "mrlab/tasks.hpp"
#include "mrlab/vocab.hpp"

namespace py = pybind11;
using namespace mrlab;

namespace {

using Rows = std::vector<std::vector<double>>;

Tensor to_tensor(const Rows& rows) {
    if (rows.empty()) throw ShapeError("expected a non-empty matrix");
    Tensor t(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size()) throw ShapeError("ragged matrix");
        for (std::size_t j = 0; j < rows[i].size(); ++j) t.at(i, j) = rows[i][j];
    }
    return t;
}

Rows from_tensor(const Tensor& t) {
    Rows rows(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) rows[i][j] = t.at(i, j);
    return rows;
}

// Owns the model the Engine references.
class PyEngine {
public:
    PyEngine(const std::string& backbone_path, const std::string& codebook_path)
        : model_(std::make_unique<backbone::BackboneModel>(
              backbone::BackboneModel::from_checkpoint(
                  load_checkpoint(backbone_path, "backbone")))),
          engine_(*model_, codebook::Codebook::from_checkpoint(
                               load_checkpoint(codebook_path, "codebook"))) {}

    py::tuple answer(const std::string& question) const {
        tasks::TaskInstance x;
        x.id = "py";
        x.question = vocab::parse(question);
        infer::InferenceTrace trace;
        const auto out = engine_.answer(x, &trace);
        return py::make_tuple(vocab::render(out), trace.selection.indices);
    }

private:
    std::unique_ptr<backbone::BackboneModel> model_;
    infer::Engine engine_;
};

} // namespace

PYBIND11_MODULE(_mrlab, m) {
    m.doc() = "meta-reflection codebook lab: core operations";

    // ---- optimal transport ----
    m.def(
        "cost_matrix",
        [](const Rows& a, const Rows& b) {
            return from_tensor(ot::cost_matrix(to_tensor(a), to_tensor(b)));
        },
        py::arg("suppliers"), py::arg("demanders"),
        "Pairwise cosine-distance cost matrix (1 - cosine).");
    m.def(
        "marginal_weights",
        [](const Rows& a, const Rows& b) {
            const auto mw = ot::marginal_weights(to_tensor(a), to_tensor(b));
            return py::make_tuple(mw.r, mw.c);
        },
        py::arg("suppliers"), py::arg("demanders"),
        "Clamped mean-embedding marginals, rescaled to unit mass.");
    m.def(
        "sinkhorn",
        [](const Rows& cost, const std::vector<double>& r, const std::vector<double>& c,
           double lam, std::size_t iters) {
            const auto plan = ot::sinkhorn(to_tensor(cost), r, c, lam, iters);
            return py::make_tuple(from_tensor(plan.gamma), plan.loss);
        },
        py::arg("cost"), py::arg("r"), py::arg("c"), py::arg("lam") = 20.0,
        py::arg("iters") = 10,
        "Entropically regularized transport plan and its alignment loss.");
    m.def(
        "exact_transport",
        [](const Rows& cost, const std::vector<double>& r, const std::vector<double>& c) {
            const auto plan = ot::exact_transport(to_tensor(cost), r, c);
            return py::make_tuple(from_tensor(plan.gamma), plan.loss);
        },
        py::arg("cost"), py::arg("r"), py::arg("c"),
        "Exact linear-program transport oracle (k'*k <= 16).");

    // ---- sampling ----
    m.def(
        "gumbel_noise",
        [](std::uint64_t seed, std::size_t K) { return sampling::gumbel_noise(seed, K).vec(); },
        py::arg("seed"), py::arg("K"));
    m.def(
        "perturbed_scores",
        [](const std::vector<double>& s, const std::vector<double>& eps, double temperature) {
            return sampling::perturbed_scores_plain(Tensor::row(s), Tensor::row(eps), temperature)
                .vec();
        },
        py::arg("scores"), py::arg("noise"), py::arg("temperature") = 1.0,
        "softmax(log(s) + eps) with zero clamping.");
    m.def(
        "topk_indices",
        [](const std::vector<double>& s, std::size_t k) { return nd::topk_indices(s, k); },
        py::arg("scores"), py::arg("k"), "Top-k indices in ascending order, ties to the left.");

    // ---- loaded pipeline ----
    py::class_<PyEngine>(m, "Engine")
        .def(py::init<const std::string&, const std::string&>(), py::arg("backbone_checkpoint"),
             py::arg("codebook_checkpoint"))
        .def("answer", &PyEngine::answer, py::arg("question"),
             "Greedy answer for a rendered question; returns (answer, selected unit indices).");

    m.attr("__version__") = "0.1.0";
}
