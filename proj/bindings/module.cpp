#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sigma/completion.hpp"
#include "sigma/graph.hpp"
#include "sigma/matching.hpp"
#include "sigma/rng.hpp"

namespace py = pybind11;
using namespace sigma;

PYBIND11_MODULE(sigma_match, m) {
    m.doc() = "semantic-complete graph matching primitives (forward-only numeric surface)";

    m.def("sinkhorn_normalize",
          [](const Matrix& mat, int iterations) {
              return matching::sinkhorn_normalize(mat, iterations);
          },
          py::arg("matrix"), py::arg("iterations") = 20);

    m.def("instance_normalize",
          [](const Matrix& raw) { return matching::instance_normalize(raw); },
          py::arg("matrix"));

    m.def("layer_normalize", &graph::layer_normalize, py::arg("x"), py::arg("gain"),
          py::arg("shift"));

    m.def("build_match_targets", &matching::build_match_targets, py::arg("source_labels"),
          py::arg("target_labels"), py::arg("include_background") = true);

    m.def("matching_loss",
          [](const Matrix& aff, const Matrix& targets, const Matrix& adj_s, const Matrix& adj_t,
             const std::string& qc_mode) {
              const auto mode = qc_mode == "literal" ? matching::QcMode::literal
                                                     : matching::QcMode::squared;
              const auto v = matching::matching_loss_values(aff, targets, adj_s, adj_t, mode);
              py::dict d;
              d["te"] = v.te;
              d["fs"] = v.fs;
              d["qc"] = v.qc;
              d["total"] = v.total;
              d["te_excluded_rows"] = v.te_excluded_rows;
              d["fs_degenerate"] = v.fs_degenerate;
              return d;
          },
          py::arg("affinity"), py::arg("targets"), py::arg("adj_source"), py::arg("adj_target"),
          py::arg("qc_mode") = "squared");

    m.def("hungarian_oracle",
          [](const Matrix& cost) {
              const matching::Assignment a = matching::hungarian_oracle(cost);
              return py::make_tuple(a.row_to_col, a.cost);
          },
          py::arg("cost"));

    m.def("spectral_partition", &completion::spectral_partition, py::arg("points"));

    m.def("missing_category_sets",
          [](const std::vector<int>& source_labels, const std::vector<int>& target_labels,
             int classes) {
              const auto inv =
                  completion::missing_category_sets(source_labels, target_labels, classes);
              py::dict d;
              d["present_source"] = inv.present_source;
              d["present_target"] = inv.present_target;
              d["missing_source"] = inv.missing_source;
              d["missing_target"] = inv.missing_target;
              return d;
          },
          py::arg("source_labels"), py::arg("target_labels"), py::arg("classes"));

    m.def("update_memory_seed",
          [](const RowVector& seed, const Matrix& class_nodes) {
              completion::MemoryBank bank;
              bank.seeds = seed;
              bank.initialized = {0};
              std::vector<char> halluc(static_cast<std::size_t>(class_nodes.rows()), 0);
              completion::update_memory_bank(bank, 1, class_nodes, halluc);
              return RowVector(bank.seeds.row(0));
          },
          py::arg("seed"), py::arg("class_nodes"));

    m.def("edge_drop_mask",
          [](int n, double drop_rate, std::uint64_t seed) {
              Rng rng(seed);
              return graph::edge_drop_mask(n, drop_rate, rng);
          },
          py::arg("n"), py::arg("drop_rate"), py::arg("seed"));
}
