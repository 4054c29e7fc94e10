#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>

#include "pvb/adapters.hpp"
#include "pvb/data.hpp"
#include "pvb/laplace.hpp"
#include "pvb/metrics.hpp"
#include "pvb/stiefel.hpp"
#include "pvb/train.hpp"
#include "pvb/vbll.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

pvb::Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  pvb::Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.values().begin());
  return m;
}

Array to_array(const pvb::Matrix& m) {
  Array a({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), a.mutable_data());
  return a;
}

pvb::data::Dataset make_dataset(const Array& x, const std::vector<std::size_t>& y,
                                std::size_t num_classes) {
  pvb::data::Dataset ds;
  ds.x = to_matrix(x);
  if (ds.x.rows() != y.size()) throw py::value_error("x and y disagree on the sample count");
  ds.y = y;
  ds.num_classes = num_classes;
  for (std::size_t v : y)
    if (v >= num_classes) throw py::value_error("label out of range");
  ds.provenance = "python";
  return ds;
}

py::dict report_dict(const pvb::metrics::EvalReport& r) {
  py::dict d;
  d["acc"] = r.acc;
  d["ece"] = r.ece;
  d["nll"] = r.nll;
  d["n"] = r.n;
  d["bins"] = r.bins;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "PoLAR adapters with a variational Bayesian last layer";

  static py::exception<pvb::Error> error(m, "PvbError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const pvb::Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error)(e.what());
      py::setattr(exc, "code", py::str(std::string(pvb::error_code_name(e.code()))));
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  py::class_<pvb::data::Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("x"), py::arg("y"), py::arg("num_classes"))
      .def_property_readonly("x", [](const pvb::data::Dataset& d) { return to_array(d.x); })
      .def_readonly("y", &pvb::data::Dataset::y)
      .def_readonly("num_classes", &pvb::data::Dataset::num_classes)
      .def_readonly("provenance", &pvb::data::Dataset::provenance)
      .def("__len__", &pvb::data::Dataset::size);

  m.def(
      "gen_gaussian_mixture",
      [](std::size_t classes, std::size_t dim, std::size_t per_class, double overlap,
         std::uint64_t seed, std::optional<std::uint64_t> noise_seed, std::vector<double> shift) {
        pvb::data::SynthSpec s;
        s.num_classes = classes;
        s.input_dim = dim;
        s.per_class = per_class;
        s.overlap = overlap;
        s.seed = seed;
        s.noise_seed = noise_seed;
        s.shift = std::move(shift);
        return pvb::data::gen_gaussian_mixture(s);
      },
      py::arg("classes") = 3, py::arg("dim") = 8, py::arg("per_class") = 200,
      py::arg("overlap") = 2.0, py::arg("seed") = 0, py::arg("noise_seed") = py::none(),
      py::arg("shift") = std::vector<double>{});
  m.def("load_jsonl", [](const std::string& p) { return pvb::data::load_jsonl(p); });
  m.def("save_jsonl",
        [](const pvb::data::Dataset& d, const std::string& p) { pvb::data::save_jsonl(d, p); });

  py::class_<pvb::train::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &pvb::train::TrainConfig::steps)
      .def_readwrite("batch", &pvb::train::TrainConfig::batch)
      .def_readwrite("lr_polar", &pvb::train::TrainConfig::lr_polar)
      .def_readwrite("lr_vbll", &pvb::train::TrainConfig::lr_vbll)
      .def_readwrite("landing", &pvb::train::TrainConfig::landing)
      .def_readwrite("prior_var", &pvb::train::TrainConfig::prior_var)
      .def_readwrite("kl_weight", &pvb::train::TrainConfig::kl_weight)
      .def_readwrite("rank", &pvb::train::TrainConfig::rank)
      .def_readwrite("alpha", &pvb::train::TrainConfig::alpha)
      .def_readwrite("seed", &pvb::train::TrainConfig::seed)
      .def_readwrite("restart_period", &pvb::train::TrainConfig::restart_period)
      .def_readwrite("eval_every", &pvb::train::TrainConfig::eval_every)
      .def_readwrite("hidden_dim", &pvb::train::TrainConfig::hidden_dim)
      .def_readwrite("feature_dim", &pvb::train::TrainConfig::feature_dim)
      .def_property(
          "adapter",
          [](const pvb::train::TrainConfig& c) {
            return std::string(pvb::train::adapter_kind_name(c.adapter));
          },
          [](pvb::train::TrainConfig& c, const std::string& v) {
            c.adapter = pvb::train::parse_adapter_kind(v);
          })
      .def_property(
          "head",
          [](const pvb::train::TrainConfig& c) {
            return std::string(pvb::train::head_kind_name(c.head));
          },
          [](pvb::train::TrainConfig& c, const std::string& v) {
            c.head = pvb::train::parse_head_kind(v);
          })
      .def_property(
          "scheduler",
          [](const pvb::train::TrainConfig& c) {
            return std::string(pvb::train::scheduler_name(c.scheduler));
          },
          [](pvb::train::TrainConfig& c, const std::string& v) {
            c.scheduler = pvb::train::parse_scheduler(v);
          });

  py::class_<pvb::train::Checkpoint>(m, "Checkpoint")
      .def_readonly("config", &pvb::train::Checkpoint::config)
      .def_property_readonly("num_classes", &pvb::train::Checkpoint::num_classes)
      .def_property_readonly("feature_dim", &pvb::train::Checkpoint::feature_dim)
      .def_property_readonly("has_laplace",
                             [](const pvb::train::Checkpoint& c) { return c.laplace.has_value(); })
      .def("features",
           [](const pvb::train::Checkpoint& c, const Array& x) {
             return to_array(pvb::features::forward(c.extractor, to_matrix(x)).features);
           })
      .def("means",
           [](const pvb::train::Checkpoint& c) {
             return std::visit(
                 [](const auto& h) -> Array {
                   if constexpr (std::is_same_v<std::decay_t<decltype(h)>, pvb::vbll::VbllHead>)
                     return to_array(h.means);
                   else
                     return to_array(h.weights);
                 },
                 c.head);
           })
      .def("to_bytes",
           [](const pvb::train::Checkpoint& c) {
             const auto b = pvb::train::serialize(c);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& b) {
                    const std::string s = b;
                    return pvb::train::deserialize(std::span(
                        reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
                  })
      .def("save", [](const pvb::train::Checkpoint& c,
                      const std::string& p) { pvb::train::save(c, p); })
      .def_static("load", [](const std::string& p) { return pvb::train::load(p); })
      .def("__eq__", [](const pvb::train::Checkpoint& a, const pvb::train::Checkpoint& b) {
        return a == b;
      });

  m.def("initialize", &pvb::train::initialize, py::arg("config"), py::arg("dataset"));
  m.def(
      "train",
      [](const pvb::train::TrainConfig& c, const pvb::data::Dataset& d) {
        pvb::train::TrainResult r;
        {
          py::gil_scoped_release release;
          r = pvb::train::train(c, d);
        }
        return py::make_tuple(std::move(r.checkpoint), std::move(r.losses));
      },
      py::arg("config"), py::arg("dataset"),
      "Returns (checkpoint, per-step losses).");

  m.def(
      "laplace_fit",
      [](pvb::train::Checkpoint c, const pvb::data::Dataset& d, const std::string& mode) {
        const auto* head = std::get_if<pvb::vbll::VbllHead>(&c.head);
        if (head == nullptr) throw py::value_error("checkpoint has a softmax head");
        const pvb::Matrix fx = pvb::features::forward(c.extractor, d.x).features;
        c.laplace = pvb::laplace::refine(*head, fx, pvb::laplace::parse_mode(mode));
        return c;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("mode") = "exact-full");

  m.def(
      "evaluate",
      [](const pvb::train::Checkpoint& c, const pvb::data::Dataset& d, const std::string& posterior,
         std::size_t samples, std::size_t bins, std::size_t batch, std::uint64_t seed) {
        pvb::metrics::EvalOptions o;
        o.posterior = pvb::predict::parse_source(posterior);
        o.samples = samples;
        o.bins = bins;
        o.batch = batch;
        o.seed = seed;
        const auto out = pvb::metrics::evaluate_checkpoint(c, d, o);
        py::dict r = report_dict(out.report);
        r["probs"] = to_array(out.probs);
        r["forward_passes"] = out.forward_passes;
        return r;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("posterior") = "variational",
      py::arg("samples") = pvb::predict::kDefaultSamples,
      py::arg("bins") = pvb::metrics::kDefaultBins, py::arg("batch") = 256, py::arg("seed") = 0);

  m.def(
      "metrics",
      [](const Array& probs, const std::vector<std::size_t>& labels, std::size_t bins) {
        return report_dict(pvb::metrics::evaluate(to_matrix(probs), labels, bins));
      },
      py::arg("probs"), py::arg("labels"), py::arg("bins") = pvb::metrics::kDefaultBins);

  m.def("stable_rank_report", [](const pvb::train::Checkpoint& c) {
    const auto r = pvb::metrics::stable_rank_report(c);
    py::dict d;
    d["layers"] = r.per_layer;
    d["mean"] = r.mean;
    return d;
  });
  m.def("stable_rank", [](const Array& a) { return pvb::adapters::stable_rank(to_matrix(a)); });

  m.def(
      "landing_step",
      [](const Array& x, const Array& grad, double landing, double lr) {
        const pvb::stiefel::StiefelFactor f(to_matrix(x));
        return to_array(pvb::stiefel::landing_step(f, to_matrix(grad), landing, lr).mat());
      },
      py::arg("x"), py::arg("grad"), py::arg("landing") = pvb::stiefel::kDefaultLanding,
      py::arg("lr") = 1e-2);
  m.def("infeasibility",
        [](const Array& x) { return pvb::stiefel::infeasibility(to_matrix(x)); });

  m.def(
      "kl_to_prior",
      [](const Array& means, const std::vector<Array>& chol, double prior_var) {
        pvb::vbll::VbllHead h;
        h.means = to_matrix(means);
        for (const auto& l : chol) h.chol.push_back(to_matrix(l));
        h.prior_var = prior_var;
        pvb::vbll::validate(h);
        return pvb::vbll::kl_to_prior(h);
      },
      py::arg("means"), py::arg("chol"), py::arg("prior_var") = pvb::vbll::kDefaultPriorVar);
}
