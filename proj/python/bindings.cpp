#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pplab/compress.hpp"
#include "pplab/errors.hpp"
#include "pplab/experiments.hpp"
#include "pplab/image.hpp"
#include "pplab/induced.hpp"
#include "pplab/stats.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; the Python side wraps it with json.loads.
json parse(const std::string& s) { return s.empty() ? json::object() : json::parse(s); }

pplab::Density density(const std::string& spec) { return pplab::density_from_json(parse(spec)); }

}  // namespace

PYBIND11_MODULE(_pplab, m) {
  m.doc() = "Induced-distance and rate-distortion experiments";
  m.attr("__version__") = pplab::kVersion;

  auto base = py::register_exception<pplab::Error>(m, "Error");
  py::register_exception<pplab::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<pplab::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<pplab::InputError>(m, "InputError", base.ptr());
  py::register_exception<pplab::DomainError>(m, "DomainError", base.ptr());
  py::register_exception<pplab::UndefinedCorrelation>(m, "UndefinedCorrelation", base.ptr());
  py::register_exception<pplab::TrainingDiverged>(m, "TrainingDiverged", base.ptr());

  m.def("experiment_ids", &pplab::experiment_ids);
  m.def("default_config", [](const std::string& id) { return pplab::default_config(id).dump(); });
  m.def(
      "run_experiment",
      [](const std::string& id, const std::string& config, const std::filesystem::path& out,
         std::optional<std::uint64_t> seed, std::optional<std::int64_t> steps, int jobs,
         std::optional<std::filesystem::path> cache) {
        pplab::RunOptions opt;
        opt.out_dir = out;
        opt.seed = seed;
        opt.steps = steps;
        opt.jobs = jobs;
        opt.cache_dir = cache;
        pplab::RunResult r;
        {
          py::gil_scoped_release release;
          r = pplab::run_experiment(id, parse(config), opt);
        }
        std::vector<std::string> files;
        for (const auto& f : r.files) files.push_back(f.string());
        return py::make_tuple(files, r.summary.dump(), r.failures.dump());
      },
      py::arg("id"), py::arg("config") = "", py::arg("out_dir"), py::arg("seed") = py::none(),
      py::arg("steps") = py::none(), py::arg("jobs") = 1, py::arg("cache_dir") = py::none());

  m.def(
      "spearman",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        const auto r = pplab::spearman(x, y);
        return py::make_tuple(r.rho, r.n, r.tie_count);
      },
      "(rho, n, tie_count)");
  m.def("polyfit_smooth", [](const std::vector<double>& x, const std::vector<double>& y, int degree) {
    return Eigen::VectorXd(pplab::polyfit_smooth(x, y, degree)(x));
  }, "Fitted values at x", py::arg("x"), py::arg("y"), py::arg("degree") = 20);
  m.def("entropy_upper_bound", [](int h, int w, int n_down, int channels, int centers) {
    const auto b = pplab::entropy_upper_bound(h, w, n_down, channels, centers);
    return py::make_tuple(b.bits, b.bpp);
  });

  m.def("pdf", [](const std::string& spec, const Eigen::VectorXd& x) {
    return pplab::pdf(density(spec), {x.data(), static_cast<std::size_t>(x.size())});
  });
  m.def(
      "sample",
      [](const std::string& spec, int n, std::uint64_t seed) {
        pplab::Rng rng(seed);
        return pplab::sample(density(spec), n, rng);
      },
      "Samples as columns", py::arg("spec"), py::arg("n"), py::arg("seed") = 0);

  m.def("msssim", [](const pplab::Image& a, const pplab::Image& b) { return pplab::msssim(a, b); });
  m.def("nlpd", [](const pplab::Image& a, const pplab::Image& b) { return pplab::nlpd(a, b); });
  m.def("psnr", [](const pplab::Image& a, const pplab::Image& b) {
    return pplab::psnr(pplab::Patch(a), pplab::Patch(b));
  });
  m.def(
      "laplacian_pyramid",
      [](const pplab::Image& img, int levels) {
        const auto p = pplab::build_laplacian_pyramid(img, levels);
        return py::make_tuple(p.bands, p.residual);
      },
      py::arg("image"), py::arg("levels") = 0);
  m.def("collapse_laplacian_pyramid", [](const std::vector<pplab::Image>& bands, const pplab::Image& residual) {
    return pplab::collapse_laplacian_pyramid({bands, residual});
  });

  py::class_<pplab::CompressModel>(m, "Model")
      .def_static("load", &pplab::load_model)
      .def_static("from_json", [](const std::string& s) { return pplab::model_from_json(json::parse(s)); })
      .def("to_json", [](const pplab::CompressModel& cm) { return pplab::model_to_json(cm).dump(); })
      .def("save", [](const pplab::CompressModel& cm, const std::string& path) { pplab::save_model(path, cm); })
      .def_property_readonly("input_dim", &pplab::CompressModel::input_dim)
      .def_property_readonly("latent_dim", &pplab::CompressModel::latent_dim)
      .def("encode", [](const pplab::CompressModel& cm, const Eigen::MatrixXd& x) { return pplab::encode_batch(cm, x); },
           "Columns in, latents out")
      .def("reconstruct",
           [](const pplab::CompressModel& cm, const Eigen::MatrixXd& x) { return pplab::reconstruct_batch(cm, x); })
      .def("rate_distortion",
           [](const pplab::CompressModel& cm, const Eigen::MatrixXd& x, const std::string& kind) {
             const auto rd = pplab::eval_rate_distortion(cm, x, pplab::distortion_from_string(kind));
             return py::make_tuple(rd.rate_bpp, rd.distortion);
           },
           py::arg("points"), py::arg("kind") = "sse")
      .def("d_self", [](const pplab::CompressModel& cm, const Eigen::VectorXd& x) { return pplab::d_self(cm, x); })
      .def("d_recon", [](const pplab::CompressModel& cm, const Eigen::VectorXd& a,
                         const Eigen::VectorXd& b) { return pplab::d_recon(cm, a, b); })
      .def("d_inner", [](const pplab::CompressModel& cm, const Eigen::VectorXd& a,
                         const Eigen::VectorXd& b) { return pplab::d_inner(cm, a, b); });

  m.def(
      "train",
      [](const std::string& config) {
        const auto cfg = pplab::TrainConfig::from_json(parse(config));
        pplab::TrainResult r;
        {
          py::gil_scoped_release release;
          r = pplab::train(cfg);
        }
        std::vector<py::tuple> curve;
        for (const auto& p : r.curve) curve.push_back(py::make_tuple(p.step, p.rate_bpp, p.distortion, p.loss));
        return py::make_tuple(std::move(r.model), curve);
      },
      "TrainConfig JSON -> (Model, [(step, rate_bpp, distortion, loss)])");
}
