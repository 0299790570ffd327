#include "pplab/induced.hpp"

#include <cmath>
#include <sstream>

#include "pplab/errors.hpp"
#include "pplab/stats.hpp"

namespace pplab {

std::string to_string(InducedKind k) {
  switch (k) {
    case InducedKind::self_reconstruction:
      return "self_reconstruction";
    case InducedKind::reconstruction:
      return "reconstruction";
    case InducedKind::inner:
      return "inner";
  }
  return "?";
}

namespace {

void check_input(const CompressModel& m, const Eigen::VectorXd& x) {
  if (x.size() != m.input_dim()) throw ShapeError("induced: input dimension does not match the model");
}

Eigen::VectorXd random_direction(Eigen::Index dim, Rng& rng) {
  Eigen::VectorXd u(dim);
  double n2;
  do {
    for (Eigen::Index i = 0; i < dim; ++i) u[i] = rng.normal();
    n2 = u.squaredNorm();
  } while (n2 == 0.0);
  return u / std::sqrt(n2);
}

template <class Dist>
double mean_ratio(const Eigen::VectorXd& x, const SensitivityOptions& opt, Rng& rng, Dist&& dist) {
  if (!(opt.delta > 0.0)) throw ConfigError("sensitivity: delta must be positive");
  if (opt.n_dirs < 1) throw ConfigError("sensitivity: n_dirs must be >= 1");
  double acc = 0.0;
  for (int k = 0; k < opt.n_dirs; ++k) {
    const Eigen::VectorXd u = random_direction(x.size(), rng);
    acc += dist(x, x + opt.delta * u) / opt.delta;
  }
  return acc / opt.n_dirs;
}

std::optional<double> try_spearman(const std::vector<double>& a, const std::vector<double>& b,
                                   const std::string& name, std::vector<std::string>& diag) {
  try {
    return spearman(a, b).rho;
  } catch (const UndefinedCorrelation&) {
    diag.push_back(name + ": all values equal, correlation undefined");
    return std::nullopt;
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

double d_self(const CompressModel& m, const Eigen::VectorXd& x) {
  check_input(m, x);
  return (x - reconstruct(m, x)).norm();
}

double d_recon(const CompressModel& m, const Eigen::VectorXd& x1, const Eigen::VectorXd& x2) {
  check_input(m, x1);
  check_input(m, x2);
  return (reconstruct(m, x1) - reconstruct(m, x2)).norm();
}

double d_inner(const CompressModel& m, const Eigen::VectorXd& x1, const Eigen::VectorXd& x2) {
  check_input(m, x1);
  check_input(m, x2);
  return (encode(m, x1) - encode(m, x2)).norm();
}

double sensitivity_ratio(InducedKind kind, const CompressModel& m, const Eigen::VectorXd& x,
                         const SensitivityOptions& opt, Rng& rng) {
  check_input(m, x);
  switch (kind) {
    case InducedKind::reconstruction: {
      const Eigen::VectorXd fx = reconstruct(m, x);
      return mean_ratio(x, opt, rng, [&](const Eigen::VectorXd&, const Eigen::VectorXd& b) {
        return (fx - reconstruct(m, b)).norm();
      });
    }
    case InducedKind::inner: {
      const Eigen::VectorXd ex = encode(m, x);
      return mean_ratio(x, opt, rng,
                        [&](const Eigen::VectorXd&, const Eigen::VectorXd& b) { return (ex - encode(m, b)).norm(); });
    }
    case InducedKind::self_reconstruction:
      break;
  }
  throw ConfigError("sensitivity: self-reconstruction is not a pairwise distance");
}

double sensitivity_ratio(const Equalizer& eq, const Eigen::VectorXd& x, const SensitivityOptions& opt, Rng& rng) {
  return mean_ratio(x, opt, rng,
                    [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return eq.distance(a, b); });
}

std::string SweepReport::to_csv() const {
  std::ostringstream os;
  os << "lambda,rate_bpp,rho_Ds,rho_Dr_sens,rho_Din_sens,n_points,seed\n";
  const auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : rows)
    os << fmt(r.lambda) << ',' << fmt(r.rate_bpp) << ',' << opt(r.rho_ds) << ',' << opt(r.rho_dr_sens) << ','
       << opt(r.rho_din_sens) << ',' << r.n_points << ',' << r.seed << '\n';
  return os.str();
}

nlohmann::json SweepReport::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  for (const auto& r : rows)
    out.push_back({{"lambda", r.lambda},
                   {"rate_bpp", r.rate_bpp},
                   {"rho_Ds", opt(r.rho_ds)},
                   {"rho_Dr_sens", opt(r.rho_dr_sens)},
                   {"rho_Din_sens", opt(r.rho_din_sens)},
                   {"n_points", r.n_points},
                   {"seed", r.seed},
                   {"diagnostics", r.diagnostics}});
  return out;
}

SweepReport correlation_sweep(const std::vector<LabeledModel>& models, const Eigen::MatrixXd& test_points,
                              const Density& density, std::uint64_t seed, const SensitivityOptions& opt) {
  if (test_points.cols() < 3) throw InputError("correlation_sweep: need at least 3 test points");
  if (test_points.rows() != dimension(density)) throw ShapeError("correlation_sweep: density dimension mismatch");
  const auto n = static_cast<std::size_t>(test_points.cols());
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i)
    p[i] = pdf(density, {test_points.col(static_cast<Eigen::Index>(i)).data(),
                         static_cast<std::size_t>(test_points.rows())});
  SweepReport report;
  for (const auto& lm : models) {
    SweepRow row{lm.lambda, 0.0, {}, {}, {}, static_cast<int>(n), seed, {}};
    row.rate_bpp = eval_rate_distortion(lm.model, test_points, DistortionKind::sse).rate_bpp;
    Rng rng(seed);
    std::vector<double> ds(n), dr(n), din(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::VectorXd x = test_points.col(static_cast<Eigen::Index>(i));
      ds[i] = d_self(lm.model, x);
      dr[i] = sensitivity_ratio(InducedKind::reconstruction, lm.model, x, opt, rng);
      din[i] = sensitivity_ratio(InducedKind::inner, lm.model, x, opt, rng);
    }
    row.rho_ds = try_spearman(ds, p, "D_s", row.diagnostics);
    row.rho_dr_sens = try_spearman(dr, p, "D_r sensitivity", row.diagnostics);
    row.rho_din_sens = try_spearman(din, p, "D_in sensitivity", row.diagnostics);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace pplab
