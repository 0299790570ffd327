#pragma once

// Distances induced by a trained compression autoencoder, with
// f = decode o round o encode:
//   self-reconstruction  D_s(x)      = ||x - f(x)||
//   reconstruction       D_r(x1, x2) = ||f(x1) - f(x2)||
//   inner                D_in(x1, x2)= ||e(x1) - e(x2)||  (pre-quantization latent)

#include <Eigen/Dense>
#include "json.hpp"

#include <optional>
#include <string>
#include <vector>

#include "pplab/compress.hpp"
#include "pplab/densities.hpp"
#include "pplab/rng.hpp"

namespace pplab {

enum class InducedKind { self_reconstruction, reconstruction, inner };
std::string to_string(InducedKind k);

double d_self(const CompressModel& m, const Eigen::VectorXd& x);
double d_recon(const CompressModel& m, const Eigen::VectorXd& x1, const Eigen::VectorXd& x2);
double d_inner(const CompressModel& m, const Eigen::VectorXd& x1, const Eigen::VectorXd& x2);

struct SensitivityOptions {
  double delta = 1e-3;
  int n_dirs = 16;
};

/// Mean over random unit directions u of D(x, x + delta u) / delta. Only the
/// pairwise kinds (reconstruction, inner) are accepted.
double sensitivity_ratio(InducedKind kind, const CompressModel& m, const Eigen::VectorXd& x,
                         const SensitivityOptions& opt, Rng& rng);
/// Same protocol on the equalized distance ||S(x1) - S(x2)||.
double sensitivity_ratio(const Equalizer& eq, const Eigen::VectorXd& x, const SensitivityOptions& opt, Rng& rng);

struct LabeledModel {
  double lambda;
  CompressModel model;
};

struct SweepRow {
  double lambda;
  double rate_bpp;
  std::optional<double> rho_ds;
  std::optional<double> rho_dr_sens;
  std::optional<double> rho_din_sens;
  int n_points;
  std::uint64_t seed;
  std::vector<std::string> diagnostics;
};

struct SweepReport {
  std::vector<SweepRow> rows;

  /// lambda,rate_bpp,rho_Ds,rho_Dr_sens,rho_Din_sens,n_points,seed; undefined
  /// correlations are written as an empty field.
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Per model: evaluation rate and the Spearman correlations of D_s and of the
/// D_r / D_in sensitivities with the density of the test points. Each model
/// draws its directions from a stream seeded by `seed` so rows are
/// reproducible independently of evaluation order.
SweepReport correlation_sweep(const std::vector<LabeledModel>& models, const Eigen::MatrixXd& test_points,
                              const Density& density, std::uint64_t seed, const SensitivityOptions& opt = {});

}  // namespace pplab
