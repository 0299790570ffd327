#pragma once

// Single-channel patches and the distances defined on them: RMSE/PSNR,
// multi-scale SSIM and the normalized Laplacian pyramid distance. The two
// perceptual distances also provide exact gradients with respect to their
// second argument so they can be used as training losses.
//
// Images are Eigen matrices indexed (row, col). Every linear stage (blur,
// decimation, expansion, local averaging, SSIM windows) is a dense 1D operator
// applied as R * X * C^T; its adjoint is R^T * G * C.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pplab/rng.hpp"

namespace pplab {

using Image = Eigen::MatrixXd;

/// Pixels in [0, 1]; values are clamped on construction.
class Patch {
 public:
  Patch() = default;
  explicit Patch(Image pixels);
  static Patch from_row_major(int height, int width, std::span<const double> values);
  static Patch constant(int height, int width, double value);

  int height() const { return static_cast<int>(pixels_.rows()); }
  int width() const { return static_cast<int>(pixels_.cols()); }
  const Image& pixels() const { return pixels_; }
  double operator()(int r, int c) const { return pixels_(r, c); }
  std::vector<double> row_major() const;
  double mean() const { return pixels_.mean(); }

  friend bool operator==(const Patch& a, const Patch& b) { return a.pixels_ == b.pixels_; }

 private:
  Image pixels_;
};

/// Copies a row-major vector of length h*w into an image without clamping.
Image image_from_row_major(int height, int width, std::span<const double> values);
std::vector<double> row_major(const Image& img);

// --- Euclidean ---------------------------------------------------------------

double mse(const Image& a, const Image& b);
double rmse(const Patch& a, const Patch& b);
/// 20 log10(1 / rmse); +infinity when the patches are identical.
double psnr(const Patch& a, const Patch& b);

// --- Laplacian pyramid -------------------------------------------------------

/// Binomial [1 4 6 4 1]/16 blur with mirror (reflect-101) borders, 2x decimation.
Eigen::MatrixXd pyramid_reduce_operator(int n);
/// Zero insertion to length n followed by the same blur, scaled by 2.
Eigen::MatrixXd pyramid_expand_operator(int n);
/// 3-tap box average with mirror borders.
Eigen::MatrixXd local_average_operator(int n);

struct LaplacianPyramid {
  std::vector<Image> bands;  // finest first
  Image residual;            // low-pass image after the last reduction

  std::size_t levels() const { return bands.size(); }
};

/// Default band count: 3 for 16x16 patches, up to 5 for 64x64 and larger.
int default_pyramid_levels(int height, int width);
LaplacianPyramid build_laplacian_pyramid(const Image& img, int levels = 0);
Image collapse_laplacian_pyramid(const LaplacianPyramid& pyr);

// --- NLPD ----------------------------------------------------------------

struct NlpdConfig {
  int levels = 0;     // 0 picks default_pyramid_levels
  double c = 0.17;    // additive constant of the divisive normalization, every level
};

/// Mean over pyramid levels (bands and residual) of the RMS difference of the
/// divisively normalized coefficients z / (c + A * |z|).
double nlpd(const Image& a, const Image& b, const NlpdConfig& cfg = {});
/// As nlpd(); writes d nlpd / d b into `grad_b` when non-null.
double nlpd_with_grad(const Image& a, const Image& b, Image* grad_b, const NlpdConfig& cfg = {});
inline double nlpd(const Patch& a, const Patch& b, const NlpdConfig& cfg = {}) {
  return nlpd(a.pixels(), b.pixels(), cfg);
}

// --- MS-SSIM -------------------------------------------------------------

struct MsssimConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  double sigma = 1.5;
  double data_range = 1.0;
  /// Per-scale factors below this value are clamped. 0 reproduces the usual
  /// metric; a small positive value keeps gradients alive for training.
  double floor = 0.0;
  /// When positive, replaces the clamp with (f + sqrt(f^2 + smooth^2)) / 2,
  /// which stays positive and differentiable for negative factors.
  double smooth = 0.0;
};

struct MsssimLayout {
  int window;
  int scales;
  std::vector<double> weights;  // renormalized canonical exponents
};

/// 11x11 window when at least two scales fit, otherwise 8x8; InputError when
/// fewer than two scales fit.
MsssimLayout msssim_layout(int height, int width);
double msssim(const Image& a, const Image& b, const MsssimConfig& cfg = {});
double msssim_with_grad(const Image& a, const Image& b, Image* grad_b, const MsssimConfig& cfg = {});
inline double msssim(const Patch& a, const Patch& b, const MsssimConfig& cfg = {}) {
  return msssim(a.pixels(), b.pixels(), cfg);
}

// --- corruption and contrast -------------------------------------------------

/// Adds N(0, (sigma/255)^2) per pixel and clamps to [0, 1].
Patch add_gaussian_noise(const Patch& a, double sigma_255, Rng& rng);
/// mean(a) + alpha * (a - mean(a)), clamped; alpha in [0, 2].
Patch contrast_interp(const Patch& a, double alpha);

// --- file formats ------------------------------------------------------------

/// Binary 8-bit PGM (P5); pixel values divided by the header maxval.
Patch read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Patch& p);
/// Raw float patch: uint32 LE height, uint32 LE width, then height*width
/// float32 LE values in row-major order.
Patch read_raw(const std::filesystem::path& path);
void write_raw(const std::filesystem::path& path, const Patch& p);
/// Dispatch on extension: .pgm or .raw.
Patch read_patch_file(const std::filesystem::path& path);

/// Tiles of size `size` taken every `stride` pixels, row-major order.
std::vector<Patch> tile_patches(const Patch& image, int size, int stride);
/// Every .pgm under `dir` (sorted by file name), tiled.
std::vector<Patch> load_patch_corpus(const std::filesystem::path& dir, int size = 16, int stride = 8);

}  // namespace pplab
