#include "pplab/image.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>

#include "pplab/errors.hpp"

namespace pplab {

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": images differ in size");
}

Image apply(const Eigen::MatrixXd& rows, const Image& x, const Eigen::MatrixXd& cols) {
  return rows * x * cols.transpose();
}

Image apply_adjoint(const Eigen::MatrixXd& rows, const Image& g, const Eigen::MatrixXd& cols) {
  return rows.transpose() * g * cols;
}

Eigen::MatrixXd blur_operator(int n) {
  static constexpr std::array<double, 5> k{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int t = -2; t <= 2; ++t) m(i, reflect101(i + t, n)) += k[t + 2];
  return m;
}

// Operators depend only on the size; cache them.
template <class F>
const Eigen::MatrixXd& cached(std::map<int, Eigen::MatrixXd>& cache, std::mutex& mu, int n, F make) {
  std::lock_guard lock(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, make(n)).first;
  return it->second;
}

const Eigen::MatrixXd& reduce_op(int n) {
  static std::map<int, Eigen::MatrixXd> cache;
  static std::mutex mu;
  return cached(cache, mu, n, pyramid_reduce_operator);
}
const Eigen::MatrixXd& expand_op(int n) {
  static std::map<int, Eigen::MatrixXd> cache;
  static std::mutex mu;
  return cached(cache, mu, n, pyramid_expand_operator);
}
const Eigen::MatrixXd& average_op(int n) {
  static std::map<int, Eigen::MatrixXd> cache;
  static std::mutex mu;
  return cached(cache, mu, n, local_average_operator);
}

}  // namespace

// --- Patch ------------------------------------------------------------------

Patch::Patch(Image pixels) : pixels_(std::move(pixels)) {
  if (pixels_.size() == 0) throw ShapeError("patch: empty");
  if (!pixels_.allFinite()) throw InputError("patch: non-finite pixel");
  pixels_ = pixels_.cwiseMax(0.0).cwiseMin(1.0);
}

Patch Patch::from_row_major(int height, int width, std::span<const double> values) {
  return Patch(image_from_row_major(height, width, values));
}

Patch Patch::constant(int height, int width, double value) {
  return Patch(Image::Constant(height, width, value));
}

std::vector<double> Patch::row_major() const { return pplab::row_major(pixels_); }

Image image_from_row_major(int height, int width, std::span<const double> values) {
  if (height < 1 || width < 1) throw ShapeError("image: dimensions must be positive");
  if (values.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
    throw ShapeError("image: value count does not match dimensions");
  Image img(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) img(r, c) = values[static_cast<std::size_t>(r) * width + c];
  return img;
}

std::vector<double> row_major(const Image& img) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(img.size()));
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) out.push_back(img(r, c));
  return out;
}

// --- Euclidean ----------------------------------------------------------------

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

double rmse(const Patch& a, const Patch& b) { return std::sqrt(mse(a.pixels(), b.pixels())); }

double psnr(const Patch& a, const Patch& b) {
  const double e = rmse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(1.0 / e);
}

// --- pyramid -----------------------------------------------------------------

Eigen::MatrixXd pyramid_reduce_operator(int n) {
  if (n < 3) throw ShapeError("pyramid: signal too short to reduce");
  const Eigen::MatrixXd b = blur_operator(n);
  const int m = (n + 1) / 2;
  Eigen::MatrixXd d(m, n);
  for (int i = 0; i < m; ++i) d.row(i) = b.row(2 * i);
  return d;
}

Eigen::MatrixXd pyramid_expand_operator(int n) {
  if (n < 3) throw ShapeError("pyramid: signal too short to expand");
  const int m = (n + 1) / 2;
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, m);
  for (int i = 0; i < m; ++i) z(2 * i, i) = 1.0;
  return 2.0 * blur_operator(n) * z;
}

Eigen::MatrixXd local_average_operator(int n) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int t = -1; t <= 1; ++t) m(i, reflect101(i + t, n)) += 1.0 / 3.0;
  return m;
}

int default_pyramid_levels(int height, int width) {
  const int side = std::min(height, width);
  if (side < 16) throw InputError("pyramid: patches need a side of at least 16 pixels");
  const int lg = std::bit_width(static_cast<unsigned>(side)) - 1;
  return std::clamp(lg - 1, 1, 5);
}

LaplacianPyramid build_laplacian_pyramid(const Image& img, int levels) {
  if (levels <= 0) levels = default_pyramid_levels(static_cast<int>(img.rows()), static_cast<int>(img.cols()));
  LaplacianPyramid pyr;
  Image cur = img;
  for (int l = 0; l < levels; ++l) {
    const int h = static_cast<int>(cur.rows()), w = static_cast<int>(cur.cols());
    if (h < 3 || w < 3) throw InputError("pyramid: too many levels for this image size");
    Image low = apply(reduce_op(h), cur, reduce_op(w));
    pyr.bands.push_back(cur - apply(expand_op(h), low, expand_op(w)));
    cur = std::move(low);
  }
  pyr.residual = std::move(cur);
  return pyr;
}

Image collapse_laplacian_pyramid(const LaplacianPyramid& pyr) {
  Image cur = pyr.residual;
  for (std::size_t l = pyr.bands.size(); l-- > 0;) {
    const Image& band = pyr.bands[l];
    const int h = static_cast<int>(band.rows()), w = static_cast<int>(band.cols());
    cur = band + apply(expand_op(h), cur, expand_op(w));
  }
  return cur;
}

// --- NLPD --------------------------------------------------------------------

namespace {

struct NormalizedLevel {
  Image z;    // raw coefficients
  Image den;  // c + A|z|
  Image n;    // z / den
};

NormalizedLevel normalize_level(const Image& z, double c) {
  const auto& ar = average_op(static_cast<int>(z.rows()));
  const auto& ac = average_op(static_cast<int>(z.cols()));
  NormalizedLevel out;
  out.z = z;
  out.den = (apply(ar, z.cwiseAbs(), ac).array() + c).matrix();
  out.n = z.cwiseQuotient(out.den);
  return out;
}

// Backprop through n = z / (c + A|z|).
Image normalize_level_adjoint(const NormalizedLevel& lv, const Image& gn) {
  const auto& ar = average_op(static_cast<int>(lv.z.rows()));
  const auto& ac = average_op(static_cast<int>(lv.z.cols()));
  Image gz = gn.cwiseQuotient(lv.den);
  const Image gden = -(gn.array() * lv.z.array() / lv.den.array().square()).matrix();
  const Image gabs = apply_adjoint(ar, gden, ac);
  gz.array() += lv.z.array().sign() * gabs.array();
  return gz;
}

std::vector<Image> pyramid_levels(const LaplacianPyramid& p) {
  std::vector<Image> out = p.bands;
  out.push_back(p.residual);
  return out;
}

}  // namespace

double nlpd(const Image& a, const Image& b, const NlpdConfig& cfg) { return nlpd_with_grad(a, b, nullptr, cfg); }

double nlpd_with_grad(const Image& a, const Image& b, Image* grad_b, const NlpdConfig& cfg) {
  require_same_shape(a, b, "nlpd");
  if (!(cfg.c > 0.0)) throw ConfigError("nlpd: c must be positive");
  const int levels =
      cfg.levels > 0 ? cfg.levels : default_pyramid_levels(static_cast<int>(a.rows()), static_cast<int>(a.cols()));
  const auto pa = pyramid_levels(build_laplacian_pyramid(a, levels));
  const auto pb = pyramid_levels(build_laplacian_pyramid(b, levels));
  const std::size_t n_levels = pa.size();
  std::vector<NormalizedLevel> nb(n_levels);
  std::vector<Image> diff(n_levels);
  std::vector<double> rms(n_levels);
  double total = 0.0;
  for (std::size_t l = 0; l < n_levels; ++l) {
    const NormalizedLevel na = normalize_level(pa[l], cfg.c);
    nb[l] = normalize_level(pb[l], cfg.c);
    diff[l] = na.n - nb[l].n;
    rms[l] = std::sqrt(diff[l].squaredNorm() / static_cast<double>(diff[l].size()));
    total += rms[l];
  }
  const double value = total / static_cast<double>(n_levels);
  if (!grad_b) return value;

  // Gradients per level, then back through the pyramid from coarse to fine.
  std::vector<Image> gz(n_levels);
  for (std::size_t l = 0; l < n_levels; ++l) {
    Image gn = Image::Zero(diff[l].rows(), diff[l].cols());
    if (rms[l] > 0.0)
      gn = -diff[l] / (static_cast<double>(diff[l].size()) * rms[l] * static_cast<double>(n_levels));
    gz[l] = normalize_level_adjoint(nb[l], gn);
  }
  // band_l = x_l - E x_{l+1};  x_{l+1} = R x_l;  residual = x_L.
  Image g_low = gz[n_levels - 1];
  for (std::size_t l = n_levels - 1; l-- > 0;) {
    const int h = static_cast<int>(gz[l].rows()), w = static_cast<int>(gz[l].cols());
    const Image& g_band = gz[l];
    // contribution to x_{l+1} from -E x_{l+1} in band_l
    const Image g_next = g_low - apply_adjoint(expand_op(h), g_band, expand_op(w));
    g_low = g_band + apply_adjoint(reduce_op(h), g_next, reduce_op(w));
  }
  *grad_b = g_low;
  return value;
}

// --- MS-SSIM -------------------------------------------------------------

namespace {

constexpr std::array<double, 5> kMsssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

Eigen::MatrixXd gaussian_valid_operator(int n, int window, double sigma) {
  std::vector<double> k(window);
  const double centre = 0.5 * (window - 1);
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    const double d = i - centre;
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  const int m = n - window + 1;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(m, n);
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < window; ++t) g(i, i + t) = k[t];
  return g;
}

Eigen::MatrixXd halve_operator(int n) {
  const int m = n / 2;
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(m, n);
  for (int i = 0; i < m; ++i) p(i, 2 * i) = p(i, 2 * i + 1) = 0.5;
  return p;
}

int scales_for(int side, int window) {
  int s = 0;
  while (s < 5 && side >= (1 << s) * window) ++s;
  return s;
}

}  // namespace

MsssimLayout msssim_layout(int height, int width) {
  const int side = std::min(height, width);
  MsssimLayout lay{11, scales_for(side, 11), {}};
  if (lay.scales < 2) lay = {8, scales_for(side, 8), {}};
  if (lay.scales < 2) throw InputError("msssim: patch too small for two scales");
  double sum = 0.0;
  for (int s = 0; s < lay.scales; ++s) sum += kMsssimWeights[s];
  for (int s = 0; s < lay.scales; ++s) lay.weights.push_back(kMsssimWeights[s] / sum);
  return lay;
}

double msssim(const Image& a, const Image& b, const MsssimConfig& cfg) {
  return msssim_with_grad(a, b, nullptr, cfg);
}

double msssim_with_grad(const Image& a, const Image& b, Image* grad_b, const MsssimConfig& cfg) {
  require_same_shape(a, b, "msssim");
  const MsssimLayout lay = msssim_layout(static_cast<int>(a.rows()), static_cast<int>(a.cols()));
  const double c1 = std::pow(cfg.k1 * cfg.data_range, 2);
  const double c2 = std::pow(cfg.k2 * cfg.data_range, 2);
  const int S = lay.scales;

  struct Scale {
    Image a, b;
    Eigen::MatrixXd gr, gc;  // window operators
    Image mu_a, mu_b, sig_a, sig_b, sig_ab, cs_map, l_map;
    double factor_raw = 0.0;
  };
  std::vector<Scale> sc(S);
  sc[0].a = a;
  sc[0].b = b;
  for (int s = 0; s < S; ++s) {
    Scale& x = sc[s];
    if (s > 0) {
      const auto pr = halve_operator(static_cast<int>(sc[s - 1].a.rows()));
      const auto pc = halve_operator(static_cast<int>(sc[s - 1].a.cols()));
      x.a = apply(pr, sc[s - 1].a, pc);
      x.b = apply(pr, sc[s - 1].b, pc);
    }
    x.gr = gaussian_valid_operator(static_cast<int>(x.a.rows()), lay.window, cfg.sigma);
    x.gc = gaussian_valid_operator(static_cast<int>(x.a.cols()), lay.window, cfg.sigma);
    x.mu_a = apply(x.gr, x.a, x.gc);
    x.mu_b = apply(x.gr, x.b, x.gc);
    x.sig_a = apply(x.gr, x.a.cwiseProduct(x.a), x.gc) - x.mu_a.cwiseProduct(x.mu_a);
    x.sig_b = apply(x.gr, x.b.cwiseProduct(x.b), x.gc) - x.mu_b.cwiseProduct(x.mu_b);
    x.sig_ab = apply(x.gr, x.a.cwiseProduct(x.b), x.gc) - x.mu_a.cwiseProduct(x.mu_b);
    x.cs_map = ((2.0 * x.sig_ab.array() + c2) / (x.sig_a.array() + x.sig_b.array() + c2)).matrix();
    if (s + 1 == S) {
      x.l_map = ((2.0 * x.mu_a.array() * x.mu_b.array() + c1) /
                 (x.mu_a.array().square() + x.mu_b.array().square() + c1))
                    .matrix();
      x.factor_raw = x.l_map.cwiseProduct(x.cs_map).mean();
    } else {
      x.factor_raw = x.cs_map.mean();
    }
  }
  double value = 1.0;
  std::vector<double> factor(S), dfactor(S, 1.0);
  for (int s = 0; s < S; ++s) {
    const double f = sc[s].factor_raw;
    if (cfg.smooth > 0.0) {
      const double r = std::hypot(f, cfg.smooth);
      factor[s] = 0.5 * (f + r);
      dfactor[s] = 0.5 * (1.0 + f / r);
    } else {
      factor[s] = std::max(f, cfg.floor);
      dfactor[s] = f > cfg.floor ? 1.0 : 0.0;
    }
    value *= factor[s] > 0.0 ? std::pow(factor[s], lay.weights[s]) : 0.0;
  }
  if (!grad_b) return value;

  Image g_next;  // gradient w.r.t. b at the next (coarser) scale
  for (int s = S; s-- > 0;) {
    Scale& x = sc[s];
    Image g = Image::Zero(x.b.rows(), x.b.cols());
    if (dfactor[s] > 0.0 && factor[s] > 0.0 && value > 0.0) {
      const double dv_df = lay.weights[s] * value / factor[s] * dfactor[s];
      const double per = dv_df / static_cast<double>(x.cs_map.size());
      const bool last = s + 1 == S;
      const auto num = (2.0 * x.sig_ab.array() + c2);
      const auto den = (x.sig_a.array() + x.sig_b.array() + c2);
      Eigen::ArrayXXd g_cs = Eigen::ArrayXXd::Constant(x.cs_map.rows(), x.cs_map.cols(), per);
      Eigen::ArrayXXd g_l = Eigen::ArrayXXd::Zero(x.cs_map.rows(), x.cs_map.cols());
      if (last) {
        g_l = g_cs * x.cs_map.array();
        g_cs = g_cs * x.l_map.array();
      }
      const Eigen::ArrayXXd dcs_dsab = 2.0 / den;
      const Eigen::ArrayXXd dcs_dsb = -num / den.square();
      Eigen::ArrayXXd g_mu = g_cs * (dcs_dsab * (-x.mu_a.array()) + dcs_dsb * (-2.0 * x.mu_b.array()));
      if (last) {
        const auto ln = 2.0 * x.mu_a.array() * x.mu_b.array() + c1;
        const auto ld = x.mu_a.array().square() + x.mu_b.array().square() + c1;
        g_mu += g_l * (2.0 * x.mu_a.array() / ld - ln * 2.0 * x.mu_b.array() / ld.square());
      }
      const Image g_ebb = (g_cs * dcs_dsb).matrix();
      const Image g_eab = (g_cs * dcs_dsab).matrix();
      g = apply_adjoint(x.gr, g_mu.matrix(), x.gc);
      g += 2.0 * x.b.cwiseProduct(apply_adjoint(x.gr, g_ebb, x.gc));
      g += x.a.cwiseProduct(apply_adjoint(x.gr, g_eab, x.gc));
    }
    if (s + 1 < S) {
      const auto pr = halve_operator(static_cast<int>(x.b.rows()));
      const auto pc = halve_operator(static_cast<int>(x.b.cols()));
      g += apply_adjoint(pr, g_next, pc);
    }
    g_next = std::move(g);
  }
  *grad_b = g_next;
  return value;
}

// --- corruption and contrast -----------------------------------------------

Patch add_gaussian_noise(const Patch& a, double sigma_255, Rng& rng) {
  if (!(sigma_255 >= 0.0)) throw ConfigError("add_gaussian_noise: sigma must be non-negative");
  if (sigma_255 == 0.0) return a;
  Image out = a.pixels();
  const double s = sigma_255 / 255.0;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) += rng.normal(0.0, s);
  return Patch(out);
}

Patch contrast_interp(const Patch& a, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 2.0)) throw ConfigError("contrast_interp: alpha must lie in [0, 2]");
  const double m = a.mean();
  return Patch(((a.pixels().array() - m) * alpha + m).matrix());
}

// --- file formats --------------------------------------------------------------

namespace {

std::string next_pgm_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

std::uint32_t read_u32_le(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw InputError("raw patch: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

}  // namespace

Patch read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  if (next_pgm_token(in) != "P5") throw InputError(path.string() + ": not a binary PGM (P5)");
  const int w = std::stoi(next_pgm_token(in));
  const int h = std::stoi(next_pgm_token(in));
  const int maxval = std::stoi(next_pgm_token(in));
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) throw InputError(path.string() + ": unsupported PGM header");
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw InputError(path.string() + ": truncated pixel data");
  Image img(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) img(r, c) = buf[static_cast<std::size_t>(r) * w + c] / static_cast<double>(maxval);
  return Patch(img);
}

void write_pgm(const std::filesystem::path& path, const Patch& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << "P5\n" << p.width() << ' ' << p.height() << "\n255\n";
  for (int r = 0; r < p.height(); ++r)
    for (int c = 0; c < p.width(); ++c) out.put(static_cast<char>(std::lround(p(r, c) * 255.0)));
}

Patch read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  const std::uint32_t h = read_u32_le(in), w = read_u32_le(in);
  if (h == 0 || w == 0 || h > (1u << 15) || w > (1u << 15)) throw InputError(path.string() + ": bad raw dimensions");
  Image img(h, w);
  for (std::uint32_t r = 0; r < h; ++r)
    for (std::uint32_t c = 0; c < w; ++c) {
      const std::uint32_t bits = read_u32_le(in);
      img(r, c) = static_cast<double>(std::bit_cast<float>(bits));
    }
  return Patch(img);
}

void write_raw(const std::filesystem::path& path, const Patch& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_u32_le(out, static_cast<std::uint32_t>(p.height()));
  write_u32_le(out, static_cast<std::uint32_t>(p.width()));
  for (int r = 0; r < p.height(); ++r)
    for (int c = 0; c < p.width(); ++c) write_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(p(r, c))));
}

Patch read_patch_file(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".raw") return read_raw(path);
  throw InputError(path.string() + ": unknown patch format (expected .pgm or .raw)");
}

std::vector<Patch> tile_patches(const Patch& image, int size, int stride) {
  if (size < 1 || stride < 1) throw ConfigError("tile_patches: size and stride must be positive");
  std::vector<Patch> out;
  for (int r = 0; r + size <= image.height(); r += stride)
    for (int c = 0; c + size <= image.width(); c += stride)
      out.emplace_back(image.pixels().block(r, c, size, size));
  return out;
}

std::vector<Patch> load_patch_corpus(const std::filesystem::path& dir, int size, int stride) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("patch corpus directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Patch> out;
  for (const auto& f : files) {
    auto tiles = tile_patches(read_pgm(f), size, stride);
    out.insert(out.end(), tiles.begin(), tiles.end());
  }
  if (out.empty()) throw ConfigError("patch corpus is empty: " + dir.string());
  return out;
}

}  // namespace pplab
