#pragma once

#include "crate/model.hpp"

namespace crate {

struct CodingRateParams {
  Scalar eps = 1.0;     // quantization precision
  Scalar lambda = 0.1;  // sparsity weight
};

struct RateReport {
  Scalar r = 0.0;   // coding rate of the full token set
  Scalar rc = 0.0;  // summed coding rate of subspace projections
  long l0 = 0;      // entries with |z| > 1e-8
  Scalar l1 = 0.0;
  Scalar objective = 0.0;  // r - lambda * l0 - rc
};

namespace detail {

// 0.5*logdet(I + alpha Z Z^T), evaluated on whichever Gram side is smaller.
inline Scalar half_logdet_gram(const Mat& z, Scalar alpha) {
  const Index d = z.rows(), n = z.cols();
  if (d == 0 || n == 0) return 0.0;
  Mat s;
  if (d <= n)
    s = Mat::Identity(d, d) + alpha * (z * z.transpose());
  else
    s = Mat::Identity(n, n) + alpha * (z.transpose() * z);
  Eigen::LLT<Mat> llt(s);
  if (llt.info() != Eigen::Success)
    throw NumericError("coding rate: Gram matrix is not positive definite");
  return llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

// R(Z) = 0.5*logdet(I_d + d/(n eps^2) Z Z^T); n is the column count actually
// passed in (N+1 when the class token is included).
inline Scalar coding_rate(const Mat& z, Scalar eps) {
  if (eps <= 0.0) throw ConfigError("coding_rate: eps must be positive");
  if (z.cols() == 0) return 0.0;
  const Scalar alpha =
      static_cast<Scalar>(z.rows()) / (static_cast<Scalar>(z.cols()) * eps * eps);
  return detail::half_logdet_gram(z, alpha);
}

// R^c(Z | U_[K]) = sum_k 0.5*logdet(I_p + p/(n eps^2) (U_k^T Z)(U_k^T Z)^T).
inline Scalar coding_rate_subspaces(const Mat& z, const std::vector<Mat>& subspaces,
                                    Scalar eps) {
  if (eps <= 0.0) throw ConfigError("coding_rate_subspaces: eps must be positive");
  if (z.cols() == 0 || subspaces.empty()) return 0.0;
  const Scalar p = static_cast<Scalar>(subspaces.front().cols());
  const Scalar alpha = p / (static_cast<Scalar>(z.cols()) * eps * eps);
  Scalar total = 0.0;
  for (const auto& u : subspaces) total += detail::half_logdet_gram(u.transpose() * z, alpha);
  return total;
}

// Analytic gradient of R^c. With W_k = U_k^T Z and alpha = p/(n eps^2),
//   dR^c/dZ = sum_k alpha U_k (I_p + alpha W_k W_k^T)^{-1} W_k,
// which equals alpha U_k W_k (I_n + alpha W_k^T W_k)^{-1} by push-through.
inline Mat grad_coding_rate_subspaces(const Mat& z, const std::vector<Mat>& subspaces,
                                      Scalar eps) {
  if (eps <= 0.0) throw ConfigError("grad_coding_rate_subspaces: eps must be positive");
  Mat grad = Mat::Zero(z.rows(), z.cols());
  if (z.cols() == 0 || subspaces.empty()) return grad;
  const Index p = subspaces.front().cols();
  const Scalar alpha =
      static_cast<Scalar>(p) / (static_cast<Scalar>(z.cols()) * eps * eps);
  for (const auto& u : subspaces) {
    Mat w = u.transpose() * z;
    Mat s = Mat::Identity(p, p) + alpha * (w * w.transpose());
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success)
      throw NumericError("grad_coding_rate_subspaces: singular system");
    grad.noalias() += alpha * (u * llt.solve(w));
  }
  return grad;
}

// Z - kappa * grad R^c(Z | U); one exact gradient step on the compression term.
inline Mat exact_compression_step(const Mat& z, const std::vector<Mat>& subspaces, Scalar eps,
                                  Scalar kappa) {
  if (kappa <= 0.0) throw ConfigError("exact_compression_step: kappa must be positive");
  return z - kappa * grad_coding_rate_subspaces(z, subspaces, eps);
}

// The attention operator in its defining form: prefactor p/(n eps^2) included,
// unit softmax temperature, no output projection.
inline Mat mssa_equation_form(const Mat& z, const std::vector<Mat>& subspaces, Scalar eps) {
  const Scalar n = static_cast<Scalar>(z.cols());
  const Scalar p = static_cast<Scalar>(subspaces.front().cols());
  const Scalar beta = p / (n * eps * eps);
  Mat out = Mat::Zero(z.rows(), z.cols());
  for (const auto& u : subspaces) {
    Mat w = u.transpose() * z;
    Mat attn = row_softmax(w.transpose() * w);
    out.noalias() += u * (w * attn.transpose());
  }
  return beta * out;
}

struct MssaGradientDiagnostic {
  Scalar cosine = 0.0;        // cos angle between vec(G) and vec(G_hat)
  Scalar rel_norm_gap = 0.0;  // | |G| - |G_hat| | / max(|G|, |G_hat|)
  bool orthonormal_inputs = true;
  bool degenerate = false;  // one of the gradients is (near) zero
};

// Compares the exact gradient G of R^c with the attention surrogate
// G_hat = p/(n eps^2) * (Z - MSSA(Z)). Reported, never asserted exact.
inline MssaGradientDiagnostic mssa_gradient_diagnostic(const Mat& z,
                                                       const std::vector<Mat>& subspaces,
                                                       Scalar eps) {
  MssaGradientDiagnostic diag;
  for (const auto& u : subspaces) {
    Mat gram = u.transpose() * u;
    if ((gram - Mat::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() > 1e-8)
      diag.orthonormal_inputs = false;
  }
  const Scalar n = static_cast<Scalar>(z.cols());
  const Scalar p = static_cast<Scalar>(subspaces.front().cols());
  const Scalar beta = p / (n * eps * eps);
  Mat g = grad_coding_rate_subspaces(z, subspaces, eps);
  Mat g_hat = beta * (z - mssa_equation_form(z, subspaces, eps));
  const Scalar ng = g.norm(), nh = g_hat.norm();
  if (ng < 1e-14 || nh < 1e-14) {
    diag.degenerate = true;
    diag.rel_norm_gap = (ng < 1e-14 && nh < 1e-14) ? 0.0 : 1.0;
    return diag;
  }
  diag.cosine = (g.array() * g_hat.array()).sum() / (ng * nh);
  diag.rel_norm_gap = std::abs(ng - nh) / std::max(ng, nh);
  return diag;
}

constexpr Scalar kL0Threshold = 1e-8;

inline RateReport rate_report(const Mat& z, const std::vector<Mat>& subspaces,
                              const CodingRateParams& params) {
  RateReport rep;
  rep.r = coding_rate(z, params.eps);
  rep.rc = coding_rate_subspaces(z, subspaces, params.eps);
  rep.l0 = (z.array().abs() > kL0Threshold).count();
  rep.l1 = z.array().abs().sum();
  rep.objective = rep.r - params.lambda * static_cast<Scalar>(rep.l0) - rep.rc;
  return rep;
}

}  // namespace crate
