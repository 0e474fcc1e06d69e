#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trialscope/cohort.hpp"

namespace trialscope {

struct PropensityModel {
  std::vector<double> coef;               // intercept first
  std::vector<std::string> design_names;  // aligned with coef
  std::vector<double> scores;             // clipped into [eps, 1-eps]
  double clip_epsilon = 1e-3;
  bool converged = false;
  int iterations = 0;
};

// Maximum-likelihood logistic regression of W on the design matrix via IRLS.
// One-hot groups enter in reference coding (first level dropped) so the
// intercept stays identifiable; constant columns are skipped.
PropensityModel fit_logistic_propensity(const EmulationDataset& ds);

// Low-level variant used by the oracles and the bindings.
PropensityModel fit_logistic(const std::vector<std::vector<double>>& x,
                             const std::vector<int>& w, double clip_epsilon = 1e-3);

struct IpswWeights {
  enum class Method { none, ipsw };
  Method method = Method::none;
  std::vector<double> w;

  static IpswWeights uniform(size_t n) { return {Method::none, std::vector<double>(n, 1.0)}; }
};

IpswWeights compute_ipsw_weights(const PropensityModel& model, const std::vector<int>& treat);

enum class CoxAdjust { treatment_only, doubly_adjusted };

struct CoxFit {
  double b_w = 0.0;
  std::vector<double> covariate_coef;  // doubly_adjusted only
  double se = 0.0;
  enum class Variance { information, robust_sandwich } variance = Variance::information;
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Weighted Cox partial likelihood with Breslow tie handling, Newton-Raphson
// with step halving, tolerance 1e-9 on the log-likelihood. Robust sandwich
// variance whenever the weights are not uniform.
CoxFit fit_cox(const EmulationDataset& ds, const IpswWeights& weights,
               CoxAdjust adjust = CoxAdjust::treatment_only);

CoxFit fit_cox_arrays(const std::vector<double>& y, const std::vector<int>& d,
                      const std::vector<int>& w, const std::vector<double>& weights);

struct HazardEstimate {
  double hr = 1.0;
  double lo = 0.0, hi = 0.0;
  int n_treatment = 0, n_control = 0;
  enum class Method { coxph_u, coxph_ipsw } method = Method::coxph_u;
  double b_w = 0.0;
  double se = 0.0;
};
const char* to_string(HazardEstimate::Method);

HazardEstimate estimate_hr(const CoxFit& fit, const EmulationDataset& ds,
                           HazardEstimate::Method method);

struct BalanceRow {
  std::string name;
  double smd_unweighted = 0.0;
  double smd_weighted = 0.0;
  bool infinite = false;
};
struct BalanceReport {
  std::vector<BalanceRow> rows;
  double max_abs_unweighted() const;
  double max_abs_weighted() const;
};

BalanceReport standardized_mean_difference(const EmulationDataset& ds,
                                           const IpswWeights* weights);

struct EquivalenceInput {
  double hr = 1.0;
  double lo = 0.0;
  double hi = 0.0;
};

struct EquivalenceResult {
  double z_difference = 0.0;
  double p_difference = 1.0;
  bool consistent = false;  // difference test non-significant at 0.05
  double tost_p = 1.0;
  bool equivalent = false;  // TOST rejects both one-sided nulls at 0.05
  double margin_log = 0.0;
};

EquivalenceResult equivalence_test(const EquivalenceInput& a, const EquivalenceInput& b,
                                   double margin_log = 0.26236426446749106);  // ln 1.3

double normal_cdf(double x);

}  // namespace trialscope
