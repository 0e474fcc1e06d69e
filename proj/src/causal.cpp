#include "trialscope/causal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <Eigen/Dense>

#include "trialscope/common.hpp"

namespace trialscope {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

const char* to_string(HazardEstimate::Method v) {
  return v == HazardEstimate::Method::coxph_u ? "CoxPH-U" : "CoxPH-IPSW";
}

namespace {

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

PropensityModel irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                     std::vector<std::string> names, double clip_epsilon) {
  const Eigen::Index n = X.rows(), p = X.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  PropensityModel model;
  model.design_names = std::move(names);
  model.clip_epsilon = clip_epsilon;

  constexpr int kMaxIter = 100;
  constexpr double kTol = 1e-8;
  constexpr double kSeparationBound = 30.0;

  for (int iter = 1; iter <= kMaxIter; ++iter) {
    Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd mu(n), wdiag(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = sigmoid(eta[i]);
      wdiag[i] = mu[i] * (1.0 - mu[i]);
    }
    Eigen::MatrixXd H = X.transpose() * wdiag.asDiagonal() * X;
    Eigen::VectorXd g = X.transpose() * (y - mu);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success)
      throw NumericError("logistic regression: singular normal equations");
    Eigen::VectorXd step = ldlt.solve(g);
    if (!step.allFinite())
      throw NumericError("logistic regression: singular normal equations");
    beta += step;
    model.iterations = iter;
    if (beta.cwiseAbs().maxCoeff() > kSeparationBound)
      throw NumericError(
          "logistic regression: coefficient diverging (perfect separation suspected); review "
          "the covariates");
    if (step.cwiseAbs().maxCoeff() < kTol) {
      model.converged = true;
      break;
    }
  }
  if (!model.converged)
    throw NumericError("logistic regression did not converge in 100 iterations");

  model.coef.assign(beta.data(), beta.data() + p);
  Eigen::VectorXd eta = X * beta;
  model.scores.resize(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    model.scores[static_cast<size_t>(i)] =
        std::clamp(sigmoid(eta[i]), clip_epsilon, 1.0 - clip_epsilon);
  return model;
}

// Reference-coded design: intercept, then each usable column; the first level
// of every one-hot group and constant columns are dropped.
std::pair<Eigen::MatrixXd, std::vector<std::string>> propensity_design(
    const EmulationDataset& ds) {
  const size_t n = ds.rows.size();
  std::vector<size_t> cols;
  std::set<std::string> seen_groups;
  for (size_t c = 0; c < ds.columns.size(); ++c) {
    const auto& col = ds.columns[c];
    if (col.kind == CovariateKind::categorical) {
      if (seen_groups.insert(col.group).second) continue;  // reference level
    }
    double first = ds.rows.empty() ? 0.0 : ds.rows[0].x[c];
    bool constant = true;
    for (const auto& row : ds.rows)
      if (row.x[c] != first) {
        constant = false;
        break;
      }
    if (constant) continue;
    cols.push_back(c);
  }
  Eigen::MatrixXd X(n, cols.size() + 1);
  std::vector<std::string> names{"(intercept)"};
  for (size_t i = 0; i < n; ++i) X(static_cast<Eigen::Index>(i), 0) = 1.0;
  for (size_t k = 0; k < cols.size(); ++k) {
    names.push_back(ds.columns[cols[k]].name);
    for (size_t i = 0; i < n; ++i)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k + 1)) = ds.rows[i].x[cols[k]];
  }
  return {std::move(X), std::move(names)};
}

}  // namespace

PropensityModel fit_logistic_propensity(const EmulationDataset& ds) {
  if (!ds.encoded) throw ValidationError("propensity fit requires an encoded dataset");
  const size_t n = ds.rows.size();
  if (n == 0) throw ValidationError("propensity fit on empty dataset");
  for (const auto& row : ds.rows)
    for (size_t c = 0; c < row.missing.size(); ++c)
      if (row.missing[c])
        throw ValidationError("design matrix has missing entries; run imputation first");
  if (ds.n_treatment() == 0 || ds.n_control() == 0)
    throw ValidationError("propensity fit requires both arms nonempty");

  auto [X, names] = propensity_design(ds);
  Eigen::VectorXd y(n);
  for (size_t i = 0; i < n; ++i) y[static_cast<Eigen::Index>(i)] = ds.rows[i].w;
  return irls(X, y, std::move(names), 1e-3);
}

PropensityModel fit_logistic(const std::vector<std::vector<double>>& x,
                             const std::vector<int>& w, double clip_epsilon) {
  const size_t n = w.size();
  if (x.size() != n) throw ValidationError("fit_logistic: x and w sizes differ");
  const size_t p = n == 0 ? 0 : x[0].size();
  Eigen::MatrixXd X(n, p + 1);
  Eigen::VectorXd y(n);
  std::vector<std::string> names{"(intercept)"};
  for (size_t j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
  for (size_t i = 0; i < n; ++i) {
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (size_t j = 0; j < p; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = x[i][j];
    y[static_cast<Eigen::Index>(i)] = w[i];
  }
  return irls(X, y, std::move(names), clip_epsilon);
}

IpswWeights compute_ipsw_weights(const PropensityModel& model, const std::vector<int>& treat) {
  if (model.scores.size() != treat.size())
    throw ValidationError("compute_ipsw_weights: score/treatment length mismatch");
  IpswWeights out;
  out.method = IpswWeights::Method::ipsw;
  out.w.resize(treat.size());
  for (size_t i = 0; i < treat.size(); ++i) {
    const double e = model.scores[i];  // already clipped into [eps, 1-eps]
    out.w[i] = treat[i] == 1 ? 1.0 / e : 1.0 / (1.0 - e);
  }
  return out;
}

namespace {

struct CoxData {
  std::vector<double> y;
  std::vector<int> d;
  std::vector<double> wts;        // case weights
  Eigen::MatrixXd z;              // n x p covariates
  std::vector<size_t> order_desc; // indices sorted by y descending
};

struct CoxEval {
  double loglik;
  Eigen::VectorXd score;
  Eigen::MatrixXd info;
};

// One pass over risk sets (descending time): S0, S1, S2 accumulate; each tie
// group shares the denominators (Breslow).
CoxEval cox_eval(const CoxData& data, const Eigen::VectorXd& beta) {
  const size_t n = data.y.size();
  const Eigen::Index p = data.z.cols();
  CoxEval ev{0.0, Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Zero(p, p)};

  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);

  size_t i = 0;
  while (i < n) {
    const double t = data.y[data.order_desc[i]];
    size_t j = i;
    for (; j < n && data.y[data.order_desc[j]] == t; ++j) {
      const size_t idx = data.order_desc[j];
      const double r = data.wts[idx] * std::exp(data.z.row(static_cast<Eigen::Index>(idx)).dot(beta));
      s0 += r;
      s1 += r * data.z.row(static_cast<Eigen::Index>(idx)).transpose();
      s2 += r * data.z.row(static_cast<Eigen::Index>(idx)).transpose() *
            data.z.row(static_cast<Eigen::Index>(idx));
    }
    if (s0 > 0) {
      const Eigen::VectorXd xbar = s1 / s0;
      for (size_t k = i; k < j; ++k) {
        const size_t idx = data.order_desc[k];
        if (!data.d[idx]) continue;
        const double w = data.wts[idx];
        ev.loglik += w * (data.z.row(static_cast<Eigen::Index>(idx)).dot(beta) - std::log(s0));
        ev.score += w * (data.z.row(static_cast<Eigen::Index>(idx)).transpose() - xbar);
        ev.info += w * (s2 / s0 - xbar * xbar.transpose());
      }
    }
    i = j;
  }
  return ev;
}

CoxFit cox_newton(const CoxData& data) {
  const Eigen::Index p = data.z.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  CoxEval ev = cox_eval(data, beta);

  CoxFit fit;
  constexpr int kMaxIter = 100;
  constexpr double kTol = 1e-9;
  for (int iter = 1; iter <= kMaxIter; ++iter) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.info);
    if (ldlt.info() != Eigen::Success)
      throw NumericError("cox fit: singular information matrix");
    Eigen::VectorXd step = ldlt.solve(ev.score);
    if (!step.allFinite()) throw NumericError("cox fit: non-finite Newton step");

    // step halving against likelihood decreases
    double scale = 1.0;
    CoxEval next = cox_eval(data, beta + step);
    int halvings = 0;
    while (next.loglik < ev.loglik && halvings < 30) {
      scale *= 0.5;
      next = cox_eval(data, beta + scale * step);
      ++halvings;
    }
    beta += scale * step;
    fit.iterations = iter;
    const double delta = std::abs(next.loglik - ev.loglik);
    ev = next;
    if (delta < kTol) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged)
    throw NumericError("cox fit did not converge in 100 iterations (loglik tol 1e-9)");
  if (beta.cwiseAbs().maxCoeff() > 30.0)
    throw NumericError("cox fit: coefficient diverging (monotone likelihood suspected)");

  fit.b_w = beta[0];
  for (Eigen::Index k = 1; k < p; ++k) fit.covariate_coef.push_back(beta[k]);
  fit.loglik = ev.loglik;

  const size_t n = data.y.size();
  bool uniform = true;
  for (size_t i = 1; i < n; ++i)
    if (data.wts[i] != data.wts[0]) {
      uniform = false;
      break;
    }

  Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.info);
  Eigen::MatrixXd inv_info = ldlt.solve(Eigen::MatrixXd::Identity(p, p));

  if (uniform) {
    fit.variance = CoxFit::Variance::information;
    // constant weights scale information linearly; normalize so any c>0 gives
    // the unweighted variance
    const double c = data.wts.empty() ? 1.0 : data.wts[0];
    fit.se = std::sqrt(inv_info(0, 0) * c);
  } else {
    // robust sandwich from weighted score residuals
    fit.variance = CoxFit::Variance::robust_sandwich;

    // event-time tables (ascending)
    std::vector<size_t> order_asc(data.order_desc.rbegin(), data.order_desc.rend());
    std::vector<double> etimes;
    std::vector<double> dlambda;             // d_k / S0_k
    std::vector<Eigen::VectorXd> xbar_at;    // S1/S0 at event time
    {
      double s0 = 0.0;
      Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
      size_t i = 0;
      const size_t m = data.order_desc.size();
      while (i < m) {
        const double t = data.y[data.order_desc[i]];
        size_t j = i;
        double deadwt = 0.0;
        for (; j < m && data.y[data.order_desc[j]] == t; ++j) {
          const size_t idx = data.order_desc[j];
          const double r =
              data.wts[idx] * std::exp(data.z.row(static_cast<Eigen::Index>(idx)).dot(beta));
          s0 += r;
          s1 += r * data.z.row(static_cast<Eigen::Index>(idx)).transpose();
          if (data.d[idx]) deadwt += data.wts[idx];
        }
        if (deadwt > 0) {
          etimes.push_back(t);
          dlambda.push_back(deadwt / s0);
          xbar_at.push_back(s1 / s0);
        }
        i = j;
      }
    }
    std::reverse(etimes.begin(), etimes.end());
    std::reverse(dlambda.begin(), dlambda.end());
    std::reverse(xbar_at.begin(), xbar_at.end());

    // prefix sums over ascending event times
    std::vector<double> cum_dl(etimes.size());
    std::vector<Eigen::VectorXd> cum_dlxbar(etimes.size());
    double acc = 0.0;
    Eigen::VectorXd accv = Eigen::VectorXd::Zero(p);
    for (size_t k = 0; k < etimes.size(); ++k) {
      acc += dlambda[k];
      accv += dlambda[k] * xbar_at[k];
      cum_dl[k] = acc;
      cum_dlxbar[k] = accv;
    }

    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
    for (size_t idx = 0; idx < n; ++idx) {
      const Eigen::VectorXd xi = data.z.row(static_cast<Eigen::Index>(idx)).transpose();
      const double expeta = std::exp(xi.dot(beta));
      // last event time <= y_i
      size_t k = static_cast<size_t>(
          std::upper_bound(etimes.begin(), etimes.end(), data.y[idx]) - etimes.begin());
      Eigen::VectorXd resid = Eigen::VectorXd::Zero(p);
      if (data.d[idx]) {
        // the subject's own event time is among etimes
        size_t self = static_cast<size_t>(
            std::lower_bound(etimes.begin(), etimes.end(), data.y[idx]) - etimes.begin());
        resid += xi - xbar_at[self];
      }
      if (k > 0) resid -= expeta * (xi * cum_dl[k - 1] - cum_dlxbar[k - 1]);
      const Eigen::VectorXd wl = data.wts[idx] * resid;
      meat += wl * wl.transpose();
    }
    Eigen::MatrixXd vrob = inv_info * meat * inv_info;
    fit.se = std::sqrt(vrob(0, 0));
  }
  if (!(fit.se > 0.0) || !std::isfinite(fit.se))
    throw NumericError("cox fit: non-positive standard error");
  return fit;
}

CoxData build_cox_data(const std::vector<double>& y, const std::vector<int>& d,
                       const Eigen::MatrixXd& z, const std::vector<double>& wts) {
  CoxData data;
  data.y = y;
  data.d = d;
  data.wts = wts;
  data.z = z;
  data.order_desc.resize(y.size());
  std::iota(data.order_desc.begin(), data.order_desc.end(), size_t{0});
  std::stable_sort(data.order_desc.begin(), data.order_desc.end(),
                   [&](size_t a, size_t b) { return y[a] > y[b]; });
  return data;
}

}  // namespace

CoxFit fit_cox(const EmulationDataset& ds, const IpswWeights& weights, CoxAdjust adjust) {
  const size_t n = ds.rows.size();
  if (weights.w.size() != n) throw ValidationError("fit_cox: weight/row length mismatch");

  size_t events_t = 0, events_c = 0;
  std::vector<double> y(n);
  std::vector<int> d(n);
  for (size_t i = 0; i < n; ++i) {
    if (!ds.rows[i].outcome) throw ValidationError("fit_cox: unresolved outcome");
    y[i] = ds.y(i);
    d[i] = ds.d(i);
    if (y[i] < 0) throw ValidationError("fit_cox: negative survival time");
    if (d[i]) (ds.rows[i].w == 1 ? events_t : events_c) += 1;
  }
  if (events_t == 0 || events_c == 0)
    throw ValidationError("fit_cox: need at least one event in each arm");

  const size_t extra =
      adjust == CoxAdjust::doubly_adjusted && !ds.columns.empty() ? ds.columns.size() : 0;
  Eigen::MatrixXd z(n, 1 + extra);
  for (size_t i = 0; i < n; ++i) {
    z(static_cast<Eigen::Index>(i), 0) = ds.rows[i].w;
    for (size_t c = 0; c < extra; ++c)
      z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(1 + c)) = ds.rows[i].x[c];
  }
  return cox_newton(build_cox_data(y, d, z, weights.w));
}

CoxFit fit_cox_arrays(const std::vector<double>& y, const std::vector<int>& d,
                      const std::vector<int>& w, const std::vector<double>& weights) {
  const size_t n = y.size();
  if (d.size() != n || w.size() != n)
    throw ValidationError("fit_cox_arrays: length mismatch");
  std::vector<double> wts = weights.empty() ? std::vector<double>(n, 1.0) : weights;
  if (wts.size() != n) throw ValidationError("fit_cox_arrays: weight length mismatch");
  size_t events_t = 0, events_c = 0;
  for (size_t i = 0; i < n; ++i)
    if (d[i]) (w[i] == 1 ? events_t : events_c) += 1;
  if (events_t == 0 || events_c == 0)
    throw ValidationError("fit_cox_arrays: need at least one event in each arm");
  Eigen::MatrixXd z(n, 1);
  for (size_t i = 0; i < n; ++i) z(static_cast<Eigen::Index>(i), 0) = w[i];
  return cox_newton(build_cox_data(y, d, z, wts));
}

HazardEstimate estimate_hr(const CoxFit& fit, const EmulationDataset& ds,
                           HazardEstimate::Method method) {
  if (!fit.converged) throw NumericError("estimate_hr: fit did not converge");
  HazardEstimate est;
  est.b_w = fit.b_w;
  est.se = fit.se;
  est.hr = std::exp(fit.b_w);
  est.lo = std::exp(fit.b_w - 1.96 * fit.se);
  est.hi = std::exp(fit.b_w + 1.96 * fit.se);
  est.n_treatment = static_cast<int>(ds.n_treatment());
  est.n_control = static_cast<int>(ds.n_control());
  est.method = method;
  return est;
}

double BalanceReport::max_abs_unweighted() const {
  double m = 0.0;
  for (const auto& r : rows)
    if (!r.infinite) m = std::max(m, std::abs(r.smd_unweighted));
  return m;
}
double BalanceReport::max_abs_weighted() const {
  double m = 0.0;
  for (const auto& r : rows)
    if (!r.infinite) m = std::max(m, std::abs(r.smd_weighted));
  return m;
}

namespace {

// weighted mean and population-style weighted variance
std::pair<double, double> weighted_moments(const std::vector<double>& x,
                                           const std::vector<double>& w) {
  double sw = 0.0, sx = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
  }
  const double mean = sx / sw;
  double ss = 0.0;
  for (size_t i = 0; i < x.size(); ++i) ss += w[i] * (x[i] - mean) * (x[i] - mean);
  return {mean, ss / sw};
}

double smd_for(const std::vector<double>& xt, const std::vector<double>& wt,
               const std::vector<double>& xc, const std::vector<double>& wc, bool& infinite) {
  auto [mt, vt] = weighted_moments(xt, wt);
  auto [mc, vc] = weighted_moments(xc, wc);
  const double pooled = (vt + vc) / 2.0;
  if (pooled <= 0.0) {
    if (mt == mc) return 0.0;
    infinite = true;
    return std::numeric_limits<double>::infinity();
  }
  return (mt - mc) / std::sqrt(pooled);
}

}  // namespace

BalanceReport standardized_mean_difference(const EmulationDataset& ds,
                                           const IpswWeights* weights) {
  if (!ds.encoded) throw ValidationError("smd requires an encoded dataset");
  const size_t n = ds.rows.size();
  std::vector<double> ones(n, 1.0);
  const std::vector<double>& w = weights ? weights->w : ones;
  if (w.size() != n) throw ValidationError("smd: weight length mismatch");

  BalanceReport report;
  for (size_t c = 0; c < ds.columns.size(); ++c) {
    std::vector<double> xt, wt, xc, wc;
    for (size_t i = 0; i < n; ++i) {
      if (ds.rows[i].w == 1) {
        xt.push_back(ds.rows[i].x[c]);
        wt.push_back(w[i]);
      } else {
        xc.push_back(ds.rows[i].x[c]);
        wc.push_back(w[i]);
      }
    }
    BalanceRow row;
    row.name = ds.columns[c].name;
    bool inf_u = false, inf_w = false;
    std::vector<double> ones_t(xt.size(), 1.0), ones_c(xc.size(), 1.0);
    row.smd_unweighted = smd_for(xt, ones_t, xc, ones_c, inf_u);
    row.smd_weighted = smd_for(xt, wt, xc, wc, inf_w);
    row.infinite = inf_u || inf_w;
    report.rows.push_back(std::move(row));
  }
  return report;
}

EquivalenceResult equivalence_test(const EquivalenceInput& a, const EquivalenceInput& b,
                                   double margin_log) {
  auto se_of = [](const EquivalenceInput& x) {
    if (!(x.lo < x.hi) || x.lo <= 0 || x.hr <= 0)
      throw ValidationError("equivalence_test: degenerate confidence interval");
    return (std::log(x.hi) - std::log(x.lo)) / 3.92;
  };
  const double se_a = se_of(a), se_b = se_of(b);
  const double delta = std::log(a.hr) - std::log(b.hr);
  const double se = std::sqrt(se_a * se_a + se_b * se_b);

  EquivalenceResult res;
  res.margin_log = margin_log;
  res.z_difference = delta / se;
  res.p_difference = 2.0 * (1.0 - normal_cdf(std::abs(res.z_difference)));
  res.consistent = std::abs(res.z_difference) <= 1.96;

  // TOST: H01 delta <= -margin vs H02 delta >= margin
  const double z1 = (delta + margin_log) / se;
  const double z2 = (delta - margin_log) / se;
  const double p1 = 1.0 - normal_cdf(z1);
  const double p2 = normal_cdf(z2);
  res.tost_p = std::max(p1, p2);
  res.equivalent = res.tost_p < 0.05;
  return res;
}

}  // namespace trialscope
