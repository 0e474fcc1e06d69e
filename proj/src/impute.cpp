#include "trialscope/impute.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "trialscope/common.hpp"
#include "trialscope/rng.hpp"

namespace trialscope {

using json = nlohmann::ordered_json;
using MatrixXu8 = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

void ImputerConfig::validate() const {
  if (latent_dim < 1 || hidden_width < 1 || depth < 1 || epochs < 1 || k_train < 1 ||
      k_impute < 1)
    throw ConfigError("imputer config: all sizes must be positive");
  if (learning_rate <= 0) throw ConfigError("imputer config: learning rate must be positive");
  if (var_floor <= 0) throw ConfigError("imputer config: variance floor must be positive");
  if (minibatch < 1 || full_batch_limit < 1)
    throw ConfigError("imputer config: batch sizes must be positive");
}

namespace {

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct Grads {
  std::vector<Eigen::MatrixXd> enc_w;
  std::vector<Eigen::VectorXd> enc_b;
  std::vector<Eigen::MatrixXd> dec_w;
  std::vector<Eigen::VectorXd> dec_b;
  Eigen::VectorXd rho;

  static Grads zeros_like(const ImputerModel& m) {
    Grads g;
    for (const auto& w : m.enc_w) g.enc_w.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    for (const auto& b : m.enc_b) g.enc_b.push_back(Eigen::VectorXd::Zero(b.size()));
    for (const auto& w : m.dec_w) g.dec_w.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
    for (const auto& b : m.dec_b) g.dec_b.push_back(Eigen::VectorXd::Zero(b.size()));
    g.rho = Eigen::VectorXd::Zero(m.rho.size());
    return g;
  }
};

struct MlpTrace {
  std::vector<Eigen::MatrixXd> pre;  // pre-activations per hidden layer
  std::vector<Eigen::MatrixXd> act;  // act[0] = input, act[m] = relu(pre[m-1])
  Eigen::MatrixXd out;
};

MlpTrace mlp_forward(const std::vector<Eigen::MatrixXd>& w,
                     const std::vector<Eigen::VectorXd>& b, const Eigen::MatrixXd& input) {
  MlpTrace t;
  t.act.push_back(input);
  const size_t layers = w.size();
  for (size_t m = 0; m + 1 < layers; ++m) {
    Eigen::MatrixXd z = (w[m] * t.act.back()).colwise() + b[m];
    t.pre.push_back(z);
    t.act.push_back(z.cwiseMax(0.0));
  }
  t.out = (w.back() * t.act.back()).colwise() + b.back();
  return t;
}

// Backprop d(out) through the MLP; accumulates into gw/gb, returns d(input).
Eigen::MatrixXd mlp_backward(const std::vector<Eigen::MatrixXd>& w, const MlpTrace& t,
                             const Eigen::MatrixXd& dout, std::vector<Eigen::MatrixXd>& gw,
                             std::vector<Eigen::VectorXd>& gb) {
  const size_t layers = w.size();
  Eigen::MatrixXd dz = dout;
  for (size_t m = layers; m-- > 0;) {
    gw[m].noalias() += dz * t.act[m].transpose();
    gb[m] += dz.rowwise().sum();
    if (m == 0) return w[0].transpose() * dz;
    Eigen::MatrixXd da = w[m].transpose() * dz;
    dz = da.cwiseProduct(
        (t.pre[m - 1].array() > 0.0).cast<double>().matrix());
  }
  return {};
}

// Importance-weighted bound over a batch (columns of xt). eps has K horizontal
// blocks of batch width. Returns the mean negative bound; fills grads when
// requested.
double bound_loss(const ImputerModel& model, const Eigen::MatrixXd& xt, const MatrixXu8& maskt,
                  const Eigen::MatrixXd& eps, int K, Grads* grads) {
  const Eigen::Index d = xt.rows();
  const Eigen::Index n = xt.cols();
  const Eigen::Index L = model.cfg.latent_dim;
  const Eigen::Index nk = n * K;

  // zero-filled encoder input
  Eigen::MatrixXd xin = xt;
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (maskt(j, i)) xin(j, i) = 0.0;

  MlpTrace enc = mlp_forward(model.enc_w, model.enc_b, xin);
  Eigen::MatrixXd mu = enc.out.topRows(L);
  Eigen::MatrixXd lv = enc.out.bottomRows(L);
  Eigen::MatrixXd sigma = (0.5 * lv).array().exp().matrix();

  Eigen::MatrixXd zlat(L, nk);
  for (int k = 0; k < K; ++k)
    zlat.middleCols(k * n, n) = mu + sigma.cwiseProduct(eps.middleCols(k * n, n));

  MlpTrace dec = mlp_forward(model.dec_w, model.dec_b, zlat);
  const Eigen::MatrixXd& dout = dec.out;  // d x nk

  // per-feature gaussian variances
  Eigen::VectorXd s2(d), log_s2(d), ds2_drho(d);
  {
    Eigen::Index g = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian) {
        const double rho = model.rho[g];
        s2[j] = model.cfg.var_floor + softplus(rho);
        log_s2[j] = std::log(s2[j]);
        ds2_drho[j] = sigmoid(rho);
        ++g;
      } else {
        s2[j] = 1.0;
        log_s2[j] = 0.0;
        ds2_drho[j] = 0.0;
      }
    }
  }

  constexpr double kLog2Pi = 1.8378770664093453;

  // log w per (k, i)
  Eigen::MatrixXd logw(K, n);
  Eigen::VectorXd half_lv_sum = 0.5 * lv.colwise().sum().transpose();
  for (int k = 0; k < K; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index c = k * n + i;
      double lp = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        if (maskt(j, i)) continue;
        if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian) {
          const double r = xt(j, i) - dout(j, c);
          lp += -0.5 * (kLog2Pi + log_s2[j]) - 0.5 * r * r / s2[j];
        } else {
          const double l = dout(j, c);
          lp += xt(j, i) * l - softplus(l);
        }
      }
      double quad = 0.0;
      for (Eigen::Index l = 0; l < L; ++l) {
        const double z = zlat(l, c);
        const double e = eps(l, c);
        quad += -0.5 * z * z + 0.5 * e * e;
      }
      logw(k, i) = lp + quad + half_lv_sum[i];
    }
  }

  // bound per sample and loss
  double loss = 0.0;
  Eigen::VectorXd lse(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double m = logw(0, i);
    for (int k = 1; k < K; ++k) m = std::max(m, logw(k, i));
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(logw(k, i) - m);
    lse[i] = m + std::log(s);
    loss -= (lse[i] - std::log(static_cast<double>(K))) / static_cast<double>(n);
  }
  if (!grads) return loss;

  // d loss / d logw = -softmax_k / n
  Eigen::MatrixXd dlogw(K, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k)
      dlogw(k, i) = -std::exp(logw(k, i) - lse[i]) / static_cast<double>(n);

  Eigen::MatrixXd g_dout = Eigen::MatrixXd::Zero(d, nk);
  Eigen::VectorXd g_rho_by_feature = Eigen::VectorXd::Zero(d);
  for (int k = 0; k < K; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index c = k * n + i;
      const double dw = dlogw(k, i);
      for (Eigen::Index j = 0; j < d; ++j) {
        if (maskt(j, i)) continue;
        if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian) {
          const double r = xt(j, i) - dout(j, c);
          g_dout(j, c) = dw * (r / s2[j]);
          g_rho_by_feature[j] += dw * (-0.5 / s2[j] + 0.5 * r * r / (s2[j] * s2[j]));
        } else {
          g_dout(j, c) = dw * (xt(j, i) - sigmoid(dout(j, c)));
        }
      }
    }
  }

  Eigen::MatrixXd dz = mlp_backward(model.dec_w, dec, g_dout, grads->dec_w, grads->dec_b);
  // direct -0.5 z^2 term
  for (int k = 0; k < K; ++k)
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index c = k * n + i;
      for (Eigen::Index l = 0; l < L; ++l) dz(l, c) += dlogw(k, i) * (-zlat(l, c));
    }

  Eigen::MatrixXd dmu = Eigen::MatrixXd::Zero(L, n);
  Eigen::MatrixXd dlv = Eigen::MatrixXd::Zero(L, n);
  for (int k = 0; k < K; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index c = k * n + i;
      const double dw = dlogw(k, i);
      for (Eigen::Index l = 0; l < L; ++l) {
        dmu(l, i) += dz(l, c);
        dlv(l, i) += dz(l, c) * 0.5 * sigma(l, i) * eps(l, c) + 0.5 * dw;
      }
    }
  }

  Eigen::MatrixXd denc(2 * L, n);
  denc.topRows(L) = dmu;
  denc.bottomRows(L) = dlv;
  (void)mlp_backward(model.enc_w, enc, denc, grads->enc_w, grads->enc_b);

  {
    Eigen::Index g = 0;
    for (Eigen::Index j = 0; j < d; ++j)
      if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian)
        grads->rho[g++] += g_rho_by_feature[j] * ds2_drho[j];
  }
  return loss;
}

Eigen::MatrixXd draw_noise(uint64_t seed, std::string_view label, uint64_t index,
                           Eigen::Index rows, Eigen::Index cols) {
  auto rs = RngStream::derive(seed, label, index);
  Eigen::MatrixXd eps(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) eps(r, c) = rs.normal();
  return eps;
}

ImputerModel init_model(const ImputerConfig& cfg, const std::vector<Likelihood>& spec,
                        Eigen::Index d) {
  ImputerModel m;
  m.cfg = cfg;
  m.feature_spec = spec;
  auto rs = RngStream::derive(cfg.seed, "imputer_init");
  auto init_mlp = [&](std::vector<Eigen::MatrixXd>& ws, std::vector<Eigen::VectorXd>& bs,
                      Eigen::Index in, Eigen::Index hidden, Eigen::Index out, int depth) {
    std::vector<Eigen::Index> dims{in};
    for (int i = 0; i < depth; ++i) dims.push_back(hidden);
    dims.push_back(out);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      Eigen::MatrixXd w(dims[l + 1], dims[l]);
      const double scale = std::sqrt(2.0 / static_cast<double>(dims[l]));
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = scale * rs.normal();
      ws.push_back(std::move(w));
      bs.push_back(Eigen::VectorXd::Zero(dims[l + 1]));
    }
  };
  init_mlp(m.enc_w, m.enc_b, d, cfg.hidden_width, 2 * cfg.latent_dim, cfg.depth);
  init_mlp(m.dec_w, m.dec_b, cfg.latent_dim, cfg.hidden_width, d, cfg.depth);
  Eigen::Index n_gauss = 0;
  for (auto s : spec)
    if (s == Likelihood::gaussian) ++n_gauss;
  m.rho = Eigen::VectorXd::Zero(n_gauss);
  return m;
}

}  // namespace

size_t ImputerModel::n_params() const {
  size_t n = static_cast<size_t>(rho.size());
  for (const auto& w : enc_w) n += static_cast<size_t>(w.size());
  for (const auto& b : enc_b) n += static_cast<size_t>(b.size());
  for (const auto& w : dec_w) n += static_cast<size_t>(w.size());
  for (const auto& b : dec_b) n += static_cast<size_t>(b.size());
  return n;
}

Eigen::VectorXd ImputerModel::pack() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(n_params()));
  Eigen::Index at = 0;
  auto push_m = [&](const Eigen::MatrixXd& m) {
    std::copy(m.data(), m.data() + m.size(), flat.data() + at);
    at += m.size();
  };
  auto push_v = [&](const Eigen::VectorXd& v) {
    std::copy(v.data(), v.data() + v.size(), flat.data() + at);
    at += v.size();
  };
  for (const auto& w : enc_w) push_m(w);
  for (const auto& b : enc_b) push_v(b);
  for (const auto& w : dec_w) push_m(w);
  for (const auto& b : dec_b) push_v(b);
  push_v(rho);
  return flat;
}

void ImputerModel::unpack(const Eigen::VectorXd& flat) {
  Eigen::Index at = 0;
  auto pull_m = [&](Eigen::MatrixXd& m) {
    std::copy(flat.data() + at, flat.data() + at + m.size(), m.data());
    at += m.size();
  };
  auto pull_v = [&](Eigen::VectorXd& v) {
    std::copy(flat.data() + at, flat.data() + at + v.size(), v.data());
    at += v.size();
  };
  for (auto& w : enc_w) pull_m(w);
  for (auto& b : enc_b) pull_v(b);
  for (auto& w : dec_w) pull_m(w);
  for (auto& b : dec_b) pull_v(b);
  pull_v(rho);
}

namespace {

Eigen::VectorXd pack_grads(const Grads& g) {
  size_t n = static_cast<size_t>(g.rho.size());
  for (const auto& w : g.enc_w) n += static_cast<size_t>(w.size());
  for (const auto& b : g.enc_b) n += static_cast<size_t>(b.size());
  for (const auto& w : g.dec_w) n += static_cast<size_t>(w.size());
  for (const auto& b : g.dec_b) n += static_cast<size_t>(b.size());
  Eigen::VectorXd flat(static_cast<Eigen::Index>(n));
  Eigen::Index at = 0;
  auto push = [&](const double* p, Eigen::Index sz) {
    std::copy(p, p + sz, flat.data() + at);
    at += sz;
  };
  for (const auto& w : g.enc_w) push(w.data(), w.size());
  for (const auto& b : g.enc_b) push(b.data(), b.size());
  for (const auto& w : g.dec_w) push(w.data(), w.size());
  for (const auto& b : g.dec_b) push(b.data(), b.size());
  push(g.rho.data(), g.rho.size());
  return flat;
}

}  // namespace

ImputerModel train_imputer(const Eigen::MatrixXd& data, const MatrixXu8& mask,
                           const std::vector<Likelihood>& feature_spec,
                           const ImputerConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = data.rows(), d = data.cols();
  if (mask.rows() != n || mask.cols() != d)
    throw ValidationError("train_imputer: mask shape mismatch");
  if (static_cast<Eigen::Index>(feature_spec.size()) != d)
    throw ValidationError("train_imputer: feature spec length mismatch");
  for (Eigen::Index j = 0; j < d; ++j) {
    bool any = false;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!mask(i, j)) {
        any = true;
        break;
      }
    if (!any)
      throw ValidationError("train_imputer: column " + std::to_string(j) +
                            " has no observed entries");
  }

  ImputerModel model = init_model(cfg, feature_spec, d);
  Eigen::MatrixXd xt = data.transpose();
  MatrixXu8 maskt = mask.transpose();

  Eigen::VectorXd theta = model.pack();
  Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(theta.size());
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  int step = 0;

  const bool full_batch = n < cfg.full_batch_limit;
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    if (full_batch) {
      Eigen::MatrixXd eps = draw_noise(cfg.seed, "imputer_noise", static_cast<uint64_t>(epoch),
                                       cfg.latent_dim, n * cfg.k_train);
      Grads g = Grads::zeros_like(model);
      epoch_loss = bound_loss(model, xt, maskt, eps, cfg.k_train, &g);
      Eigen::VectorXd grad = pack_grads(g);
      ++step;
      for (Eigen::Index i = 0; i < theta.size(); ++i) {
        adam_m[i] = b1 * adam_m[i] + (1 - b1) * grad[i];
        adam_v[i] = b2 * adam_v[i] + (1 - b2) * grad[i] * grad[i];
        const double mhat = adam_m[i] / (1 - std::pow(b1, step));
        const double vhat = adam_v[i] / (1 - std::pow(b2, step));
        theta[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + adam_eps);
      }
      model.unpack(theta);
    } else {
      auto shuffle_rs = RngStream::derive(cfg.seed, "imputer_shuffle",
                                          static_cast<uint64_t>(epoch));
      shuffle_rs.shuffle(order);
      double total = 0.0;
      Eigen::Index done = 0;
      uint64_t batch_id = 0;
      while (done < n) {
        const Eigen::Index bs = std::min<Eigen::Index>(cfg.minibatch, n - done);
        Eigen::MatrixXd bx(d, bs);
        MatrixXu8 bm(d, bs);
        for (Eigen::Index c = 0; c < bs; ++c) {
          bx.col(c) = xt.col(order[static_cast<size_t>(done + c)]);
          bm.col(c) = maskt.col(order[static_cast<size_t>(done + c)]);
        }
        Eigen::MatrixXd eps = draw_noise(
            cfg.seed, "imputer_noise",
            static_cast<uint64_t>(epoch) * 1000003ull + batch_id, cfg.latent_dim,
            bs * cfg.k_train);
        Grads g = Grads::zeros_like(model);
        const double loss = bound_loss(model, bx, bm, eps, cfg.k_train, &g);
        total += loss * static_cast<double>(bs);
        Eigen::VectorXd grad = pack_grads(g);
        ++step;
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
          adam_m[i] = b1 * adam_m[i] + (1 - b1) * grad[i];
          adam_v[i] = b2 * adam_v[i] + (1 - b2) * grad[i] * grad[i];
          const double mhat = adam_m[i] / (1 - std::pow(b1, step));
          const double vhat = adam_v[i] / (1 - std::pow(b2, step));
          theta[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + adam_eps);
        }
        model.unpack(theta);
        done += bs;
        ++batch_id;
      }
      epoch_loss = total / static_cast<double>(n);
    }
    if (!std::isfinite(epoch_loss))
      throw NumericError("imputer training loss non-finite at epoch " + std::to_string(epoch));
    model.epoch_loss.push_back(epoch_loss);
  }
  return model;
}

Eigen::MatrixXd impute(const ImputerModel& model, const Eigen::MatrixXd& data,
                       const MatrixXu8& mask, int k) {
  if (k < 1) throw ConfigError("impute: K must be >= 1");
  const Eigen::Index n = data.rows(), d = data.cols();
  if (mask.rows() != n || mask.cols() != d) throw ValidationError("impute: mask shape mismatch");
  if (static_cast<Eigen::Index>(model.feature_spec.size()) != d)
    throw ValidationError("impute: model trained on a different feature spec");
  const Eigen::Index L = model.cfg.latent_dim;

  Eigen::MatrixXd out = data;
  constexpr double kLog2Pi = 1.8378770664093453;

  Eigen::VectorXd s2(d), log_s2(d);
  {
    Eigen::Index g = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian) {
        s2[j] = model.cfg.var_floor + softplus(model.rho[g]);
        log_s2[j] = std::log(s2[j]);
        ++g;
      }
    }
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    bool any = false;
    for (Eigen::Index j = 0; j < d; ++j)
      if (mask(i, j)) {
        any = true;
        break;
      }
    if (!any) continue;  // fully observed rows pass through untouched

    Eigen::VectorXd xin = data.row(i).transpose();
    for (Eigen::Index j = 0; j < d; ++j)
      if (mask(i, j)) xin[j] = 0.0;

    MlpTrace enc = mlp_forward(model.enc_w, model.enc_b, xin);
    Eigen::VectorXd mu = enc.out.topRows(L);
    Eigen::VectorXd sigma = (0.5 * enc.out.bottomRows(L)).array().exp().matrix();

    Eigen::MatrixXd eps =
        draw_noise(model.cfg.seed, "imputer_impute", static_cast<uint64_t>(i), L, k);
    Eigen::MatrixXd z(L, k);
    for (int s = 0; s < k; ++s) z.col(s) = mu + sigma.cwiseProduct(eps.col(s));

    MlpTrace dec = mlp_forward(model.dec_w, model.dec_b, z);

    Eigen::VectorXd logw(k);
    for (int s = 0; s < k; ++s) {
      double lp = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        if (mask(i, j)) continue;
        if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian) {
          const double r = data(i, j) - dec.out(j, s);
          lp += -0.5 * (kLog2Pi + log_s2[j]) - 0.5 * r * r / s2[j];
        } else {
          const double l = dec.out(j, s);
          lp += data(i, j) * l - softplus(l);
        }
      }
      double quad = 0.0;
      for (Eigen::Index l = 0; l < L; ++l)
        quad += -0.5 * z(l, s) * z(l, s) + 0.5 * eps(l, s) * eps(l, s);
      logw[s] = lp + quad;  // + 0.5*sum(lv) is constant over s
    }
    const double m = logw.maxCoeff();
    Eigen::VectorXd w = (logw.array() - m).exp();
    w /= w.sum();

    for (Eigen::Index j = 0; j < d; ++j) {
      if (!mask(i, j)) continue;
      double est = 0.0;
      for (int s = 0; s < k; ++s) {
        const double param = dec.out(j, s);
        est += w[s] * (model.feature_spec[static_cast<size_t>(j)] == Likelihood::gaussian
                           ? param
                           : sigmoid(param));
      }
      if (model.feature_spec[static_cast<size_t>(j)] == Likelihood::bernoulli)
        est = est >= 0.5 ? 1.0 : 0.0;
      out(i, j) = est;
    }
  }
  return out;
}

double imputer_loss(const ImputerModel& model, const Eigen::MatrixXd& data,
                    const MatrixXu8& mask, uint64_t noise_stream_index) {
  Eigen::MatrixXd xt = data.transpose();
  MatrixXu8 maskt = mask.transpose();
  Eigen::MatrixXd eps = draw_noise(model.cfg.seed, "imputer_gradcheck", noise_stream_index,
                                   model.cfg.latent_dim, data.rows() * model.cfg.k_train);
  return bound_loss(model, xt, maskt, eps, model.cfg.k_train, nullptr);
}

double gradient_check(const ImputerModel& model, const Eigen::MatrixXd& data,
                      const MatrixXu8& mask, double epsilon) {
  if (epsilon <= 0) throw ConfigError("gradient_check: epsilon must be positive");
  Eigen::MatrixXd xt = data.transpose();
  MatrixXu8 maskt = mask.transpose();
  Eigen::MatrixXd eps = draw_noise(model.cfg.seed, "imputer_gradcheck", 0,
                                   model.cfg.latent_dim, data.rows() * model.cfg.k_train);

  Grads g = Grads::zeros_like(model);
  (void)bound_loss(model, xt, maskt, eps, model.cfg.k_train, &g);
  Eigen::VectorXd analytic = pack_grads(g);

  ImputerModel probe = model;
  Eigen::VectorXd theta = model.pack();
  double max_rel = 0.0;
  for (Eigen::Index p = 0; p < theta.size(); ++p) {
    Eigen::VectorXd t = theta;
    t[p] = theta[p] + epsilon;
    probe.unpack(t);
    const double lp = bound_loss(probe, xt, maskt, eps, model.cfg.k_train, nullptr);
    t[p] = theta[p] - epsilon;
    probe.unpack(t);
    const double lm = bound_loss(probe, xt, maskt, eps, model.cfg.k_train, nullptr);
    const double fd = (lp - lm) / (2 * epsilon);
    const double denom = std::max({std::abs(analytic[p]), std::abs(fd), 1e-6});
    max_rel = std::max(max_rel, std::abs(analytic[p] - fd) / denom);
  }
  return max_rel;
}

void ImputerModel::save(const std::string& path) const {
  json j;
  j["config"] = {{"latent_dim", cfg.latent_dim},
                 {"hidden_width", cfg.hidden_width},
                 {"depth", cfg.depth},
                 {"epochs", cfg.epochs},
                 {"k_train", cfg.k_train},
                 {"k_impute", cfg.k_impute},
                 {"learning_rate", cfg.learning_rate},
                 {"var_floor", cfg.var_floor},
                 {"full_batch_limit", cfg.full_batch_limit},
                 {"minibatch", cfg.minibatch},
                 {"seed", cfg.seed}};
  j["feature_spec"] = json::array();
  for (auto s : feature_spec)
    j["feature_spec"].push_back(s == Likelihood::gaussian ? "gaussian" : "bernoulli");
  auto dump_mats = [](const std::vector<Eigen::MatrixXd>& ms) {
    json arr = json::array();
    for (const auto& m : ms) {
      json o;
      o["rows"] = m.rows();
      o["cols"] = m.cols();
      o["data"] = std::vector<double>(m.data(), m.data() + m.size());
      arr.push_back(std::move(o));
    }
    return arr;
  };
  auto dump_vecs = [](const std::vector<Eigen::VectorXd>& vs) {
    json arr = json::array();
    for (const auto& v : vs) arr.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    return arr;
  };
  j["enc_w"] = dump_mats(enc_w);
  j["enc_b"] = dump_vecs(enc_b);
  j["dec_w"] = dump_mats(dec_w);
  j["dec_b"] = dump_vecs(dec_b);
  j["rho"] = std::vector<double>(rho.data(), rho.data() + rho.size());
  j["epoch_loss"] = epoch_loss;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << j.dump();
}

ImputerModel ImputerModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open imputer model: " + path);
  json j;
  in >> j;
  ImputerModel m;
  const auto& c = j.at("config");
  m.cfg.latent_dim = c.at("latent_dim").get<int>();
  m.cfg.hidden_width = c.at("hidden_width").get<int>();
  m.cfg.depth = c.at("depth").get<int>();
  m.cfg.epochs = c.at("epochs").get<int>();
  m.cfg.k_train = c.at("k_train").get<int>();
  m.cfg.k_impute = c.at("k_impute").get<int>();
  m.cfg.learning_rate = c.at("learning_rate").get<double>();
  m.cfg.var_floor = c.at("var_floor").get<double>();
  m.cfg.full_batch_limit = c.at("full_batch_limit").get<int>();
  m.cfg.minibatch = c.at("minibatch").get<int>();
  m.cfg.seed = c.at("seed").get<uint64_t>();
  for (const auto& s : j.at("feature_spec"))
    m.feature_spec.push_back(s.get<std::string>() == "gaussian" ? Likelihood::gaussian
                                                                : Likelihood::bernoulli);
  auto load_mats = [](const json& arr) {
    std::vector<Eigen::MatrixXd> ms;
    for (const auto& o : arr) {
      Eigen::MatrixXd m2(o.at("rows").get<Eigen::Index>(), o.at("cols").get<Eigen::Index>());
      auto data = o.at("data").get<std::vector<double>>();
      std::copy(data.begin(), data.end(), m2.data());
      ms.push_back(std::move(m2));
    }
    return ms;
  };
  auto load_vecs = [](const json& arr) {
    std::vector<Eigen::VectorXd> vs;
    for (const auto& o : arr) {
      auto data = o.get<std::vector<double>>();
      Eigen::VectorXd v(static_cast<Eigen::Index>(data.size()));
      std::copy(data.begin(), data.end(), v.data());
      vs.push_back(std::move(v));
    }
    return vs;
  };
  m.enc_w = load_mats(j.at("enc_w"));
  m.enc_b = load_vecs(j.at("enc_b"));
  m.dec_w = load_mats(j.at("dec_w"));
  m.dec_b = load_vecs(j.at("dec_b"));
  auto rho = j.at("rho").get<std::vector<double>>();
  m.rho = Eigen::VectorXd(static_cast<Eigen::Index>(rho.size()));
  std::copy(rho.begin(), rho.end(), m.rho.data());
  if (j.contains("epoch_loss")) m.epoch_loss = j["epoch_loss"].get<std::vector<double>>();
  return m;
}

}  // namespace trialscope
