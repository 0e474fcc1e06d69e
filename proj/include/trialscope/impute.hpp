#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace trialscope {

enum class Likelihood { gaussian, bernoulli };

struct ImputerConfig {
  int latent_dim = 6;
  int hidden_width = 32;
  int depth = 3;  // hidden layers per MLP, ReLU
  int epochs = 500;
  int k_train = 20;    // importance samples for the training bound
  int k_impute = 100;  // importance samples for imputation
  double learning_rate = 1e-3;
  double var_floor = 1e-4;
  int full_batch_limit = 4096;
  int minibatch = 256;
  uint64_t seed = 0;

  void validate() const;
};

// Importance-weighted latent-variable imputer: encoder maps the zero-filled
// row to a Gaussian posterior over the latent, the decoder emits per-feature
// likelihood parameters (Gaussian means with learned per-feature variances,
// Bernoulli logits). The bound is computed on observed entries only.
struct ImputerModel {
  ImputerConfig cfg;
  std::vector<Likelihood> feature_spec;
  std::vector<Eigen::MatrixXd> enc_w;
  std::vector<Eigen::VectorXd> enc_b;
  std::vector<Eigen::MatrixXd> dec_w;
  std::vector<Eigen::VectorXd> dec_b;
  Eigen::VectorXd rho;  // raw per-feature variance params (gaussian features)
  std::vector<double> epoch_loss;

  size_t n_params() const;
  Eigen::VectorXd pack() const;
  void unpack(const Eigen::VectorXd& flat);

  void save(const std::string& path) const;
  static ImputerModel load(const std::string& path);
};

// data: n x d; mask: n x d with 1 = missing. Deterministic given cfg.seed.
ImputerModel train_imputer(const Eigen::MatrixXd& data,
                           const Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>& mask,
                           const std::vector<Likelihood>& feature_spec,
                           const ImputerConfig& cfg);

// Self-normalized importance-sampling estimate of E[x_missing | x_observed];
// bernoulli columns are thresholded at 0.5. Observed entries pass through.
Eigen::MatrixXd impute(const ImputerModel& model, const Eigen::MatrixXd& data,
                       const Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>& mask,
                       int k);

// Analytic gradient of the masked bound vs central finite differences over
// every parameter; returns the max relative error.
double gradient_check(const ImputerModel& model, const Eigen::MatrixXd& data,
                      const Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>& mask,
                      double epsilon);

// Loss of the current parameters on (data, mask) under fixed noise; exposed
// for the placeholder-invariance property test.
double imputer_loss(const ImputerModel& model, const Eigen::MatrixXd& data,
                    const Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>& mask,
                    uint64_t noise_stream_index = 0);

}  // namespace trialscope
