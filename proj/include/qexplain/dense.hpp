#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace qx {

enum class Activation { relu, identity };

struct DenseLayer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;  // out
  Activation act = Activation::relu;
};

// Activations recorded by a batched forward pass; columns are samples.
struct Tape {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
};

// Gradients laid out exactly like the network parameters.
struct Gradients {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;

  void set_zero();
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<DenseLayer> layers);

  // He-uniform weights, zero biases. widths = {in, hidden..., out}; hidden
  // layers use `hidden`, the last layer uses `out`.
  static DenseNet init(std::span<const int> widths, Activation hidden, Activation out,
                       std::mt19937_64& rng);

  std::size_t input_size() const;
  std::size_t output_size() const;
  std::size_t parameter_count() const;
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  std::vector<double> forward(std::span<const double> x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x, Tape* tape = nullptr) const;

  // Accumulates parameter gradients of a scalar loss into `grads` given
  // dLoss/dOutput for the batch recorded in `tape`; returns dLoss/dInput.
  Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& grad_out, Gradients& grads) const;

  Gradients zero_gradients() const;

  // Flat parameter access (row-major weights, then bias, layer by layer).
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> values);

  nlohmann::json to_json() const;
  static DenseNet from_json(const nlohmann::json& j);

 private:
  std::vector<DenseLayer> layers_;
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct NllTerm {
  double loss = 0.0;
  double d_mean = 0.0;
  double d_log_std = 0.0;  // zero when the clamp is active
};

// 0.5*((target-mean)/sigma)^2 + log sigma + 0.5*log(2*pi), sigma = exp(clamp(log_std)).
NllTerm gaussian_nll(double mean, double log_std, double target);

struct OptimizerState {
  double lr = 1e-2;
  double decay = 0.0;  // subtracted from lr once per epoch
  double epsilon = 1e-8;
  std::vector<Eigen::MatrixXd> accum_w;
  std::vector<Eigen::VectorXd> accum_b;

  static OptimizerState for_net(const DenseNet& net, double lr, double decay, double epsilon = 1e-8);
  double lr_at_epoch(int epoch) const;
};

// accum += g^2; param -= lr * g / (sqrt(accum) + eps)
void adagrad_step(DenseNet& net, const Gradients& grads, OptimizerState& opt, double lr);

}  // namespace qx
