#include "qexplain/dense.hpp"

#include <cmath>
#include <numbers>

#include "qexplain/error.hpp"

namespace qx {

using nlohmann::json;

void Gradients::set_zero() {
  for (auto& m : w) m.setZero();
  for (auto& v : b) v.setZero();
}

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.b.size() != l.w.rows()) throw UserError("dense: bias size does not match layer output");
    if (i > 0 && layers_[i - 1].w.rows() != l.w.cols())
      throw UserError("dense: layer " + std::to_string(i) + " input does not match previous output");
    if (!l.w.allFinite() || !l.b.allFinite()) throw UserError("dense: non-finite parameter");
  }
}

DenseNet DenseNet::init(std::span<const int> widths, Activation hidden, Activation out,
                        std::mt19937_64& rng) {
  if (widths.size() < 2) throw UserError("dense: need at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const int in = widths[i];
    const int o = widths[i + 1];
    if (in < 1 || o < 1) throw UserError("dense: widths must be positive");
    const double bound = std::sqrt(6.0 / in);
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer l;
    l.w.resize(o, in);
    for (int r = 0; r < o; ++r)
      for (int c = 0; c < in; ++c) l.w(r, c) = u(rng);
    l.b = Eigen::VectorXd::Zero(o);
    l.act = i + 2 == widths.size() ? out : hidden;
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers));
}

std::size_t DenseNet::input_size() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().w.cols());
}

std::size_t DenseNet::output_size() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.back().w.rows());
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.w.size() + l.b.size();
  return n;
}

namespace {

void activate(Eigen::MatrixXd& m, Activation act) {
  if (act == Activation::relu) m = m.cwiseMax(0.0);
}

}  // namespace

Eigen::VectorXd DenseNet::forward(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != input_size())
    throw UserError("dense: input has " + std::to_string(x.size()) + " values, expected " +
                    std::to_string(input_size()));
  Eigen::VectorXd h = x;
  for (const auto& l : layers_) {
    Eigen::VectorXd z = l.w * h + l.b;
    if (l.act == Activation::relu) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

std::vector<double> DenseNet::forward(std::span<const double> x) const {
  Eigen::VectorXd in = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::VectorXd out = forward(in);
  return {out.data(), out.data() + out.size()};
}

Eigen::MatrixXd DenseNet::forward_batch(const Eigen::MatrixXd& x, Tape* tape) const {
  if (static_cast<std::size_t>(x.rows()) != input_size())
    throw UserError("dense: batch input has " + std::to_string(x.rows()) + " rows, expected " +
                    std::to_string(input_size()));
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  Eigen::MatrixXd h = x;
  for (const auto& l : layers_) {
    Eigen::MatrixXd z = l.w * h;
    z.colwise() += l.b;
    if (tape) {
      tape->inputs.push_back(h);
      tape->pre.push_back(z);
    }
    activate(z, l.act);
    h = std::move(z);
  }
  return h;
}

Eigen::MatrixXd DenseNet::backward(const Tape& tape, const Eigen::MatrixXd& grad_out,
                                   Gradients& grads) const {
  Eigen::MatrixXd delta = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& l = layers_[i];
    if (l.act == Activation::relu) delta = delta.cwiseProduct((tape.pre[i].array() > 0.0).cast<double>().matrix());
    grads.w[i].noalias() += delta * tape.inputs[i].transpose();
    grads.b[i] += delta.rowwise().sum();
    delta = l.w.transpose() * delta;
  }
  return delta;
}

Gradients DenseNet::zero_gradients() const {
  Gradients g;
  for (const auto& l : layers_) {
    g.w.push_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
    g.b.push_back(Eigen::VectorXd::Zero(l.b.size()));
  }
  return g;
}

std::vector<double> DenseNet::flat_parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.w.rows(); ++r)
      for (Eigen::Index c = 0; c < l.w.cols(); ++c) out.push_back(l.w(r, c));
    for (Eigen::Index r = 0; r < l.b.size(); ++r) out.push_back(l.b(r));
  }
  return out;
}

void DenseNet::set_flat_parameters(std::span<const double> values) {
  if (values.size() != parameter_count()) throw UserError("dense: flat parameter size mismatch");
  std::size_t k = 0;
  for (auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.w.rows(); ++r)
      for (Eigen::Index c = 0; c < l.w.cols(); ++c) l.w(r, c) = values[k++];
    for (Eigen::Index r = 0; r < l.b.size(); ++r) l.b(r) = values[k++];
  }
}

json DenseNet::to_json() const {
  json layers = json::array();
  for (const auto& l : layers_) {
    json w = json::array();
    for (Eigen::Index r = 0; r < l.w.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < l.w.cols(); ++c) row.push_back(l.w(r, c));
      w.push_back(std::move(row));
    }
    json b = json::array();
    for (Eigen::Index r = 0; r < l.b.size(); ++r) b.push_back(l.b(r));
    layers.push_back({{"w", std::move(w)}, {"b", std::move(b)},
                      {"act", l.act == Activation::relu ? "relu" : "identity"}});
  }
  return layers;
}

DenseNet DenseNet::from_json(const json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& lj : j) {
    DenseLayer l;
    const auto& w = lj.at("w");
    const auto rows = static_cast<Eigen::Index>(w.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(w.at(0).size()) : 0;
    l.w.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (static_cast<Eigen::Index>(w.at(r).size()) != cols) throw UserError("dense: ragged weight matrix");
      for (Eigen::Index c = 0; c < cols; ++c) l.w(r, c) = w.at(r).at(c).get<double>();
    }
    const auto& b = lj.at("b");
    l.b.resize(static_cast<Eigen::Index>(b.size()));
    for (Eigen::Index r = 0; r < l.b.size(); ++r) l.b(r) = b.at(r).get<double>();
    const auto act = lj.at("act").get<std::string>();
    if (act == "relu")
      l.act = Activation::relu;
    else if (act == "identity")
      l.act = Activation::identity;
    else
      throw UserError("dense: unknown activation " + act);
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers));
}

NllTerm gaussian_nll(double mean, double log_std, double target) {
  if (!std::isfinite(mean) || !std::isfinite(log_std) || !std::isfinite(target))
    throw UserError("gaussian_nll: non-finite input");
  const bool clamped = log_std < kLogStdMin || log_std > kLogStdMax;
  const double s = std::clamp(log_std, kLogStdMin, kLogStdMax);
  const double inv_var = std::exp(-2.0 * s);
  const double r = target - mean;
  NllTerm t;
  t.loss = 0.5 * r * r * inv_var + s + 0.5 * std::log(2.0 * std::numbers::pi);
  t.d_mean = -r * inv_var;
  t.d_log_std = clamped ? 0.0 : 1.0 - r * r * inv_var;
  return t;
}

OptimizerState OptimizerState::for_net(const DenseNet& net, double lr, double decay, double epsilon) {
  OptimizerState s;
  s.lr = lr;
  s.decay = decay;
  s.epsilon = epsilon;
  for (const auto& l : net.layers()) {
    s.accum_w.push_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
    s.accum_b.push_back(Eigen::VectorXd::Zero(l.b.size()));
  }
  return s;
}

double OptimizerState::lr_at_epoch(int epoch) const { return std::max(0.0, lr - decay * epoch); }

void adagrad_step(DenseNet& net, const Gradients& grads, OptimizerState& opt, double lr) {
  auto& layers = net.layers();
  if (grads.w.size() != layers.size() || opt.accum_w.size() != layers.size())
    throw UserError("adagrad: gradient/optimizer shape mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    if (grads.w[i].rows() != l.w.rows() || grads.w[i].cols() != l.w.cols() ||
        grads.b[i].size() != l.b.size() || opt.accum_w[i].rows() != l.w.rows() ||
        opt.accum_w[i].cols() != l.w.cols())
      throw UserError("adagrad: shape mismatch at layer " + std::to_string(i));
    opt.accum_w[i].array() += grads.w[i].array().square();
    opt.accum_b[i].array() += grads.b[i].array().square();
    l.w.array() -= lr * grads.w[i].array() / (opt.accum_w[i].array().sqrt() + opt.epsilon);
    l.b.array() -= lr * grads.b[i].array() / (opt.accum_b[i].array().sqrt() + opt.epsilon);
  }
}

}  // namespace qx
