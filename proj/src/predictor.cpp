#include "qexplain/predictor.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "qexplain/error.hpp"
#include "qexplain/hash.hpp"

namespace qx {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "cbx1";

}  // namespace

void TrainConfig::validate() const {
  if (trunk_widths.empty()) throw UserError("train: trunk needs at least one layer");
  for (int w : trunk_widths)
    if (w < 1) throw UserError("train: trunk widths must be positive");
  for (int w : head_widths)
    if (w < 1) throw UserError("train: head widths must be positive");
  if (batch_size < 1) throw UserError("train: batch size must be >= 1");
  if (stage1_epochs < 0 || stage2_epochs < 0) throw UserError("train: epochs must be >= 0");
  if (!(stage1_lr > 0.0) || !(stage2_lr > 0.0)) throw UserError("train: learning rates must be > 0");
  if (!(decay >= 0.0)) throw UserError("train: decay must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"trunk_widths", trunk_widths}, {"head_widths", head_widths},     {"stage1_lr", stage1_lr},
          {"stage1_epochs", stage1_epochs}, {"batch_size", batch_size},     {"stage2_lr", stage2_lr},
          {"stage2_epochs", stage2_epochs}, {"loss_weights", loss_weights}, {"decay", decay},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.trunk_widths = j.value("trunk_widths", c.trunk_widths);
  c.head_widths = j.value("head_widths", c.head_widths);
  c.stage1_lr = j.value("stage1_lr", c.stage1_lr);
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.stage2_lr = j.value("stage2_lr", c.stage2_lr);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.loss_weights = j.value("loss_weights", c.loss_weights);
  c.decay = j.value("decay", c.decay);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

void PredictorModel::predict_normalized(const std::vector<double>& features, const Action& action,
                                        std::vector<double>& mean, std::vector<double>& std) const {
  if (features.size() != feature_size)
    throw UserError("predict: expected " + std::to_string(feature_size) + " features, got " +
                    std::to_string(features.size()));
  const auto enc = encode_action(action, action_space);
  Eigen::VectorXd x(static_cast<Eigen::Index>(input_size()));
  for (std::size_t i = 0; i < features.size(); ++i) x(static_cast<Eigen::Index>(i)) = features[i];
  for (std::size_t i = 0; i < enc.size(); ++i) x(static_cast<Eigen::Index>(feature_size + i)) = enc[i];
  const Eigen::VectorXd h = trunk.forward(x);
  mean.resize(heads.size());
  std.resize(heads.size());
  for (std::size_t c = 0; c < heads.size(); ++c) {
    const Eigen::VectorXd out = heads[c].forward(h);
    mean[c] = std::clamp(out(0), 0.0, 1.0);
    std[c] = std::exp(std::clamp(out(1), kLogStdMin, kLogStdMax));
  }
}

Explanation PredictorModel::predict(const FeatureVector& features, const Action& action) const {
  Explanation e;
  e.components = components;
  e.action = action;
  predict_normalized(features.values, action, e.mean_normalized, e.std_normalized);
  e.mean = normalization.denormalize(e.mean_normalized);
  e.degenerate = normalization.degenerate;
  e.std.resize(e.std_normalized.size());
  for (std::size_t c = 0; c < e.std.size(); ++c) {
    const double range = normalization.max[c] - normalization.min[c];
    e.std[c] = normalization.degenerate[c] ? e.std_normalized[c] : e.std_normalized[c] * range;
  }
  e.total = components.weighted_sum(e.mean);
  return e;
}

Explanation predict(const PredictorModel& model, const FeatureVector& features, const Action& action) {
  return model.predict(features, action);
}

namespace {

struct Batches {
  Eigen::MatrixXd inputs;   // input_size x N
  Eigen::MatrixXd targets;  // components x N
};

Batches pack(const Dataset& data, std::size_t feature_size, std::size_t components) {
  const auto n = static_cast<Eigen::Index>(data.samples.size());
  const std::size_t enc = data.env.action_space().encoding_size();
  Batches b;
  b.inputs.resize(static_cast<Eigen::Index>(feature_size + enc), n);
  b.targets.resize(static_cast<Eigen::Index>(components), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    if (s.features.values.size() != feature_size || s.action_encoding.size() != enc ||
        s.target.values.size() != components)
      throw UserError("train: sample " + std::to_string(i) + " has inconsistent dimensions");
    for (std::size_t k = 0; k < feature_size; ++k) b.inputs(static_cast<Eigen::Index>(k), i) = s.features.values[k];
    for (std::size_t k = 0; k < enc; ++k)
      b.inputs(static_cast<Eigen::Index>(feature_size + k), i) = s.action_encoding[k];
    for (std::size_t c = 0; c < components; ++c) b.targets(static_cast<Eigen::Index>(c), i) = s.target.values[c];
  }
  if (!b.inputs.allFinite() || !b.targets.allFinite()) throw UserError("train: non-finite value in dataset");
  return b;
}

}  // namespace

PredictorModel train(const Dataset& data, const TrainConfig& config, TrainReport* report,
                     const std::function<void(int, int, double)>& on_epoch) {
  config.validate();
  if (data.samples.empty()) throw UserError("train: empty dataset");
  const ComponentSet components = data.env.components();
  const std::size_t nc = components.size();
  if (data.normalization.size() != nc) throw UserError("train: normalization does not match components");
  std::vector<double> loss_weights = config.loss_weights.empty() ? std::vector<double>(nc, 1.0)
                                                                 : config.loss_weights;
  if (loss_weights.size() != nc) throw UserError("train: one loss weight per component required");

  PredictorModel model;
  model.components = components;
  model.normalization = data.normalization;
  model.action_space = data.env.action_space();
  model.env = data.env;
  model.feature_size = data.samples.front().features.values.size();
  model.gamma = data.config.gamma;
  model.t_max = data.config.t_max;
  model.policy_id = data.policy_id;
  model.mode = data.config.mode;
  model.config = config;

  const Batches all = pack(data, model.feature_size, nc);

  std::mt19937_64 rng(config.seed);
  std::vector<int> trunk_w{static_cast<int>(model.input_size())};
  trunk_w.insert(trunk_w.end(), config.trunk_widths.begin(), config.trunk_widths.end());
  model.trunk = DenseNet::init(trunk_w, Activation::relu, Activation::relu, rng);
  std::vector<int> head_w{config.trunk_widths.back()};
  head_w.insert(head_w.end(), config.head_widths.begin(), config.head_widths.end());
  head_w.push_back(2);
  for (std::size_t c = 0; c < nc; ++c) model.heads.push_back(DenseNet::init(head_w, Activation::relu, Activation::identity, rng));

  const auto n = static_cast<std::size_t>(all.inputs.cols());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto run_stage = [&](int stage, int epochs, double lr, std::vector<double>* losses) {
    const bool train_trunk = stage == 1;
    OptimizerState trunk_opt = OptimizerState::for_net(model.trunk, lr, config.decay);
    std::vector<OptimizerState> head_opt;
    for (const auto& h : model.heads) head_opt.push_back(OptimizerState::for_net(h, lr, config.decay));
    Gradients trunk_g = model.trunk.zero_gradients();
    std::vector<Gradients> head_g;
    for (const auto& h : model.heads) head_g.push_back(h.zero_gradients());
    Tape trunk_tape;
    std::vector<Tape> head_tape(nc);

    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      const double step_lr = trunk_opt.lr_at_epoch(epoch);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
        const auto bs = static_cast<Eigen::Index>(end - start);
        Eigen::MatrixXd x(all.inputs.rows(), bs);
        Eigen::MatrixXd y(all.targets.rows(), bs);
        for (Eigen::Index k = 0; k < bs; ++k) {
          x.col(k) = all.inputs.col(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(k)]));
          y.col(k) = all.targets.col(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(k)]));
        }
        const Eigen::MatrixXd h = model.trunk.forward_batch(x, train_trunk ? &trunk_tape : nullptr);
        Eigen::MatrixXd grad_h = Eigen::MatrixXd::Zero(h.rows(), bs);
        double batch_loss = 0.0;
        for (std::size_t c = 0; c < nc; ++c) {
          const Eigen::MatrixXd out = model.heads[c].forward_batch(h, &head_tape[c]);
          Eigen::MatrixXd grad_out(2, bs);
          for (Eigen::Index k = 0; k < bs; ++k) {
            // Targets live in [0,1]; the mean is scored after clamping to that
            // range and the gradient passes straight through the clamp.
            const NllTerm t = gaussian_nll(std::clamp(out(0, k), 0.0, 1.0), out(1, k),
                                           y(static_cast<Eigen::Index>(c), k));
            batch_loss += loss_weights[c] * t.loss;
            grad_out(0, k) = loss_weights[c] * t.d_mean / static_cast<double>(bs);
            grad_out(1, k) = loss_weights[c] * t.d_log_std / static_cast<double>(bs);
          }
          head_g[c].set_zero();
          grad_h += model.heads[c].backward(head_tape[c], grad_out, head_g[c]);
        }
        if (!std::isfinite(batch_loss))
          throw std::runtime_error("train: non-finite loss at stage " + std::to_string(stage) + " epoch " +
                                   std::to_string(epoch) + " batch starting at " + std::to_string(start));
        epoch_loss += batch_loss;
        if (train_trunk) {
          trunk_g.set_zero();
          model.trunk.backward(trunk_tape, grad_h, trunk_g);
          adagrad_step(model.trunk, trunk_g, trunk_opt, step_lr);
        }
        for (std::size_t c = 0; c < nc; ++c) adagrad_step(model.heads[c], head_g[c], head_opt[c], step_lr);
      }
      epoch_loss /= static_cast<double>(n);
      if (losses) losses->push_back(epoch_loss);
      if (on_epoch) on_epoch(stage, epoch, epoch_loss);
    }
  };

  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep = {};
  run_stage(1, config.stage1_epochs, config.stage1_lr, &rep.stage1_loss);
  run_stage(2, config.stage2_epochs, config.stage2_lr, &rep.stage2_loss);
  return model;
}

json model_to_json(const PredictorModel& m) {
  json heads = json::object();
  for (std::size_t c = 0; c < m.heads.size(); ++c) heads[m.components.names[c]] = m.heads[c].to_json();
  return {{"magic", kMagic},
          {"config_hash", m.config.hash()},
          {"config", m.config.to_json()},
          {"component_set", m.components.names},
          {"component_weights", m.components.weights},
          {"normalization", m.normalization.to_json()},
          {"env", m.env.to_json()},
          {"feature_size", m.feature_size},
          {"gamma", m.gamma},
          {"t_max", m.t_max},
          {"policy", m.policy_id},
          {"feature_mode", m.mode == FeatureMode::raw ? "raw" : "embedding"},
          {"trunk", m.trunk.to_json()},
          {"heads", heads}};
}

PredictorModel model_from_json(const json& j) {
  if (!j.is_object() || !j.contains("magic")) throw UserError("checkpoint: missing magic header");
  const auto magic = j.at("magic").get<std::string>();
  if (magic != kMagic) {
    if (magic.rfind("cbx", 0) == 0) throw UserError("checkpoint: version mismatch (" + magic + ", expected cbx1)");
    throw UserError("checkpoint: wrong magic '" + magic + "'");
  }
  try {
    PredictorModel m;
    m.config = TrainConfig::from_json(j.at("config"));
    if (m.config.hash() != j.at("config_hash").get<std::string>())
      throw UserError("checkpoint: config hash mismatch");
    m.components.names = j.at("component_set").get<std::vector<std::string>>();
    m.components.weights = j.at("component_weights").get<std::vector<double>>();
    m.normalization = NormalizationSpec::from_json(j.at("normalization"));
    m.env = EnvFactory::from_json(j.at("env"));
    m.action_space = m.env.action_space();
    m.feature_size = j.at("feature_size").get<std::size_t>();
    m.gamma = j.at("gamma").get<double>();
    m.t_max = j.at("t_max").get<int>();
    m.policy_id = j.at("policy").get<std::string>();
    m.mode = j.at("feature_mode").get<std::string>() == "embedding" ? FeatureMode::embedding : FeatureMode::raw;
    m.trunk = DenseNet::from_json(j.at("trunk"));
    for (const auto& name : m.components.names) m.heads.push_back(DenseNet::from_json(j.at("heads").at(name)));
    if (m.trunk.input_size() != m.input_size()) throw UserError("checkpoint: trunk input size mismatch");
    for (const auto& h : m.heads)
      if (h.input_size() != m.trunk.output_size() || h.output_size() != 2)
        throw UserError("checkpoint: head shape mismatch");
    if (m.normalization.size() != m.components.size() || m.components.weights.size() != m.components.size())
      throw UserError("checkpoint: component metadata mismatch");
    return m;
  } catch (const UserError&) {
    throw;
  } catch (const std::exception& e) {
    throw UserError(std::string("checkpoint: corrupted: ") + e.what());
  }
}

void save_model(const PredictorModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path.string());
  out << model_to_json(model).dump() << '\n';
}

PredictorModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw UserError("checkpoint " + path.string() + ": corrupted: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace qx
