#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/dense.hpp"
#include "qexplain/env.hpp"
#include "qexplain/policy.hpp"
#include "qexplain/rollout.hpp"

namespace qx {

struct TrainConfig {
  std::vector<int> trunk_widths{128, 128};
  std::vector<int> head_widths{64};
  double stage1_lr = 1e-2;
  int stage1_epochs = 60;
  int batch_size = 64;
  double stage2_lr = 1e-3;
  int stage2_epochs = 10;
  std::vector<double> loss_weights;  // empty means 1 for every component
  double decay = 1e-9;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct TrainReport {
  std::vector<double> stage1_loss;  // epoch-average weighted NLL
  std::vector<double> stage2_loss;
};

// Decomposed future returns for one (state, action) query.
struct Explanation {
  ComponentSet components;
  Action action;
  std::vector<double> mean_normalized;
  std::vector<double> std_normalized;
  std::vector<double> mean;  // denormalized units
  std::vector<double> std;
  std::vector<bool> degenerate;
  double total = 0.0;  // sum of weight_c * mean_c
};

class PredictorModel {
 public:
  DenseNet trunk;
  std::vector<DenseNet> heads;  // one per component, outputs (mean, log_std)
  ComponentSet components;
  NormalizationSpec normalization;
  ActionSpace action_space;
  EnvFactory env;
  std::size_t feature_size = 0;
  double gamma = 0.9;
  int t_max = 5;
  std::string policy_id;
  FeatureMode mode = FeatureMode::raw;
  TrainConfig config;

  std::size_t input_size() const { return feature_size + action_space.encoding_size(); }

  // Normalized-space head means clamped to [0,1], and the head stds.
  void predict_normalized(const std::vector<double>& features, const Action& action,
                          std::vector<double>& mean, std::vector<double>& std) const;
  Explanation predict(const FeatureVector& features, const Action& action) const;
};

// Stage 1 trains trunk and heads on the weighted sum of per-component
// Gaussian NLLs; stage 2 freezes the trunk and fine-tunes the heads.
PredictorModel train(const Dataset& data, const TrainConfig& config, TrainReport* report = nullptr,
                     const std::function<void(int stage, int epoch, double loss)>& on_epoch = {});

Explanation predict(const PredictorModel& model, const FeatureVector& features, const Action& action);

// {"magic":"cbx1","config_hash":...,"component_set":[...],"normalization":{...},
//  "trunk":[{"w":[[...]],"b":[...],"act":"relu"},...],"heads":{...}, ...}
nlohmann::json model_to_json(const PredictorModel& model);
PredictorModel model_from_json(const nlohmann::json& j);
void save_model(const PredictorModel& model, const std::filesystem::path& path);
PredictorModel load_model(const std::filesystem::path& path);

}  // namespace qx
