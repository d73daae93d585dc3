#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "anomseg/common.hpp"
#include "anomseg/contrastive.hpp"
#include "anomseg/dissim_net.hpp"

namespace anomseg::train {

// Every training hyperparameter plus the ablation switches, serializable as a
// flat key = value document. CLI overrides use the same key names.
struct TrainConfig {
  long epochs = 50;
  double lr = 1e-4;
  double poly_power = 0.99;
  int batch_size = 8;
  int per_domain = 4;
  double lambda_f = 0.04;
  double lambda_o = 0.06;
  double lambda_c = 0.1;
  double tau_base = 1.0;

  int n_anchor = 50;
  int n_positive = 100;
  int n_neg_hard = 100;
  int n_neg_easy = 300;
  double temperature = 0.1;
  double hardness_threshold = 0.5;
  bool log_variant = false;

  bool oda = true;
  bool fda = true;
  bool dls = true;
  bool pcl = false;
  bool cpcl = true;
  bool as = true;

  uint64_t seed = 1;

  int levels = 3;
  int base_channels = 16;
  int num_classes = 4;
  std::string norm_mode = "spatial_aware";
  int out_clf_pool = 4;  // D_o input pooling factor at toy scale

  void validate() const;
  contrast::SamplingBudget budget() const;

  void apply(const std::string& key, const std::string& value);
  std::string serialize() const;

  static TrainConfig from_file(const std::filesystem::path& path,
                               const std::vector<std::string>& overrides = {});
  static TrainConfig from_overrides(const std::vector<std::string>& overrides);
  void save(const std::filesystem::path& path) const;
};

// parses "key=value"
std::pair<std::string, std::string> split_override(const std::string& kv);

}  // namespace anomseg::train
