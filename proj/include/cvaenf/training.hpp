#pragma once

#include "cvaenf/dataset.hpp"
#include "cvaenf/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>

namespace cvaenf {

enum class KlObjective { FlowedMc, AnalyticQ0 };

KlObjective parse_kl_objective(const std::string& s);  // "flowed_mc" | "analytic_q0"
std::string to_string(KlObjective k);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::string term, const std::string& what) : std::runtime_error(what), term(std::move(term)) {}
  std::string term;
};

/// Raised after three consecutive non-finite steps.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  Index batch_size = 16;
  Index epochs = 1000;
  double weight_decay = 1e-2;
  Index warmup_epochs = 100;
  KlObjective kl_objective = KlObjective::FlowedMc;
  double recon_sigma = 1.0;  // mm
  double grad_clip = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Unknown keys throw ConfigError naming the key.
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Per-batch means.
struct LossBreakdown {
  double total = 0;
  double recon_nll = 0;
  double kl_term = 0;
  double sum_log_det = 0;
};

struct Loss {
  ad::Var total;  // 1x1 on the tape
  LossBreakdown values;
};

/// Loss terms from a recorded forward pass; `noise` is the reparameterization
/// noise used for that pass. Throws NonFiniteLossError naming the bad term.
Loss elbo_from_forward(ad::Tape& tape, const CvaeNfModel::ForwardPass& pass, const MeshBatch& batch,
                       const ad::Matrix& noise, double beta, KlObjective objective, double recon_sigma);

Loss elbo_loss(ad::Tape& tape, CvaeNfModel& model, const MeshBatch& batch, const ad::Matrix& noise, double beta,
               KlObjective objective, double recon_sigma, Mode mode = Mode::Train);

/// Closed-form KL(N(mu, sigma^2) || N(0, I)) per row.
Eigen::VectorXd analytic_kl(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& log_sigma);

/// Linear ramp min(1, epoch / warmup_epochs); warmup_epochs = 0 gives 1.
double kl_warmup(Index epoch, Index warmup_epochs);

struct DatasetSplit {
  std::vector<Index> train, validation, test;
};

constexpr std::array<double, 3> kDefaultSplitRatios = {422.0, 59.0, 1879.0};

/// Seeded shuffle, then validation and test sizes are the rounded ratio shares
/// and the remainder goes to training. Ratios are normalized.
DatasetSplit split_dataset(Index n, const std::array<double, 3>& ratios = kDefaultSplitRatios,
                           std::uint64_t seed = 0);

/// Adam with decoupled weight decay; parameters flagged decay = false are exempt.
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<ad::Parameter*>& params);
  Index steps() const { return t_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path, const std::vector<ad::Parameter*>& params);

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  Index t_ = 0;
  std::vector<ad::Matrix> m_, v_;
};

/// Rescales all gradients when their global norm exceeds max_norm; returns the pre-clip norm.
double clip_gradients(const std::vector<ad::Parameter*>& params, double max_norm);

/// Shapes (mm) with standardized covariates.
struct TrainingData {
  std::vector<const Positions*> shapes;
  Eigen::MatrixXd covariates;

  Index size() const { return static_cast<Index>(shapes.size()); }
};

TrainingData make_training_data(const ShapeDataset& ds, const std::vector<Index>& rows, const CovariateSchema& schema);

struct EpochMetrics {
  Index epoch = 0;
  LossBreakdown loss;
  double beta = 0;
  double val_generalisation_mm = 0;  // NaN without a validation set
};

/// Mean and population std of mean_vertex_distance(x, reconstruct(x)).
std::pair<double, double> reconstruction_error(const CvaeNfModel& model, const TrainingData& data);

class Trainer {
 public:
  Trainer(CvaeNfModel& model, TrainConfig config);

  /// Runs one epoch at index epoch(); per-epoch randomness derives from (seed, epoch)
  /// so resumed runs replay the same batches.
  EpochMetrics run_epoch(const TrainingData& train, const TrainingData& validation);

  using EpochCallback = std::function<void(const EpochMetrics&, bool improved)>;
  /// Runs until config.epochs epochs have completed in total.
  std::vector<EpochMetrics> fit(const TrainingData& train, const TrainingData& validation,
                                const EpochCallback& on_epoch = {});

  Index epoch() const { return epoch_; }
  void set_epoch(Index e) { epoch_ = e; }
  double best_score() const { return best_; }
  void set_best_score(double b) { best_ = b; }
  AdamW& optimizer() { return opt_; }
  const TrainConfig& config() const { return config_; }

 private:
  CvaeNfModel& model_;
  TrainConfig config_;
  AdamW opt_;
  Index epoch_ = 0;
  Index consecutive_failures_ = 0;
  double best_;
};

// -- Checkpoints: model.json sidecar, weights.bin, optimizer.bin, hierarchy/.

struct CheckpointInfo {
  Index epoch = 0;
  double best_score = 0;
  ShellLayout layout;
  TrainConfig train_config;
};

void save_checkpoint(const std::filesystem::path& dir, const CvaeNfModel& model, const CheckpointInfo& info,
                     const AdamW* optimizer = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<CvaeNfModel> model;
  CheckpointInfo info;
};

/// Loads the model (and optimizer state when `optimizer` is given and saved).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, AdamW* optimizer = nullptr);

void write_metrics_csv(const std::vector<EpochMetrics>& rows, const std::filesystem::path& path, bool append);

}  // namespace cvaenf
