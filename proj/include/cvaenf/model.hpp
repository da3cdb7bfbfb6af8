#pragma once

// Conditional flow VAE over fixed-topology meshes: residual Chebyshev
// encoder/decoder on a sampling hierarchy, AdaIN-style covariate scaling in
// the encoder, covariate concatenation before decoding, a diagonal Gaussian
// posterior head and a planar flow chain on the latent sample.

#include "cvaenf/autodiff.hpp"
#include "cvaenf/flows.hpp"
#include "cvaenf/hierarchy.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace cvaenf {

struct ModelConfig {
  Index latent_dim = 16;
  std::vector<Index> encoder_features = {16, 32, 32, 64, 64};
  Index sampling_factor = 4;
  Index sampling_levels = 5;  // down-samplings, applied after the first blocks
  Index cheb_order = 6;
  Index flow_steps = 5;
  bool conditional = true;
  Index conditioner_hidden = 64;

  Index n_blocks() const { return static_cast<Index>(encoder_features.size()); }
  std::vector<Index> decoder_features() const { return {encoder_features.rbegin(), encoder_features.rend()}; }
  void validate() const;
};

/// Covariate names with the training-set standardization statistics.
/// A covariate vector is always handled in standardized form.
struct CovariateSchema {
  std::vector<std::string> names;
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  Index size() const { return static_cast<Index>(names.size()); }
  /// Rows of `raw` are subjects; zero-variance columns get scale 1.
  static CovariateSchema fit(std::vector<std::string> names, const Eigen::MatrixXd& raw);
  Eigen::VectorXd standardize(const Eigen::VectorXd& raw) const;
  Eigen::MatrixXd standardize_rows(const Eigen::MatrixXd& raw) const;
  Eigen::VectorXd unstandardize(const Eigen::VectorXd& values) const;
  Index index_of(const std::string& name) const;  // -1 when absent
};

/// Mean shape and a global scale mapping mm coordinates to network units.
struct ShapeNormalizer {
  Positions mean;
  double scale = 1.0;

  static ShapeNormalizer fit(const std::vector<Positions>& shapes);
};

struct PosteriorParams {
  Eigen::VectorXd mu;
  Eigen::VectorXd log_sigma;
};

enum class Mode { Train, Eval };

/// Batched model input: positions n x (B*3) in mm, standardized covariates B x C.
struct MeshBatch {
  ad::Matrix positions;
  ad::Matrix covariates;
  Index size() const { return covariates.rows(); }

  static MeshBatch from(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd& covariates);
};

/// Graph-convolution layer parameters: weight (K*F_in) x F_out, bias 1 x F_out.
struct ChebLayer {
  ad::Parameter weight, bias;
};

struct BatchNormLayer {
  ad::Parameter gamma, beta;
  ad::BatchNormState state;
};

struct ResidualBlock {
  Index level = 0;
  ChebLayer conv1, conv2;
  BatchNormLayer norm1, norm2;
  bool has_projection = false;
  ChebLayer projection;  // pointwise, present when channel counts differ
};

/// Covariates -> hidden (ELU) -> [gamma | beta] per conditioned block.
struct Conditioner {
  ad::Parameter w1, b1, w2, b2;
};

struct DenseLayer {
  ad::Parameter weight, bias;
};

struct FlowUnitParameters {
  ad::Parameter u, w, b;
};

class CvaeNfModel {
 public:
  CvaeNfModel(ModelConfig config, std::shared_ptr<const SamplingHierarchy> hierarchy, CovariateSchema covariates,
              ShapeNormalizer normalizer, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const SamplingHierarchy& hierarchy() const { return *hierarchy_; }
  const std::shared_ptr<const SamplingHierarchy>& hierarchy_ptr() const { return hierarchy_; }
  const TriangleTopology& topology() const { return *hierarchy_->levels.front().topology; }
  const CovariateSchema& covariates() const { return covariates_; }
  const ShapeNormalizer& normalizer() const { return normalizer_; }
  Index latent_dim() const { return config_.latent_dim; }
  Index covariate_dim() const { return config_.conditional ? covariates_.size() : 0; }

  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  // -- Differentiable building blocks (record on a tape; Train mode updates
  //    batch-norm running statistics).
  struct Encoded {
    ad::Var mu;
    ad::Var log_sigma;
  };
  struct FlowResult {
    ad::Var z_final;      // B x d
    ad::Var sum_log_det;  // B x 1
  };
  struct ForwardPass {
    ad::Var reconstruction;  // n x (B*3), mm
    ad::Var mu, log_sigma, z0, z_final, sum_log_det;
  };

  Encoded encode(ad::Tape& tape, const MeshBatch& batch, Mode mode);
  FlowResult flow(ad::Tape& tape, ad::Var z0);
  ad::Var decode(ad::Tape& tape, ad::Var z, const ad::Matrix& covariates, Mode mode);
  /// encode -> z0 = mu + exp(log_sigma) * noise -> flow chain -> decode.
  ForwardPass forward(ad::Tape& tape, const MeshBatch& batch, const ad::Matrix& noise, Mode mode);

  // -- Evaluation-mode conveniences (no state change).
  PosteriorParams encode(const Positions& shape, const Eigen::VectorXd& covariates) const;
  /// Posterior means for many subjects, one row each.
  Eigen::MatrixXd encode_means(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd& covariates) const;
  Positions decode(const Eigen::VectorXd& z, const Eigen::VectorXd& covariates) const;
  std::vector<Positions> decode_batch(const Eigen::MatrixXd& z, const Eigen::MatrixXd& covariates) const;
  /// Deterministic reconstruction through the posterior mean and the flow chain.
  Positions reconstruct(const Positions& shape, const Eigen::VectorXd& covariates) const;
  LatentState<double> latent_state(const Eigen::VectorXd& z0) const;
  FlowChain<double> flow_chain() const;

  /// Decodes z ~ N(0, I) once per covariate row. Requires a trained model.
  std::vector<Positions> sample_population(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const;

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::vector<ad::BatchNormState*> batch_norm_states();
  std::vector<const ad::BatchNormState*> batch_norm_states() const;
  void zero_grad();

  // Direct layer access for tests and weight surgery.
  std::vector<ResidualBlock>& encoder_blocks() { return encoder_; }
  std::vector<ResidualBlock>& decoder_blocks() { return decoder_; }
  std::vector<Conditioner>& conditioners() { return conditioners_; }
  std::vector<FlowUnitParameters>& flow_units() { return flows_; }
  const std::vector<FlowUnitParameters>& flow_units() const { return flows_; }
  DenseLayer& mu_head() { return mu_head_; }
  DenseLayer& log_sigma_head() { return log_sigma_head_; }
  DenseLayer& latent_projection() { return latent_projection_; }
  ChebLayer& output_layer() { return output_layer_; }

  /// Level at which encoder block i runs; decoder block j mirrors block n-1-j.
  Index block_level(Index i) const { return block_level_.at(i); }
  bool block_downsamples(Index i) const { return i < effective_levels_; }

 private:
  template <typename Self>
  friend struct ModelCore;

  ModelConfig config_;
  std::shared_ptr<const SamplingHierarchy> hierarchy_;
  CovariateSchema covariates_;
  ShapeNormalizer normalizer_;
  Index effective_levels_ = 0;
  std::vector<Index> block_level_;
  std::vector<ResidualBlock> encoder_;
  std::vector<Conditioner> conditioners_;
  DenseLayer mu_head_, log_sigma_head_;
  std::vector<FlowUnitParameters> flows_;
  DenseLayer latent_projection_;
  std::vector<ResidualBlock> decoder_;
  ChebLayer output_layer_;
  bool trained_ = false;
};

/// Standalone residual block evaluation used by the shape and identity tests.
ad::Var residual_block(ad::Tape& tape, ResidualBlock& block, const SparseOperator& laplacian, ad::Var features,
                       Index batch, Mode mode);

/// AdaIN-style scaling: gamma(c) * instance_norm(hidden) + beta(c).
ad::Var condition_scale(ad::Tape& tape, Conditioner& conditioner, ad::Var hidden, const ad::Matrix& covariates);

/// z0 = mu + exp(log_sigma) * noise, row-wise on B x d matrices.
ad::Var reparameterize(ad::Var mu, ad::Var log_sigma, const ad::Matrix& noise);
Eigen::VectorXd reparameterize(const PosteriorParams& p, const Eigen::VectorXd& noise);

}  // namespace cvaenf
