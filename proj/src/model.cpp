#include "cvaenf/model.hpp"

#include <cmath>
#include <stdexcept>
#include <type_traits>

namespace cvaenf {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

void ModelConfig::validate() const {
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
  if (encoder_features.empty()) throw std::invalid_argument("encoder_features must not be empty");
  for (Index f : encoder_features)
    if (f < 1) throw std::invalid_argument("feature counts must be >= 1");
  if (cheb_order < 1) throw std::invalid_argument("cheb_order must be >= 1");
  if (flow_steps < 0) throw std::invalid_argument("flow_steps must be >= 0");
  if (sampling_factor < 2) throw std::invalid_argument("sampling_factor must be >= 2");
  if (sampling_levels < 0) throw std::invalid_argument("sampling_levels must be >= 0");
  if (conditioner_hidden < 1) throw std::invalid_argument("conditioner_hidden must be >= 1");
}

CovariateSchema CovariateSchema::fit(std::vector<std::string> names, const Eigen::MatrixXd& raw) {
  if (raw.cols() != static_cast<Index>(names.size())) throw std::invalid_argument("covariate column count mismatch");
  if (raw.rows() < 1) throw std::invalid_argument("cannot standardize covariates without subjects");
  CovariateSchema s;
  s.names = std::move(names);
  s.mean = raw.colwise().mean().transpose();
  s.scale.resize(raw.cols());
  for (Index j = 0; j < raw.cols(); ++j) {
    const double var = (raw.col(j).array() - s.mean[j]).square().mean();
    s.scale[j] = var > 0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Eigen::VectorXd CovariateSchema::standardize(const Eigen::VectorXd& raw) const {
  if (raw.size() != size()) throw std::invalid_argument("covariate vector length does not match schema");
  if (!raw.allFinite()) throw std::invalid_argument("non-finite covariate");
  return (raw - mean).cwiseQuotient(scale);
}

Eigen::MatrixXd CovariateSchema::standardize_rows(const Eigen::MatrixXd& raw) const {
  if (raw.cols() != size()) throw std::invalid_argument("covariate matrix width does not match schema");
  if (!raw.allFinite()) throw std::invalid_argument("non-finite covariate");
  return (raw.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

Eigen::VectorXd CovariateSchema::unstandardize(const Eigen::VectorXd& values) const {
  return values.cwiseProduct(scale) + mean;
}

Index CovariateSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Index>(i);
  return -1;
}

ShapeNormalizer ShapeNormalizer::fit(const std::vector<Positions>& shapes) {
  if (shapes.empty()) throw std::invalid_argument("ShapeNormalizer: no shapes");
  ShapeNormalizer n;
  n.mean = Positions::Zero(shapes.front().rows(), 3);
  for (const auto& s : shapes) n.mean += s;
  n.mean /= static_cast<double>(shapes.size());
  double ss = 0.0;
  for (const auto& s : shapes) ss += (s - n.mean).squaredNorm();
  const double var = ss / static_cast<double>(shapes.size() * shapes.front().size());
  n.scale = var > 0 ? std::sqrt(var) : 1.0;
  return n;
}

MeshBatch MeshBatch::from(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd& covariates) {
  if (shapes.empty()) throw std::invalid_argument("empty batch");
  if (covariates.rows() != static_cast<Index>(shapes.size())) throw std::invalid_argument("batch covariate rows mismatch");
  MeshBatch b;
  const Index n = shapes.front()->rows();
  b.positions.resize(n, 3 * static_cast<Index>(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (shapes[i]->rows() != n) throw std::invalid_argument("batch meshes differ in vertex count");
    b.positions.middleCols(3 * static_cast<Index>(i), 3) = *shapes[i];
  }
  b.covariates = covariates;
  return b;
}

namespace {

Matrix glorot(Index fan_in, Index fan_out, Index rows, Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

ChebLayer make_cheb(const std::string& name, Index order, Index f_in, Index f_out, std::mt19937_64& rng) {
  return {Parameter(name + ".weight", glorot(order * f_in, f_out, order * f_in, f_out, rng)),
          Parameter(name + ".bias", Matrix::Zero(1, f_out), false)};
}

BatchNormLayer make_norm(const std::string& name, Index f) {
  BatchNormLayer l{Parameter(name + ".gamma", Matrix::Ones(1, f), false),
                   Parameter(name + ".beta", Matrix::Zero(1, f), false), {}};
  l.state.running_mean = Eigen::RowVectorXd::Zero(f);
  l.state.running_var = Eigen::RowVectorXd::Ones(f);
  return l;
}

DenseLayer make_dense(const std::string& name, Index in, Index out, std::mt19937_64& rng) {
  return {Parameter(name + ".weight", glorot(in, out, in, out, rng)), Parameter(name + ".bias", Matrix::Zero(1, out), false)};
}

// Parameters bind as differentiable leaves on a mutable model and as
// constants on a const one.
Var bind(Tape& t, Parameter& p) { return t.parameter(p); }
Var bind(Tape& t, const Parameter& p) { return t.constant(p.value); }

Var norm(Tape& t, BatchNormLayer& l, Var x, Index batch, Mode mode) {
  return ad::batch_norm(x, bind(t, l.gamma), bind(t, l.beta), l.state, batch, mode == Mode::Train);
}
Var norm(Tape& t, const BatchNormLayer& l, Var x, Index batch, Mode mode) {
  if (mode == Mode::Train) throw std::logic_error("training pass on a const model");
  return ad::batch_norm_eval(x, bind(t, l.gamma), bind(t, l.beta), l.state, batch);
}

template <typename Block>
Var residual_block_impl(Tape& t, Block& block, const SparseOperator& laplacian, Var x, Index batch, Mode mode) {
  Var h = ad::cheb_conv(x, laplacian, bind(t, block.conv1.weight), bind(t, block.conv1.bias), batch);
  h = ad::elu(norm(t, block.norm1, h, batch, mode));
  h = ad::cheb_conv(h, laplacian, bind(t, block.conv2.weight), bind(t, block.conv2.bias), batch);
  h = ad::elu(norm(t, block.norm2, h, batch, mode));
  Var skip = block.has_projection
                 ? ad::channel_linear(x, bind(t, block.projection.weight), bind(t, block.projection.bias), batch)
                 : x;
  return ad::add(h, skip);
}

template <typename Cond>
Var condition_scale_impl(Tape& t, Cond& c, Var hidden, const Matrix& covariates) {
  const Index batch = covariates.rows();
  const Index f = hidden.cols() / batch;
  if (covariates.cols() != c.w1.value.rows()) throw std::invalid_argument("condition_scale: covariate length mismatch");
  if (c.w2.value.cols() != 2 * f) throw std::invalid_argument("condition_scale: channel mismatch");
  Var cov = t.constant(covariates);
  Var h = ad::elu(ad::add_row(ad::matmul(cov, bind(t, c.w1)), bind(t, c.b1)));
  Var out = ad::add_row(ad::matmul(h, bind(t, c.w2)), bind(t, c.b2));
  Var gamma = ad::slice_cols(out, 0, f);
  Var beta = ad::slice_cols(out, f, f);
  return ad::modulate(ad::instance_norm(hidden, batch), gamma, beta);
}

}  // namespace

// Forward passes shared by the mutable (training) and const (inference) model.
template <typename Self>
struct ModelCore {
  static CvaeNfModel::Encoded encode(Self& m, Tape& t, const MeshBatch& batch, Mode mode) {
    const Index bsz = batch.size();
    const Index n0 = m.hierarchy_->n_vertices(0);
    if (batch.positions.rows() != n0 || batch.positions.cols() != 3 * bsz)
      throw MeshError("encode: mesh does not match the model topology");
    if (m.config_.conditional && batch.covariates.cols() != m.covariates_.size())
      throw std::invalid_argument("encode: covariate length mismatch");
    Matrix x(n0, 3 * bsz);
    for (Index b = 0; b < bsz; ++b)
      x.middleCols(3 * b, 3) = (batch.positions.middleCols(3 * b, 3) - m.normalizer_.mean) / m.normalizer_.scale;
    Var h = t.constant(std::move(x));
    for (Index i = 0; i < m.config_.n_blocks(); ++i) {
      auto& block = m.encoder_[i];
      const MeshLevel& level = m.hierarchy_->levels[block.level];
      h = residual_block_impl(t, block, level.scaled_laplacian, h, bsz, mode);
      if (m.config_.conditional) h = condition_scale_impl(t, m.conditioners_[i], h, batch.covariates);
      if (m.block_downsamples(i)) h = ad::sparse_apply(level.down, h);
    }
    Var flat = ad::flatten_graph(h, bsz);
    Var mu = ad::add_row(ad::matmul(flat, bind(t, m.mu_head_.weight)), bind(t, m.mu_head_.bias));
    Var ls = ad::add_row(ad::matmul(flat, bind(t, m.log_sigma_head_.weight)), bind(t, m.log_sigma_head_.bias));
    return {mu, ad::clamp(ls, -10.0, 10.0)};
  }

  static CvaeNfModel::FlowResult flow(Self& m, Tape& t, Var z0) {
    Var z = z0;
    Var total = t.constant(Matrix::Zero(z0.rows(), 1));
    for (auto& unit : m.flows_) {
      ad::FlowOutput step = ad::planar_flow(z, bind(t, unit.u), bind(t, unit.w), bind(t, unit.b));
      z = step.z;
      total = ad::add(total, step.log_det);
    }
    return {z, total};
  }

  static Var decode(Self& m, Tape& t, Var z, const Matrix& covariates, Mode mode) {
    const Index bsz = z.rows();
    if (z.cols() != m.config_.latent_dim) throw std::invalid_argument("decode: latent dimension mismatch");
    Var input = z;
    if (m.config_.conditional) {
      if (covariates.rows() != bsz || covariates.cols() != m.covariates_.size())
        throw std::invalid_argument("decode: covariate shape mismatch");
      input = ad::concat_cols(z, t.constant(covariates));
    }
    const Index coarse = m.hierarchy_->n_vertices(m.effective_levels_);
    const Index f0 = m.config_.encoder_features.back();
    Var flat = ad::add_row(ad::matmul(input, bind(t, m.latent_projection_.weight)), bind(t, m.latent_projection_.bias));
    Var h = ad::unflatten_graph(flat, coarse, f0);
    const Index nb = m.config_.n_blocks();
    for (Index j = 0; j < nb; ++j) {
      const Index mirror = nb - 1 - j;
      const MeshLevel& level = m.hierarchy_->levels[m.block_level_[mirror]];
      if (m.block_downsamples(mirror)) h = ad::sparse_apply(level.up, h);
      h = residual_block_impl(t, m.decoder_[j], level.scaled_laplacian, h, bsz, mode);
    }
    Var out = ad::channel_linear(h, bind(t, m.output_layer_.weight), bind(t, m.output_layer_.bias), bsz);
    // Back to millimetres.
    Matrix offset(out.rows(), out.cols());
    for (Index b = 0; b < bsz; ++b) offset.middleCols(3 * b, 3) = m.normalizer_.mean;
    return ad::add(ad::scale(out, m.normalizer_.scale), t.constant(std::move(offset)));
  }
};

CvaeNfModel::CvaeNfModel(ModelConfig config, std::shared_ptr<const SamplingHierarchy> hierarchy,
                         CovariateSchema covariates, ShapeNormalizer normalizer, std::uint64_t seed)
    : config_(std::move(config)),
      hierarchy_(std::move(hierarchy)),
      covariates_(std::move(covariates)),
      normalizer_(std::move(normalizer)) {
  config_.validate();
  if (!hierarchy_ || hierarchy_->levels.empty()) throw std::invalid_argument("model needs a sampling hierarchy");
  if (normalizer_.mean.rows() != hierarchy_->n_vertices(0))
    throw std::invalid_argument("shape normalizer does not match the hierarchy");
  std::mt19937_64 rng(seed);
  const Index nb = config_.n_blocks();
  effective_levels_ = std::min<Index>({config_.sampling_levels, hierarchy_->depth(), nb});
  block_level_.resize(static_cast<std::size_t>(nb));
  for (Index i = 0, level = 0; i < nb; ++i) {
    block_level_[i] = level;
    if (i < effective_levels_) ++level;
  }
  const Index K = config_.cheb_order;
  const auto make_block = [&](const std::string& name, Index level, Index f_in, Index f_out) {
    ResidualBlock b;
    b.level = level;
    b.conv1 = make_cheb(name + ".conv1", K, f_in, f_out, rng);
    b.norm1 = make_norm(name + ".norm1", f_out);
    b.conv2 = make_cheb(name + ".conv2", K, f_out, f_out, rng);
    b.norm2 = make_norm(name + ".norm2", f_out);
    b.has_projection = f_in != f_out;
    if (b.has_projection) b.projection = make_cheb(name + ".proj", 1, f_in, f_out, rng);
    return b;
  };

  Index f_prev = 3;
  for (Index i = 0; i < nb; ++i) {
    const Index f = config_.encoder_features[i];
    encoder_.push_back(make_block("enc" + std::to_string(i), block_level_[i], f_prev, f));
    if (config_.conditional) {
      const Index c = covariates_.size(), hdim = config_.conditioner_hidden;
      const std::string name = "cond" + std::to_string(i);
      Matrix b2 = Matrix::Zero(1, 2 * f);
      b2.leftCols(f).setOnes();
      conditioners_.push_back({Parameter(name + ".w1", glorot(c, hdim, c, hdim, rng)),
                               Parameter(name + ".b1", Matrix::Zero(1, hdim), false),
                               Parameter(name + ".w2", Matrix::Zero(hdim, 2 * f)),
                               Parameter(name + ".b2", std::move(b2), false)});
    }
    f_prev = f;
  }
  const Index coarse = hierarchy_->n_vertices(effective_levels_);
  const Index flat = coarse * config_.encoder_features.back();
  mu_head_ = make_dense("mu", flat, config_.latent_dim, rng);
  log_sigma_head_ = make_dense("log_sigma", flat, config_.latent_dim, rng);

  const Index d = config_.latent_dim;
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for (Index k = 0; k < config_.flow_steps; ++k) {
    Matrix w(1, d);
    for (Index j = 0; j < d; ++j) w(0, j) = normal(rng);
    // u parallel to w with w.u = ln(e - 1) makes u_hat = 0: the unit starts as the identity.
    Matrix u = w * (std::log(std::exp(1.0) - 1.0) / w.squaredNorm());
    const std::string name = "flow" + std::to_string(k);
    flows_.push_back({Parameter(name + ".u", std::move(u)), Parameter(name + ".w", std::move(w)),
                      Parameter(name + ".b", Matrix::Zero(1, 1), false)});
  }

  latent_projection_ = make_dense("latent_projection", d + covariate_dim(), flat, rng);
  const std::vector<Index> dec = config_.decoder_features();
  f_prev = config_.encoder_features.back();
  for (Index j = 0; j < nb; ++j) {
    decoder_.push_back(make_block("dec" + std::to_string(j), block_level_[nb - 1 - j], f_prev, dec[j]));
    f_prev = dec[j];
  }
  output_layer_ = make_cheb("output", 1, f_prev, 3, rng);
}

CvaeNfModel::Encoded CvaeNfModel::encode(Tape& tape, const MeshBatch& batch, Mode mode) {
  return ModelCore<CvaeNfModel>::encode(*this, tape, batch, mode);
}

CvaeNfModel::FlowResult CvaeNfModel::flow(Tape& tape, Var z0) { return ModelCore<CvaeNfModel>::flow(*this, tape, z0); }

Var CvaeNfModel::decode(Tape& tape, Var z, const Matrix& covariates, Mode mode) {
  return ModelCore<CvaeNfModel>::decode(*this, tape, z, covariates, mode);
}

Var reparameterize(Var mu, Var log_sigma, const Matrix& noise) {
  if (noise.rows() != mu.rows() || noise.cols() != mu.cols()) throw std::invalid_argument("reparameterize: noise shape mismatch");
  Tape* t = mu.tape();
  return ad::add(mu, ad::mul(ad::exp(log_sigma), t->constant(noise)));
}

Eigen::VectorXd reparameterize(const PosteriorParams& p, const Eigen::VectorXd& noise) {
  if (noise.size() != p.mu.size()) throw std::invalid_argument("reparameterize: noise length mismatch");
  return p.mu + p.log_sigma.array().exp().matrix().cwiseProduct(noise);
}

CvaeNfModel::ForwardPass CvaeNfModel::forward(Tape& tape, const MeshBatch& batch, const Matrix& noise, Mode mode) {
  Encoded e = encode(tape, batch, mode);
  Var z0 = reparameterize(e.mu, e.log_sigma, noise);
  FlowResult f = flow(tape, z0);
  Var recon = decode(tape, f.z_final, batch.covariates, mode);
  return {recon, e.mu, e.log_sigma, z0, f.z_final, f.sum_log_det};
}

PosteriorParams CvaeNfModel::encode(const Positions& shape, const Eigen::VectorXd& covariates) const {
  Tape t;
  const MeshBatch batch = MeshBatch::from({&shape}, covariates.transpose());
  Encoded e = ModelCore<const CvaeNfModel>::encode(*this, t, batch, Mode::Eval);
  return {e.mu.value().row(0).transpose(), e.log_sigma.value().row(0).transpose()};
}

Eigen::MatrixXd CvaeNfModel::encode_means(const std::vector<const Positions*>& shapes,
                                          const Eigen::MatrixXd& covariates) const {
  Eigen::MatrixXd out(static_cast<Index>(shapes.size()), config_.latent_dim);
  constexpr Index kChunk = 64;
  for (Index start = 0; start < out.rows(); start += kChunk) {
    const Index count = std::min(kChunk, out.rows() - start);
    std::vector<const Positions*> chunk(shapes.begin() + start, shapes.begin() + start + count);
    Tape t;
    const MeshBatch batch = MeshBatch::from(chunk, covariates.middleRows(start, count));
    out.middleRows(start, count) = ModelCore<const CvaeNfModel>::encode(*this, t, batch, Mode::Eval).mu.value();
  }
  return out;
}

std::vector<Positions> CvaeNfModel::decode_batch(const Eigen::MatrixXd& z, const Eigen::MatrixXd& covariates) const {
  std::vector<Positions> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  constexpr Index kChunk = 64;
  for (Index start = 0; start < z.rows(); start += kChunk) {
    const Index count = std::min(kChunk, z.rows() - start);
    Tape t;
    const Matrix cov = config_.conditional ? Matrix(covariates.middleRows(start, count)) : Matrix(count, 0);
    Var x = ModelCore<const CvaeNfModel>::decode(*this, t, t.constant(z.middleRows(start, count)), cov, Mode::Eval);
    for (Index b = 0; b < count; ++b) out.emplace_back(x.value().middleCols(3 * b, 3));
  }
  return out;
}

Positions CvaeNfModel::decode(const Eigen::VectorXd& z, const Eigen::VectorXd& covariates) const {
  return decode_batch(z.transpose(), covariates.transpose()).front();
}

FlowChain<double> CvaeNfModel::flow_chain() const {
  FlowChain<double> chain(config_.latent_dim);
  for (const auto& unit : flows_)
    chain.push_back(PlanarFlowParams<double>{unit.u.value.row(0).transpose(), unit.w.value.row(0).transpose(),
                                             unit.b.value(0, 0)});
  return chain;
}

LatentState<double> CvaeNfModel::latent_state(const Eigen::VectorXd& z0) const { return chain_forward(z0, flow_chain()); }

Positions CvaeNfModel::reconstruct(const Positions& shape, const Eigen::VectorXd& covariates) const {
  const PosteriorParams p = encode(shape, covariates);
  return decode(latent_state(p.mu).z_final, covariates);
}

std::vector<Positions> CvaeNfModel::sample_population(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const {
  if (!trained_) throw std::logic_error("sample_population: model has not been trained");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(covariates.rows(), config_.latent_dim);
  for (Index i = 0; i < z.rows(); ++i)
    for (Index j = 0; j < z.cols(); ++j) z(i, j) = normal(rng);
  return decode_batch(z, covariates);
}

namespace {

template <typename Model, typename Out>
void collect_parameters(Model& m, Out& out) {
  auto cheb = [&](auto& l) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  };
  auto block = [&](auto& b) {
    cheb(b.conv1);
    out.push_back(&b.norm1.gamma);
    out.push_back(&b.norm1.beta);
    cheb(b.conv2);
    out.push_back(&b.norm2.gamma);
    out.push_back(&b.norm2.beta);
    if (b.has_projection) cheb(b.projection);
  };
  for (auto& b : m.encoder_blocks()) block(b);
  for (auto& c : m.conditioners()) {
    out.push_back(&c.w1);
    out.push_back(&c.b1);
    out.push_back(&c.w2);
    out.push_back(&c.b2);
  }
  cheb(m.mu_head());
  cheb(m.log_sigma_head());
  for (auto& f : m.flow_units()) {
    out.push_back(&f.u);
    out.push_back(&f.w);
    out.push_back(&f.b);
  }
  cheb(m.latent_projection());
  for (auto& b : m.decoder_blocks()) block(b);
  cheb(m.output_layer());
}

}  // namespace

std::vector<Parameter*> CvaeNfModel::parameters() {
  std::vector<Parameter*> out;
  collect_parameters(*this, out);
  return out;
}

std::vector<const Parameter*> CvaeNfModel::parameters() const {
  std::vector<Parameter*> mutable_params = const_cast<CvaeNfModel&>(*this).parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<ad::BatchNormState*> CvaeNfModel::batch_norm_states() {
  std::vector<ad::BatchNormState*> out;
  for (auto* blocks : {&encoder_, &decoder_})
    for (auto& b : *blocks) {
      out.push_back(&b.norm1.state);
      out.push_back(&b.norm2.state);
    }
  return out;
}

std::vector<const ad::BatchNormState*> CvaeNfModel::batch_norm_states() const {
  std::vector<const ad::BatchNormState*> out;
  for (const auto* blocks : {&encoder_, &decoder_})
    for (const auto& b : *blocks) {
      out.push_back(&b.norm1.state);
      out.push_back(&b.norm2.state);
    }
  return out;
}

void CvaeNfModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Var residual_block(Tape& tape, ResidualBlock& block, const SparseOperator& laplacian, Var features, Index batch,
                   Mode mode) {
  return residual_block_impl(tape, block, laplacian, features, batch, mode);
}

Var condition_scale(Tape& tape, Conditioner& conditioner, Var hidden, const Matrix& covariates) {
  return condition_scale_impl(tape, conditioner, hidden, covariates);
}

}  // namespace cvaenf
