#include "cvaenf/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>

namespace cvaenf {

namespace fs = std::filesystem;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using nlohmann::json;

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;
}

KlObjective parse_kl_objective(const std::string& s) {
  if (s == "flowed_mc") return KlObjective::FlowedMc;
  if (s == "analytic_q0") return KlObjective::AnalyticQ0;
  throw ConfigError("unknown kl_objective '" + s + "' (expected flowed_mc or analytic_q0)");
}

std::string to_string(KlObjective k) { return k == KlObjective::FlowedMc ? "flowed_mc" : "analytic_q0"; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must lie in [0, epochs]");
  if (!(recon_sigma > 0)) throw ConfigError("recon_sigma must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
           {"epochs", c.epochs},               {"weight_decay", c.weight_decay},
           {"warmup_epochs", c.warmup_epochs}, {"kl_objective", to_string(c.kl_objective)},
           {"recon_sigma", c.recon_sigma},     {"grad_clip", c.grad_clip},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<Index>();
    else if (key == "epochs") c.epochs = v.get<Index>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "warmup_epochs") c.warmup_epochs = v.get<Index>();
    else if (key == "kl_objective") c.kl_objective = parse_kl_objective(v.get<std::string>());
    else if (key == "recon_sigma") c.recon_sigma = v.get<double>();
    else if (key == "grad_clip") c.grad_clip = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown train config key '" + key + "'");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"latent_dim", c.latent_dim},       {"encoder_features", c.encoder_features},
           {"sampling_factor", c.sampling_factor}, {"sampling_levels", c.sampling_levels},
           {"cheb_order", c.cheb_order},       {"flow_steps", c.flow_steps},
           {"conditional", c.conditional},     {"conditioner_hidden", c.conditioner_hidden}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "latent_dim") c.latent_dim = v.get<Index>();
    else if (key == "encoder_features") c.encoder_features = v.get<std::vector<Index>>();
    else if (key == "sampling_factor") c.sampling_factor = v.get<Index>();
    else if (key == "sampling_levels") c.sampling_levels = v.get<Index>();
    else if (key == "cheb_order") c.cheb_order = v.get<Index>();
    else if (key == "flow_steps") c.flow_steps = v.get<Index>();
    else if (key == "conditional") c.conditional = v.get<bool>();
    else if (key == "conditioner_hidden") c.conditioner_hidden = v.get<Index>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
}

namespace {

double checked(const Var& v, const char* term) {
  const double x = v.value()(0, 0);
  if (!std::isfinite(x)) throw NonFiniteLossError(term, std::string("non-finite ") + term);
  return x;
}

}  // namespace

Loss elbo_from_forward(Tape& tape, const CvaeNfModel::ForwardPass& pass, const MeshBatch& batch, const Matrix& noise,
                       double beta, KlObjective objective, double recon_sigma) {
  if (beta < 0 || beta > 1) throw std::invalid_argument("beta must lie in [0, 1]");
  const Index b = batch.size();
  const double inv_b = 1.0 / static_cast<double>(b);
  const Index d = pass.mu.cols();

  Var diff = ad::sub(pass.reconstruction, tape.constant(batch.positions));
  Var recon = ad::scale(ad::sum(ad::square(diff)), inv_b / (2.0 * recon_sigma * recon_sigma));
  Var sld = ad::scale(ad::sum(pass.sum_log_det), inv_b);

  Var kl;
  if (objective == KlObjective::FlowedMc) {
    // ln q0(z0) = sum(-ln sqrt(2 pi) - ln sigma - eps^2 / 2), eps being the supplied noise.
    const double q0_const = -kHalfLog2Pi * static_cast<double>(b * d) - 0.5 * noise.squaredNorm();
    Var log_q0 = ad::add_scalar(ad::scale(ad::sum(pass.log_sigma), -1.0), q0_const);
    Var log_p = ad::add_scalar(ad::scale(ad::sum(ad::square(pass.z_final)), -0.5), -kHalfLog2Pi * static_cast<double>(b * d));
    kl = ad::scale(ad::sub(ad::sub(log_q0, ad::sum(pass.sum_log_det)), log_p), inv_b);
  } else {
    Var two_kl = ad::add_scalar(
        ad::sub(ad::add(ad::sum(ad::square(pass.mu)), ad::sum(ad::exp(ad::scale(pass.log_sigma, 2.0)))),
                ad::scale(ad::sum(pass.log_sigma), 2.0)),
        -static_cast<double>(b * d));
    kl = ad::scale(ad::sub(ad::scale(two_kl, 0.5), ad::sum(pass.sum_log_det)), inv_b);
  }

  Loss loss;
  loss.values.recon_nll = checked(recon, "recon_nll");
  loss.values.kl_term = checked(kl, "kl_term");
  loss.values.sum_log_det = checked(sld, "sum_log_det");
  loss.total = beta == 0.0 ? recon : ad::add(recon, ad::scale(kl, beta));
  loss.values.total = checked(loss.total, "total");
  return loss;
}

Loss elbo_loss(Tape& tape, CvaeNfModel& model, const MeshBatch& batch, const Matrix& noise, double beta,
               KlObjective objective, double recon_sigma, Mode mode) {
  const CvaeNfModel::ForwardPass pass = model.forward(tape, batch, noise, mode);
  return elbo_from_forward(tape, pass, batch, noise, beta, objective, recon_sigma);
}

Eigen::VectorXd analytic_kl(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& log_sigma) {
  return 0.5 * (mu.array().square() + (2.0 * log_sigma.array()).exp() - 1.0 - 2.0 * log_sigma.array())
                   .rowwise()
                   .sum()
                   .matrix();
}

double kl_warmup(Index epoch, Index warmup_epochs) {
  if (epoch < 0) throw std::invalid_argument("kl_warmup: epoch must be >= 0");
  if (warmup_epochs <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup_epochs));
}

DatasetSplit split_dataset(Index n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (n < 3) throw std::invalid_argument("split_dataset: need at least 3 items");
  for (double r : ratios)
    if (!(r > 0)) throw std::invalid_argument("split_dataset: ratios must be positive");
  const double total = ratios[0] + ratios[1] + ratios[2];
  const Index n_val = std::llround(static_cast<double>(n) * ratios[1] / total);
  const Index n_test = std::llround(static_cast<double>(n) * ratios[2] / total);
  if (n_val + n_test >= n) throw std::invalid_argument("split_dataset: no items left for training");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetSplit s;
  const Index n_train = n - n_val - n_test;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double eps)
    : lr_(learning_rate), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const std::vector<ad::Parameter*>& params) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Parameter& p = *params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    if (p.decay) p.value *= 1.0 - lr_ * wd_;
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

namespace {

void write_matrix(std::ostream& out, const Matrix& m) {
  const std::uint64_t rc[2] = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  out.write(reinterpret_cast<const char*>(rc), sizeof rc);
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

Matrix read_matrix(std::istream& in) {
  std::uint64_t rc[2] = {0, 0};
  in.read(reinterpret_cast<char*>(rc), sizeof rc);
  if (!in || rc[0] > (1u << 28) || rc[1] > (1u << 28)) throw std::runtime_error("corrupt matrix blob");
  Matrix m(static_cast<Index>(rc[0]), static_cast<Index>(rc[1]));
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw std::runtime_error("truncated matrix blob");
  return m;
}

void write_string(std::ostream& out, const std::string& s) {
  const std::uint32_t n = static_cast<std::uint32_t>(s.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(s.data(), n);
}

std::string read_string(std::istream& in) {
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > 4096) throw std::runtime_error("corrupt string blob");
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

constexpr char kWeightsMagic[8] = {'C', 'V', 'N', 'F', 'W', '0', '1', '\n'};
constexpr char kOptimMagic[8] = {'C', 'V', 'N', 'F', 'O', '0', '1', '\n'};

}  // namespace

void AdamW::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kOptimMagic, sizeof kOptimMagic);
  const std::int64_t header[2] = {t_, static_cast<std::int64_t>(m_.size())};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  for (std::size_t i = 0; i < m_.size(); ++i) {
    write_matrix(out, m_[i]);
    write_matrix(out, v_[i]);
  }
}

void AdamW::load(const fs::path& path, const std::vector<ad::Parameter*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kOptimMagic)) throw std::runtime_error(path.string() + ": not an optimizer state");
  std::int64_t header[2];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  const auto count = static_cast<std::size_t>(header[1]);
  if (count != 0 && count != params.size()) throw std::runtime_error(path.string() + ": parameter count mismatch");
  std::vector<Matrix> m, v;
  for (std::size_t i = 0; i < count; ++i) {
    m.push_back(read_matrix(in));
    v.push_back(read_matrix(in));
    if (m.back().rows() != params[i]->value.rows() || m.back().cols() != params[i]->value.cols())
      throw std::runtime_error(path.string() + ": moment shape mismatch for " + params[i]->name);
  }
  t_ = header[0];
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_gradients(const std::vector<ad::Parameter*>& params, double max_norm) {
  double sq = 0;
  for (const auto* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

TrainingData make_training_data(const ShapeDataset& ds, const std::vector<Index>& rows, const CovariateSchema& schema) {
  TrainingData data;
  for (Index r : rows) data.shapes.push_back(&ds.shapes.at(static_cast<std::size_t>(r)));
  data.covariates = schema.size() > 0 ? schema.standardize_rows(select_rows(ds.covariates, rows))
                                      : Eigen::MatrixXd(static_cast<Index>(rows.size()), 0);
  return data;
}

std::pair<double, double> reconstruction_error(const CvaeNfModel& model, const TrainingData& data) {
  if (data.size() == 0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const Eigen::MatrixXd cov = model.config().conditional ? data.covariates : Eigen::MatrixXd(data.size(), 0);
  const Eigen::MatrixXd mu = model.encode_means(data.shapes, cov);
  Eigen::MatrixXd z(mu.rows(), mu.cols());
  const FlowChain<double> chain = model.flow_chain();
  for (Index i = 0; i < mu.rows(); ++i) z.row(i) = chain_forward(mu.row(i).transpose(), chain).z_final.transpose();
  const std::vector<Positions> recon = model.decode_batch(z, cov);
  std::vector<double> err;
  for (Index i = 0; i < data.size(); ++i) err.push_back(mean_vertex_distance(*data.shapes[i], recon[i]));
  const double m = std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
  double ss = 0;
  for (double e : err) ss += (e - m) * (e - m);
  return {m, std::sqrt(ss / static_cast<double>(err.size()))};
}

Trainer::Trainer(CvaeNfModel& model, TrainConfig config)
    : model_(model),
      config_(config),
      opt_(config.learning_rate, config.weight_decay),
      best_(std::numeric_limits<double>::infinity()) {
  config_.validate();
}

EpochMetrics Trainer::run_epoch(const TrainingData& train, const TrainingData& validation) {
  if (train.size() == 0) throw std::invalid_argument("empty training set");
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                    static_cast<std::uint32_t>(epoch_)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);

  EpochMetrics metrics;
  metrics.epoch = epoch_;
  metrics.beta = kl_warmup(epoch_, config_.warmup_epochs);
  const Index d = model_.latent_dim();
  const std::vector<ad::Parameter*> params = model_.parameters();
  Index seen = 0;
  for (Index start = 0; start < train.size(); start += config_.batch_size) {
    const Index count = std::min(config_.batch_size, train.size() - start);
    std::vector<const Positions*> shapes;
    Eigen::MatrixXd cov(count, model_.covariate_dim());
    for (Index i = 0; i < count; ++i) {
      const Index r = order[static_cast<std::size_t>(start + i)];
      shapes.push_back(train.shapes[static_cast<std::size_t>(r)]);
      if (cov.cols() > 0) cov.row(i) = train.covariates.row(r);
    }
    const MeshBatch batch = MeshBatch::from(shapes, cov);
    Matrix noise(count, d);
    for (Index j = 0; j < d; ++j)
      for (Index i = 0; i < count; ++i) noise(i, j) = normal(rng);

    try {
      Tape tape;
      const Loss loss = elbo_loss(tape, model_, batch, noise, metrics.beta, config_.kl_objective, config_.recon_sigma);
      model_.zero_grad();
      tape.backward(loss.total);
      const double norm = clip_gradients(params, config_.grad_clip);
      if (!std::isfinite(norm)) throw NonFiniteLossError("gradient", "non-finite gradient norm");
      opt_.step(params);
      consecutive_failures_ = 0;
      const double w = static_cast<double>(count);
      metrics.loss.total += w * loss.values.total;
      metrics.loss.recon_nll += w * loss.values.recon_nll;
      metrics.loss.kl_term += w * loss.values.kl_term;
      metrics.loss.sum_log_det += w * loss.values.sum_log_det;
      seen += count;
    } catch (const NonFiniteLossError& e) {
      model_.zero_grad();
      if (++consecutive_failures_ >= 3)
        throw TrainingAborted("training aborted at epoch " + std::to_string(epoch_) +
                                 ": 3 consecutive non-finite steps, last term '" + e.term + "'");
    } catch (const FlowSingularityError& e) {
      model_.zero_grad();
      if (++consecutive_failures_ >= 3)
        throw TrainingAborted("training aborted at epoch " + std::to_string(epoch_) + ": " + e.what());
    }
  }
  if (seen > 0) {
    const double inv = 1.0 / static_cast<double>(seen);
    metrics.loss.total *= inv;
    metrics.loss.recon_nll *= inv;
    metrics.loss.kl_term *= inv;
    metrics.loss.sum_log_det *= inv;
  } else {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    metrics.loss = {nan, nan, nan, nan};
  }
  model_.set_trained(true);
  metrics.val_generalisation_mm = reconstruction_error(model_, validation).first;
  ++epoch_;
  return metrics;
}

std::vector<EpochMetrics> Trainer::fit(const TrainingData& train, const TrainingData& validation,
                                       const EpochCallback& on_epoch) {
  std::vector<EpochMetrics> history;
  while (epoch_ < config_.epochs) {
    EpochMetrics m = run_epoch(train, validation);
    const double score = validation.size() > 0 ? m.val_generalisation_mm : m.loss.total;
    const bool improved = std::isfinite(score) && score < best_;
    if (improved) best_ = score;
    history.push_back(m);
    if (on_epoch) on_epoch(m, improved);
  }
  return history;
}

void save_checkpoint(const fs::path& dir, const CvaeNfModel& model, const CheckpointInfo& info, const AdamW* optimizer) {
  fs::create_directories(dir);
  save_hierarchy(model.hierarchy(), dir / "hierarchy");
  const CovariateSchema& cs = model.covariates();
  json meta;
  meta["kind"] = "cvae_nf";
  meta["model_config"] = model.config();
  meta["train_config"] = info.train_config;
  meta["covariates"] = {{"names", cs.names},
                        {"mean", std::vector<double>(cs.mean.data(), cs.mean.data() + cs.mean.size())},
                        {"scale", std::vector<double>(cs.scale.data(), cs.scale.data() + cs.scale.size())}};
  meta["normalizer_scale"] = model.normalizer().scale;
  meta["flow_steps"] = model.config().flow_steps;
  meta["epoch"] = info.epoch;
  meta["best_score"] = std::isfinite(info.best_score) ? json(info.best_score) : json(nullptr);
  meta["trained"] = model.trained();
  meta["shells"] = {{"n_endo_vertices", info.layout.n_endo_vertices()}, {"n_endo_faces", info.layout.n_endo_faces()}};
  std::ofstream(dir / "model.json") << meta.dump(2) << '\n';

  std::ofstream out(dir / "weights.bin", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "weights.bin").string());
  out.write(kWeightsMagic, sizeof kWeightsMagic);
  const auto params = model.parameters();
  const auto states = model.batch_norm_states();
  const std::uint64_t count = params.size() + 2 * states.size() + 1;
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto* p : params) {
    write_string(out, p->name);
    write_matrix(out, p->value);
  }
  for (std::size_t i = 0; i < states.size(); ++i) {
    write_string(out, "bn" + std::to_string(i) + ".running_mean");
    write_matrix(out, states[i]->running_mean);
    write_string(out, "bn" + std::to_string(i) + ".running_var");
    write_matrix(out, states[i]->running_var);
  }
  write_string(out, "normalizer.mean");
  write_matrix(out, model.normalizer().mean);
  if (optimizer) optimizer->save(dir / "optimizer.bin");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, AdamW* optimizer) {
  std::ifstream meta_in(dir / "model.json");
  if (!meta_in) throw std::runtime_error("missing model.json in " + dir.string());
  const json meta = json::parse(meta_in);
  if (meta.value("kind", std::string()) != "cvae_nf") throw std::runtime_error(dir.string() + ": not a cvae_nf checkpoint");

  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw std::runtime_error("missing weights.bin in " + dir.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kWeightsMagic)) throw std::runtime_error("weights.bin: bad magic");
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::map<std::string, Matrix> blobs;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(in);
    blobs[name] = read_matrix(in);
  }

  auto hierarchy = std::make_shared<const SamplingHierarchy>(load_hierarchy(dir / "hierarchy"));
  ModelConfig mc = meta.at("model_config").get<ModelConfig>();
  CovariateSchema cs;
  cs.names = meta.at("covariates").at("names").get<std::vector<std::string>>();
  const auto mean = meta.at("covariates").at("mean").get<std::vector<double>>();
  const auto scale = meta.at("covariates").at("scale").get<std::vector<double>>();
  cs.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
  cs.scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), static_cast<Index>(scale.size()));
  ShapeNormalizer norm;
  norm.scale = meta.at("normalizer_scale").get<double>();
  norm.mean = blobs.at("normalizer.mean");

  LoadedCheckpoint out;
  out.model = std::make_unique<CvaeNfModel>(mc, hierarchy, cs, norm, 0);
  for (auto* p : out.model->parameters()) {
    auto it = blobs.find(p->name);
    if (it == blobs.end()) throw std::runtime_error("weights.bin: missing parameter " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      throw std::runtime_error("weights.bin: shape mismatch for " + p->name);
    p->value = it->second;
  }
  const auto states = out.model->batch_norm_states();
  for (std::size_t i = 0; i < states.size(); ++i) {
    states[i]->running_mean = blobs.at("bn" + std::to_string(i) + ".running_mean");
    states[i]->running_var = blobs.at("bn" + std::to_string(i) + ".running_var");
  }
  out.model->set_trained(meta.value("trained", false));
  out.info.epoch = meta.value("epoch", Index{0});
  out.info.best_score =
      meta.at("best_score").is_null() ? std::numeric_limits<double>::infinity() : meta.at("best_score").get<double>();
  out.info.train_config = meta.at("train_config").get<TrainConfig>();
  out.info.layout = ShellLayout::split(out.model->topology(), meta.at("shells").at("n_endo_vertices").get<Index>(),
                                       meta.at("shells").at("n_endo_faces").get<Index>());
  if (optimizer && fs::exists(dir / "optimizer.bin")) optimizer->load(dir / "optimizer.bin", out.model->parameters());
  return out;
}

void write_metrics_csv(const std::vector<EpochMetrics>& rows, const fs::path& path, bool append) {
  const bool header = !append || !fs::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10);
  if (header) out << "epoch,total,recon_nll,kl_term,sum_log_det,beta,val_generalisation_mm\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.loss.total << ',' << r.loss.recon_nll << ',' << r.loss.kl_term << ','
        << r.loss.sum_log_det << ',' << r.beta << ',' << r.val_generalisation_mm << '\n';
}

}  // namespace cvaenf
