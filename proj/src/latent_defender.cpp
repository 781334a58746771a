#include "mrr/latent_defender.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "mrr/error.hpp"

namespace mrr {
namespace {

constexpr std::size_t kChunk = 256;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.row_size())};
}

}  // namespace

PcaProjection fit_pca(const Tensor& features, double min_energy) {
  const std::size_t n = features.rows(), p = features.row_size();
  if (n < p || n < 2) {
    throw DataError("PCA needs at least as many samples as features (" + std::to_string(n) + " < " +
                    std::to_string(p) + ")");
  }
  const auto X = as_matrix(features);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw DataError("PCA eigendecomposition failed");

  // Eigen returns ascending eigenvalues; walk them from the top.
  const Eigen::VectorXd values = eig.eigenvalues().cwiseMax(0.0);
  const double total = values.sum();
  std::size_t L = 1;
  double kept = total > 0.0 ? values(p - 1) : 0.0;
  if (total > 0.0) {
    while (L < p && kept / total < min_energy - 1e-12) {
      kept += values(p - 1 - L);
      ++L;
    }
  }

  PcaProjection pca;
  pca.mean.assign(mean.data(), mean.data() + p);
  pca.components = Tensor({p, L});
  for (std::size_t j = 0; j < L; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(p - 1 - j));
    Eigen::Index at = 0;
    v.cwiseAbs().maxCoeff(&at);
    if (v(at) < 0) v = -v;  // fixed sign so repeated fits agree
    for (std::size_t i = 0; i < p; ++i) pca.components[i * L + j] = v(static_cast<Eigen::Index>(i));
  }
  pca.energy_kept = total > 0.0 ? kept / total : 1.0;
  return pca;
}

Tensor project(const PcaProjection& pca, const Tensor& rows) {
  const std::size_t p = pca.input_dim(), L = pca.output_dim();
  if (rows.row_size() != p) throw ShapeError("PCA projection expects rows of " + std::to_string(p) + " features");
  Tensor out({rows.rows(), L});
  for (std::size_t b = 0; b < rows.rows(); ++b) {
    auto r = rows.row(b);
    for (std::size_t i = 0; i < p; ++i) {
      const double v = r[i] - pca.mean[i];
      if (v == 0.0) continue;
      const double* w = pca.components.data.data() + i * L;
      double* o = out.data.data() + b * L;
      for (std::size_t j = 0; j < L; ++j) o[j] += v * w[j];
    }
  }
  return out;
}

MrrLoss mrr_loss(const Tensor& features, std::span<const int> labels, const CenterSet& cs) {
  const std::size_t B = features.rows(), D = features.row_size(), K = cs.num_classes();
  if (cs.dim() != D) throw ShapeError("center dimension does not match feature dimension");
  if (labels.size() != B) throw ShapeError("centre loss: label count does not match batch");
  check_labels(labels, K);
  const double inv_b = 1.0 / static_cast<double>(B);
  const double g = cs.gamma;
  const auto& C = cs.centers.data;

  MrrLoss r;
  r.grad_features = Tensor(features.shape);
  r.grad_centers = Tensor(cs.centers.shape);

  for (std::size_t b = 0; b < B; ++b) {
    const double* f = features.data.data() + b * D;
    double* gf = r.grad_features.data.data() + b * D;
    const auto y = static_cast<std::size_t>(labels[b]);
    for (std::size_t i = 0; i < K; ++i) {
      const double* c = C.data() + i * D;
      double* gc = r.grad_centers.data.data() + i * D;
      double dist2 = 0.0;
      // own class pulls (+), the others push (-)
      const double sign = i == y ? 1.0 : -1.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double diff = c[k] - f[k];
        dist2 += diff * diff;
        gf[k] -= sign * 2.0 * g * inv_b * diff;
        gc[k] += sign * 2.0 * g * inv_b * diff;
      }
      if (i == y) {
        r.loss1 += dist2 * inv_b;
      } else {
        r.loss2 += dist2 * inv_b;
      }
    }
  }
  for (std::size_t i = 0; i < K; ++i) {
    const double* c = C.data() + i * D;
    double* gc = r.grad_centers.data.data() + i * D;
    const double norm = norm2({c, D});
    r.loss3 += (norm - 1.0) * (norm - 1.0);
    if (norm > 0.0) {
      for (std::size_t k = 0; k < D; ++k) gc[k] += g * 2.0 * (norm - 1.0) * c[k] / norm;
    }
  }
  r.value = g * (r.loss1 - r.loss2 + r.loss3);
  return r;
}

Network attach(const Network& victim, std::size_t layer) {
  if (layer >= victim.layers.size()) {
    throw ShapeError("checkpoint layer " + std::to_string(layer) + " out of range for a " +
                     std::to_string(victim.layers.size()) + "-layer victim");
  }
  if (layer + 1 == victim.layers.size()) {
    throw ShapeError("checkpoint layer " + std::to_string(layer) + " is the classifier head; pick a hidden layer");
  }
  Network net = victim;
  net.layers.insert(net.layers.begin() + static_cast<std::ptrdiff_t>(layer) + 1, Layer::l2_normalize());
  return net;
}

double rescale_head(Network& defender, std::size_t checkpoint, const Tensor& images) {
  if (checkpoint >= defender.layers.size() || defender.layers[checkpoint].kind != LayerKind::L2Normalize) {
    throw ShapeError("checkpoint index does not name the inserted L2Normalize layer");
  }
  if (images.rows() == 0) throw DataError("cannot measure feature norms on an empty batch");
  std::size_t head = checkpoint + 1;
  while (head < defender.layers.size() && !defender.layers[head].has_params()) {
    const LayerKind k = defender.layers[head].kind;
    if (k != LayerKind::ReLU && k != LayerKind::MaxPool2D && k != LayerKind::GlobalAvgPool) {
      throw ShapeError("layer " + std::to_string(head) + " between checkpoint and head is not positively homogeneous");
    }
    ++head;
  }
  if (head == defender.layers.size()) throw ShapeError("no parametric layer after the checkpoint");
  double total = 0.0;
  for (std::size_t first = 0; first < images.rows(); first += kChunk) {
    const std::size_t last = std::min(images.rows(), first + kChunk);
    const Tensor f = *forward(defender, slice_rows(images, first, last), checkpoint - 1).captured;
    for (std::size_t b = 0; b < f.rows(); ++b) total += norm2(f.row(b));
  }
  const double scale = total / static_cast<double>(images.rows());
  if (!(scale > 0.0)) throw DataError("checkpoint features are all zero");
  for (double& w : defender.layers[head].params[0].data) w *= scale;
  return scale;
}

std::size_t default_checkpoint(const Network& victim) {
  if (victim.layers.size() < 2) throw ShapeError("victim has no hidden layer to checkpoint");
  return victim.layers.size() - 2;
}

Tensor checkpoint_features(const Network& defender, std::size_t checkpoint, const Tensor& images) {
  Tensor out;
  for (std::size_t first = 0; first < images.rows(); first += kChunk) {
    const std::size_t last = std::min(images.rows(), first + kChunk);
    auto r = forward(defender, slice_rows(images, first, last), checkpoint);
    Tensor f = r.captured->reshaped({last - first, r.captured->row_size()});
    if (first == 0) {
      out = Tensor({images.rows(), f.row_size()});
    }
    std::copy(f.data.begin(), f.data.end(), out.data.begin() + first * f.row_size());
  }
  return out;
}

double mean_intra_distance(const Tensor& features, std::span<const int> labels, const CenterSet& cs) {
  double total = 0.0;
  for (std::size_t b = 0; b < features.rows(); ++b) {
    auto f = features.row(b);
    auto c = cs.centers.row(labels[b]);
    double d2 = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) d2 += (f[k] - c[k]) * (f[k] - c[k]);
    total += std::sqrt(d2);
  }
  return features.rows() ? total / static_cast<double>(features.rows()) : 0.0;
}

CenterSet initial_centers(const Network& defender, std::size_t checkpoint, const Dataset& data, double gamma) {
  const Tensor f = checkpoint_features(defender, checkpoint, data.images);
  const std::size_t K = defender.num_classes(), D = f.row_size();
  CenterSet cs{Tensor({K, D}), gamma};
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t b = 0; b < f.rows(); ++b) {
    const auto y = static_cast<std::size_t>(data.labels[b]);
    ++counts[y];
    for (std::size_t k = 0; k < D; ++k) cs.centers[y * D + k] += f[b * D + k];
  }
  for (std::size_t i = 0; i < K; ++i) {
    auto row = cs.centers.row(i);
    const double n = norm2(row);
    if (counts[i] == 0 || n == 0.0) {
      throw DataError("class " + std::to_string(i) + " has no usable training features for its center");
    }
    for (double& v : row) v /= n;
  }
  return cs;
}

FineTuneReport fine_tune(Network& defender, std::size_t checkpoint, CenterSet& centers, const Dataset& data,
                         const FineTuneConfig& cfg) {
  validate(cfg.train);
  if (data.size() == 0) throw DataError("cannot fine-tune on an empty dataset");
  if (checkpoint >= defender.layers.size() || defender.layers[checkpoint].kind != LayerKind::L2Normalize) {
    throw ShapeError("checkpoint index does not name the inserted L2Normalize layer");
  }
  check_labels(data.labels, defender.num_classes());
  centers.gamma = cfg.gamma;

  FineTuneReport report;
  report.intra_distance_before =
      mean_intra_distance(checkpoint_features(defender, checkpoint, data.images), data.labels, centers);

  const double lr = cfg.train.learning_rate;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : shuffled_batches(data.size(), cfg.train.batch_size, cfg.train.seed, epoch)) {
      const Tensor x = gather_rows(data.images, idx);
      std::vector<int> y(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = data.labels[idx[k]];

      const ForwardTrace trace = forward_trace(defender, x);
      const Tensor& feat = trace.activations[checkpoint + 1];
      const LossAndGrad ce = cross_entropy(trace.output(), y);
      const MrrLoss extra = mrr_loss(feat.reshaped({idx.size(), feat.row_size()}), y, centers);
      const InjectedGrad inj{checkpoint, extra.grad_features.reshaped(feat.shape)};
      const Gradients grads = backward(defender, trace, ce.grad, std::span(&inj, 1));
      apply_sgd(defender, grads, lr);
      for (std::size_t k = 0; k < centers.centers.size(); ++k) centers.centers[k] -= lr * extra.grad_centers[k];
      total += (ce.loss + extra.value) * static_cast<double>(idx.size());
    }
    double loss3 = 0.0;
    for (std::size_t i = 0; i < centers.num_classes(); ++i) {
      const double n = norm2(centers.centers.row(i));
      loss3 += (n - 1.0) * (n - 1.0);
    }
    const double mean = total / static_cast<double>(data.size());
    report.epoch_loss.push_back(mean);
    report.epoch_loss3.push_back(loss3);
    if (!std::isfinite(mean) || loss3 > cfg.divergence_limit) {
      throw DivergenceError("defender fine-tuning diverged at epoch " + std::to_string(epoch) +
                            " (loss3 = " + std::to_string(loss3) + ")");
    }
  }
  report.intra_distance_after =
      mean_intra_distance(checkpoint_features(defender, checkpoint, data.images), data.labels, centers);
  return report;
}

Network fold_pca(const Network& defender, std::size_t checkpoint, const PcaProjection& pca) {
  Network net;
  net.input_shape = defender.input_shape;
  net.layers.assign(defender.layers.begin(), defender.layers.begin() + static_cast<std::ptrdiff_t>(checkpoint) + 1);
  const std::size_t p = pca.input_dim(), L = pca.output_dim();
  Layer dense = Layer::dense(p, L);
  for (std::size_t j = 0; j < L; ++j) {
    double bias = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      const double w = pca.components[i * L + j];
      dense.params[0][j * p + i] = w;
      bias -= pca.mean[i] * w;
    }
    dense.params[1][j] = bias;
  }
  net.layers.push_back(std::move(dense));
  net.activation_shapes();
  return net;
}

void LatentDefender::rebuild_derived() {
  folded = fold_pca(network, checkpoint_layer, pca);
  projected_centers = project(pca, centers.centers);
}

std::vector<double> latent_distances(const LatentDefender& d, const Tensor& images, std::span<const int> predicted) {
  if (predicted.size() != images.rows()) throw ShapeError("one predicted class per image required");
  check_labels(predicted, d.num_classes());
  std::vector<double> out(images.rows());
  const std::size_t L = d.pca.output_dim();
  for (std::size_t first = 0; first < images.rows(); first += kChunk) {
    const std::size_t last = std::min(images.rows(), first + kChunk);
    const Tensor z = forward(d.folded, slice_rows(images, first, last)).logits;
    for (std::size_t b = 0; b < last - first; ++b) {
      auto c = d.projected_centers.row(predicted[first + b]);
      double d2 = 0.0;
      for (std::size_t k = 0; k < L; ++k) d2 += (z[b * L + k] - c[k]) * (z[b * L + k] - c[k]);
      out[first + b] = std::sqrt(d2);
    }
  }
  return out;
}

std::vector<std::vector<double>> profile_radii(const LatentDefender& d, const Tensor& images,
                                               std::span<const int> predicted, std::size_t min_per_class) {
  const auto dist = latent_distances(d, images, predicted);
  std::vector<std::vector<double>> table(d.num_classes());
  for (std::size_t b = 0; b < dist.size(); ++b) table[predicted[b]].push_back(dist[b]);
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].size() < min_per_class) {
      throw DataError("insufficient profile for class " + std::to_string(i) + ": " + std::to_string(table[i].size()) +
                      " benign samples, need " + std::to_string(min_per_class));
    }
    std::sort(table[i].begin(), table[i].end());
  }
  return table;
}

std::vector<double> thresholds_for_sp(const std::vector<std::vector<double>>& table, SecurityParameter sp) {
  std::vector<double> out;
  out.reserve(table.size());
  for (const auto& radii : table) {
    out.push_back(sp.flags_everything() ? 0.0 : percentile(radii, 100.0 - sp.value()));
  }
  return out;
}

void set_security(LatentDefender& d, SecurityParameter sp) {
  d.sp = sp.value();
  d.thresholds = thresholds_for_sp(d.percentile_table, sp);
}

LatentVerdict detect_latent(const LatentDefender& d, const Tensor& x, int predicted_class) {
  Tensor batch = x;
  if (x.rank() == d.network.input_shape.size()) batch = x.reshaped([&] {
    Shape s{1};
    s.insert(s.end(), x.shape.begin(), x.shape.end());
    return s;
  }());
  const int cls[] = {predicted_class};
  const double dist = latent_distances(d, batch, cls).front();
  return {latent_flag(dist, d.thresholds.at(predicted_class), SecurityParameter(d.sp)), dist};
}

LatentDefender build_latent_defender(const Network& victim, std::size_t layer, const Dataset& train_data,
                                     const Tensor& pca_images, const Dataset& profile,
                                     std::span<const int> profile_predicted, const LatentBuildConfig& cfg,
                                     FineTuneReport* report) {
  LatentDefender d;
  d.network = attach(victim, layer);
  d.checkpoint_layer = layer + 1;
  if (cfg.rescale_head) rescale_head(d.network, d.checkpoint_layer, train_data.images);
  d.centers = initial_centers(d.network, d.checkpoint_layer, train_data, cfg.fine_tune.gamma);
  FineTuneReport r = fine_tune(d.network, d.checkpoint_layer, d.centers, train_data, cfg.fine_tune);
  if (report) *report = std::move(r);
  d.pca = fit_pca(checkpoint_features(d.network, d.checkpoint_layer, pca_images), cfg.min_energy);
  d.rebuild_derived();
  d.percentile_table = profile_radii(d, profile.images, profile_predicted);
  set_security(d, SecurityParameter(cfg.sp));
  return d;
}

Tensor chain_perturbation(const LatentDefender& d, const Tensor& images, std::span<const int> labels, double step) {
  Tensor out = images;
  const std::size_t width = images.row_size();
  for (std::size_t first = 0; first < images.rows(); first += kChunk) {
    const std::size_t last = std::min(images.rows(), first + kChunk);
    const Tensor x = slice_rows(images, first, last);
    const ForwardTrace trace = forward_trace(d.network, x);
    const Tensor& feat = trace.activations[d.checkpoint_layer + 1];
    const std::size_t D = feat.row_size();
    // d/df |C^y - f|^2 = 2 (f - C^y)
    Tensor gf(feat.shape);
    for (std::size_t b = 0; b < last - first; ++b) {
      auto c = d.centers.centers.row(labels[first + b]);
      for (std::size_t k = 0; k < D; ++k) gf[b * D + k] = 2.0 * (feat[b * D + k] - c[k]);
    }
    const InjectedGrad inj{d.checkpoint_layer, std::move(gf)};
    const Gradients g = backward(d.network, trace, Tensor(trace.output().shape), std::span(&inj, 1));
    for (std::size_t b = 0; b < last - first; ++b) {
      auto eta = g.input.row(b);
      const double m = max_abs(eta);
      const double scale = m > 0.0 ? step / m : 0.0;
      for (std::size_t k = 0; k < width; ++k) {
        double& v = out[(first + b) * width + k];
        v = std::clamp(v + scale * eta[k], 0.0, 1.0);
      }
    }
  }
  return out;
}

std::vector<LatentDefender> build_chain(const Network& victim, LatentDefender first, const Dataset& train_data,
                                        const Dataset& profile, std::span<const int> profile_predicted,
                                        std::size_t num_defenders, const LatentBuildConfig& cfg,
                                        std::vector<FineTuneReport>* reports) {
  if (num_defenders < 1) throw DataError("a defender chain needs at least one defender");
  const std::size_t layer = first.checkpoint_layer - 1;
  std::vector<LatentDefender> chain;
  chain.push_back(std::move(first));
  Dataset current = train_data;
  for (std::size_t n = 1; n < num_defenders; ++n) {
    current.images = chain_perturbation(chain.back(), current.images, current.labels, cfg.chain_step);
    LatentBuildConfig member = cfg;
    member.fine_tune.train.seed = cfg.fine_tune.train.seed + n;
    FineTuneReport r;
    chain.push_back(build_latent_defender(victim, layer, current, train_data.images, profile, profile_predicted,
                                          member, &r));
    if (reports) reports->push_back(std::move(r));
  }
  return chain;
}

Json latent_defender_to_json(const LatentDefender& d) {
  Json j = network_to_json(d.network);
  Json table = Json::array();
  for (const auto& row : d.percentile_table) table.push_back(doubles_to_json(row));
  j["checkpoint_layer"] = d.checkpoint_layer;
  j["centers"] = tensor_to_json(d.centers.centers);
  j["gamma"] = d.centers.gamma;
  j["pca"] = {{"mean", doubles_to_json(d.pca.mean)},
              {"components", tensor_to_json(d.pca.components)},
              {"energy_kept", d.pca.energy_kept}};
  j["thresholds"] = doubles_to_json(d.thresholds);
  j["sp"] = d.sp;
  j["percentile_table"] = table;
  return j;
}

LatentDefender latent_defender_from_json(const Json& j) {
  try {
    LatentDefender d;
    d.network = network_from_json(j);
    d.checkpoint_layer = j.at("checkpoint_layer").get<std::size_t>();
    if (d.checkpoint_layer >= d.network.layers.size() ||
        d.network.layers[d.checkpoint_layer].kind != LayerKind::L2Normalize) {
      throw DataError("defender checkpoint_layer does not point at an L2Normalize layer");
    }
    d.centers = {tensor_from_json(j.at("centers")), j.at("gamma").get<double>()};
    d.pca.mean = doubles_from_json(j.at("pca").at("mean"));
    d.pca.components = tensor_from_json(j.at("pca").at("components"));
    d.pca.energy_kept = j.at("pca").at("energy_kept").get<double>();
    d.thresholds = doubles_from_json(j.at("thresholds"));
    d.sp = j.at("sp").get<double>();
    for (const auto& row : j.at("percentile_table")) d.percentile_table.push_back(doubles_from_json(row));
    d.rebuild_derived();
    return d;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed defender JSON: ") + e.what());
  }
}

}  // namespace mrr
