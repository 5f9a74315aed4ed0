#include "crois/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "crois/errors.hpp"

namespace crois {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw FormatError("unknown activation '" + s + "'");
}

bool operator==(const DenseLayer& a, const DenseLayer& b) {
  return a.activation == b.activation && a.weight.rows() == b.weight.rows() &&
         a.weight.cols() == b.weight.cols() && a.bias.size() == b.bias.size() &&
         a.weight == b.weight && a.bias == b.bias;
}

MlpModel::MlpModel(std::vector<DenseLayer> layers, std::uint64_t init_seed)
    : layers_(std::move(layers)), init_seed_(init_seed) {
  if (layers_.empty()) throw ShapeError("model needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.bias.size() != layer.weight.rows())
      throw ShapeError("layer " + std::to_string(l) + ": bias length " +
                       std::to_string(layer.bias.size()) + " != out " +
                       std::to_string(layer.weight.rows()));
    if (l > 0 && layer.in() != layers_[l - 1].out())
      throw ShapeError("layer " + std::to_string(l) + " expects " + std::to_string(layer.in()) +
                       " inputs but layer " + std::to_string(l - 1) + " produces " +
                       std::to_string(layers_[l - 1].out()));
  }
  layers_.back().activation = Activation::identity;
}

MlpModel MlpModel::initialize(std::span<const int> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ShapeError("need at least input and output widths");
  for (int w : widths)
    if (w <= 0) throw ShapeError("layer widths must be positive");
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l];
    const int fan_out = widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer;
    layer.weight.resize(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = dist(rng);
    layer.bias = Vector::Zero(fan_out);
    layer.activation = Activation::relu;
    layers.push_back(std::move(layer));
  }
  return MlpModel(std::move(layers), seed);
}

MlpModel MlpModel::head_model() const { return MlpModel({head()}, init_seed_); }

void MlpModel::set_head(const DenseLayer& head) {
  if (head.in() != this->head().in() || head.out() != this->head().out() ||
      head.bias.size() != this->head().bias.size())
    throw ShapeError("replacement head has a different shape");
  layers_.back() = head;
  layers_.back().activation = Activation::identity;
}

bool MlpModel::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
    return l.weight.allFinite() && l.bias.allFinite();
  });
}

std::size_t MlpModel::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool operator==(const MlpModel& a, const MlpModel& b) { return a.layers_ == b.layers_; }

Gradients Gradients::zeros_like(const MlpModel& model) {
  Gradients g;
  for (const auto& l : model.layers()) {
    g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

namespace {

void check_input(const MlpModel& model, const Matrix& batch) {
  if (model.num_layers() == 0) throw ShapeError("empty model");
  if (batch.cols() != model.input_dim())
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
}

Matrix apply_layer(const DenseLayer& layer, const Matrix& input) {
  Matrix out = input * layer.weight.transpose();
  out.rowwise() += layer.bias.transpose();
  if (layer.activation == Activation::relu) out = out.cwiseMax(0.0);
  return out;
}

}  // namespace

ForwardTrace forward_trace(const MlpModel& model, const Matrix& batch) {
  check_input(model, batch);
  ForwardTrace trace;
  trace.activations.reserve(model.num_layers() + 1);
  trace.activations.push_back(batch);
  for (const auto& layer : model.layers())
    trace.activations.push_back(apply_layer(layer, trace.activations.back()));
  return trace;
}

ForwardResult forward(const MlpModel& model, const Matrix& batch) {
  check_input(model, batch);
  Matrix features = batch;
  for (std::size_t l = 0; l + 1 < model.num_layers(); ++l)
    features = apply_layer(model.layers()[l], features);
  Matrix logits = apply_layer(model.head(), features);
  return {std::move(logits), std::move(features)};
}

Matrix extract_features(const MlpModel& model, const Matrix& batch) {
  check_input(model, batch);
  Matrix features = batch;
  for (std::size_t l = 0; l + 1 < model.num_layers(); ++l)
    features = apply_layer(model.layers()[l], features);
  return features;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Vector cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
    throw ShapeError("labels and logits disagree on row count");
  const Matrix p = softmax(logits);
  Vector ce(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw RangeError("label " + std::to_string(y) + " out of range");
    ce(i) = -std::log(std::max(p(i, y), 1e-12));
  }
  return ce;
}

std::vector<int> predict(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

LossAndGradients backward(const MlpModel& model, const Matrix& batch, std::span<const int> labels,
                          std::span<const double> weights) {
  return backward(model, forward_trace(model, batch), labels, weights);
}

LossAndGradients backward(const MlpModel& model, const ForwardTrace& trace,
                          std::span<const int> labels, std::span<const double> weights) {
  const Matrix& logits = trace.logits();
  const Eigen::Index n = logits.rows();
  const Eigen::Index k = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n || static_cast<Eigen::Index>(weights.size()) != n)
    throw ShapeError("labels/weights length must equal batch rows");

  long double total = 0.0L;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw RangeError("example weights must be finite and >= 0");
    total += w;
  }
  if (total == 0.0L) throw DegenerateBatchError("all example weights are zero");
  const double weight_sum = static_cast<double>(total);

  // dL/dlogits = c_i (softmax_i - onehot_i) with c_i = w_i / sum w.
  Matrix delta = softmax(logits);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw RangeError("label " + std::to_string(y) + " out of range");
    const double c = weights[static_cast<std::size_t>(i)] / weight_sum;
    loss += c * -std::log(std::max(delta(i, y), 1e-12));
    delta(i, y) -= 1.0;
    delta.row(i) *= c;
  }

  LossAndGradients out;
  out.loss = loss;
  const std::size_t num_layers = model.num_layers();
  out.grads.weight.resize(num_layers);
  out.grads.bias.resize(num_layers);
  for (std::size_t l = num_layers; l-- > 0;) {
    const Matrix& input = trace.activations[l];
    out.grads.weight[l] = delta.transpose() * input;
    out.grads.bias[l] = delta.colwise().sum().transpose();
    if (l == 0) break;
    Matrix upstream = delta * model.layers()[l].weight;
    // Rectifier derivative taken as 0 at the kink.
    if (model.layers()[l - 1].activation == Activation::relu)
      delta = (trace.activations[l].array() > 0.0).select(upstream, 0.0);
    else
      delta = std::move(upstream);
  }
  return out;
}

void sgd_step(MlpModel& model, const Gradients& grads, const SgdOptions& options,
              SgdVelocity& velocity) {
  if (grads.weight.size() != model.num_layers() || grads.bias.size() != model.num_layers())
    throw ShapeError("gradients do not match model depth");
  if (!velocity.initialized) {
    velocity.buffers = Gradients::zeros_like(model);
    velocity.initialized = true;
  }
  const std::size_t first = options.scope == UpdateScope::head_only ? model.head_index() : 0;
  for (std::size_t l = first; l < model.num_layers(); ++l) {
    auto& layer = model.layers()[l];
    if (grads.weight[l].rows() != layer.weight.rows() || grads.weight[l].cols() != layer.weight.cols() ||
        grads.bias[l].size() != layer.bias.size())
      throw ShapeError("gradient shape mismatch at layer " + std::to_string(l));
    auto& vw = velocity.buffers.weight[l];
    auto& vb = velocity.buffers.bias[l];
    vw = options.momentum * vw + grads.weight[l] + options.l2 * layer.weight;
    vb = options.momentum * vb + grads.bias[l] + options.l2 * layer.bias;
    layer.weight -= options.lr * vw;
    layer.bias -= options.lr * vb;
  }
}

MlpModel rescale_head(const MlpModel& model, double tau) {
  MlpModel out = model;
  auto& head = out.head();
  if (tau != 0.0) {
    for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
      const double norm = head.weight.row(r).norm();
      if (norm == 0.0) throw SingularRowError("head row " + std::to_string(r) + " has zero norm");
      head.weight.row(r) /= std::pow(norm, tau);
    }
  }
  head.bias.setZero();
  return out;
}

nlohmann::json model_to_json(const MlpModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"in", l.in()},
                      {"out", l.out()},
                      {"activation", to_string(l.activation)},
                      {"weight", w},
                      {"bias", b}});
  }
  return {{"format", "crois-mlp"},
          {"version", 1},
          {"init_seed", model.init_seed()},
          {"head_index", model.head_index()},
          {"layers", layers}};
}

MlpModel model_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != "crois-mlp") throw FormatError("not a crois-mlp checkpoint");
    std::vector<DenseLayer> layers;
    for (const auto& jl : doc.at("layers")) {
      const int in = jl.at("in").get<int>();
      const int out = jl.at("out").get<int>();
      const auto w = jl.at("weight").get<std::vector<double>>();
      const auto b = jl.at("bias").get<std::vector<double>>();
      if (w.size() != static_cast<std::size_t>(in) * static_cast<std::size_t>(out) ||
          b.size() != static_cast<std::size_t>(out))
        throw FormatError("layer parameter count does not match its declared shape");
      DenseLayer layer;
      layer.weight.resize(out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
      layer.bias = Eigen::Map<const Vector>(b.data(), out);
      layer.activation = activation_from_string(jl.at("activation").get<std::string>());
      layers.push_back(std::move(layer));
    }
    MlpModel model(std::move(layers), doc.at("init_seed").get<std::uint64_t>());
    if (doc.at("head_index").get<std::size_t>() != model.head_index())
      throw FormatError("head_index must name the last layer");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << model_to_json(model).dump() << '\n';
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
  return model_from_json(doc);
}

}  // namespace crois
