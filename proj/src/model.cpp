#include "genood/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "genood/errors.hpp"

namespace genood::toylm {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename T>
struct LayerNormOut {
  RowMatrix<T> y, xhat;
  RowVector<T> rstd;
};

template <typename T>
LayerNormOut<T> layer_norm(const RowMatrix<T>& x, const Eigen::Map<const RowMatrix<T>>& gain,
                           const Eigen::Map<const RowMatrix<T>>& bias) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  LayerNormOut<T> out;
  out.xhat.resize(rows, cols);
  out.y.resize(rows, cols);
  out.rstd.resize(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const T mean = x.row(t).mean();
    const T var = (x.row(t).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
    out.rstd(t) = rstd;
    out.xhat.row(t) = (x.row(t).array() - mean) * rstd;
    out.y.row(t) = out.xhat.row(t).cwiseProduct(gain) + bias;
  }
  return out;
}

// Returns dx; accumulates gain/bias gradients when the maps are given.
template <typename T>
RowMatrix<T> layer_norm_backward(const RowMatrix<T>& dy, const RowMatrix<T>& xhat,
                                 const RowVector<T>& rstd,
                                 const Eigen::Map<const RowMatrix<T>>& gain,
                                 Eigen::Map<RowMatrix<T>>* dgain,
                                 Eigen::Map<RowMatrix<T>>* dbias) {
  const auto rows = dy.rows();
  const T inv_cols = T(1) / static_cast<T>(dy.cols());
  RowMatrix<T> dx(rows, dy.cols());
  for (Eigen::Index t = 0; t < rows; ++t) {
    const RowVector<T> dxhat = dy.row(t).cwiseProduct(gain);
    const T mean_dxhat = dxhat.sum() * inv_cols;
    const T mean_dxhat_xhat = dxhat.dot(xhat.row(t)) * inv_cols;
    dx.row(t) = rstd(t) * (dxhat.array() - mean_dxhat -
                           xhat.row(t).array() * mean_dxhat_xhat)
                              .matrix();
  }
  if (dgain) *dgain += dy.cwiseProduct(xhat).colwise().sum();
  if (dbias) *dbias += dy.colwise().sum();
  return dx;
}

template <typename T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::tanh(T(kGeluC) * (u + T(kGeluA) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T th = std::tanh(T(kGeluC) * (u + T(kGeluA) * u * u * u));
  return T(0.5) * (T(1) + th) +
         T(0.5) * u * (T(1) - th * th) * T(kGeluC) * (T(1) + T(3 * kGeluA) * u * u);
}

template <typename T>
void fill_normal(std::span<T> out, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, uint64_t seed) : config_(config) {
  if (config.d_model <= 0 || config.heads <= 0 || config.d_model % config.heads != 0) {
    throw ConfigError("d_model must be a positive multiple of heads");
  }
  if (config.layers <= 0 || config.context < 2) {
    throw ConfigError("need at least one layer and a context of 2");
  }
  const int d = config.d_model;
  const int ff = 4 * d;
  tok_emb_ = add_tensor("tok_emb", kVocabSize, d, ParamRole::kBase, true);
  pos_emb_ = add_tensor("pos_emb", config.context, d, ParamRole::kBase, true);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockIdx b{};
    b.ln1_g = add_tensor(p + "ln1.gain", 1, d, ParamRole::kBase, false);
    b.ln1_b = add_tensor(p + "ln1.bias", 1, d, ParamRole::kBase, false);
    b.proj[kProjQ] = add_tensor(p + "attn.w_q", d, d, ParamRole::kBase, true);
    b.proj[kProjK] = add_tensor(p + "attn.w_k", d, d, ParamRole::kBase, true);
    b.proj[kProjV] = add_tensor(p + "attn.w_v", d, d, ParamRole::kBase, true);
    b.proj[kProjO] = add_tensor(p + "attn.w_o", d, d, ParamRole::kBase, true);
    b.ln2_g = add_tensor(p + "ln2.gain", 1, d, ParamRole::kBase, false);
    b.ln2_b = add_tensor(p + "ln2.bias", 1, d, ParamRole::kBase, false);
    b.w1 = add_tensor(p + "ffn.w1", ff, d, ParamRole::kBase, true);
    b.b1 = add_tensor(p + "ffn.b1", 1, ff, ParamRole::kBase, false);
    b.w2 = add_tensor(p + "ffn.w2", d, ff, ParamRole::kBase, true);
    b.b2 = add_tensor(p + "ffn.b2", 1, d, ParamRole::kBase, false);
    blocks_.push_back(b);
  }
  lnf_g_ = add_tensor("lnf.gain", 1, d, ParamRole::kBase, false);
  lnf_b_ = add_tensor("lnf.bias", 1, d, ParamRole::kBase, false);
  lm_head_ = add_tensor("lm_head", kVocabSize, d, ParamRole::kBase, true);

  std::mt19937_64 rng(seed);
  const double scale = config.init_scale;
  const double residual_scale = scale / std::sqrt(2.0 * config.layers);
  for (const auto& info : tensors_) {
    std::span<T> values(params_.data() + info.offset, info.size());
    const bool is_gain = info.name.ends_with(".gain");
    if (is_gain) {
      std::fill(values.begin(), values.end(), T(1));
    } else if (!info.decay) {
      std::fill(values.begin(), values.end(), T(0));
    } else if (info.name.ends_with("w_o") || info.name.ends_with("ffn.w2")) {
      fill_normal(values, residual_scale, rng);
    } else {
      fill_normal(values, scale, rng);
    }
  }
}

template <typename T>
int Model<T>::add_tensor(std::string name, int rows, int cols, ParamRole role,
                         bool decay) {
  TensorInfo info{std::move(name), rows, cols, params_.size(), role, decay};
  params_.resize(params_.size() + info.size(), T(0));
  tensors_.push_back(std::move(info));
  return static_cast<int>(tensors_.size()) - 1;
}

template <typename T>
typename Model<T>::Map Model<T>::mat(int idx) {
  const auto& info = tensors_[static_cast<size_t>(idx)];
  return Map(params_.data() + info.offset, info.rows, info.cols);
}

template <typename T>
typename Model<T>::ConstMap Model<T>::mat(int idx) const {
  const auto& info = tensors_[static_cast<size_t>(idx)];
  return ConstMap(params_.data() + info.offset, info.rows, info.cols);
}

template <typename T>
typename Model<T>::Map Model<T>::grad_mat(std::vector<T>& grad, int idx) const {
  const auto& info = tensors_[static_cast<size_t>(idx)];
  return Map(grad.data() + info.offset, info.rows, info.cols);
}

template <typename T>
int Model<T>::tensor_index(const std::string& name) const {
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

template <typename T>
void Model<T>::enable_lora(int rank, double alpha, uint64_t seed) {
  if (has_lora()) throw ConfigError("adapters are already enabled");
  if (rank <= 0) throw ConfigError("LoRA rank must be positive");
  const int d = config_.d_model;
  static constexpr const char* kNames[4] = {"q", "k", "v", "o"};
  for (size_t l = 0; l < blocks_.size(); ++l) {
    for (int p = 0; p < 4; ++p) {
      const std::string base = "block" + std::to_string(l) + ".lora_" + kNames[p];
      blocks_[l].lora_a[p] = add_tensor(base + ".a", rank, d, ParamRole::kAdapter, true);
      blocks_[l].lora_b[p] = add_tensor(base + ".b", d, rank, ParamRole::kAdapter, true);
    }
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(d), 1.0 / std::sqrt(d));
  for (const auto& b : blocks_) {
    for (int p = 0; p < 4; ++p) {
      auto a = mat(b.lora_a[p]);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<T>(dist(rng));
    }
  }
  lora_rank_ = rank;
  lora_scale_ = static_cast<T>(alpha / rank);
}

template <typename T>
void Model<T>::add_classifier_head(int num_classes, uint64_t seed) {
  if (has_classifier_head()) throw ConfigError("classifier head already present");
  if (num_classes < 1) throw ConfigError("classifier head needs >= 1 class");
  head_w_ = add_tensor("cls_head.w", num_classes, config_.d_model, ParamRole::kHead, true);
  head_b_ = add_tensor("cls_head.b", 1, num_classes, ParamRole::kHead, false);
  std::mt19937_64 rng(seed);
  auto w = mat(head_w_);
  fill_normal(std::span<T>(w.data(), static_cast<size_t>(w.size())),
              config_.init_scale, rng);
}

template <typename T>
int Model<T>::num_head_classes() const {
  return has_classifier_head() ? tensors_[static_cast<size_t>(head_w_)].rows : 0;
}

template <typename T>
bool Model<T>::trainable(const TensorInfo& info) const {
  switch (info.role) {
    case ParamRole::kBase: return !has_lora();
    case ParamRole::kAdapter: return true;
    case ParamRole::kHead: return true;
  }
  return false;
}

template <typename T>
std::vector<T> Model<T>::base_values() const {
  std::vector<T> out;
  for (const auto& info : tensors_) {
    if (info.role != ParamRole::kBase) continue;
    out.insert(out.end(), params_.begin() + static_cast<std::ptrdiff_t>(info.offset),
               params_.begin() + static_cast<std::ptrdiff_t>(info.offset + info.size()));
  }
  return out;
}

template <typename T>
typename Model<T>::Matrix Model<T>::project(const Matrix& x, const BlockIdx& b,
                                            int which, Matrix* lora_mid) const {
  Matrix y = x * mat(b.proj[which]).transpose();
  if (has_lora()) {
    *lora_mid = x * mat(b.lora_a[which]).transpose();
    y.noalias() += lora_scale_ * (*lora_mid * mat(b.lora_b[which]).transpose());
  }
  return y;
}

template <typename T>
typename Model<T>::Matrix Model<T>::project_backward(
    const Matrix& x, const Matrix& dy, const BlockIdx& b, int which,
    const Matrix& lora_mid, std::vector<T>& grad) const {
  const int w = b.proj[which];
  Matrix dx = dy * mat(w);
  if (trainable(tensors_[static_cast<size_t>(w)])) {
    grad_mat(grad, w).noalias() += dy.transpose() * x;
  }
  if (has_lora()) {
    const int ia = b.lora_a[which];
    const int ib = b.lora_b[which];
    const Matrix dy_b = dy * mat(ib);  // T x r
    grad_mat(grad, ib).noalias() += lora_scale_ * (dy.transpose() * lora_mid);
    grad_mat(grad, ia).noalias() += lora_scale_ * (dy_b.transpose() * x);
    dx.noalias() += lora_scale_ * (dy_b * mat(ia));
  }
  return dx;
}

template <typename T>
typename Model<T>::Cache Model<T>::forward(std::span<const int> tokens) const {
  const auto seq = static_cast<Eigen::Index>(tokens.size());
  if (seq == 0) throw EmptyInputError("forward on an empty sequence");
  if (seq > config_.context) {
    throw ContextOverflowError("sequence of " + std::to_string(seq) +
                               " tokens exceeds context " +
                               std::to_string(config_.context));
  }
  const int d = config_.d_model;
  const int heads = config_.heads;
  const int hd = d / heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(hd));

  Cache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(seq, d);
  const auto tok = mat(tok_emb_);
  const auto pos = mat(pos_emb_);
  for (Eigen::Index t = 0; t < seq; ++t) {
    const int id = tokens[static_cast<size_t>(t)];
    if (id < 0 || id >= kVocabSize) throw DimensionError("token id out of range");
    x.row(t) = tok.row(id) + pos.row(t);
  }

  cache.layers.resize(blocks_.size());
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    auto& c = cache.layers[l];
    c.x_in = x;
    auto ln1 = layer_norm<T>(x, mat(b.ln1_g), mat(b.ln1_b));
    c.h1 = std::move(ln1.y);
    c.xhat1 = std::move(ln1.xhat);
    c.rstd1 = std::move(ln1.rstd);
    c.q = project(c.h1, b, kProjQ, &c.lora_mid[kProjQ]);
    c.k = project(c.h1, b, kProjK, &c.lora_mid[kProjK]);
    c.v = project(c.h1, b, kProjV, &c.lora_mid[kProjV]);

    c.attn.setZero(seq, d);
    c.probs.resize(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto qh = c.q.middleCols(h * hd, hd);
      const auto kh = c.k.middleCols(h * hd, hd);
      Matrix& p = c.probs[static_cast<size_t>(h)];
      p.setZero(seq, seq);
      for (Eigen::Index i = 0; i < seq; ++i) {
        // Row i only ever touches keys 0..i.
        auto row = p.row(i).head(i + 1);
        row.noalias() = (kh.topRows(i + 1) * qh.row(i).transpose()).transpose() * att_scale;
        const T top = row.maxCoeff();
        row = (row.array() - top).exp().matrix();
        row /= row.sum();
      }
      c.attn.middleCols(h * hd, hd).noalias() = p * c.v.middleCols(h * hd, hd);
    }
    c.x_mid = c.x_in + project(c.attn, b, kProjO, &c.lora_mid[kProjO]);

    auto ln2 = layer_norm<T>(c.x_mid, mat(b.ln2_g), mat(b.ln2_b));
    c.h2 = std::move(ln2.y);
    c.xhat2 = std::move(ln2.xhat);
    c.rstd2 = std::move(ln2.rstd);
    c.u = c.h2 * mat(b.w1).transpose();
    c.u.rowwise() += Vector(mat(b.b1));
    c.g = c.u.unaryExpr([](T v) { return gelu(v); });
    x = c.x_mid + c.g * mat(b.w2).transpose();
    x.rowwise() += Vector(mat(b.b2));
  }
  cache.x_final = x;
  auto lnf = layer_norm<T>(x, mat(lnf_g_), mat(lnf_b_));
  cache.z = std::move(lnf.y);
  cache.xhatf = std::move(lnf.xhat);
  cache.rstdf = std::move(lnf.rstd);
  return cache;
}

template <typename T>
typename Model<T>::Matrix Model<T>::lm_logits(const Matrix& z) const {
  return z * mat(lm_head_).transpose();
}

template <typename T>
typename Model<T>::Vector Model<T>::lm_logits_row(const Vector& z_row) const {
  return z_row * mat(lm_head_).transpose();
}

template <typename T>
typename Model<T>::Vector Model<T>::head_logits(const Vector& z_row) const {
  if (!has_classifier_head()) throw ConfigError("model has no classifier head");
  return z_row * mat(head_w_).transpose() + Vector(mat(head_b_));
}

template <typename T>
void Model<T>::backward(const Cache& cache, const Matrix& dz,
                        std::vector<T>& grad) const {
  const auto seq = static_cast<Eigen::Index>(cache.tokens.size());
  const int d = config_.d_model;
  const int heads = config_.heads;
  const int hd = d / heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(hd));
  const bool base = !has_lora();

  auto opt = [&](int idx) -> std::optional<Map> {
    if (!base) return std::nullopt;
    return grad_mat(grad, idx);
  };

  Matrix dx;
  {
    auto dg = opt(lnf_g_);
    auto db = opt(lnf_b_);
    dx = layer_norm_backward<T>(dz, cache.xhatf, cache.rstdf, mat(lnf_g_),
                                dg ? &*dg : nullptr, db ? &*db : nullptr);
  }

  for (size_t li = blocks_.size(); li-- > 0;) {
    const auto& b = blocks_[li];
    const auto& c = cache.layers[li];

    // x_out = x_mid + gelu(h2 W1^T + b1) W2^T + b2
    if (base) {
      grad_mat(grad, b.b2) += dx.colwise().sum();
      grad_mat(grad, b.w2).noalias() += dx.transpose() * c.g;
    }
    Matrix du = (dx * mat(b.w2)).cwiseProduct(c.u.unaryExpr([](T v) { return gelu_grad(v); }));
    if (base) {
      grad_mat(grad, b.b1) += du.colwise().sum();
      grad_mat(grad, b.w1).noalias() += du.transpose() * c.h2;
    }
    const Matrix dh2 = du * mat(b.w1);
    Matrix dx_mid;
    {
      auto dg = opt(b.ln2_g);
      auto db = opt(b.ln2_b);
      dx_mid = dx + layer_norm_backward<T>(dh2, c.xhat2, c.rstd2, mat(b.ln2_g),
                                           dg ? &*dg : nullptr, db ? &*db : nullptr);
    }

    // x_mid = x_in + attn W_o^T
    const Matrix dattn = project_backward(c.attn, dx_mid, b, kProjO, c.lora_mid[kProjO], grad);
    Matrix dq = Matrix::Zero(seq, d);
    Matrix dk = Matrix::Zero(seq, d);
    Matrix dv = Matrix::Zero(seq, d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = c.probs[static_cast<size_t>(h)];
      const auto qh = c.q.middleCols(h * hd, hd);
      const auto kh = c.k.middleCols(h * hd, hd);
      const auto vh = c.v.middleCols(h * hd, hd);
      const auto doh = dattn.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd).noalias() = p.transpose() * doh;
      Matrix dp = doh * vh.transpose();
      // Softmax backward row by row; masked entries have p == 0.
      Matrix ds = Matrix::Zero(seq, seq);
      for (Eigen::Index i = 0; i < seq; ++i) {
        const auto prow = p.row(i).head(i + 1);
        const auto dprow = dp.row(i).head(i + 1);
        const T inner = prow.dot(dprow);
        ds.row(i).head(i + 1) = prow.cwiseProduct((dprow.array() - inner).matrix()) * att_scale;
      }
      dq.middleCols(h * hd, hd).noalias() = ds * kh;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * qh;
    }
    Matrix dh1 = project_backward(c.h1, dq, b, kProjQ, c.lora_mid[kProjQ], grad);
    dh1 += project_backward(c.h1, dk, b, kProjK, c.lora_mid[kProjK], grad);
    dh1 += project_backward(c.h1, dv, b, kProjV, c.lora_mid[kProjV], grad);
    {
      auto dg = opt(b.ln1_g);
      auto db = opt(b.ln1_b);
      dx = dx_mid + layer_norm_backward<T>(dh1, c.xhat1, c.rstd1, mat(b.ln1_g),
                                           dg ? &*dg : nullptr, db ? &*db : nullptr);
    }
  }

  if (base) {
    auto dtok = grad_mat(grad, tok_emb_);
    auto dpos = grad_mat(grad, pos_emb_);
    for (Eigen::Index t = 0; t < seq; ++t) {
      dtok.row(cache.tokens[static_cast<size_t>(t)]) += dx.row(t);
      dpos.row(t) += dx.row(t);
    }
  }
}

template <typename T>
T Model<T>::masked_lm_loss(std::span<const int> tokens, std::span<const int> targets,
                           std::span<const uint8_t> mask,
                           std::vector<T>* grad) const {
  if (targets.size() != tokens.size() || mask.size() != tokens.size()) {
    throw DimensionError("tokens, targets and mask must have equal length");
  }
  std::vector<Eigen::Index> rows;
  for (size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) rows.push_back(static_cast<Eigen::Index>(t));
  }
  if (rows.empty()) throw EmptyInputError("loss mask selects no positions");
  const auto cache = forward(tokens);
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix z_sel(n, config_.d_model);
  for (Eigen::Index i = 0; i < n; ++i) z_sel.row(i) = cache.z.row(rows[static_cast<size_t>(i)]);
  Matrix dlogits = lm_logits(z_sel);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = dlogits.row(i);
    const T top = row.maxCoeff();
    row = (row.array() - top).exp().matrix();
    const T sum = row.sum();
    row /= sum;
    const int target = targets[static_cast<size_t>(rows[static_cast<size_t>(i)])];
    if (target < 0 || target >= kVocabSize) throw DimensionError("target id out of range");
    loss -= std::log(static_cast<double>(row(target)));
    row(target) -= T(1);
  }
  loss /= static_cast<double>(n);
  if (grad) {
    if (grad->size() != params_.size()) grad->assign(params_.size(), T(0));
    dlogits /= static_cast<T>(n);
    if (!has_lora()) grad_mat(*grad, lm_head_).noalias() += dlogits.transpose() * z_sel;
    const Matrix dz_sel = dlogits * mat(lm_head_);
    Matrix dz = Matrix::Zero(cache.z.rows(), cache.z.cols());
    for (Eigen::Index i = 0; i < n; ++i) dz.row(rows[static_cast<size_t>(i)]) = dz_sel.row(i);
    backward(cache, dz, *grad);
  }
  return static_cast<T>(loss);
}

template <typename T>
T Model<T>::generative_loss(std::span<const int> tokens, size_t answer_start,
                            std::vector<T>* grad) const {
  if (answer_start == 0 || answer_start >= tokens.size()) {
    throw DimensionError("answer must start inside the sequence, after the prompt");
  }
  std::vector<int> targets(tokens.size(), 0);
  std::vector<uint8_t> mask(tokens.size(), 0);
  for (size_t t = answer_start - 1; t + 1 < tokens.size(); ++t) {
    targets[t] = tokens[t + 1];
    mask[t] = 1;
  }
  return masked_lm_loss(tokens, targets, mask, grad);
}

template <typename T>
T Model<T>::classifier_loss(std::span<const int> tokens, int label,
                            std::vector<T>* grad) const {
  if (label < 0 || label >= num_head_classes()) {
    throw DimensionError("label outside the classifier head");
  }
  const auto cache = forward(tokens);
  const auto last = cache.z.rows() - 1;
  const Vector z_last = cache.z.row(last);
  Vector probs = head_logits(z_last);
  const T top = probs.maxCoeff();
  probs = (probs.array() - top).exp().matrix();
  probs /= probs.sum();
  const double loss = -std::log(static_cast<double>(probs(label)));
  if (grad) {
    if (grad->size() != params_.size()) grad->assign(params_.size(), T(0));
    Vector dlogits = probs;
    dlogits(label) -= T(1);
    grad_mat(*grad, head_w_).noalias() += dlogits.transpose() * z_last;
    grad_mat(*grad, head_b_) += dlogits;
    Matrix dz = Matrix::Zero(cache.z.rows(), cache.z.cols());
    dz.row(last) = dlogits * mat(head_w_);
    backward(cache, dz, *grad);
  }
  return static_cast<T>(loss);
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_, 0);
  out.tensors_ = tensors_;
  out.params_.assign(params_.begin(), params_.end());
  out.tok_emb_ = tok_emb_;
  out.pos_emb_ = pos_emb_;
  out.lnf_g_ = lnf_g_;
  out.lnf_b_ = lnf_b_;
  out.lm_head_ = lm_head_;
  out.head_w_ = head_w_;
  out.head_b_ = head_b_;
  out.blocks_.clear();
  for (const auto& b : blocks_) {
    typename Model<U>::BlockIdx nb{};
    std::copy(std::begin(b.proj), std::end(b.proj), std::begin(nb.proj));
    std::copy(std::begin(b.lora_a), std::end(b.lora_a), std::begin(nb.lora_a));
    std::copy(std::begin(b.lora_b), std::end(b.lora_b), std::begin(nb.lora_b));
    nb.ln1_g = b.ln1_g;
    nb.ln1_b = b.ln1_b;
    nb.ln2_g = b.ln2_g;
    nb.ln2_b = b.ln2_b;
    nb.w1 = b.w1;
    nb.b1 = b.b1;
    nb.w2 = b.w2;
    nb.b2 = b.b2;
    out.blocks_.push_back(nb);
  }
  out.lora_rank_ = lora_rank_;
  out.lora_scale_ = static_cast<U>(lora_scale_);
  return out;
}

template <typename T>
std::string greedy_decode(const Model<T>& model, std::span<const int> prompt,
                          int max_len) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> generated;
  for (int step = 0; step < max_len; ++step) {
    if (static_cast<int>(seq.size()) >= model.config().context) break;
    const auto cache = model.forward(seq);
    const typename Model<T>::Vector z_last = cache.z.row(cache.z.rows() - 1);
    const auto logits = model.lm_logits_row(z_last);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i) {
      if (logits(i) > logits(best)) best = i;  // strict: lowest id wins ties
    }
    if (best == kEos) break;
    generated.push_back(static_cast<int>(best));
    seq.push_back(static_cast<int>(best));
  }
  return detokenize(generated);
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template std::string greedy_decode(const Model<float>&, std::span<const int>, int);
template std::string greedy_decode(const Model<double>&, std::span<const int>, int);

namespace {
constexpr char kCheckpointMagic[4] = {'G', 'T', 'L', 'M'};
constexpr uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw TruncatedError("checkpoint truncated");
  }
  return static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
         (static_cast<uint32_t>(bytes[2]) << 16) | (static_cast<uint32_t>(bytes[3]) << 24);
}
}  // namespace

void save_checkpoint(const ToyLM& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto& cfg = model.config();
  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(cfg.d_model));
  put_u32(out, static_cast<uint32_t>(cfg.layers));
  put_u32(out, static_cast<uint32_t>(cfg.heads));
  put_u32(out, static_cast<uint32_t>(cfg.context));
  put_u32(out, static_cast<uint32_t>(model.lora_rank()));
  put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(model.lora_scale())));
  put_u32(out, static_cast<uint32_t>(model.num_head_classes()));
  put_u32(out, static_cast<uint32_t>(model.tensors().size()));
  for (const auto& info : model.tensors()) {
    put_u32(out, static_cast<uint32_t>(info.name.size()));
    out.write(info.name.data(), static_cast<std::streamsize>(info.name.size()));
    put_u32(out, static_cast<uint32_t>(info.rows));
    put_u32(out, static_cast<uint32_t>(info.cols));
  }
  for (float v : model.params()) put_u32(out, std::bit_cast<uint32_t>(v));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

ToyLM load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw BadMagicError("not a toy-model checkpoint (bad magic)");
  }
  if (get_u32(in) != kCheckpointVersion) {
    throw VersionMismatchError("unsupported checkpoint version");
  }
  ModelConfig cfg;
  cfg.d_model = static_cast<int>(get_u32(in));
  cfg.layers = static_cast<int>(get_u32(in));
  cfg.heads = static_cast<int>(get_u32(in));
  cfg.context = static_cast<int>(get_u32(in));
  const int rank = static_cast<int>(get_u32(in));
  const float scale = std::bit_cast<float>(get_u32(in));
  const int head_classes = static_cast<int>(get_u32(in));
  const uint32_t count = get_u32(in);
  ToyLM model(cfg, 0);
  if (rank > 0) model.enable_lora(rank, static_cast<double>(scale) * rank, 0);
  if (head_classes > 0) model.add_classifier_head(head_classes, 0);
  if (count != model.tensors().size()) {
    throw InconsistentDumpError("checkpoint tensor count does not match its config");
  }
  for (const auto& info : model.tensors()) {
    const uint32_t len = get_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw TruncatedError("checkpoint truncated");
    const int rows = static_cast<int>(get_u32(in));
    const int cols = static_cast<int>(get_u32(in));
    if (name != info.name || rows != info.rows || cols != info.cols) {
      throw InconsistentDumpError("checkpoint tensor '" + name +
                                  "' does not match the expected layout");
    }
  }
  for (auto& v : model.params()) v = std::bit_cast<float>(get_u32(in));
  if (in.peek() != std::char_traits<char>::eof()) {
    throw InconsistentDumpError("trailing bytes after checkpoint payload");
  }
  return model;
}

}  // namespace genood::toylm
