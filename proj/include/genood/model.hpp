#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "genood/config.hpp"
#include "genood/tokenizer.hpp"

namespace genood::toylm {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class ParamRole {
  kBase,     // pretrained-style weights; frozen when adapters are on
  kAdapter,  // low-rank factors
  kHead,     // discriminative classifier head
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  ParamRole role = ParamRole::kBase;
  bool decay = false;
  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

// Decoder-only transformer over the byte vocabulary: learned token and
// position embeddings, pre-norm blocks with causal multi-head attention and a
// GELU feed-forward, a final LayerNorm, and an untied LM head. All parameters
// live in one flat buffer so optimizers, checkpoints and gradient checks can
// treat them uniformly.
template <typename T>
class Model {
 public:
  using Matrix = RowMatrix<T>;
  using Vector = RowVector<T>;
  using Map = Eigen::Map<Matrix>;
  using ConstMap = Eigen::Map<const Matrix>;

  static constexpr int kProjQ = 0, kProjK = 1, kProjV = 2, kProjO = 3;

  Model(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Adds rank-`rank` factors to W_q, W_k, W_v, W_o of every block. The B
  // factors start at zero, so outputs are unchanged until training moves
  // them. Base weights become frozen.
  void enable_lora(int rank, double alpha, uint64_t seed);
  bool has_lora() const { return lora_rank_ > 0; }
  int lora_rank() const { return lora_rank_; }
  T lora_scale() const { return lora_scale_; }

  // Linear K-way head on the last-position representation, used in place of
  // the LM head for discriminative tuning.
  void add_classifier_head(int num_classes, uint64_t seed);
  bool has_classifier_head() const { return head_w_ >= 0; }
  int num_head_classes() const;

  // Saved activations of one forward pass.
  struct LayerCache {
    Matrix x_in, xhat1, h1, q, k, v, attn, x_mid, xhat2, h2, u, g;
    Vector rstd1, rstd2;
    Matrix lora_mid[4];  // input x A^T per adapted projection
    std::vector<Matrix> probs;  // per head, T x T (upper triangle zero)
  };
  struct Cache {
    std::vector<int> tokens;
    std::vector<LayerCache> layers;
    Matrix x_final, xhatf;
    Vector rstdf;
    Matrix z;  // penultimate representation: input of the LM head, T x D
  };

  Cache forward(std::span<const int> tokens) const;

  // Logits over the full vocabulary for each row of `z`.
  Matrix lm_logits(const Matrix& z) const;
  Vector lm_logits_row(const Vector& z_row) const;
  Vector head_logits(const Vector& z_row) const;

  // Mean cross-entropy of the LM head over positions with mask[t] != 0,
  // predicting targets[t] from position t. Accumulates into `grad` (same
  // layout as params()) when non-null.
  T masked_lm_loss(std::span<const int> tokens, std::span<const int> targets,
                   std::span<const uint8_t> mask, std::vector<T>* grad) const;

  // Answer-only generative loss: `tokens` is prompt + answer + EOS and
  // positions before `answer_start - 1` contribute nothing.
  T generative_loss(std::span<const int> tokens, size_t answer_start,
                    std::vector<T>* grad) const;

  // Cross-entropy of the classifier head on the last position.
  T classifier_loss(std::span<const int> tokens, int label,
                    std::vector<T>* grad) const;

  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  bool trainable(const TensorInfo& info) const;
  size_t num_params() const { return params_.size(); }
  // Copy of every kBase value, in layout order.
  std::vector<T> base_values() const;

  // Converts the parameters (and adapters/head) to another scalar type.
  template <typename U>
  Model<U> cast() const;

  int tensor_index(const std::string& name) const;

 private:
  template <typename U>
  friend class Model;

  struct BlockIdx {
    int ln1_g, ln1_b, proj[4], ln2_g, ln2_b, w1, b1, w2, b2;
    int lora_a[4] = {-1, -1, -1, -1};
    int lora_b[4] = {-1, -1, -1, -1};
  };

  int add_tensor(std::string name, int rows, int cols, ParamRole role, bool decay);
  Map mat(int idx);
  ConstMap mat(int idx) const;
  Map grad_mat(std::vector<T>& grad, int idx) const;

  Matrix project(const Matrix& x, const BlockIdx& b, int which, Matrix* lora_mid) const;
  Matrix project_backward(const Matrix& x, const Matrix& dy, const BlockIdx& b,
                          int which, const Matrix& lora_mid,
                          std::vector<T>& grad) const;
  void backward(const Cache& cache, const Matrix& dz, std::vector<T>& grad) const;

  ModelConfig config_;
  std::vector<TensorInfo> tensors_;
  std::vector<T> params_;
  int tok_emb_ = -1, pos_emb_ = -1, lnf_g_ = -1, lnf_b_ = -1, lm_head_ = -1;
  int head_w_ = -1, head_b_ = -1;
  std::vector<BlockIdx> blocks_;
  int lora_rank_ = 0;
  T lora_scale_ = 0;
};

using ToyLM = Model<float>;

// Greedy decoding after `prompt`: argmax with the lowest id winning ties,
// until EOS or `max_len` new tokens. Returns the generated bytes.
template <typename T>
std::string greedy_decode(const Model<T>& model, std::span<const int> prompt,
                          int max_len);

// Versioned little-endian f32 checkpoint with a name/shape manifest.
void save_checkpoint(const ToyLM& model, const std::filesystem::path& path);
ToyLM load_checkpoint(const std::filesystem::path& path);

}  // namespace genood::toylm
