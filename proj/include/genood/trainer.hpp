#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "genood/class_token_map.hpp"
#include "genood/config.hpp"
#include "genood/model.hpp"

namespace genood::toylm {

// One labeled (or, with label -1, unlabeled) sentence.
struct Example {
  std::string id;
  std::string sentence;
  int label = -1;
};

// prompt + answer bytes + EOS, with the index where the answer starts.
struct TrainingSequence {
  std::vector<int> tokens;
  size_t answer_start = 0;
};
TrainingSequence make_training_sequence(const std::string& sentence,
                                        const std::string& answer, int context);

struct CurvePoint {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

void write_curve(const std::filesystem::path& path, const std::vector<CurvePoint>& rows);

// Stops once validation performance has strictly declined for `patience`
// consecutive epochs and the 1-based epoch number exceeds `min_epochs`.
class EarlyStopping {
 public:
  EarlyStopping(int patience, int min_epochs)
      : patience_(patience), min_epochs_(min_epochs) {}

  bool observe(int epoch, double metric);
  int consecutive_declines() const { return declines_; }

 private:
  int patience_;
  int min_epochs_;
  int declines_ = 0;
  bool has_previous_ = false;
  double previous_ = 0.0;
};

// Decoupled weight decay Adam over the model's trainable tensors.
class AdamW {
 public:
  AdamW(const TrainConfig& config, size_t num_params);
  void step(ToyLM& model, const std::vector<float>& grad, double lr);
  int64_t steps() const { return t_; }

 private:
  TrainConfig config_;
  std::vector<float> m_, v_;
  int64_t t_ = 0;
};

// Longest target name plus room for a stray token and EOS.
int decode_budget(const ClassTokenMap& map);

// Text greedy decoding would produce after the templated `sentence`, exact
// whenever the result could strictly match `gold`. Mismatches may come back
// abbreviated.
std::string predict_label_text(const ToyLM& model, const std::string& sentence,
                               const std::string& gold, int max_len);

// Strict-match accuracy of greedy decoding against the class target names.
double generative_accuracy(const ToyLM& model, const std::vector<Example>& examples,
                           const ClassTokenMap& map);
// Top-1 accuracy of the classifier head.
double discriminative_accuracy(const ToyLM& model, const std::vector<Example>& examples);

struct TrainHooks {
  // Overrides the built-in validation accuracy.
  std::function<double(int epoch, const ToyLM&)> validation_metric;
  // Called after each epoch's validation; may append extra curve rows.
  std::function<void(int epoch, const ToyLM&, std::vector<CurvePoint>&)> on_epoch_end;
};

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_validation = 0.0;
  bool stopped_early = false;
  std::vector<CurvePoint> curve;
  std::vector<std::vector<uint32_t>> epoch_orders;  // example order per epoch
};

struct PretrainConfig {
  int epochs = 12;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 16;
};

// Plain next-token training over whole sentences (BOS + text + EOS), no
// template and no labels. Produces the base model every run starts from.
std::vector<CurvePoint> pretrain(ToyLM& model, const std::vector<std::string>& corpus,
                                 const PretrainConfig& config, uint64_t seed);

// Trains in place and leaves `model` at its best-validation snapshot.
// Discriminative mode adds a classifier head if absent; config.lora enables
// adapters if absent.
TrainResult train(ToyLM& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const ClassTokenMap& map,
                  const TrainConfig& config, uint64_t seed,
                  const TrainHooks& hooks = {});

}  // namespace genood::toylm
