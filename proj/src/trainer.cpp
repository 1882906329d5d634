#include "genood/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>

#include "genood/errors.hpp"
#include "genood/metrics.hpp"

namespace genood::toylm {

TrainingSequence make_training_sequence(const std::string& sentence,
                                        const std::string& answer, int context) {
  const int reserve = static_cast<int>(answer.size()) + 1;
  TrainingSequence seq;
  seq.tokens = build_prompt(sentence, context, reserve);
  seq.answer_start = seq.tokens.size();
  for (char c : answer) seq.tokens.push_back(static_cast<unsigned char>(c));
  seq.tokens.push_back(kEos);
  return seq;
}

void write_curve(const std::filesystem::path& path, const std::vector<CurvePoint>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "epoch\tsplit\tmetric\tvalue\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.epoch << '\t' << r.split << '\t' << r.metric << '\t' << r.value << '\n';
  }
}

bool EarlyStopping::observe(int epoch, double metric) {
  if (has_previous_ && metric < previous_) {
    ++declines_;
  } else {
    declines_ = 0;
  }
  has_previous_ = true;
  previous_ = metric;
  return declines_ >= patience_ && epoch > min_epochs_;
}

AdamW::AdamW(const TrainConfig& config, size_t num_params)
    : config_(config), m_(num_params, 0.0f), v_(num_params, 0.0f) {}

void AdamW::step(ToyLM& model, const std::vector<float>& grad, double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto& params = model.params();
  for (const auto& info : model.tensors()) {
    if (!model.trainable(info)) continue;
    const float decay = info.decay ? static_cast<float>(lr * config_.weight_decay) : 0.0f;
    for (size_t i = info.offset; i < info.offset + info.size(); ++i) {
      const float g = grad[i];
      m_[i] = static_cast<float>(b1) * m_[i] + static_cast<float>(1.0 - b1) * g;
      v_[i] = static_cast<float>(b2) * v_[i] + static_cast<float>(1.0 - b2) * g * g;
      const double m_hat = m_[i] / correction1;
      const double v_hat = v_[i] / correction2;
      params[i] -= decay * params[i];
      params[i] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + config_.eps));
    }
  }
}

namespace {

bool is_space_token(int id) {
  return id == kBos || (id < 256 && std::isspace(id));
}

int argmax_lowest(const ToyLM::Vector& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return static_cast<int>(best);
}

}  // namespace

int decode_budget(const ClassTokenMap& map) {
  size_t longest = 0;
  for (const auto& t : map.target_names()) longest = std::max(longest, t.size());
  return static_cast<int>(longest) + 2;
}

std::string predict_label_text(const ToyLM& model, const std::string& sentence,
                               const std::string& gold, int max_len) {
  // One teacher-forced pass over prompt + gold + EOS. Wherever the argmax
  // agrees with the gold path, greedy decoding would have emitted exactly
  // that path. A divergence to a non-whitespace token rules out a strict
  // match, so only whitespace divergences need the real decoder.
  const auto seq = make_training_sequence(sentence, gold, model.config().context);
  const auto prompt = std::span<const int>(seq.tokens).first(seq.answer_start);
  if (static_cast<int>(gold.size()) + 1 > max_len) {
    return greedy_decode(model, prompt, max_len);
  }
  const auto cache = model.forward(seq.tokens);
  for (size_t pos = seq.answer_start - 1; pos + 1 < seq.tokens.size(); ++pos) {
    const ToyLM::Vector z = cache.z.row(static_cast<Eigen::Index>(pos));
    const int predicted = argmax_lowest(model.lm_logits_row(z));
    const int expected = seq.tokens[pos + 1];
    if (predicted == expected) continue;
    if (is_space_token(predicted)) return greedy_decode(model, prompt, max_len);
    // Any non-matching text will do; report what was produced so far.
    std::vector<int> produced(seq.tokens.begin() + static_cast<std::ptrdiff_t>(seq.answer_start),
                              seq.tokens.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    if (predicted != kEos) produced.push_back(predicted);
    return detokenize(produced) + (predicted == kEos ? "" : "...");
  }
  return gold;
}

double generative_accuracy(const ToyLM& model, const std::vector<Example>& examples,
                           const ClassTokenMap& map) {
  if (examples.empty()) throw EmptyInputError("no examples to evaluate");
  const auto targets = map.target_names();
  const int budget = decode_budget(map);
  std::vector<std::string> decoded, gold;
  decoded.reserve(examples.size());
  gold.reserve(examples.size());
  for (const auto& ex : examples) {
    gold.push_back(targets.at(static_cast<size_t>(ex.label)));
    decoded.push_back(predict_label_text(model, ex.sentence, gold.back(), budget));
  }
  return metrics::strict_match_accuracy(decoded, gold);
}

double discriminative_accuracy(const ToyLM& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw EmptyInputError("no examples to evaluate");
  size_t correct = 0;
  for (const auto& ex : examples) {
    const auto prompt = build_prompt(ex.sentence, model.config().context);
    const auto cache = model.forward(prompt);
    const ToyLM::Vector z = cache.z.row(cache.z.rows() - 1);
    const auto logits = model.head_logits(z);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i) {
      if (logits(i) > logits(best)) best = i;
    }
    correct += best == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::vector<CurvePoint> pretrain(ToyLM& model, const std::vector<std::string>& corpus,
                                 const PretrainConfig& config, uint64_t seed) {
  if (corpus.empty()) throw EmptyInputError("pretraining corpus is empty");
  std::vector<std::vector<int>> sequences;
  sequences.reserve(corpus.size());
  for (const auto& text : corpus) {
    std::vector<int> tokens{kBos};
    for (char c : text) tokens.push_back(static_cast<unsigned char>(c));
    tokens.push_back(kEos);
    if (static_cast<int>(tokens.size()) > model.config().context) {
      throw ContextOverflowError("pretraining sentence exceeds the context");
    }
    sequences.push_back(std::move(tokens));
  }
  TrainConfig opt_config;
  opt_config.lr = config.lr;
  opt_config.weight_decay = config.weight_decay;
  AdamW optimizer(opt_config, model.num_params());
  const size_t n = sequences.size();
  const size_t batch = static_cast<size_t>(config.batch_size);
  const double total_steps =
      static_cast<double>((n + batch - 1) / batch) * config.epochs;
  std::mt19937_64 rng(seed);
  std::vector<uint32_t> order(n);
  std::vector<float> grad(model.num_params(), 0.0f);
  std::vector<CurvePoint> curve;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < n; start += batch) {
      const size_t end = std::min(n, start + batch);
      std::fill(grad.begin(), grad.end(), 0.0f);
      for (size_t i = start; i < end; ++i) {
        const auto& tokens = sequences[order[i]];
        epoch_loss += model.generative_loss(tokens, 1, &grad);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& g : grad) g *= inv;
      const double progress = static_cast<double>(optimizer.steps()) / total_steps;
      optimizer.step(model, grad, config.lr * (1.0 - progress));
    }
    curve.push_back({epoch, "pretrain", "loss", epoch_loss / static_cast<double>(n)});
  }
  return curve;
}

TrainResult train(ToyLM& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const ClassTokenMap& map,
                  const TrainConfig& config, uint64_t seed, const TrainHooks& hooks) {
  if (train_set.empty()) throw EmptyInputError("training split is empty");
  const int num_classes = static_cast<int>(map.size());
  std::set<int> present;
  for (const auto& ex : train_set) {
    if (ex.label < 0 || ex.label >= num_classes) {
      throw ConfigError("training example '" + ex.id + "' has no valid label");
    }
    present.insert(ex.label);
  }
  if (static_cast<int>(present.size()) != num_classes) {
    throw EmptyInputError("training split has a class with no examples");
  }
  const bool generative = config.mode == TuningMode::kGenerative;
  if (!generative && !model.has_classifier_head()) {
    model.add_classifier_head(num_classes, seed ^ 0x68656164ULL);
  }
  if (config.lora && !model.has_lora()) {
    model.enable_lora(config.lora_rank, config.lora_alpha, seed ^ 0x6c6f7261ULL);
  }

  const auto targets = map.target_names();
  std::vector<TrainingSequence> sequences;
  sequences.reserve(train_set.size());
  for (const auto& ex : train_set) {
    if (generative) {
      sequences.push_back(make_training_sequence(
          ex.sentence, targets[static_cast<size_t>(ex.label)], model.config().context));
    } else {
      sequences.push_back({build_prompt(ex.sentence, model.config().context), 0});
    }
  }

  auto validate = [&](int epoch) {
    if (hooks.validation_metric) return hooks.validation_metric(epoch, model);
    if (val_set.empty()) return 0.0;
    return generative ? generative_accuracy(model, val_set, map)
                      : discriminative_accuracy(model, val_set);
  };

  const size_t n = sequences.size();
  const size_t batch = static_cast<size_t>(config.batch_size);
  const size_t steps_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;

  AdamW optimizer(config, model.num_params());
  EarlyStopping stopper(config.patience, config.min_epochs);
  std::mt19937_64 order_rng(seed);
  std::vector<uint32_t> order(n);
  std::vector<float> grad(model.num_params(), 0.0f);

  TrainResult result;
  std::vector<float> best_params = model.params();
  bool have_best = false;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), order_rng);
    result.epoch_orders.push_back(order);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < n; start += batch) {
      const size_t end = std::min(n, start + batch);
      std::fill(grad.begin(), grad.end(), 0.0f);
      for (size_t i = start; i < end; ++i) {
        const auto& seq = sequences[order[i]];
        const auto& ex = train_set[order[i]];
        epoch_loss += generative ? model.generative_loss(seq.tokens, seq.answer_start, &grad)
                                 : model.classifier_loss(seq.tokens, ex.label, &grad);
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& g : grad) g *= inv;
      const double progress = static_cast<double>(optimizer.steps()) / total_steps;
      optimizer.step(model, grad, config.lr * (1.0 - progress));
    }
    result.curve.push_back({epoch, "train", "loss", epoch_loss / static_cast<double>(n)});

    const double val = validate(epoch);
    result.curve.push_back({epoch, "val", "accuracy", val});
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model, result.curve);
    result.epochs_run = epoch;
    if (!have_best || val >= result.best_validation) {
      have_best = true;
      result.best_validation = val;
      result.best_epoch = epoch;
      best_params = model.params();
    }
    if (stopper.observe(epoch, val)) {
      result.stopped_early = true;
      break;
    }
  }
  model.params() = best_params;
  return result;
}

}  // namespace genood::toylm
