#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "genood/config.hpp"
#include "genood/trainer.hpp"

namespace genood::bench {

using toylm::Example;

// Per-split example counts. Counts for train/val/test are per ID class;
// every OOD set gets `ood_size` sentences.
struct TaskSizes {
  int train_per_class = 64;
  int val_per_class = 32;
  int test_per_class = 64;
  int ood_size = 128;
};

TaskSizes default_sizes(Regime regime);

// A generated benchmark: ID splits with gold labels plus named OOD sets.
// Far: a 2-class sentiment grammar is ID, and topic- and question-style
// grammars with disjoint words are OOD. Near: one 8-intent banking grammar
// whose classes are split half ID, half OOD.
struct SyntheticTask {
  Regime regime = Regime::kFar;
  uint64_t seed = 0;
  double near_split_fraction = 0.5;
  std::vector<std::string> class_names;      // ID classes, label order
  std::vector<std::string> ood_class_names;  // near regime only
  std::vector<Example> train, val, test;
  std::vector<std::pair<std::string, std::vector<Example>>> ood_sets;
};

SyntheticTask generate_task(Regime regime, uint64_t seed);
SyntheticTask generate_task(Regime regime, uint64_t seed, const TaskSizes& sizes);

// Unlabeled sentences drawn from every grammar (all sentiment, topic,
// question and banking-intent text), shuffled. Stands in for the broad
// corpus a base language model is pretrained on.
std::vector<std::string> pretraining_corpus(uint64_t seed, int per_grammar);

// Keeps the first `per_class` examples of each class after a seeded shuffle.
std::vector<Example> subsample_shots(const std::vector<Example>& examples,
                                     int per_class, uint64_t seed);

// Whitespace-separated word types.
std::set<std::string> word_vocabulary(const std::vector<Example>& examples);

}  // namespace genood::bench
