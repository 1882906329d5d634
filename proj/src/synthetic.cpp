#include "genood/synthetic.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "genood/errors.hpp"
#include "genood/tokenizer.hpp"

namespace genood::bench {
namespace {

using Slots = std::map<std::string, std::vector<std::string>>;

struct Grammar {
  std::vector<std::string> templates;
  Slots slots;
};

// Fills every {slot} in a randomly chosen template.
std::string expand(const Grammar& g, std::mt19937_64& rng) {
  auto pick = [&](const std::vector<std::string>& options) -> const std::string& {
    std::uniform_int_distribution<size_t> dist(0, options.size() - 1);
    return options[dist(rng)];
  };
  const std::string& tmpl = pick(g.templates);
  std::string out;
  size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const size_t close = tmpl.find('}', i);
      const std::string slot = tmpl.substr(i + 1, close - i - 1);
      const auto it = g.slots.find(slot);
      if (it == g.slots.end()) throw ConfigError("grammar slot '" + slot + "' undefined");
      out += pick(it->second);
      i = close + 1;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

const std::vector<std::string> kMovieNouns = {"movie", "film",   "plot",  "cast",
                                               "acting", "script", "ending", "story"};
const std::vector<std::string> kAdverbs = {"truly", "really", "quite", "deeply"};

Grammar sentiment_grammar(bool positive) {
  Grammar g;
  g.templates = {"the {noun} was {adj}",
                 "this {noun} felt {adv} {adj}",
                 "i found the {noun} {adj}",
                 "what a {adj} {noun}",
                 "the {noun} and the {noun} were {adj}",
                 "a {adv} {adj} {noun} overall",
                 "honestly the {noun} is {adj}"};
  g.slots["noun"] = kMovieNouns;
  g.slots["adv"] = kAdverbs;
  g.slots["adj"] = positive
                       ? std::vector<std::string>{"wonderful", "brilliant", "superb",
                                                  "charming", "delightful", "excellent"}
                       : std::vector<std::string>{"awful", "boring", "dull", "terrible",
                                                  "tedious", "painful"};
  return g;
}

// News headlines: capitalized names, digits and punctuation never used by the
// sentiment grammar.
Grammar topic_grammar() {
  Grammar g;
  g.templates = {"{Team} beat {Team} {score} in {City} on {Day}.",
                 "{Company} shares rose {pct}% after Q{q} results.",
                 "{City} council approved ${amount}M for {Policy} on {Day}.",
                 "{Company} recalled {amount},000 {Device} units.",
                 "Senators debated {Policy} reform, {Day} ({score} vote)."};
  g.slots["Team"] = {"Rangers", "Hawks", "Lions", "Comets", "Pirates", "Titans"};
  g.slots["score"] = {"3-1", "2-0", "4-2", "1-0", "5-3", "7-6"};
  g.slots["City"] = {"Boston", "Denver", "Chicago", "Seattle", "Austin", "Portland"};
  g.slots["Day"] = {"Monday", "Tuesday", "Friday", "Sunday"};
  g.slots["Company"] = {"Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay"};
  g.slots["pct"] = {"2.5", "4", "11", "0.8", "7.2", "19"};
  g.slots["q"] = {"1", "2", "3", "4"};
  g.slots["amount"] = {"12", "40", "95", "250", "8", "61"};
  g.slots["Device"] = {"Laptop", "Router", "Phone", "Printer", "Tablet", "Server"};
  g.slots["Policy"] = {"Healthcare", "Tax", "Energy", "Transit", "Housing"};
  return g;
}

// Trivia questions: capitalized, numeric, ending in '?'.
Grammar question_grammar() {
  Grammar g;
  g.templates = {"Who invented {Thing}?",
                 "How many {Unit} are in {n} {Container}?",
                 "Where does {Place} lie?",
                 "When did {Person} die, {Year} or {Year}?",
                 "Why do {Animals} migrate?",
                 "Which country produces most {Crop}?"};
  g.slots["Thing"] = {"Telephone", "Radio", "Television", "Lightbulb", "Bicycle"};
  g.slots["Unit"] = {"Ounces", "Inches", "Liters", "Minutes", "Grams", "Feet"};
  g.slots["n"] = {"1", "2", "3", "10", "12"};
  g.slots["Container"] = {"Gallons", "Miles", "Yards", "Hours", "Pounds"};
  g.slots["Place"] = {"Timbuktu", "Everest", "Kyoto", "Madagascar", "Patagonia"};
  g.slots["Person"] = {"Napoleon", "Cleopatra", "Beethoven", "Galileo", "Lincoln"};
  g.slots["Year"] = {"1821", "1827", "1642", "1865", "30 BC"};
  g.slots["Animals"] = {"Geese", "Salmon", "Whales", "Butterflies", "Caribou"};
  g.slots["Crop"] = {"Coffee", "Rice", "Cocoa", "Wheat", "Saffron"};
  return g;
}

// Banking intents; first letters are pairwise distinct so any subset maps to
// distinct first bytes.
struct Intent {
  std::string name;
  std::vector<std::string> phrases;
};

const std::vector<Intent>& banking_intents() {
  static const std::vector<Intent> intents = {
      {"balance",
       {"check my account balance", "see how much money is left",
        "view my current balance", "know my available funds"}},
      {"card",
       {"order a new debit card", "replace my damaged card", "activate my new card",
        "get a card delivered"}},
      {"deposit",
       {"deposit a paper cheque", "add cash to my account", "deposit money at an atm",
        "make a savings deposit"}},
      {"exchange",
       {"convert dollars to euros", "exchange foreign currency",
        "get the exchange rate", "swap pounds for yen"}},
      {"freeze",
       {"freeze my stolen card", "block my account after fraud",
        "stop all card payments", "lock my account temporarily"}},
      {"loan",
       {"apply for a personal loan", "borrow money for a car", "get a mortgage quote",
        "increase my loan amount"}},
      {"pin",
       {"reset my pin number", "change my pin code", "recover a forgotten pin",
        "unlock my blocked pin"}},
      {"refund",
       {"get a refund for a purchase", "dispute a wrong charge",
        "return money from a merchant", "reverse a duplicate payment"}},
  };
  return intents;
}

Grammar intent_grammar(const Intent& intent) {
  Grammar g;
  g.templates = {"i want to {phrase}{tail}",      "please help me {phrase}{tail}",
                 "can you {phrase} for me{tail}", "how do i {phrase}{tail}",
                 "i need to {phrase}{tail}",      "could you {phrase} right now{tail}",
                 "is it possible to {phrase}{tail}", "i would like to {phrase}{tail}"};
  g.slots["phrase"] = intent.phrases;
  g.slots["tail"] = {"",         " please",  " as soon as possible", " this week",
                     " thanks",  " today",   " using the mobile app", " from my phone",
                     " online",  " before the weekend", " if that is ok"};
  return g;
}

std::vector<Example> sample(const Grammar& g, int count, int label,
                            const std::string& id_prefix, std::mt19937_64& rng) {
  std::vector<Example> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back({id_prefix + std::to_string(i), expand(g, rng), label});
  }
  return out;
}

// Class-interleaved split builder: `per_class` sentences from each grammar.
std::vector<Example> sample_split(const std::vector<Grammar>& grammars, int per_class,
                                  const std::string& split, std::mt19937_64& rng) {
  std::vector<Example> out;
  for (size_t c = 0; c < grammars.size(); ++c) {
    auto part = sample(grammars[c], per_class, static_cast<int>(c),
                       split + "-c" + std::to_string(c) + "-", rng);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// OOD examples carry no ID label.
std::vector<Example> sample_ood(const std::vector<Grammar>& grammars, int total,
                                const std::string& name, std::mt19937_64& rng) {
  std::vector<Example> out;
  std::uniform_int_distribution<size_t> which(0, grammars.size() - 1);
  for (int i = 0; i < total; ++i) {
    out.push_back({name + "-" + std::to_string(i), expand(grammars[which(rng)], rng), -1});
  }
  return out;
}

}  // namespace

TaskSizes default_sizes(Regime regime) {
  if (regime == Regime::kFar) return TaskSizes{64, 32, 64, 128};
  return TaskSizes{48, 24, 32, 128};
}

SyntheticTask generate_task(Regime regime, uint64_t seed) {
  return generate_task(regime, seed, default_sizes(regime));
}

SyntheticTask generate_task(Regime regime, uint64_t seed, const TaskSizes& sizes) {
  SyntheticTask task;
  task.regime = regime;
  task.seed = seed;
  std::mt19937_64 rng(seed);
  std::vector<Grammar> id_grammars;
  if (regime == Regime::kFar) {
    task.class_names = {"positive", "negative"};
    id_grammars = {sentiment_grammar(true), sentiment_grammar(false)};
  } else {
    std::vector<size_t> order(banking_intents().size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const size_t n_id = static_cast<size_t>(task.near_split_fraction * static_cast<double>(order.size()));
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_id));
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_id), order.end());
    for (size_t i = 0; i < order.size(); ++i) {
      const auto& intent = banking_intents()[order[i]];
      if (i < n_id) {
        task.class_names.push_back(intent.name);
        id_grammars.push_back(intent_grammar(intent));
      } else {
        task.ood_class_names.push_back(intent.name);
      }
    }
  }

  task.train = sample_split(id_grammars, sizes.train_per_class, "train", rng);
  task.val = sample_split(id_grammars, sizes.val_per_class, "val", rng);
  task.test = sample_split(id_grammars, sizes.test_per_class, "test", rng);

  if (regime == Regime::kFar) {
    task.ood_sets.emplace_back("topic", sample_ood({topic_grammar()}, sizes.ood_size, "topic", rng));
    task.ood_sets.emplace_back("question",
                               sample_ood({question_grammar()}, sizes.ood_size, "question", rng));
  } else {
    std::vector<Grammar> ood_grammars;
    for (const auto& name : task.ood_class_names) {
      for (const auto& intent : banking_intents()) {
        if (intent.name == name) ood_grammars.push_back(intent_grammar(intent));
      }
    }
    task.ood_sets.emplace_back("intent", sample_ood(ood_grammars, sizes.ood_size, "intent", rng));
  }
  return task;
}

// Review text as it appears in the wild: the verdict is echoed by a follow-up
// phrase, which is what lets next-token prediction pick up word polarity.
Grammar review_grammar(bool positive) {
  Grammar g = sentiment_grammar(positive);
  for (auto& t : g.templates) t += ", {verdict}";
  g.slots["verdict"] = positive ? std::vector<std::string>{"i loved it", "would watch again",
                                                           "highly recommended"}
                                : std::vector<std::string>{"i hated it", "what a waste",
                                                           "avoid at all costs"};
  return g;
}

std::vector<std::string> pretraining_corpus(uint64_t seed, int per_grammar) {
  std::vector<Grammar> grammars = {review_grammar(true), review_grammar(false),
                                   topic_grammar(), question_grammar()};
  for (const auto& intent : banking_intents()) grammars.push_back(intent_grammar(intent));
  std::set<std::string> label_words = {"positive", "negative"};
  for (const auto& intent : banking_intents()) label_words.insert(intent.name);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution templated(0.5);
  std::bernoulli_distribution first_word(0.5);
  std::vector<std::string> corpus;
  for (const auto& g : grammars) {
    for (int i = 0; i < per_grammar; ++i) {
      std::string text = expand(g, rng);
      if (templated(rng)) {
        // Instruction-formatted document: repeat the input's first or last word,
        // never a word that is also a class name.
        const std::string body = text.substr(0, text.find(", "));
        const std::string first = body.substr(0, body.find(' '));
        const std::string last = body.substr(body.find_last_of(' ') + 1);
        const bool prefer_first = first_word(rng);
        const std::string& word = prefer_first ? first : last;
        const std::string& other = prefer_first ? last : first;
        const std::string& echo = label_words.count(word) ? other : word;
        if (!label_words.count(echo)) {
          text = std::string(toylm::kPromptHead) + body + std::string(toylm::kPromptTail) + echo;
        }
      }
      corpus.push_back(std::move(text));
    }
  }
  std::shuffle(corpus.begin(), corpus.end(), rng);
  return corpus;
}

std::vector<Example> subsample_shots(const std::vector<Example>& examples,
                                     int per_class, uint64_t seed) {
  if (per_class <= 0) throw ConfigError("shots per class must be positive");
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::map<int, int> taken;
  std::vector<size_t> keep;
  for (size_t i : order) {
    if (taken[examples[i].label]++ < per_class) keep.push_back(i);
  }
  std::sort(keep.begin(), keep.end());
  std::vector<Example> out;
  out.reserve(keep.size());
  for (size_t i : keep) out.push_back(examples[i]);
  return out;
}

std::set<std::string> word_vocabulary(const std::vector<Example>& examples) {
  std::set<std::string> words;
  for (const auto& ex : examples) {
    std::istringstream ss(ex.sentence);
    std::string w;
    while (ss >> w) words.insert(w);
  }
  return words;
}

}  // namespace genood::bench
