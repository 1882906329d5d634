#include "genood/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "genood/dump.hpp"
#include "genood/errors.hpp"

namespace genood {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("'" + key + "': expected an integer, got '" + value + "'");
  }
  return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "': expected a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + value + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string join_ints(const std::vector<int>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

}  // namespace

std::string to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::kMsp: return "msp";
    case DetectorKind::kMspRenorm: return "msp_renorm";
    case DetectorKind::kEnergy: return "energy";
    case DetectorKind::kMaha: return "maha";
    case DetectorKind::kCosine: return "cosine";
  }
  return "?";
}

DetectorKind parse_detector(const std::string& name) {
  for (auto kind : all_detectors()) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown detector '" + name +
                    "' (expected msp, msp_renorm, energy, maha, cosine)");
}

std::vector<DetectorKind> all_detectors() {
  return {DetectorKind::kMsp, DetectorKind::kMspRenorm, DetectorKind::kEnergy,
          DetectorKind::kMaha, DetectorKind::kCosine};
}

bool is_distance_detector(DetectorKind kind) {
  return kind == DetectorKind::kMaha || kind == DetectorKind::kCosine;
}

std::string to_string(FitSplit split) {
  return split == FitSplit::kTrain ? "train" : "val";
}

FitSplit parse_fit_split(const std::string& name) {
  if (name == "train") return FitSplit::kTrain;
  if (name == "val") return FitSplit::kVal;
  throw ConfigError("fit split must be 'train' or 'val', got '" + name + "'");
}

std::string to_string(TuningMode mode) {
  return mode == TuningMode::kGenerative ? "generative" : "discriminative";
}

TuningMode parse_tuning_mode(const std::string& name) {
  if (name == "generative") return TuningMode::kGenerative;
  if (name == "discriminative") return TuningMode::kDiscriminative;
  throw ConfigError("mode must be 'generative' or 'discriminative', got '" +
                    name + "'");
}

std::string to_string(Regime regime) {
  return regime == Regime::kFar ? "far" : "near";
}

Regime parse_regime(const std::string& name) {
  if (name == "far") return Regime::kFar;
  if (name == "near") return Regime::kNear;
  throw ConfigError("regime must be 'far' or 'near', got '" + name + "'");
}

std::string Shots::to_string() const {
  return per_class ? std::to_string(*per_class) : "full";
}

Shots Shots::parse(const std::string& text) {
  if (text == "full") return {};
  const int k = parse_int("shots", text);
  if (k != 1 && k != 5 && k != 10) {
    throw ConfigError("shots must be one of 1, 5, 10, full; got '" + text + "'");
  }
  return Shots{k};
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    if (!out.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" +
                        key + "'");
    }
  }
  return out;
}

DatasetManifest DatasetManifest::parse(const std::string& text,
                                       const std::filesystem::path& base_dir) {
  DatasetManifest m;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  bool has_train = false, has_val = false, has_test = false;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "id_train") {
      m.id_train = resolve(value);
      has_train = true;
    } else if (key == "id_val") {
      m.id_val = resolve(value);
      has_val = true;
    } else if (key == "id_test") {
      m.id_test = resolve(value);
      has_test = true;
    } else if (key == "fit_split") {
      m.fit_split = parse_fit_split(value);
    } else if (key.rfind("ood.", 0) == 0 && key.size() > 4) {
      m.ood_sets.emplace_back(key.substr(4), resolve(value));
    } else {
      throw ConfigError("manifest: unknown key '" + key + "'");
    }
  }
  if (!has_train || !has_val || !has_test) {
    throw ConfigError("manifest needs id_train, id_val and id_test");
  }
  if (m.ood_sets.empty()) {
    throw ConfigError("manifest needs at least one 'ood.<name>' entry");
  }
  return m;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  return parse(read_text(path), path.parent_path());
}

std::string DatasetManifest::to_text() const {
  std::ostringstream os;
  os << "id_train = " << id_train.string() << "\n"
     << "id_val = " << id_val.string() << "\n"
     << "id_test = " << id_test.string() << "\n";
  for (const auto& [name, path] : ood_sets) {
    os << "ood." << name << " = " << path.string() << "\n";
  }
  os << "fit_split = " << to_string(fit_split) << "\n";
  return os.str();
}

void DatasetManifest::check_consistency() const {
  const auto train = read_dump(id_train);
  const auto val = read_dump(id_val);
  const auto test = read_dump(id_test);
  for (const auto* other : {&val, &test}) {
    if (other->dim != train.dim) {
      throw InconsistentDumpError("ID splits disagree on embedding dimension");
    }
    if (other->class_names != train.class_names) {
      throw InconsistentDumpError("ID splits disagree on class names");
    }
  }
  for (const auto& [name, path] : ood_sets) {
    if (read_dump(path).dim != train.dim) {
      throw InconsistentDumpError("OOD set '" + name +
                                  "' has a different embedding dimension");
    }
  }
}

void RunConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (detectors.empty()) throw ConfigError("detectors must be non-empty");
  if (model.d_model <= 0 || model.layers <= 0 || model.heads <= 0 ||
      model.d_model % model.heads != 0) {
    throw ConfigError("d_model must be a positive multiple of heads");
  }
  if (model.context < 2) throw ConfigError("context must be >= 2");
  if (train.epochs <= 0 || train.batch_size <= 0) {
    throw ConfigError("epochs and batch_size must be positive");
  }
  if (train.lr <= 0) throw ConfigError("lr must be positive");
  if (train.lora_rank <= 0) throw ConfigError("lora_rank must be positive");
  if (pretrain_epochs < 0 || pretrain_per_grammar <= 0) {
    throw ConfigError("pretrain_epochs must be >= 0 and pretrain_per_grammar positive");
  }
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "seeds") {
      c.seeds.clear();
      for (const auto& s : split_list(value)) c.seeds.push_back(parse_int(key, s));
    } else if (key == "task_seed") {
      c.task_seed = parse_u64(key, value);
    } else if (key == "base_model") {
      c.base_model = value;
    } else if (key == "pretrain_epochs") {
      c.pretrain_epochs = parse_int(key, value);
    } else if (key == "pretrain_per_grammar") {
      c.pretrain_per_grammar = parse_int(key, value);
    } else if (key == "pretrain_seed") {
      c.pretrain_seed = parse_u64(key, value);
    } else if (key == "shots") {
      c.shots = Shots::parse(value);
    } else if (key == "detectors") {
      c.detectors.clear();
      for (const auto& s : split_list(value)) c.detectors.push_back(parse_detector(s));
    } else if (key == "regime") {
      c.regime = parse_regime(value);
    } else if (key == "zero_grad_fit_split") {
      c.zero_grad_fit_split = parse_fit_split(value);
    } else if (key == "tuned_fit_split") {
      c.tuned_fit_split = parse_fit_split(value);
    } else if (key == "d_model") {
      c.model.d_model = parse_int(key, value);
    } else if (key == "layers") {
      c.model.layers = parse_int(key, value);
    } else if (key == "heads") {
      c.model.heads = parse_int(key, value);
    } else if (key == "context") {
      c.model.context = parse_int(key, value);
    } else if (key == "init_scale") {
      c.model.init_scale = static_cast<float>(parse_double(key, value));
    } else if (key == "epochs") {
      c.train.epochs = parse_int(key, value);
    } else if (key == "lr") {
      c.train.lr = parse_double(key, value);
    } else if (key == "weight_decay") {
      c.train.weight_decay = parse_double(key, value);
    } else if (key == "batch_size") {
      c.train.batch_size = parse_int(key, value);
    } else if (key == "patience") {
      c.train.patience = parse_int(key, value);
    } else if (key == "min_epochs") {
      c.train.min_epochs = parse_int(key, value);
    } else if (key == "lora") {
      c.train.lora = parse_bool(key, value);
    } else if (key == "lora_rank") {
      c.train.lora_rank = parse_int(key, value);
    } else if (key == "lora_alpha") {
      c.train.lora_alpha = parse_double(key, value);
    } else if (key == "mode") {
      c.train.mode = parse_tuning_mode(value);
    } else if (key == "track_ood_curves") {
      c.track_ood_curves = parse_bool(key, value);
    } else if (key == "out_dir") {
      c.out_dir = value;
    } else {
      throw ConfigError("run config: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return parse(read_text(path));
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  std::string dets;
  for (size_t i = 0; i < detectors.size(); ++i) {
    if (i) dets += ",";
    dets += to_string(detectors[i]);
  }
  os << "seeds = " << join_ints(seeds) << "\n"
     << "task_seed = " << task_seed << "\n"
     << "shots = " << shots.to_string() << "\n"
     << "detectors = " << dets << "\n"
     << "regime = " << to_string(regime) << "\n"
     << "zero_grad_fit_split = " << to_string(zero_grad_fit_split) << "\n"
     << "tuned_fit_split = " << to_string(tuned_fit_split) << "\n"
     << "d_model = " << model.d_model << "\n"
     << "layers = " << model.layers << "\n"
     << "heads = " << model.heads << "\n"
     << "context = " << model.context << "\n"
     << "init_scale = " << model.init_scale << "\n"
     << "epochs = " << train.epochs << "\n"
     << "lr = " << train.lr << "\n"
     << "weight_decay = " << train.weight_decay << "\n"
     << "batch_size = " << train.batch_size << "\n"
     << "patience = " << train.patience << "\n"
     << "min_epochs = " << train.min_epochs << "\n"
     << "lora = " << (train.lora ? "true" : "false") << "\n"
     << "lora_rank = " << train.lora_rank << "\n"
     << "lora_alpha = " << train.lora_alpha << "\n"
     << "mode = " << to_string(train.mode) << "\n"
     << "pretrain_epochs = " << pretrain_epochs << "\n"
     << "pretrain_per_grammar = " << pretrain_per_grammar << "\n"
     << "pretrain_seed = " << pretrain_seed << "\n"
     << "track_ood_curves = " << (track_ood_curves ? "true" : "false") << "\n"
     << "out_dir = " << out_dir.string() << "\n";
  if (!base_model.empty()) os << "base_model = " << base_model.string() << "\n";
  return os.str();
}

}  // namespace genood
