#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>

#include "genood/errors.hpp"
#include "genood/model.hpp"
#include "genood/trainer.hpp"

using namespace genood;
using namespace genood::toylm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.context = 64;
  return c;
}

template <typename T>
bool bitwise_equal(const RowMatrix<T>& a, const RowMatrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<size_t>(a.size())) == 0;
}

template <typename T>
void fill_tensor(Model<T>& m, const std::string& name, T value) {
  const auto& info = m.tensors()[static_cast<size_t>(m.tensor_index(name))];
  std::fill_n(m.params().begin() + static_cast<std::ptrdiff_t>(info.offset), info.size(), value);
}

// ||numeric - analytic|| / max(||numeric||, ||analytic||) for one tensor.
double group_error(Model<double>& m, const TensorInfo& t, const std::vector<double>& grad,
                   const std::function<double()>& loss) {
  const double h = 1e-3;
  double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
  for (size_t i = t.offset; i < t.offset + t.size(); ++i) {
    const double old = m.params()[i];
    m.params()[i] = old + h;
    const double up = loss();
    m.params()[i] = old - h;
    const double down = loss();
    m.params()[i] = old;
    const double fd = (up - down) / (2.0 * h);
    diff += (fd - grad[i]) * (fd - grad[i]);
    norm_a += grad[i] * grad[i];
    norm_n += fd * fd;
  }
  const double scale = std::max(std::sqrt(norm_a), std::sqrt(norm_n));
  return scale > 0.0 ? std::sqrt(diff) / scale : 0.0;
}

}  // namespace

TEST_CASE("layout and construction") {
  const ToyLM m(tiny_config(), 1);
  size_t expected = 0;
  for (const auto& t : m.tensors()) {
    CHECK(t.offset == expected);
    expected += t.size();
    CHECK(m.trainable(t));
  }
  CHECK(expected == m.num_params());
  CHECK(m.tensor_index("lm_head") >= 0);
  CHECK(m.tensor_index("nope") < 0);
  ModelConfig bad = tiny_config();
  bad.heads = 3;
  CHECK_THROWS_AS(ToyLM(bad, 1), ConfigError);
}

TEST_CASE("forward shapes and input checks") {
  const ToyLM m(tiny_config(), 2);
  const auto p = build_prompt("hello", 64);
  const auto cache = m.forward(p);
  CHECK(cache.z.rows() == static_cast<Eigen::Index>(p.size()));
  CHECK(cache.z.cols() == 16);
  CHECK(m.lm_logits(cache.z).cols() == kVocabSize);
  CHECK_THROWS_AS(m.forward(std::vector<int>{}), EmptyInputError);
  CHECK_THROWS_AS(m.forward(std::vector<int>(65, 'a')), ContextOverflowError);
  CHECK_THROWS_AS(m.forward(std::vector<int>{kVocabSize}), DimensionError);
}

TEST_CASE("same seed gives the same model and outputs") {
  const ToyLM a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());
  const auto p = build_prompt("seeded", 64);
  CHECK(bitwise_equal(a.forward(p).z, b.forward(p).z));
}

TEST_CASE("causality: later tokens never change earlier outputs") {
  const ToyLM m(tiny_config(), 3);
  const auto p = build_prompt("the movie was wonderful", 64);
  const auto base = m.forward(p).z;
  for (size_t j = 1; j < p.size(); ++j) {
    auto q = p;
    q[j] = q[j] == 'A' ? 'B' : 'A';
    const auto z = m.forward(q).z;
    const auto rows = static_cast<Eigen::Index>(j);
    REQUIRE(bitwise_equal<float>(z.topRows(rows), base.topRows(rows)));
    CHECK_FALSE(bitwise_equal<float>(z.row(rows), base.row(rows)));
  }
}

TEST_CASE("uniform LM head gives loss ln V") {
  ToyLM m(tiny_config(), 4);
  fill_tensor(m, "lm_head", 0.0f);
  const auto seq = make_training_sequence("fine", "positive", 64);
  const float loss = m.generative_loss(seq.tokens, seq.answer_start, nullptr);
  CHECK(loss == doctest::Approx(std::log(258.0)).epsilon(1e-6));
}

TEST_CASE("loss masking") {
  const Model<double> m = ToyLM(tiny_config(), 5).cast<double>();
  const auto seq = make_training_sequence("some text", "label", 64);
  const size_t n = seq.tokens.size();
  std::vector<int> inputs(seq.tokens.begin(), seq.tokens.end() - 1);
  std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());
  std::vector<uint8_t> mask(n - 1, 0);
  for (size_t t = seq.answer_start - 1; t < n - 1; ++t) mask[t] = 1;

  const double answer_only = m.generative_loss(seq.tokens, seq.answer_start, nullptr);
  CHECK(m.masked_lm_loss(inputs, targets, mask, nullptr) ==
        doctest::Approx(answer_only).epsilon(1e-12));

  // Targets under a zero mask do not matter.
  auto scrambled = targets;
  for (size_t t = 0; t + 1 < seq.answer_start; ++t) scrambled[t] = (scrambled[t] + 17) % 256;
  CHECK(m.masked_lm_loss(inputs, scrambled, mask, nullptr) ==
        m.masked_lm_loss(inputs, targets, mask, nullptr));
  std::vector<double> g1(m.num_params(), 0.0), g2(m.num_params(), 0.0);
  m.masked_lm_loss(inputs, targets, mask, &g1);
  m.masked_lm_loss(inputs, scrambled, mask, &g2);
  CHECK(g1 == g2);

  const std::vector<uint8_t> none(n - 1, 0);
  CHECK_THROWS_AS(m.masked_lm_loss(inputs, targets, none, nullptr), EmptyInputError);
}

TEST_CASE("gradient check in double precision") {
  ModelConfig c;
  c.d_model = 8;
  c.layers = 2;
  c.heads = 2;
  c.context = 64;
  c.init_scale = 0.3f;
  const Model<double> base(c, 7);
  const auto seq = make_training_sequence("ab c", "xy", 64);
  const std::span<const int> prompt = std::span<const int>(seq.tokens).first(seq.answer_start);

  auto check_all = [&](Model<double>& m, const std::function<double(std::vector<double>*)>& loss) {
    std::vector<double> grad(m.num_params(), 0.0);
    loss(&grad);
    int checked = 0;
    for (const auto& t : m.tensors()) {
      if (!m.trainable(t)) continue;
      const double err = group_error(m, t, grad, [&] { return loss(nullptr); });
      INFO(t.name);
      CHECK(err < 1e-4);
      ++checked;
    }
    CHECK(checked > 0);
  };

  SUBCASE("generative loss, full model") {
    Model<double> m = base;
    check_all(m, [&](std::vector<double>* g) {
      return m.generative_loss(seq.tokens, seq.answer_start, g);
    });
  }
  SUBCASE("generative loss through adapters") {
    Model<double> m = base;
    m.enable_lora(4, 8.0, 3);
    for (const auto& t : m.tensors()) {
      if (t.role != ParamRole::kAdapter) continue;
      for (size_t i = t.offset; i < t.offset + t.size(); ++i) {
        m.params()[i] = 0.3 * std::sin(1.7 * static_cast<double>(i));
      }
    }
    check_all(m, [&](std::vector<double>* g) {
      return m.generative_loss(seq.tokens, seq.answer_start, g);
    });
  }
  SUBCASE("classifier head loss") {
    Model<double> m = base;
    m.add_classifier_head(3, 5);
    check_all(m, [&](std::vector<double>* g) { return m.classifier_loss(prompt, 1, g); });
  }
}

TEST_CASE("zero-initialised adapters leave outputs bitwise unchanged") {
  const ToyLM plain(tiny_config(), 8);
  ToyLM adapted = plain;
  adapted.enable_lora(4, 8.0, 9);
  CHECK(adapted.has_lora());
  const auto p = build_prompt("adapter check", 64);
  const auto a = plain.forward(p), b = adapted.forward(p);
  CHECK(bitwise_equal(a.z, b.z));
  CHECK(bitwise_equal(plain.lm_logits(a.z), adapted.lm_logits(b.z)));
  CHECK_THROWS_AS(adapted.enable_lora(4, 8.0, 9), ConfigError);
}

TEST_CASE("training adapters never touches base weights") {
  ToyLM m(tiny_config(), 10);
  m.enable_lora(4, 8.0, 11);
  const auto before = m.base_values();
  std::vector<float> adapters_before;
  for (const auto& t : m.tensors()) {
    CHECK(m.trainable(t) == (t.role == ParamRole::kAdapter));
    if (t.role == ParamRole::kAdapter) {
      adapters_before.insert(adapters_before.end(), m.params().begin() + static_cast<std::ptrdiff_t>(t.offset),
                             m.params().begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
    }
  }
  TrainConfig tc;
  tc.lora = true;
  AdamW opt(tc, m.num_params());
  const auto seq = make_training_sequence("frozen base", "yes", 64);
  for (int step = 0; step < 100; ++step) {
    std::vector<float> grad(m.num_params(), 0.0f);
    m.generative_loss(seq.tokens, seq.answer_start, &grad);
    opt.step(m, grad, 1e-3);
  }
  const auto after = m.base_values();
  REQUIRE(before.size() == after.size());
  CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0);
  std::vector<float> adapters_after;
  for (const auto& t : m.tensors()) {
    if (t.role == ParamRole::kAdapter) {
      adapters_after.insert(adapters_after.end(), m.params().begin() + static_cast<std::ptrdiff_t>(t.offset),
                            m.params().begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
    }
  }
  CHECK(adapters_after != adapters_before);
}

TEST_CASE("greedy decoding") {
  ToyLM m(tiny_config(), 12);
  const auto p = build_prompt("decode", 64);

  SUBCASE("ties go to the lowest id") {
    fill_tensor(m, "lm_head", 0.0f);
    CHECK(greedy_decode(m, p, 3) == std::string(3, '\0'));
  }
  SUBCASE("EOS as the first argmax gives empty text") {
    fill_tensor(m, "lnf.gain", 0.0f);
    fill_tensor(m, "lnf.bias", 0.0f);
    m.params()[m.tensors()[static_cast<size_t>(m.tensor_index("lnf.bias"))].offset] = 1.0f;
    fill_tensor(m, "lm_head", 0.0f);
    m.params()[m.tensors()[static_cast<size_t>(m.tensor_index("lm_head"))].offset +
               static_cast<size_t>(kEos) * 16] = 1.0f;
    CHECK(greedy_decode(m, p, 5).empty());
  }
  SUBCASE("deterministic and bounded by the context") {
    const auto a = greedy_decode(m, p, 8);
    CHECK(a == greedy_decode(m, p, 8));
    CHECK(a.size() <= 8);
    CHECK(greedy_decode(m, p, 1000).size() <= 64 - p.size());
  }
}

TEST_CASE("classifier head") {
  ToyLM m(tiny_config(), 13);
  m.add_classifier_head(3, 14);
  CHECK(m.num_head_classes() == 3);
  const auto p = build_prompt("x", 64);
  const auto z = m.forward(p).z;
  CHECK(m.head_logits(z.row(z.rows() - 1)).size() == 3);
  CHECK_THROWS_AS(m.classifier_loss(p, 3, nullptr), DimensionError);
  CHECK_THROWS_AS(m.add_classifier_head(2, 1), ConfigError);
}

TEST_CASE("casting to double and back is lossless") {
  const ToyLM m(tiny_config(), 15);
  const ToyLM back = m.cast<double>().cast<float>();
  CHECK(back.params() == m.params());
}

TEST_CASE("checkpoints round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "genood_test_model";
  std::filesystem::create_directories(dir);
  ToyLM m(tiny_config(), 16);
  m.enable_lora(2, 4.0, 17);
  m.add_classifier_head(2, 18);
  m.params()[m.num_params() - 1] = -0.0f;
  save_checkpoint(m, dir / "m.gtlm");
  const ToyLM back = load_checkpoint(dir / "m.gtlm");
  REQUIRE(back.num_params() == m.num_params());
  CHECK(std::memcmp(back.params().data(), m.params().data(), m.num_params() * sizeof(float)) == 0);
  CHECK(back.lora_rank() == 2);
  CHECK(back.lora_scale() == m.lora_scale());
  CHECK(back.num_head_classes() == 2);
  const auto p = build_prompt("ckpt", 64);
  CHECK(bitwise_equal(back.forward(p).z, m.forward(p).z));

  std::ofstream(dir / "junk.gtlm") << "JUNKJUNK";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.gtlm"), BadMagicError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.gtlm"), IoError);
}
