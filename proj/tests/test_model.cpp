#include <cmath>
#include <set>

#include "aggsum/error.hpp"
#include "aggsum/model.hpp"
#include "aggsum/reference.hpp"
#include "aggsum/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aggsum;
using aggsum::testing::random_pair;
using aggsum::testing::toy_config;

namespace {

double row_sum(const Tensor<double>& t, std::size_t r) {
  double s = 0;
  for (std::size_t j = 0; j < t.dim(1); ++j) s += t.at(r, j);
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.agg_layers = 2;  // N_enc = 2 allows L = 1 only
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.agg_method = AggMethod::none;
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(parse_agg_method("mean"), ConfigError);
  for (auto m : {AggMethod::none, AggMethod::add, AggMethod::projection, AggMethod::attention}) {
    CHECK(parse_agg_method(to_string(m)) == m);
  }
}

TEST_CASE("parameter names are a function of the config") {
  const auto a = parameter_shapes(toy_config());
  const auto b = parameter_shapes(toy_config());
  CHECK(a == b);
  std::set<std::string> names;
  for (const auto& e : a) names.insert(e.first);
  CHECK(names.size() == a.size());
  CHECK(names.count("agg.attn.1.wq"));
  CHECK_FALSE(names.count("agg.attn.2.wq"));
  CHECK(names.count("pointer.b_copy"));
  for (const auto& [name, shape] : parameter_shapes(toy_config(AggMethod::add))) CHECK(name.rfind("agg.", 0) != 0);
}

TEST_CASE("parameter counts match the closed form") {
  for (auto m : {AggMethod::none, AggMethod::add, AggMethod::projection, AggMethod::attention}) {
    for (bool ptr : {false, true}) {
      const ModelConfig c = toy_config(m, ptr);
      std::size_t n = 0;
      for (const auto& [name, shape] : parameter_shapes(c)) n += shape_numel(shape);
      CHECK(n == analytic_parameter_count(c));
      CHECK(init_parameters<float>(c, 1).element_count() == n);
    }
  }
  ModelConfig big;  // default sizes
  big.agg_method = AggMethod::attention;
  ModelConfig base = big;
  base.agg_method = AggMethod::none;
  const std::size_t d = big.d_model;
  CHECK(analytic_parameter_count(big) - analytic_parameter_count(base) == 2 * 4 * d * d);
}

TEST_CASE("initialization is seed-deterministic") {
  const auto a = init_parameters<float>(toy_config(), 7);
  const auto b = init_parameters<float>(toy_config(), 7);
  const auto c = init_parameters<float>(toy_config(), 8);
  bool same = true, differ = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a.entries()[i].second.buffer() == b.entries()[i].second.buffer();
    differ = differ || a.entries()[i].second.buffer() != c.entries()[i].second.buffer();
  }
  CHECK(same);
  CHECK(differ);
  for (float g : a.at("enc.0.norm1.gain").buffer()) CHECK(g == 1.0f);
}

TEST_CASE("positional encoding") {
  const auto pe = positional_encoding<double>(4, 6);
  CHECK(pe.at(0, 0) == 0.0);
  CHECK(pe.at(0, 1) == 1.0);
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe.at(2, 3) == doctest::Approx(std::cos(2.0 / std::pow(10000.0, 2.0 / 6.0))));
  CHECK_THROWS_AS(positional_encoding<double>(4, 5), ConfigError);
}

TEST_CASE("single head with identity projections reduces to scaled dot attention") {
  Tape<double> tape(false);
  std::mt19937_64 rng(3);
  auto rand_tensor = [&](Shape s) {
    Tensor<double> t(s);
    for (auto& v : t.data()) v = uniform(rng, -1, 1);
    return t;
  };
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  auto q = tape.constant(rand_tensor({3, 4}));
  auto k = tape.constant(rand_tensor({5, 4}));
  auto v = tape.constant(rand_tensor({5, 4}));
  auto I = tape.constant_ref(eye);
  AttentionWeights<double> w{I, I, I, I};
  LayerContext<double> ctx;
  ctx.n_heads = 1;
  auto a = multi_head_attention(q, k, v, nullptr, w, ctx);
  auto b = scaled_dot_attention(q, k, v, nullptr);
  for (std::size_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));
}

TEST_CASE("attention rejects mismatched key width") {
  Tape<double> tape(false);
  auto q = tape.constant(Tensor<double>(Shape{2, 4}));
  auto k = tape.constant(Tensor<double>(Shape{3, 5}));
  CHECK_THROWS_AS(scaled_dot_attention(q, k, k, nullptr), ShapeError);
}

TEST_CASE("one-hot query selects a value row") {
  Tape<double> tape(false);
  Tensor<double> Q({1, 2}, {40.0, 0.0});
  Tensor<double> K({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor<double> V({2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto out = scaled_dot_attention(tape.constant(Q), tape.constant(K), tape.constant(V), nullptr);
  CHECK(out.value()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(out.value()[1] == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("aggregation checks the layer window") {
  Tape<double> tape(false);
  std::vector<Var<double>> stack;
  for (int i = 0; i < 3; ++i) stack.push_back(tape.constant(Tensor<double>::filled({2, 4}, i + 1.0)));
  auto sum = aggregate_add<double>(stack, 1);
  for (double v : sum.value().buffer()) CHECK(v == 5.0);  // h2 + h1
  CHECK_THROWS_AS(aggregate_add<double>(stack, 2), ConfigError);
  CHECK_THROWS_AS(aggregate_add<double>(stack, 0), ConfigError);
}

TEST_CASE("attention aggregation runs L + 1 attention blocks") {
  for (std::size_t n_enc : {2u, 3u, 4u}) {
    for (std::size_t L = 1; L < n_enc; ++L) {
      ModelConfig c = toy_config();
      c.n_enc = n_enc;
      c.agg_layers = L;
      Model<double> model(c, 5);
      std::mt19937_64 rng(1);
      const auto pair = random_pair(rng, c.vocab_size, 5, 4);
      ForwardTrace<double> trace;
      Tape<double> tape(false);
      const auto w = bind_weights<double>(tape, c, model.parameters(), static_cast<GradientBuffers<double>*>(nullptr));
      model.forward(tape, w, pair, {false, nullptr, &trace});
      CHECK(trace.aggregation_attention_calls == L + 1);
    }
  }
}

TEST_CASE("pointer final distribution example") {
  Tape<double> tape(false);
  auto p_vocab = tape.constant(Tensor<double>({1, 3}, {0.5, 0.5, 0.0}));
  auto alpha = tape.constant(Tensor<double>({1, 1}, {1.0}));
  auto gate = tape.constant(Tensor<double>({1}, {0.5}));
  const std::vector<TokenId> ext{2};
  auto out = final_distribution<double>(p_vocab, alpha, ext, 0, gate);
  CHECK(out.value()[0] == doctest::Approx(0.25));
  CHECK(out.value()[1] == doctest::Approx(0.25));
  CHECK(out.value()[2] == doctest::Approx(0.5));
}

TEST_CASE("pointer gate extremes") {
  Tape<double> tape(false);
  auto gate_all = tape.constant(Tensor<double>({1}, {1.0}));
  auto gate_none = tape.constant(Tensor<double>({1}, {0.0}));
  auto p_vocab = tape.constant(Tensor<double>({1, 3}, {0.2, 0.3, 0.5}));
  auto alpha = tape.constant(Tensor<double>({1, 2}, {0.4, 0.6}));
  const std::vector<TokenId> ext{1, 3};
  auto gen = final_distribution<double>(p_vocab, alpha, ext, 1, gate_all);
  CHECK(gen.value().buffer() == std::vector<double>{0.2, 0.3, 0.5, 0.0});
  auto copy = final_distribution<double>(p_vocab, alpha, ext, 1, gate_none);
  CHECK(copy.value().buffer() == std::vector<double>{0.0, 0.4, 0.0, 0.6});
  PointerWeights<double> none;
  CHECK_THROWS_AS(pointer_gate(p_vocab, none), ContractError);
}

TEST_CASE("forward distributions are normalized and PAD gets no attention") {
  std::mt19937_64 rng(11);
  ModelConfig c = toy_config();
  Model<double> model(c, 2);
  auto pair = random_pair(rng, c.vocab_size, 6, 5, 2);
  pair.source_ids.push_back(kPad);
  pair.source_ext_ids.push_back(kPad);
  ForwardTrace<double> trace;
  Tape<double> tape(false);
  const auto w = bind_weights<double>(tape, c, model.parameters(), static_cast<GradientBuffers<double>*>(nullptr));
  auto lp = model.forward(tape, w, pair, {false, nullptr, &trace});
  CHECK(lp.shape() == Shape{5, c.vocab_size + 2});
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(row_sum(trace.p_vocab, r) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row_sum(trace.copy_weights, r) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row_sum(trace.p_final, r) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const std::size_t pad_col = pair.source_ids.size() - 1;
  std::size_t checked = 0;
  for (const auto& rec : trace.attention) {
    if (!rec.source_keys) continue;
    for (std::size_t r = 0; r < rec.weights.dim(0); ++r) {
      CHECK(rec.weights.at(r, pad_col) == 0.0);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("future target tokens do not affect earlier steps") {
  std::mt19937_64 rng(5);
  const ModelConfig c = toy_config();
  Model<double> model(c, 9);
  auto pair = random_pair(rng, c.vocab_size, 6, 5);
  Tape<double> t1(false), t2(false);
  auto a = model.forward(t1, pair).value();
  pair.target_ids[3] = pair.target_ids[3] == 4 ? 5 : 4;  // decoder input position 3
  auto b = model.forward(t2, pair).value();
  const std::size_t width = a.dim(1);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < width; ++j) CHECK(a.at(r, j) == b.at(r, j));
  }
  bool changed = false;
  for (std::size_t j = 0; j < width; ++j) changed = changed || a.at(3, j) != b.at(3, j);
  CHECK(changed);
}

TEST_CASE("plain configuration matches the reference path bitwise") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelConfig c = toy_config(AggMethod::none, false);
    Model<float> model(c, 100 + trial);
    const auto pair = random_pair(rng, c.vocab_size, 7, 6);
    Tape<float> tape(false);
    const auto out = model.forward(tape, pair).value();
    const std::span<const TokenId> dec(pair.target_ids.data(), pair.target_ids.size() - 1);
    const auto ref = reference_log_probs<float>(c, model.parameters(), pair.source_ids, dec);
    CHECK(out.buffer() == ref.buffer());
  }
  CHECK_THROWS_AS(reference_log_probs<float>(toy_config(), init_parameters<float>(toy_config(), 1),
                                             std::vector<TokenId>{4}, std::vector<TokenId>{kBos}),
                  ContractError);
}

TEST_CASE("unused aggregation parameters are ignored") {
  const ModelConfig full = toy_config(AggMethod::attention);
  ModelConfig plain = full;
  plain.agg_method = AggMethod::none;
  Model<double> source(full, 4);
  Model<double> adopted(plain, source.parameters());
  ParameterSet<double> subset;
  for (const auto& [name, shape] : parameter_shapes(plain)) subset.add(name, source.parameters().at(name));
  Model<double> direct(plain, subset);
  std::mt19937_64 rng(2);
  const auto pair = random_pair(rng, full.vocab_size, 5, 4);
  Tape<double> t1(false), t2(false);
  CHECK(adopted.forward(t1, pair).value().buffer() == direct.forward(t2, pair).value().buffer());
}

TEST_CASE("adopting parameters checks names and shapes") {
  const ModelConfig c = toy_config();
  auto params = init_parameters<double>(c, 1);
  ParameterSet<double> missing;
  for (const auto& [name, t] : params.entries()) {
    if (name != "output.bias") missing.add(name, t);
  }
  CHECK_THROWS_AS(Model<double>(c, missing), ConfigError);
  params.at("output.bias") = Tensor<double>(Shape{3});
  CHECK_THROWS_AS(Model<double>(c, params), ConfigError);
}

TEST_CASE("length and id errors") {
  ModelConfig c = toy_config();
  Model<double> model(c, 1);
  std::mt19937_64 rng(1);
  auto long_pair = random_pair(rng, c.vocab_size, c.max_positions + 1, 3);
  Tape<double> tape(false);
  CHECK_THROWS_AS(model.forward(tape, long_pair), LengthError);
  auto pair = random_pair(rng, c.vocab_size, 4, 3);
  pair.source_ids[0] = -3;
  pair.source_ext_ids[0] = -3;
  CHECK_THROWS_AS(model.forward(tape, pair), IndexError);
  EncodedPair empty;
  empty.target_ids = {kBos, kEos};
  CHECK_THROWS(model.forward(tape, empty));
}

TEST_CASE("full-loss gradients match finite differences") {
  for (auto m : {AggMethod::none, AggMethod::add, AggMethod::projection, AggMethod::attention}) {
    CAPTURE(to_string(m));
    const ModelConfig c = toy_config(m, true);
    std::mt19937_64 rng(4);
    const auto pair = random_pair(rng, c.vocab_size, 6, 5, 1);
    const auto report = aggsum::testing::full_gradient_check(c, init_parameters<double>(c, 17), pair);
    CAPTURE(report.worst_name);
    CAPTURE(report.worst_index);
    CAPTURE(report.worst_analytic);
    CAPTURE(report.worst_numeric);
    CHECK(report.checked == analytic_parameter_count(c));
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("plain double finite differences agree where gradients are not tiny") {
  const ModelConfig c = toy_config(AggMethod::none, false);
  Model<double> model(c, 17);
  std::mt19937_64 rng(4);
  const auto pair = random_pair(rng, c.vocab_size, 6, 5);
  const auto targets = shifted_targets(pair, false);
  auto f = [&](Tape<double>& tape) { return nll_loss(model.forward(tape, pair), std::span<const TokenId>(targets)); };
  const auto report = finite_diff_check<double>(f, model.parameters().pointers(), 1e-5, 1e-6);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.max_abs_error < 1e-9);
}

TEST_CASE("incremental scoring agrees with teacher forcing") {
  std::mt19937_64 rng(8);
  const ModelConfig c = toy_config();
  Model<double> model(c, 3);
  const auto pair = random_pair(rng, c.vocab_size, 6, 4, 1);
  Tape<double> tape(false);
  const auto full = model.forward(tape, pair).value();
  const auto enc = model.encode(pair.source_ids, pair.source_ext_ids, pair.oov_count());
  for (std::size_t t = 1; t < pair.target_ids.size(); ++t) {
    const auto step = model.next_log_probs(enc, std::span<const TokenId>(pair.target_ids.data(), t));
    for (std::size_t j = 0; j < step.size(); ++j) CHECK(step[j] == doctest::Approx(full.at(t - 1, j)).epsilon(1e-12));
  }
}
