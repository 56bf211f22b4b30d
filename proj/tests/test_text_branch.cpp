#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"

#include "lico/errors.hpp"
#include "lico/ops.hpp"
#include "lico/text_branch.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace lico;
using lico::testing::Leaves;
using lico::testing::random_tensor;
using T = BasicTensor<double>;

namespace {

TextConfig small_config() {
  TextConfig c;
  c.context_tokens = 3;
  c.embed_dim = 6;
  c.mapping_hidden = 5;
  c.visual_dim = 4;
  return c;
}

T class_table(std::size_t classes, std::size_t dim) {
  return random_tensor<double>({classes, dim}, 7, -1, 1, false);
}

std::vector<std::vector<double>> sorted_rows(const T& m) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    rows.emplace_back(m.data().begin() + static_cast<long>(r * m.dim(1)),
                      m.data().begin() + static_cast<long>((r + 1) * m.dim(1)));
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

// Frozen encoder, mapping net and context tokens, with the context tokens as
// the only leaf reported by parameters() besides psi.
struct TextModel {
  PromptBank<double> bank;
  FrozenEncoder<double> encoder;
  MappingNet<double> mapping;

  ParamList<double> parameters() const {
    auto p = bank.parameters();
    for (const auto& q : mapping.parameters()) p.push_back(q);
    return p;
  }
  TextModel clone() const { return {bank.clone(), encoder, mapping.clone()}; }
};

}  // namespace

TEST_CASE("class tokens are unit rows and never trainable") {
  PromptBank<double> bank(small_config(), class_table(4, 6), 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += bank.class_tokens().at(r, c) * bank.class_tokens().at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_FALSE(bank.class_tokens().requires_grad());
  REQUIRE(bank.parameters().size() == 1);
  CHECK(bank.parameters()[0].group == ParamGroup::context);
}

TEST_CASE("context tokens start small") {
  TextConfig c = small_config();
  c.context_tokens = 200;
  c.embed_dim = 50;
  PromptBank<double> bank(c, class_table(2, 50), 3);
  double s = 0.0, s2 = 0.0;
  for (const double v : bank.context_tokens().data()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(bank.context_tokens().size());
  const double stddev = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(stddev == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("prompt construction") {
  PromptBank<double> bank(small_config(), class_table(4, 6), 1);
  const auto identity = bank.build_prompt(2, identity_permutation(4));
  SUBCASE("identity order puts the class token last") {
    for (std::size_t c = 0; c < 6; ++c) CHECK(identity.at(3, c) == bank.class_tokens().at(2, c));
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 6; ++c) CHECK(identity.at(r, c) == bank.context_tokens().at(r, c));
  }
  SUBCASE("repeat calls agree") {
    CHECK(lico::testing::as_vector(bank.build_prompt(2, identity_permutation(4))) == lico::testing::as_vector(identity));
  }
  SUBCASE("a permutation keeps the multiset of rows") {
    const auto shuffled = bank.build_prompt(2, {3, 1, 0, 2});
    CHECK(sorted_rows(shuffled) == sorted_rows(identity));
    for (std::size_t c = 0; c < 6; ++c) CHECK(shuffled.at(0, c) == identity.at(3, c));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(bank.build_prompt(4, identity_permutation(4)), DomainError);
    CHECK_THROWS_AS(bank.build_prompt(0, {0, 1, 1, 2}), ContractError);
    CHECK_THROWS_AS(bank.build_prompt(0, {0, 1, 2}), ContractError);
    CHECK_THROWS_AS(bank.build_prompt(0, {0, 1, 2, 4}), ContractError);
  }
}

TEST_CASE("frozen encoder is deterministic and does not train") {
  const FrozenEncoder<double> a(4, 6, 9), b(4, 6, 9);
  const auto x = random_tensor<double>({4, 6}, 3);
  const auto ya = a.encode(x), yb = b.encode(x);
  CHECK(lico::testing::as_vector(ya) == lico::testing::as_vector(yb));
  for (const auto& w : a.weights()) CHECK_FALSE(w.requires_grad());

  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(ops::sum(a.encode(x)));
  for (const auto& w : a.weights()) CHECK_FALSE(w.has_grad());
  bool any = false;
  for (const double g : x.grad()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("single-token encoding reduces to the normalized residual then the affine map") {
  const std::size_t d = 6;
  const FrozenEncoder<double> enc(3, d, 5);
  const auto w = enc.weights();  // position, query, key, value, out, out_bias
  const auto t = random_tensor<double>({1, d}, 12, -1, 1, false);
  // Attention over a single token is the identity, leaving x + x W_v.
  std::vector<double> x(d), mixed(d, 0.0), out(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) x[j] = t[j] + w[0].at(0, j);
  for (std::size_t j = 0; j < d; ++j) {
    mixed[j] = x[j];
    for (std::size_t k = 0; k < d; ++k) mixed[j] += x[k] * w[3].at(k, j);
  }
  double norm = 0.0;
  for (const double v : mixed) norm += v * v;
  norm = std::sqrt(norm);
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = w[5][j];
    for (std::size_t k = 0; k < d; ++k) out[j] += mixed[k] / norm * std::sqrt(double(d)) * w[4].at(k, j);
  }
  const auto y = enc.encode(t);
  for (std::size_t j = 0; j < d; ++j) CHECK(y[j] == doctest::Approx(out[j]).epsilon(1e-12));
}

TEST_CASE("encoder is sensitive to token order") {
  const FrozenEncoder<double> enc(4, 6, 5);
  const auto x = random_tensor<double>({4, 6}, 13, -1, 1, false);
  const auto swapped = ops::gather_rows(x, std::vector<std::size_t>{1, 0, 2, 3});
  const auto a = enc.encode(x);
  const auto b = ops::gather_rows(enc.encode(swapped), std::vector<std::size_t>{1, 0, 2, 3});
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("mapping net shapes and zero weights") {
  MappingNet<double> net(6, 5, 4, 2);
  CHECK(net.shape().hidden == 5);
  CHECK(net.shape().output == 4);
  const auto x = random_tensor<double>({3, 6}, 14, -1, 1, false);
  CHECK(net.map(x).shape() == Shape{3, 4});
  for (auto& p : net.parameters()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  const auto zero = net.map(x);
  for (const double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(net.map(T::zeros({3, 5})), ShapeError);

  CHECK(reference_mapping::kResNet50.hidden == 512);
  CHECK(reference_mapping::kResNet50.output == 49);
}

TEST_CASE("text branch gradients match central differences") {
  const auto cfg = small_config();
  TextModel model{PromptBank<double>(cfg, class_table(3, 6), 4), FrozenEncoder<double>(4, 6, 4),
                  MappingNet<double>(6, 5, 4, 4)};
  const Permutation perm{2, 0, 3, 1};
  const auto results = lico::testing::check_gradients(model, {"prompt", "encoded"}, [&](const TextModel& m) {
    const auto g = m.mapping.map(m.encoder.encode(m.bank.build_prompt(1, perm)));
    const auto w = random_tensor<double>(g.shape(), 44, 0.5, 1.5, false);
    const auto e = m.encoder.encode(m.bank.build_prompt(2, perm));
    const auto we = random_tensor<double>(e.shape(), 45, 0.5, 1.5, false);
    return std::vector<T>{ops::sum(ops::mul(g, w)), ops::sum(ops::mul(e, we))};
  });
  for (const auto& r : results) {
    CAPTURE(r.term);
    CAPTURE(r.worst);
    CHECK(r.kink_skipped == 0);
    CHECK(r.max_rel_err < 1e-3);
  }
}

TEST_CASE("frozen prompt modes expose no context parameter") {
  for (const auto mode : {PromptMode::random_frozen, PromptMode::fixed_template}) {
    auto cfg = small_config();
    cfg.mode = mode;
    PromptBank<double> bank(cfg, class_table(3, 6), 4);
    CHECK(bank.parameters().empty());
    CHECK_FALSE(bank.context_tokens().requires_grad());
    bank.set_context_tokens(T::full({3, 6}, 0.25));
    CHECK_FALSE(bank.context_tokens().requires_grad());
    CHECK(bank.context_tokens()[0] == 0.25);
    CHECK_THROWS_AS(bank.set_context_tokens(T::zeros({2, 6})), ShapeError);
  }
}

TEST_CASE("synthetic class tokens follow their groups") {
  const auto table = synthetic_class_tokens({{0}, {0}, {1}, {1}}, 32, 5);
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 0; j < 32; ++j) s += double(table.at(a, j)) * table.at(b, j);
    return s;
  };
  CHECK(dot(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(dot(0, 1) > dot(0, 2) + 0.3);
  CHECK(dot(2, 3) > dot(1, 3) + 0.3);
  const auto again = synthetic_class_tokens({{0}, {0}, {1}, {1}}, 32, 5);
  CHECK(lico::testing::as_vector(table) == lico::testing::as_vector(again));
}
