#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mrr/base64.hpp"
#include "mrr/error.hpp"
#include "mrr/kernels.hpp"
#include "mrr/model_io.hpp"
#include "mrr/network.hpp"
#include "mrr/rng.hpp"
#include "oracles.hpp"

using namespace mrr;

TEST_CASE("tensor construction checks element count") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.row_size() == 3);
  CHECK(t.row(1)[0] == 4.0);
  const Tensor s = slice_rows(t, 1, 2);
  CHECK(s.shape == Shape{1, 3});
  const std::size_t idx[] = {1, 0};
  CHECK(gather_rows(t, idx).data == std::vector<double>{4, 5, 6, 1, 2, 3});
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
}

TEST_CASE("rng is reproducible and bounded") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng r(1);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) ++seen[r.below(7)];
  for (int c : seen) CHECK(c > 800);
  std::vector<int> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  r.shuffle(std::span(perm));
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("base64 round trips bytes and doubles") {
  const std::vector<unsigned char> bytes{0, 1, 2, 250, 251, 255, 17};
  for (std::size_t n = 0; n <= bytes.size(); ++n) {
    std::span<const unsigned char> s(bytes.data(), n);
    CHECK(base64::decode(base64::encode(s)) == std::vector<unsigned char>(s.begin(), s.end()));
  }
  CHECK(base64::encode(std::vector<unsigned char>{'M', 'a', 'n'}) == "TWFu");
  const std::vector<double> v{0.1, -0.0, 1e-300, 3.141592653589793, -7.5};
  const auto back = base64::decode_doubles(base64::encode_doubles(v));
  REQUIRE(back.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::signbit(back[i]) == std::signbit(v[i]));
  CHECK(back == v);
  CHECK_THROWS_AS(base64::decode("a?=="), DataError);
  CHECK_THROWS_AS(base64::decode("abc"), DataError);
}

TEST_CASE("parallel kernels match the serial reference bit for bit") {
  Rng rng(5);
  auto fill = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-1, 1);
    return v;
  };
  const kernels::ConvDims cd{3, 2, 9, 8, 4, 3};
  const auto in = fill(3 * 2 * 9 * 8), w = fill(4 * 2 * 9), b = fill(4);
  const std::size_t out_n = 3 * 4 * cd.out_height() * cd.out_width();
  std::vector<double> o1(out_n), o2(out_n);
  kernels::serial::conv2d_forward(cd, in, w, b, o1);
  kernels::conv2d_forward(cd, in, w, b, o2);
  CHECK(o1 == o2);
  const auto go = fill(out_n);
  std::vector<double> gi1(in.size()), gi2(in.size()), gw1(w.size()), gw2(w.size()), gb1(4), gb2(4);
  kernels::serial::conv2d_backward(cd, in, w, go, gi1, gw1, gb1);
  kernels::conv2d_backward(cd, in, w, go, gi2, gw2, gb2);
  CHECK(gi1 == gi2);
  CHECK(gw1 == gw2);
  CHECK(gb1 == gb2);

  const kernels::PoolDims pd{3, 2, 8, 6, 2};
  const auto pin = fill(3 * 2 * 8 * 6);
  std::vector<double> p1(3 * 2 * 4 * 3), p2(p1.size());
  std::vector<std::size_t> a1(p1.size()), a2(p1.size());
  kernels::serial::maxpool_forward(pd, pin, p1, a1);
  kernels::maxpool_forward(pd, pin, p2, a2);
  CHECK(p1 == p2);
  CHECK(a1 == a2);
  const auto pg = fill(p1.size());
  std::vector<double> pg1(pin.size()), pg2(pin.size());
  kernels::serial::maxpool_backward(pd, pg, a1, pg1);
  kernels::maxpool_backward(pd, pg, a2, pg2);
  CHECK(pg1 == pg2);

  const kernels::DenseDims dd{5, 7, 3};
  const auto din = fill(35), dw = fill(21), db = fill(3);
  std::vector<double> d1(15), d2(15);
  kernels::serial::dense_forward(dd, din, dw, db, d1);
  kernels::dense_forward(dd, din, dw, db, d2);
  CHECK(d1 == d2);
  const auto dg = fill(15);
  std::vector<double> dgi1(35), dgi2(35), dgw1(21), dgw2(21), dgb1(3), dgb2(3);
  kernels::serial::dense_backward(dd, din, dw, dg, dgi1, dgw1, dgb1);
  kernels::dense_backward(dd, din, dw, dg, dgi2, dgw2, dgb2);
  CHECK(dgi1 == dgi2);
  CHECK(dgw1 == dgw2);
  CHECK(dgb1 == dgb2);
}

TEST_CASE("forward on trivial networks") {
  Network id;
  id.input_shape = {2};
  id.layers = {Layer::dense(2, 2)};
  id.layers[0].params[0].data = {1, 0, 0, 1};
  CHECK(forward(id, Tensor({1, 2}, std::vector<double>{1, 2})).logits.data == std::vector<double>{1, 2});

  Network relu;
  relu.input_shape = {2};
  relu.layers = {Layer::relu()};
  CHECK(forward(relu, Tensor({1, 2}, std::vector<double>{-1, 3})).logits.data == std::vector<double>{0, 3});

  CHECK_THROWS_AS(forward(id, Tensor({1, 3})), ShapeError);
}

TEST_CASE("shape errors name the offending layer") {
  Network bad;
  bad.input_shape = {4};
  bad.layers = {Layer::dense(4, 3), Layer::dense(5, 2)};
  try {
    bad.activation_shapes();
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("l2 normalize") {
  auto r = l2_normalize(Tensor({1, 2}, std::vector<double>{3, 4}));
  CHECK(r.output[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(r.output[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(l2_normalize(Tensor({1, 3}, std::vector<double>{0, 0, 1})).output.data == std::vector<double>{0, 0, 1});
  auto z = l2_normalize(Tensor({1, 2}), 1e-12);
  CHECK(z.degenerate_rows == 1);
  CHECK(z.output.all_finite());

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Tensor t = oracle::random_tensor({1, 6}, rng, -10, 10);
    const auto n = l2_normalize(t).output;
    CHECK(std::abs(norm2(n.data) - 1.0) <= 1e-9);
  }
}

TEST_CASE("L2Normalize gradient on [3,4] matches finite differences") {
  Network n;
  n.input_shape = {2};
  n.layers = {Layer::l2_normalize()};
  Tensor x({1, 2}, std::vector<double>{3, 4});
  const Tensor r({1, 2}, std::vector<double>{0.7, -1.3});
  const auto g = backward(n, forward_trace(n, x), r);
  const auto num = oracle::numeric_gradient(x.data, [&] {
    const auto out = forward_trace(n, x).output();
    return out[0] * r[0] + out[1] * r[1];
  });
  for (int i = 0; i < 2; ++i) CHECK(std::abs(g.input[i] - num[i]) <= 1e-6);
}

TEST_CASE("every layer kind passes the finite-difference check") {
  for (const auto& net : oracle::layer_zoo()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      INFO(net.layers[0].describe(), " seed ", seed);
      CHECK(oracle::network_gradient_error(net, seed) <= 1e-4);
    }
  }
}

TEST_CASE("single dense layer gradient is the outer product with the input") {
  Network n;
  n.input_shape = {3};
  n.layers = {Layer::dense(3, 2)};
  const Tensor x({1, 3}, std::vector<double>{1, 2, 3});
  const Tensor r({1, 2}, std::vector<double>{1, 0});  // loss = y[0]
  const auto g = backward(n, forward_trace(n, x), r);
  CHECK(g.params[0][0].data == std::vector<double>{1, 2, 3, 0, 0, 0});
  CHECK(g.params[0][1].data == std::vector<double>{1, 0});
}

TEST_CASE("cross entropy") {
  const Tensor aligned({1, 3}, std::vector<double>{50, 0, 0});
  const int y0[] = {0};
  CHECK(cross_entropy(aligned, y0).loss == doctest::Approx(0.0).epsilon(1e-12));
  const Tensor uniform({2, 4});
  const int y[] = {1, 3};
  CHECK(cross_entropy(uniform, y).loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  for (std::uint64_t s = 1; s <= 5; ++s) CHECK(oracle::cross_entropy_gradient_error(s) <= 1e-6);
  const int bad[] = {4};
  CHECK_THROWS_AS(cross_entropy(Tensor({1, 3}), bad), DataError);
}

TEST_CASE("training separates a linearly separable toy set") {
  Rng rng(9);
  const std::size_t n = 60;
  Tensor x({n, 2});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    x[2 * i] = rng.uniform(0.1, 1.0) * (y[i] ? 1 : -1);
    x[2 * i + 1] = rng.uniform(-1, 1);
  }
  Network net;
  net.input_shape = {2};
  net.layers = {Layer::dense(2, 2)};
  initialize(net, 1);
  train(net, x, y, {0.5, 8, 50, 3});
  CHECK(accuracy(net, x, y) == 1.0);

  Network a = net, b = net;
  initialize(a, 4);
  initialize(b, 4);
  train(a, x, y, {0.1, 4, 3, 8});
  train(b, x, y, {0.1, 4, 3, 8});
  CHECK(dump_json(network_to_json(a)) == dump_json(network_to_json(b)));

  CHECK_THROWS_AS(train(net, Tensor({0, 2}), std::vector<int>{}, {}), DataError);
  std::vector<int> bad = y;
  bad[0] = 7;
  CHECK_THROWS_AS(train(net, x, bad, {}), DataError);
  CHECK_THROWS_AS(validate(TrainConfig{0.0, 1, 1, 1}), DataError);
}

TEST_CASE("model JSON round trip is byte identical") {
  Network net;
  net.input_shape = {1, 6, 6};
  net.layers = {Layer::conv2d(1, 2, 3), Layer::relu(), Layer::max_pool(2), Layer::global_avg_pool(),
                Layer::dense(2, 3), Layer::softmax()};
  initialize(net, 12);
  const std::string text = dump_json(network_to_json(net));
  const Network back = network_from_json(Json::parse(text));
  CHECK(back == net);
  CHECK(dump_json(network_to_json(back)) == text);
}
