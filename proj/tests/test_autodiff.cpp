#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "met/autodiff.hpp"
#include "met/gradcheck.hpp"
#include "met/rng.hpp"

using namespace met;

namespace {

// Scalarizes an op output with fixed random weights so finite differences
// probe the op itself.
Handle weigh(Tape& tape, Handle out, uint64_t seed) {
  RngStream rng(seed, "weigh");
  Tensor w = Tensor::randn(tape.value(out).shape(), rng);
  return tape.sum_all(tape.mul(out, tape.constant(std::move(w))));
}

}  // namespace

TEST_CASE("matmul shape algebra and shape errors") {
  Tape tape;
  RngStream rng(1, "shapes");
  Handle a = tape.constant(Tensor::randn({2, 3}, rng));
  Handle b = tape.constant(Tensor::randn({3, 4}, rng));
  CHECK(tape.value(tape.matmul(a, b)).shape() == std::vector<int64_t>{2, 4});
  Handle bad = tape.constant(Tensor::randn({2, 4}, rng));
  CHECK_THROWS_WITH_AS(tape.matmul(a, bad), doctest::Contains("matmul"), ShapeError);
  CHECK_THROWS_WITH_AS(tape.add(a, bad), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(tape.softmax(tape.constant(Tensor({3}))), doctest::Contains("softmax"),
                       ShapeError);
}

TEST_CASE("softmax rows sum to one") {
  Tape tape;
  RngStream rng(2, "softmax");
  Handle x = tape.constant(Tensor::randn({5, 9}, rng, 3.0));
  const Tensor& y = tape.value(tape.softmax(x));
  for (int64_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 9; ++j) s += y.at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("cross entropy of uniform logits over 16 classes is ln 16") {
  Tape tape;
  Handle logits = tape.constant(Tensor({3, 16}, 0.25));
  Handle ce = tape.cross_entropy_sum(logits, {1, 7, 15});
  CHECK(tape.value(ce).item() / 3.0 == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  // Rows with target -1 are padding and contribute nothing.
  Tape t2;
  Handle l2 = t2.constant(Tensor({3, 16}, 0.25));
  Handle ce2 = t2.cross_entropy_sum(l2, {1, -1, 15});
  CHECK(t2.value(ce2).item() == doctest::Approx(2.0 * std::log(16.0)));
}

TEST_CASE("d(x^2)/dx at x=3 is 6") {
  Tensor x = Tensor::scalar(3.0);
  x.requires_grad = true;
  Tape tape;
  Handle hx = tape.leaf(x);
  Handle y = tape.mul(hx, hx);
  tape.backward(y);
  CHECK(tape.grad(hx).item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("softmax+cross-entropy gradient equals softmax minus one-hot") {
  RngStream rng(3, "ce-grad");
  Tensor logits = Tensor::randn({4, 11}, rng, 2.0);
  logits.requires_grad = true;
  const std::vector<int64_t> targets{3, 0, 10, 5};
  Tape tape;
  Handle hl = tape.leaf(logits);
  Handle ce = tape.cross_entropy_sum(hl, targets);
  Handle sm = tape.softmax(tape.leaf(logits));  // same slot; value reused
  tape.backward(ce);
  const Tensor& g = tape.grad(hl);
  const Tensor& p = tape.value(sm);
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t j = 0; j < 11; ++j) {
      const double expected = p.at(i, j) - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0);
      CHECK(g.at(i, j) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer-norm gradient matches central differences tightly") {
  RngStream rng(4, "ln");
  ParamMap params;
  params["x"] = Tensor::randn({1, 8}, rng);
  params["g"] = Tensor::randn({8}, rng, 0.5, 1.0);
  params["b"] = Tensor::randn({8}, rng, 0.5);
  const CheckReport report = gradient_check(
      [](Tape& tape, ParamMap& p) {
        Handle y = tape.layer_norm(tape.leaf(p["x"]), tape.leaf(p["g"]), tape.leaf(p["b"]));
        return weigh(tape, y, 99);
      },
      params, 1e-4, 1e-6);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("every primitive passes randomized finite-difference checks") {
  RngStream shapes(5, "prim-shapes");
  int draws_per_prim = 20;
  for (int draw = 0; draw < draws_per_prim; ++draw) {
    const int64_t m = 1 + shapes.uniform_int(4);
    const int64_t n = 2 + shapes.uniform_int(5);
    const int64_t k = 1 + shapes.uniform_int(4);
    const uint64_t ps = 1000 + static_cast<uint64_t>(draw);
    RngStream rng(ps, "prim-data");

    auto run = [&](const char* name, ParamMap params, const GraphBuilder& build) {
      const CheckReport r = gradient_check(build, std::move(params), 1e-4, 1e-4);
      INFO(name << " draw " << draw << " failure: " << r.failure);
      CHECK(r.pass);
    };

    {
      ParamMap p;
      p["a"] = Tensor::randn({m, k}, rng);
      p["b"] = Tensor::randn({k, n}, rng);
      run("matmul", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.matmul(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
    }
    {
      ParamMap p;
      p["a"] = Tensor::randn({m, n}, rng);
      p["b"] = Tensor::randn({m, n}, rng);
      run("add", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.add(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
      run("sub", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.sub(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
      run("mul", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.mul(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
    }
    {
      ParamMap p;
      p["x"] = Tensor::randn({m, n}, rng);
      p["b"] = Tensor::randn({n}, rng);
      run("add_bias", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.add_bias(t.leaf(pp["x"]), t.leaf(pp["b"])), ps);
      });
    }
    {
      ParamMap p;
      p["x"] = Tensor::randn({m, n}, rng);
      run("scale", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.scale(t.leaf(pp["x"]), -1.7), ps);
      });
      run("softmax", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.softmax(t.leaf(pp["x"])), ps);
      });
      run("tanh", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.activation(t.leaf(pp["x"]), Nonlinearity::tanh_fn), ps);
      });
      run("gelu", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.activation(t.leaf(pp["x"]), Nonlinearity::gelu), ps);
      });
      run("sum_squares", p, [=](Tape& t, ParamMap& pp) {
        return t.sum_squares(t.leaf(pp["x"]));
      });
      run("sum_all", p, [=](Tape& t, ParamMap& pp) { return t.sum_all(t.leaf(pp["x"])); });
      run("transpose", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.transpose(t.leaf(pp["x"])), ps);
      });
      const int64_t offset = shapes.uniform_int(n);
      run("causal_softmax", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.causal_softmax(t.leaf(pp["x"]), offset), ps);
      });
      RngStream mask_rng(ps, "mask");
      Tensor mask({m, n});
      for (int64_t i = 0; i < mask.numel(); ++i) {
        mask[i] = mask_rng.bernoulli(0.5) ? 1.0 / 0.5 : 0.0;
      }
      run("dropout_apply", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.dropout_apply(t.leaf(pp["x"]), mask), ps);
      });
    }
    {
      ParamMap p;
      p["table"] = Tensor::randn({5, n}, rng);
      RngStream id_rng(ps, "ids");
      std::vector<int64_t> ids;
      for (int64_t i = 0; i < m + 2; ++i) ids.push_back(id_rng.uniform_int(5));
      run("embedding", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.embedding(t.leaf(pp["table"]), ids), ps);
      });
    }
    {
      ParamMap p;
      p["logits"] = Tensor::randn({m, n}, rng, 2.0);
      RngStream id_rng(ps, "targets");
      std::vector<int64_t> targets;
      for (int64_t i = 0; i < m; ++i) {
        targets.push_back(id_rng.bernoulli(0.2) ? -1 : id_rng.uniform_int(n));
      }
      if (targets[0] == -1) targets[0] = 0;
      run("cross_entropy", p, [=](Tape& t, ParamMap& pp) {
        return t.cross_entropy_sum(t.leaf(pp["logits"]), targets);
      });
    }
    {
      ParamMap p;
      p["a"] = Tensor::randn({m, n}, rng);
      p["b"] = Tensor::randn({m + 1, n}, rng);
      run("concat_rows", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.concat_rows(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
    }
    {
      ParamMap p;
      p["a"] = Tensor::randn({m, n}, rng);
      p["b"] = Tensor::randn({m, n + 1}, rng);
      run("concat_cols", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.concat_cols(t.leaf(pp["a"]), t.leaf(pp["b"])), ps);
      });
    }
    {
      ParamMap p;
      p["x"] = Tensor::randn({m + 2, n + 2}, rng);
      run("slice_rows", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.slice_rows(t.leaf(pp["x"]), 1, m + 1), ps);
      });
      run("slice_cols", p, [=](Tape& t, ParamMap& pp) {
        return weigh(t, t.slice_cols(t.leaf(pp["x"]), 1, n + 1), ps);
      });
      run("layer_norm_rand", p, [=](Tape& t, ParamMap& pp) {
        Tensor g({n + 2}, 1.0), b({n + 2}, 0.0);
        return weigh(t, t.layer_norm(t.leaf(pp["x"]), t.constant(g), t.constant(b)), ps);
      });
    }
  }
}

TEST_CASE("replay of the same builder is bit-identical") {
  auto build = [](Tape& tape) {
    RngStream rng(17, "replay");
    Tensor x = Tensor::randn({6, 6}, rng);
    Handle h = tape.constant(std::move(x));
    Handle y = tape.softmax(tape.matmul(h, tape.transpose(h)));
    RngStream mask_rng(17, "replay/mask");
    Tensor mask({6, 6});
    for (int64_t i = 0; i < 36; ++i) mask[i] = mask_rng.bernoulli(0.9) ? 1.0 : 0.0;
    return tape.sum_squares(tape.dropout_apply(y, std::move(mask)));
  };
  Tape t1, t2;
  const double v1 = t1.value(build(t1)).item();
  const double v2 = t2.value(build(t2)).item();
  CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
}

TEST_CASE("parameters outside the loss graph get exact zero gradients") {
  RngStream rng(6, "dead");
  Tensor used = Tensor::randn({3, 3}, rng);
  Tensor dead = Tensor::randn({4, 4}, rng);
  used.requires_grad = true;
  dead.requires_grad = true;
  Tape tape;
  Handle hu = tape.leaf(used);
  Handle hd = tape.leaf(dead);
  Handle loss = tape.sum_squares(hu);
  tape.backward(loss);
  const Tensor& g = tape.grad(hd);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward demands a scalar loss") {
  Tape tape;
  RngStream rng(7, "scalar");
  Tensor x = Tensor::randn({2, 2}, rng);
  x.requires_grad = true;
  Handle h = tape.leaf(x);
  Handle y = tape.scale(h, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("gradient_check on sum is exact and dead parameters pass") {
  RngStream rng(8, "gc");
  // Integer values and a power-of-two step keep every FD sum exactly
  // representable, so a linear function checks with literally zero error.
  ParamMap params;
  params["x"] = Tensor({3, 4});
  for (int64_t i = 0; i < 12; ++i) params["x"][i] = static_cast<double>(rng.uniform_int(17) - 8);
  params["unused"] = Tensor::randn({2}, rng);
  const CheckReport report = gradient_check(
      [](Tape& tape, ParamMap& p) { return tape.sum_all(tape.leaf(p["x"])); }, params, 0.25);
  CHECK(report.pass);
  for (const auto& e : report.entries) CHECK(e.max_rel_err == 0.0);
}

TEST_CASE("gradient_check flags NaN with a location") {
  ParamMap params;
  params["x"] = Tensor::scalar(-1.0);
  const CheckReport report = gradient_check(
      [](Tape& tape, ParamMap& p) {
        // sqrt of a negative goes NaN in the numeric probe
        Tensor half = Tensor::scalar(std::nan(""));
        return tape.sum_all(tape.mul(tape.leaf(p["x"]), tape.constant(std::move(half))));
      },
      params);
  CHECK_FALSE(report.pass);
  CHECK(report.failure.find("x[0]") != std::string::npos);
}

TEST_CASE("detach stops gradient flow") {
  RngStream rng(9, "detach");
  Tensor x = Tensor::randn({3}, rng);
  x.requires_grad = true;
  Tape tape;
  Handle h = tape.leaf(x);
  Handle loss = tape.sum_squares(tape.detach(h));
  tape.backward(loss);
  const Tensor& g = tape.grad(h);
  for (int64_t i = 0; i < 3; ++i) CHECK(g[i] == 0.0);
}
