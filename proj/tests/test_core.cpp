#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "supcal/core.hpp"

using namespace supcal;
using Catch::Approx;

TEST_CASE("logits from probs match hand values", "[core]") {
  LogitVector m = logits_from_probs(ProbDist({0.1, 0.3, 0.6}));
  REQUIRE(m.m.size() == 2);
  CHECK(m.m[0] == Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(m.m[1] == Approx(std::log(6.0)).epsilon(1e-12));

  // Binary case: p = sigmoid pair for m = -2.
  ProbDist p = probs_from_logits(LogitVector({-2.0}));
  CHECK(p.p[0] == Approx(0.8807970779778823).epsilon(1e-12));
  CHECK(p.p[1] == Approx(0.11920292202211755).epsilon(1e-12));
}

TEST_CASE("probability floor bounds the logit magnitude", "[core]") {
  // p_1 below the floor: the log uses 1e-12 instead, so the logit is
  // ln(1e-12) - ln(~1), about -27.631.
  LogitVector m = logits_from_probs(ProbDist({1.0 - 1e-15, 1e-15}));
  CHECK(m.m[0] == Approx(std::log(1e-12) - std::log(1.0 - 1e-15))
                      .epsilon(1e-12));
  CHECK(std::isfinite(m.m[0]));
}

TEST_CASE("softmax survives extreme logits", "[core]") {
  ProbDist hi = probs_from_logits(LogitVector({1000.0}));
  CHECK(hi.p[1] == Approx(1.0));
  CHECK(std::isfinite(hi.p[0]));
  ProbDist lo = probs_from_logits(LogitVector({-1000.0}));
  CHECK(lo.p[0] == Approx(1.0));
  ProbDist wide = probs_from_logits(LogitVector({800.0, -800.0, 750.0}));
  double sum = 0.0;
  for (double v : wide.p) {
    CHECK(std::isfinite(v));
    sum += v;
  }
  CHECK(sum == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("round trip probs -> logits -> probs", "[core]") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 5);
    std::vector<double> raw(n);
    double sum = 0.0;
    for (double& v : raw) {
      v = 1e-6 + static_cast<double>(rng() >> 11) * 0x1.0p-53;
      sum += v;
    }
    for (double& v : raw) v /= sum;
    ProbDist p(raw);
    ProbDist back = probs_from_logits(logits_from_probs(p));
    for (int c = 0; c < n; ++c) {
      REQUIRE(back.p[c] == Approx(p.p[c]).margin(1e-9));
    }
  }
}

TEST_CASE("identity params reproduce the base distribution exactly",
          "[core]") {
  const CalibrationParams id = CalibrationParams::identity(4);
  const LogitVector m({0.3, -1.7, 2.9});
  const ProbDist base = probs_from_logits(m);
  const ProbDist cal = calibrated_dist(m, id);
  for (int c = 0; c < 4; ++c) {
    // Bit-for-bit: w=1, b=0 must not perturb anything.
    REQUIRE(cal.p[c] == base.p[c]);
  }
}

TEST_CASE("apply_affine matches hand-worked coefficients", "[core]") {
  CalibrationParams params = CalibrationParams::identity(3);
  params.coeffs[0] = {-1.294, -0.188};
  params.coeffs[1] = {3.457, 1.097};
  LogitVector z = apply_affine(params, LogitVector({1.0, -1.0}));
  CHECK(z.m[0] == Approx(-1.482).margin(1e-9));
  CHECK(z.m[1] == Approx(2.360).margin(1e-9));
}

TEST_CASE("apply_affine rejects dimension mismatch", "[core]") {
  CalibrationParams params = CalibrationParams::identity(3);
  CHECK_THROWS_AS(apply_affine(params, LogitVector({1.0})), ValueError);
  CHECK_THROWS_AS(apply_affine(params, LogitVector({1.0, 2.0, 3.0})),
                  ValueError);
}

TEST_CASE("calibration with positive scale preserves per-class monotonicity",
          "[core]") {
  CalibrationParams params = CalibrationParams::identity(2);
  params.coeffs[0] = {0.7, 2.5};
  double prev = -1.0;
  for (double m1 = -4.0; m1 <= 4.0; m1 += 0.25) {
    const double p1 = calibrated_dist(LogitVector({m1}), params).p[1];
    CHECK(p1 > prev);
    prev = p1;
  }
}

TEST_CASE("negative scale flips the ranking direction", "[core]") {
  CalibrationParams params = CalibrationParams::identity(2);
  params.coeffs[0] = {0.0, -1.0};
  // Base strongly favors class 1; flipped scale favors class 0.
  const ProbDist flipped = calibrated_dist(LogitVector({3.0}), params);
  CHECK(predict_label(flipped) == 0);
  const ProbDist flipped2 = calibrated_dist(LogitVector({-3.0}), params);
  CHECK(predict_label(flipped2) == 1);
}

TEST_CASE("predict_label breaks ties toward the smallest index", "[core]") {
  CHECK(predict_label(ProbDist({0.5, 0.5})) == 0);
  CHECK(predict_label(ProbDist({0.25, 0.25, 0.25, 0.25})) == 0);
  CHECK(predict_label(ProbDist({0.2, 0.4, 0.4})) == 1);
  CHECK(predict_label(ProbDist({0.1, 0.2, 0.7})) == 2);
}

TEST_CASE("distribution validation", "[core]") {
  CHECK_THROWS_AS(ProbDist({0.5}), ValueError);
  CHECK_THROWS_AS(ProbDist({0.5, 0.6}), ValueError);
  CHECK_THROWS_AS(ProbDist({-0.1, 1.1}), ValueError);
  CHECK_THROWS_AS(ProbDist({0.5, std::nan("")}), ValueError);
  CHECK_NOTHROW(ProbDist({0.5, 0.5}));
}

TEST_CASE("logit validation", "[core]") {
  CHECK_THROWS_AS(LogitVector(std::vector<double>{}), ValueError);
  CHECK_THROWS_AS(LogitVector({std::nan("")}), ValueError);
  CHECK_THROWS_AS(LogitVector({HUGE_VAL}), ValueError);
}

TEST_CASE("label space lookups and validation", "[core]") {
  LabelSpace ls = LabelSpace::from_verbalizers({"negative", "positive"});
  CHECK(ls.num_classes() == 2);
  CHECK(ls.index_of("negative") == 0);
  CHECK(ls.index_of("positive") == 1);
  CHECK(ls.index_of("neutral") == -1);
  CHECK(ls.verbalizer(1) == "positive");
  CHECK_THROWS_AS(LabelSpace::from_verbalizers({"only"}), ValueError);
  CHECK_THROWS_AS(LabelSpace::from_verbalizers({"a", "a"}), ValueError);
}

TEST_CASE("context enforces distinct exemplar ids", "[core]") {
  Exemplar a{0, "x", 0};
  Exemplar b{1, "y", 1};
  Context ctx({a, b});
  CHECK(ctx.size() == 2);
  CHECK(ctx.contains_id(1));
  CHECK_FALSE(ctx.contains_id(2));
  CHECK(ctx.key() == "0,1");
  Exemplar dup{0, "z", 1};
  CHECK_THROWS_AS(Context({a, dup}), ValueError);
}

TEST_CASE("identity factory produces b=0 w=1", "[core]") {
  const CalibrationParams id = CalibrationParams::identity(5, 3);
  REQUIRE(id.coeffs.size() == 4);
  CHECK(id.context_size == 3);
  for (const ClassAffine& ca : id.coeffs) {
    CHECK(ca.bias == 0.0);
    CHECK(ca.scale == 1.0);
  }
  CHECK_THROWS_AS(CalibrationParams::identity(1), ValueError);
}
