#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/ahsw.hpp>

#include <cmath>

using namespace occloff;

TEST_CASE("cumulative loss") {
  SUBCASE("a single completed epoch contributes with decay^0") {
    CHECK(cumulative_loss({2.0}, 0.5, 2) == doctest::Approx(2.0));
  }
  SUBCASE("two epochs: 0.5*1 + 1*2") {
    CHECK(cumulative_loss({1.0, 2.0}, 0.5, 3) == doctest::Approx(2.5));
  }
  SUBCASE("geometric sum over a constant history") {
    double c = 3.7;
    CHECK(cumulative_loss({c, c, c}, 0.5, 4) == doctest::Approx(1.75 * c));
  }
  SUBCASE("undefined during the first epoch and on length mismatch") {
    CHECK_THROWS_AS(cumulative_loss({}, 0.5, 1), std::logic_error);
    CHECK_THROWS_AS(cumulative_loss({1.0}, 0.5, 3), std::invalid_argument);
  }
}

TEST_CASE("epoch planning") {
  AhswConfig cfg;
  cfg.warmup_epochs = 10;
  cfg.sample_percent = 50.0;
  cfg.amplification = 5.0;
  cfg.decay = 0.5;

  SUBCASE("warm-up epochs: everyone participates with weight 1") {
    auto plan = plan_epoch({9.0, 1.0, 5.0}, cfg, 10);
    for (const auto& e : plan) {
      CHECK(e.participates);
      CHECK(e.weight == 1.0);
    }
  }
  SUBCASE("weight endpoints: max gets amplification, min gets 1") {
    auto plan = plan_epoch({4.0, 1.0, 2.0}, cfg, 11);
    CHECK(plan[0].weight == doctest::Approx(5.0));
    CHECK(plan[1].weight == doctest::Approx(1.0));
  }
  SUBCASE("worked example: cumulatives {4,3,2,1} at K=50, amplification 5") {
    auto plan = plan_epoch({4.0, 3.0, 2.0, 1.0}, cfg, 11);
    CHECK(plan[0].participates);
    CHECK(plan[1].participates);
    CHECK_FALSE(plan[2].participates);
    CHECK_FALSE(plan[3].participates);
    CHECK(plan[0].weight == doctest::Approx(5.0));
    CHECK(plan[1].weight == doctest::Approx(11.0 / 3.0));
  }
  SUBCASE("participation count is exactly ceil(K% * N) with ties by sample id") {
    cfg.sample_percent = 30.0;
    std::vector<double> c(10, 2.0);  // all ties
    auto plan = plan_epoch(c, cfg, 12);
    int participants = 0;
    for (int i = 0; i < 10; ++i) participants += plan[i].participates;
    CHECK(participants == 3);
    CHECK(plan[0].participates);
    CHECK(plan[1].participates);
    CHECK(plan[2].participates);
    for (const auto& e : plan) CHECK(e.weight == 1.0);  // degenerate spread
  }
  SUBCASE("weights stay inside [1, amplification] on random cumulatives") {
    Rng rng_state(0);
    std::vector<double> c = {0.3, 7.1, 2.2, 9.9, 0.30001, 5.5};
    auto plan = plan_epoch(c, cfg, 42);
    for (const auto& e : plan) {
      CHECK(e.weight >= 1.0);
      CHECK(e.weight <= cfg.amplification);
    }
  }
  SUBCASE("plan is invariant under joint positive affine rescaling") {
    std::vector<double> c = {4.0, 1.5, 3.3, 0.2, 2.8};
    auto base = plan_epoch(c, cfg, 20);
    for (auto& x : c) x = 3.7 * x + 11.0;
    auto scaled = plan_epoch(c, cfg, 20);
    for (size_t i = 0; i < c.size(); ++i) {
      CHECK(base[i].participates == scaled[i].participates);
      CHECK(base[i].weight == doctest::Approx(scaled[i].weight).epsilon(1e-12));
    }
  }
}
