#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <occloff/losses.hpp>

#include <cmath>
#include <set>

using namespace occloff;
using Tape = ad::Tape<double>;

TEST_CASE("to_distribution") {
  SUBCASE("an all-equal vector softmaxes to uniform") {
    auto p = to_distribution(std::vector<double>(9, 0.3));
    for (double x : p) CHECK(x == doctest::Approx(1.0 / 9));
  }
  SUBCASE("adding a constant leaves the output unchanged") {
    std::vector<double> v = {0.4, -1.2, 3.0, 0.0};
    auto a = to_distribution(v);
    for (auto& x : v) x += 7.5;
    auto b = to_distribution(v);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
  SUBCASE("(0, ln 3) softmaxes to (0.25, 0.75)") {
    auto p = to_distribution({0.0, std::log(3.0)});
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
  }
}

TEST_CASE("hellinger distance") {
  SUBCASE("identical distributions have distance zero") {
    CHECK(hellinger({0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}) == doctest::Approx(0.0));
  }
  SUBCASE("disjoint support reaches the maximum of one") {
    CHECK(hellinger({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(1.0));
  }
  SUBCASE("the half-half vs point-mass value") {
    double want = std::sqrt(1.0 - std::sqrt(2.0) / 2.0);
    CHECK(std::abs(hellinger({0.5, 0.5}, {1.0, 0.0}) - want) < 1e-9);
  }
  SUBCASE("non-distributions are rejected") {
    CHECK_THROWS_AS(hellinger({0.5, 0.6}, {0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(hellinger({-0.1, 1.1}, {0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(hellinger({0.5, 0.5}, {0.5}), std::invalid_argument);
  }
  SUBCASE("metric properties on random triples") {
    Rng rng(41);
    auto random_dist = [&](int n) {
      std::vector<double> v(n);
      double s = 0;
      for (auto& x : v) {
        x = -std::log(1.0 - rng.uniform());
        s += x;
      }
      for (auto& x : v) x /= s;
      return v;
    };
    for (int rep = 0; rep < 1000; ++rep) {
      auto p = random_dist(6), q = random_dist(6), r = random_dist(6);
      double dpq = hellinger(p, q), dqr = hellinger(q, r), dpr = hellinger(p, r);
      CHECK(dpq >= 0.0);
      CHECK(dpq <= 1.0);
      CHECK(dpq == doctest::Approx(hellinger(q, p)).epsilon(1e-12));
      CHECK(dpr <= dpq + dqr + 1e-12);  // triangle inequality
      CHECK(hellinger(p, p) < 1e-12);
    }
  }
}

TEST_CASE("proxy loss from distances: hand-evaluated cases") {
  const int n_cat = 9;
  SUBCASE("one voxel, zero distance to its proxy, unit distance to the rest") {
    std::vector<double> dmat(n_cat, 1.0);
    dmat[4] = 0.0;  // the voxel's own category
    double loss = proxy_loss_from_distances(dmat, 1, n_cat, {4}, 1.0, 1.0);
    CHECK(loss == doctest::Approx(-(n_cat - 1.0) / n_cat).epsilon(1e-12));
  }
  SUBCASE("alpha, beta -> 0 collapses every term to log of the set size") {
    Rng rng(5);
    std::vector<double> dmat(20 * n_cat);
    for (auto& d : dmat) d = rng.uniform();
    std::vector<int> labels(20);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(n_cat));
    double loss = proxy_loss_from_distances(dmat, 20, n_cat, labels, 1e-12, 1e-12);
    double want = 0.0;
    for (int s = 0; s < n_cat; ++s) {
      int pos = 0;
      for (int l : labels) pos += l == s;
      if (pos > 0) want += std::log(static_cast<double>(pos));
      if (20 - pos > 0) want += std::log(static_cast<double>(20 - pos));
    }
    want /= n_cat;
    CHECK(loss == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("duplicating every voxel adds log 2 to each active log-sum term") {
    Rng rng(6);
    const int n = 10;
    std::vector<double> dmat(n * n_cat);
    for (auto& d : dmat) d = rng.uniform();
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(3));
    double base = proxy_loss_from_distances(dmat, n, n_cat, labels, 2.0, 3.0);

    std::vector<double> dup_dmat(dmat);
    dup_dmat.insert(dup_dmat.end(), dmat.begin(), dmat.end());
    std::vector<int> dup_labels(labels);
    dup_labels.insert(dup_labels.end(), labels.begin(), labels.end());
    double dup = proxy_loss_from_distances(dup_dmat, 2 * n, n_cat, dup_labels, 2.0, 3.0);

    int active_terms = 0;
    for (int s = 0; s < n_cat; ++s) {
      int pos = 0;
      for (int l : labels) pos += l == s;
      active_terms += (pos > 0) + (n - pos > 0);
    }
    CHECK(dup - base == doctest::Approx(active_terms * std::log(2.0) / n_cat).epsilon(1e-9));
  }
}

TEST_CASE("explicit proxy gradient (softmax form)") {
  const int n_cat = 9;
  SUBCASE("singleton positive set: gradient is alpha/|H| regardless of d") {
    std::vector<double> dmat(n_cat, 0.37);
    auto g = proxy_grad_wrt_distance(dmat, 1, n_cat, {2}, 6.0, 12.0);
    CHECK(g[2] == doctest::Approx(6.0 / n_cat).epsilon(1e-12));
  }
  SUBCASE("singleton negative set: gradient is -beta/|H|") {
    // two voxels: for category 0 the second voxel is the only negative
    std::vector<double> dmat(2 * n_cat, 0.5);
    auto g = proxy_grad_wrt_distance(dmat, 2, n_cat, {0, 1}, 6.0, 12.0);
    CHECK(g[1 * n_cat + 0] == doctest::Approx(-12.0 / n_cat).epsilon(1e-12));
  }
  SUBCASE("positive branches sum to alpha/|H| and negative to -beta/|H| per category") {
    Rng rng(9);
    const int n = 40;
    std::vector<double> dmat(n * n_cat);
    for (auto& d : dmat) d = rng.uniform();
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(4));
    auto g = proxy_grad_wrt_distance(dmat, n, n_cat, labels, 6.0, 12.0);
    for (int s = 0; s < n_cat; ++s) {
      double pos_sum = 0, neg_sum = 0;
      int pos_n = 0, neg_n = 0;
      for (int v = 0; v < n; ++v) {
        if (labels[v] == s) {
          pos_sum += g[v * n_cat + s];
          pos_n++;
        } else {
          neg_sum += g[v * n_cat + s];
          neg_n++;
          CHECK(g[v * n_cat + s] < 0.0);  // every negative voxel contributes
        }
      }
      if (pos_n > 0) CHECK(pos_sum == doctest::Approx(6.0 / n_cat).epsilon(1e-9));
      if (neg_n > 0) CHECK(neg_sum == doctest::Approx(-12.0 / n_cat).epsilon(1e-9));
    }
  }
  SUBCASE("matches central finite differences of the loss") {
    Rng rng(13);
    const int n = 12;
    std::vector<double> dmat(n * n_cat);
    for (auto& d : dmat) d = rng.uniform();
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_index(n_cat));
    auto g = proxy_grad_wrt_distance(dmat, n, n_cat, labels, 6.0, 12.0);
    // fourth-order central stencil keeps roundoff and truncation both small
    const double h = 3e-4;
    double err2 = 0, norm2 = 0;
    for (size_t e = 0; e < dmat.size(); ++e) {
      auto at = [&](double delta) {
        auto d2 = dmat;
        d2[e] += delta;
        return proxy_loss_from_distances(d2, n, n_cat, labels, 6.0, 12.0);
      };
      double fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      err2 += (fd - g[e]) * (fd - g[e]);
      norm2 += g[e] * g[e];
    }
    CHECK(std::sqrt(err2 / norm2) < 1e-6);
  }
}

TEST_CASE("tape proxy loss agrees with the plain route and Eq-9 oracle") {
  Tape tape;
  const int n = 15, n_cat = 9;
  Rng rng(21);
  std::vector<double> logits_v(n * n_cat), bank_v(n_cat * n_cat);
  for (auto& v : logits_v) v = rng.normal();
  for (auto& v : bank_v) v = 0.1 * rng.normal();
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_index(n_cat));

  auto logits = tape.tensor({n, n_cat}, true);
  logits->val = logits_v;
  auto bank = tape.tensor({n_cat, n_cat}, true);
  bank->val = bank_v;

  auto dmat = proxy_distance_matrix(tape, logits, bank);
  // distance entries match the scalar hellinger of the softmaxed vectors
  for (int v = 0; v < n; ++v) {
    auto pv = to_distribution(std::vector<double>(logits_v.begin() + v * n_cat,
                                                  logits_v.begin() + (v + 1) * n_cat));
    for (int s = 0; s < n_cat; ++s) {
      auto ps = to_distribution(std::vector<double>(bank_v.begin() + s * n_cat,
                                                    bank_v.begin() + (s + 1) * n_cat));
      CHECK(dmat->val[v * n_cat + s] == doctest::Approx(hellinger(pv, ps)).epsilon(1e-9));
    }
  }

  auto loss = proxy_loss_from_distance_tensor(tape, dmat, labels, 6.0, 12.0);
  double plain = proxy_loss_from_distances(
      std::vector<double>(dmat->val.begin(), dmat->val.end()), n, n_cat, labels, 6.0, 12.0);
  CHECK(loss->val[0] == doctest::Approx(plain).epsilon(1e-12));

  // the tape gradient w.r.t. the distance matrix is exactly Eq. 9
  tape.backward(loss);
  auto g = proxy_grad_wrt_distance(std::vector<double>(dmat->val.begin(), dmat->val.end()), n,
                                   n_cat, labels, 6.0, 12.0);
  for (size_t e = 0; e < g.size(); ++e)
    CHECK(dmat->grad[e] == doctest::Approx(g[e]).epsilon(1e-9));
}

TEST_CASE("proxy loss is permutation invariant in voxel order") {
  const int n = 25, n_cat = 9;
  Rng rng(33);
  std::vector<double> dmat(n * n_cat);
  for (auto& d : dmat) d = rng.uniform();
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_index(5));
  double base = proxy_loss_from_distances(dmat, n, n_cat, labels, 6.0, 12.0);

  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  std::vector<double> dmat_p(n * n_cat);
  std::vector<int> labels_p(n);
  for (int v = 0; v < n; ++v) {
    labels_p[v] = labels[perm[v]];
    for (int s = 0; s < n_cat; ++s) dmat_p[v * n_cat + s] = dmat[perm[v] * n_cat + s];
  }
  CHECK(proxy_loss_from_distances(dmat_p, n, n_cat, labels_p, 6.0, 12.0) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("stratified subsampling") {
  std::vector<int> labels;
  for (int i = 0; i < 1000; ++i) labels.push_back(0);
  for (int i = 0; i < 50; ++i) labels.push_back(3);
  labels.push_back(7);  // single-voxel category

  auto keep = stratified_subsample(labels, 64, 99);
  CHECK(keep.size() <= 64);
  std::set<int> kept_cats;
  for (auto i : keep) kept_cats.insert(labels[i]);
  CHECK(kept_cats == std::set<int>{0, 3, 7});
  auto keep2 = stratified_subsample(labels, 64, 99);
  CHECK(keep == keep2);  // deterministic
  auto all = stratified_subsample(labels, 0, 1);
  CHECK(all.size() == labels.size());
}

TEST_CASE("cross entropy and lovasz on perfect and uniform predictions") {
  Tape tape;
  const int n = 12, c = 9;
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i % c;

  SUBCASE("perfect one-hot predictions drive both to zero") {
    auto logits = tape.tensor({n, c}, false);
    for (int i = 0; i < n; ++i) logits->val[i * c + labels[i]] = 100.0;
    auto ce = tape.cross_entropy_mean(logits, labels);
    CHECK(ce->val[0] < 1e-12);
    auto ls = lovasz_softmax_loss(tape, tape.softmax_rows(logits), labels);
    CHECK(ls->val[0] < 1e-12);
  }
  SUBCASE("uniform predictions cost ln(9) in cross entropy") {
    auto logits = tape.tensor({n, c}, false);
    auto ce = tape.cross_entropy_mean(logits, labels);
    CHECK(ce->val[0] == doctest::Approx(std::log(9.0)).epsilon(1e-12));
  }
}

TEST_CASE("scene-class affinity losses on a two-voxel toy grid") {
  // two voxels, three categories (0 = empty): gt = {1, 0}
  // probs: voxel0 = (0.2, 0.7, 0.1), voxel1 = (0.6, 0.3, 0.1)
  Tape tape;
  auto probs = tape.tensor({2, 3}, false);
  probs->val = {0.2, 0.7, 0.1, 0.6, 0.3, 0.1};
  std::vector<int> labels = {1, 0};

  // geometric split: p_occ = (0.8, 0.4), gt occupied = (1, 0)
  //   precision = 0.8/1.2, recall = 0.8/1, specificity = 0.6/1
  double want_geo =
      -std::log(0.8 / 1.2) - std::log(0.8 / 1.0) - std::log(0.6 / 1.0);
  auto geo = scal_loss_geometric(tape, probs, labels);
  CHECK(geo->val[0] == doctest::Approx(want_geo).epsilon(1e-12));

  // semantic: only category 1 is present; p_1 = (0.7, 0.3)
  //   precision = 0.7/1.0, recall = 0.7/1, specificity = 0.7/1
  double want_sem = -std::log(0.7 / 1.0) - std::log(0.7 / 1.0) - std::log(0.7 / 1.0);
  auto sem = scal_loss_semantic(tape, probs, labels);
  CHECK(sem->val[0] == doctest::Approx(want_sem).epsilon(1e-12));
}

TEST_CASE("scal losses differentiate") {
  Tape tape;
  Rng rng(55);
  auto logits = tape.tensor({10, 4}, true);
  for (auto& v : logits->val) v = rng.normal();
  std::vector<int> labels = {0, 1, 2, 3, 1, 1, 0, 2, 3, 0};
  auto probs = tape.softmax_rows(logits);
  auto loss = tape.add(scal_loss_geometric(tape, probs, labels),
                       scal_loss_semantic(tape, probs, labels));
  tape.backward(loss);

  const double h = 1e-6;
  for (int e : {0, 7, 13, 25, 39}) {
    double keep = logits->val[e];
    auto eval = [&](double x) {
      Tape t2;
      auto lg = t2.tensor({10, 4}, false);
      lg->val = logits->val;
      lg->val[e] = x;
      auto pr = t2.softmax_rows(lg);
      return t2.add(scal_loss_geometric(t2, pr, labels), scal_loss_semantic(t2, pr, labels))
          ->val[0];
    };
    double fd = (eval(keep + h) - eval(keep - h)) / (2 * h);
    CHECK(std::abs(fd - logits->grad[e]) / std::max({std::abs(fd), 1e-8}) < 1e-5);
  }
}
