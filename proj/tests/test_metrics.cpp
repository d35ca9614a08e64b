#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>

#include "oracles.hpp"
#include "scd/metrics.hpp"
#include "scd/rng.hpp"

using namespace scd;

namespace {

// The worked 3-type example used throughout: rows = predicted, cols = true.
ConfusionMatrix worked_example() {
  ConfusionMatrix q(3);
  const std::int64_t rows[3][3] = {{50, 2, 3}, {4, 10, 1}, {6, 0, 24}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) q.at(i, j) = rows[i][j];
  return q;
}

ConfusionMatrix collapse_example() {
  ConfusionMatrix q(3);
  q.at(0, 0) = 50;
  q.at(0, 1) = 30;
  q.at(0, 2) = 20;
  return q;
}

std::vector<std::vector<double>> to_dense(const ConfusionMatrix& q) {
  std::vector<std::vector<double>> d(static_cast<std::size_t>(q.num_types()),
                                     std::vector<double>(static_cast<std::size_t>(q.num_types())));
  for (int i = 0; i < q.num_types(); ++i)
    for (int j = 0; j < q.num_types(); ++j)
      d[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          static_cast<double>(q.at(i, j));
  return d;
}

// Random blackened pair maps: each pixel is either (0,0) or a nonzero pair.
void random_pair_maps(Rng& rng, int pixels, int n_classes, std::vector<int>& l1,
                      std::vector<int>& l2, double change_p = 0.4) {
  l1.assign(static_cast<std::size_t>(pixels), 0);
  l2.assign(static_cast<std::size_t>(pixels), 0);
  for (int p = 0; p < pixels; ++p) {
    if (rng.bernoulli(change_p)) {
      l1[static_cast<std::size_t>(p)] = rng.int_range(1, n_classes);
      l2[static_cast<std::size_t>(p)] = rng.int_range(1, n_classes);
    }
  }
}

}  // namespace

TEST_CASE("pair_to_class bijection") {
  ChangeTypeIndex idx(6);
  CHECK(idx.pair_to_class(0, 0) == 0);
  CHECK(idx.pair_to_class(1, 1) == 1);
  CHECK(idx.pair_to_class(6, 6) == 36);
  CHECK(idx.num_types() == 37);
  SECTION("invertible everywhere") {
    for (int t = 0; t < idx.num_types(); ++t) {
      const auto [l1, l2] = idx.class_to_pair(t);
      CHECK(idx.pair_to_class(l1, l2) == t);
    }
  }
  SECTION("mixed pair rejected") {
    CHECK_THROWS_AS(idx.pair_to_class(0, 3), AnnotationError);
    CHECK_THROWS_AS(idx.pair_to_class(2, 0), AnnotationError);
  }
}

TEST_CASE("accumulate") {
  ChangeTypeIndex idx(2);
  SECTION("perfect agreement fills the diagonal") {
    Rng rng(20);
    std::vector<int> l1, l2;
    random_pair_maps(rng, 100, 2, l1, l2);
    ConfusionMatrix q(idx.num_types());
    accumulate(q, idx, l1, l2, l1, l2);
    std::int64_t diag = 0;
    for (int i = 0; i < q.num_types(); ++i) diag += q.at(i, i);
    CHECK(diag == 100);
    CHECK(q.total() == 100);
  }
  SECTION("collapse prediction puts all mass in row 0") {
    std::vector<int> zeros(100, 0);
    std::vector<int> g1(100, 0), g2(100, 0);
    for (int p = 0; p < 40; ++p) {
      g1[static_cast<std::size_t>(p)] = 1;
      g2[static_cast<std::size_t>(p)] = 2;
    }
    ConfusionMatrix q(idx.num_types());
    accumulate(q, idx, zeros, zeros, g1, g2);
    CHECK(q.at(0, 0) == 60);
    const auto rows = q.row_sums();
    CHECK(rows[0] == 100);
  }
  SECTION("random maps match a brute-force pixel loop") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
      const int n = rng.int_range(2, 6);
      ChangeTypeIndex index(n);
      std::vector<int> p1, p2, g1, g2;
      random_pair_maps(rng, 32 * 32, n, p1, p2);
      random_pair_maps(rng, 32 * 32, n, g1, g2);
      ConfusionMatrix q(index.num_types());
      accumulate(q, index, p1, p2, g1, g2);
      // independent counting
      std::vector<std::int64_t> ref(static_cast<std::size_t>(index.num_types()) *
                                        index.num_types(),
                                    0);
      for (std::size_t p = 0; p < p1.size(); ++p) {
        const int pi = oracle::brute_pair_class(p1[p], p2[p], n);
        const int gi = oracle::brute_pair_class(g1[p], g2[p], n);
        ref[static_cast<std::size_t>(pi) * index.num_types() + static_cast<std::size_t>(gi)]++;
      }
      for (int i = 0; i < index.num_types(); ++i)
        for (int j = 0; j < index.num_types(); ++j)
          CHECK(q.at(i, j) == ref[static_cast<std::size_t>(i) * index.num_types() +
                                  static_cast<std::size_t>(j)]);
    }
  }
  SECTION("extent mismatch") {
    ConfusionMatrix q(idx.num_types());
    std::vector<int> a(4, 0), b(5, 0);
    CHECK_THROWS_AS(accumulate(q, idx, a, a, b, b), ShapeError);
  }
}

TEST_CASE("merge is a commutative monoid") {
  Rng rng(22);
  ChangeTypeIndex idx(3);
  auto random_q = [&]() {
    ConfusionMatrix q(idx.num_types());
    for (int i = 0; i < q.num_types(); ++i)
      for (int j = 0; j < q.num_types(); ++j) q.at(i, j) = rng.int_range(0, 30);
    return q;
  };
  ConfusionMatrix a = random_q(), b = random_q();
  ConfusionMatrix zero(idx.num_types());
  CHECK(merged(a, zero) == a);
  CHECK(merged(a, b) == merged(b, a));
  SECTION("tiled evaluation equals unsplit evaluation") {
    std::vector<int> p1, p2, g1, g2;
    random_pair_maps(rng, 64 * 64, 3, p1, p2);
    random_pair_maps(rng, 64 * 64, 3, g1, g2);
    ConfusionMatrix whole(idx.num_types());
    accumulate(whole, idx, p1, p2, g1, g2);
    ConfusionMatrix parts(idx.num_types());
    for (int tile = 0; tile < 4; ++tile) {
      ConfusionMatrix t(idx.num_types());
      const std::size_t lo = static_cast<std::size_t>(tile) * 1024;
      auto slice = [&](const std::vector<int>& v) {
        return std::vector<int>(v.begin() + static_cast<std::ptrdiff_t>(lo),
                                v.begin() + static_cast<std::ptrdiff_t>(lo + 1024));
      };
      accumulate(t, idx, slice(p1), slice(p2), slice(g1), slice(g2));
      parts.merge(t);
    }
    CHECK(parts == whole);
    CHECK(std::abs(sek(parts) - sek(whole)) < 1e-15);
  }
  SECTION("type count mismatch") {
    ConfusionMatrix small(5);
    CHECK_THROWS_AS(a.merge(small), ShapeError);
  }
}

TEST_CASE("worked confusion matrix values") {
  ConfusionMatrix q = worked_example();
  CHECK(oa(q) == Catch::Approx(0.84).margin(1e-12));
  CHECK(kappa(q) == Catch::Approx(0.71830985915).margin(1e-9));
  const auto [i1, i2] = iou_pair(q);
  CHECK(i1 == Catch::Approx(50.0 / 65.0).margin(1e-12));
  CHECK(i2 == Catch::Approx(0.7).margin(1e-12));
  CHECK(miou(q) == Catch::Approx(0.5 * (50.0 / 65.0 + 0.7)).margin(1e-12));
  // rho_hat 0.68, eta_hat 0.428, kappa_hat ~0.4406, SeK = e^-0.3 * kappa_hat
  CHECK(sek(q) == Catch::Approx(std::exp(-0.3) * (0.68 - 0.428) / (1.0 - 0.428)).margin(1e-12));
  SECTION("agrees with the brute-force oracle") {
    const auto m = oracle::brute_metrics_from_counts(to_dense(q));
    CHECK(oa(q) == Catch::Approx(m.oa).margin(1e-12));
    CHECK(kappa(q) == Catch::Approx(m.kappa).margin(1e-12));
    CHECK(sek(q) == Catch::Approx(m.sek).margin(1e-12));
  }
}

TEST_CASE("metric edge cases") {
  SECTION("diagonal matrix") {
    ConfusionMatrix q(3);
    q.at(0, 0) = 50;
    q.at(1, 1) = 30;
    q.at(2, 2) = 20;
    CHECK(oa(q) == 1.0);
    CHECK(kappa(q) == 1.0);
    CHECK(miou(q) == 1.0);
    CHECK(sek(q) == 1.0);  // rho_hat 1, eta_hat 0.52, IOU2 1 -> exactly 1
  }
  SECTION("collapse matrix") {
    ConfusionMatrix q = collapse_example();
    CHECK(oa(q) == 0.5);
    CHECK(iou_pair(q).second == 0.0);
    CHECK(sek(q) == 0.0);
  }
  SECTION("independent prediction has near-zero kappa") {
    Rng rng(23);
    ConfusionMatrix q(3);
    // rank-1 expected matrix: pred ~ p, gt ~ t, independent
    const double pr[3] = {0.5, 0.3, 0.2};
    const double tr[3] = {0.6, 0.1, 0.3};
    for (int s = 0; s < 100000; ++s) {
      auto draw = [&](const double* d) {
        const double u = rng.uniform();
        return u < d[0] ? 0 : (u < d[0] + d[1] ? 1 : 2);
      };
      q.add(draw(pr), draw(tr));
    }
    CHECK(std::abs(kappa(q)) < 0.05);
  }
  SECTION("empty matrix is an error") {
    ConfusionMatrix q(3);
    CHECK_THROWS_AS(oa(q), ValueError);
    CHECK_THROWS_AS(kappa(q), ValueError);
    CHECK_THROWS_AS(iou_pair(q), ValueError);
    CHECK_THROWS_AS(sek(q), ValueError);
  }
  SECTION("no change anywhere") {
    ConfusionMatrix q(3);
    q.at(0, 0) = 77;
    CHECK(iou_pair(q) == std::pair<double, double>{1.0, 1.0});
    CHECK(sek(q) == 1.0);
  }
}

TEST_CASE("oracle equivalence over random map pairs") {
  Rng rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.int_range(2, 6);
    const int side = rng.int_range(8, 64);
    ChangeTypeIndex idx(n);
    std::vector<int> p1, p2, g1, g2;
    random_pair_maps(rng, side * side, n, p1, p2, rng.uniform(0.1, 0.7));
    random_pair_maps(rng, side * side, n, g1, g2, rng.uniform(0.1, 0.7));
    ConfusionMatrix q(idx.num_types());
    accumulate(q, idx, p1, p2, g1, g2);
    const auto m = oracle::brute_metrics_from_pairs(p1, p2, g1, g2, n);
    CHECK(oa(q) == Catch::Approx(m.oa).margin(1e-12));
    CHECK(kappa(q) == Catch::Approx(m.kappa).margin(1e-12));
    const auto [i1, i2] = iou_pair(q);
    CHECK(i1 == Catch::Approx(m.iou1).margin(1e-12));
    CHECK(i2 == Catch::Approx(m.iou2).margin(1e-12));
    CHECK(miou(q) == Catch::Approx(m.miou).margin(1e-12));
    CHECK(sek(q) == Catch::Approx(m.sek).margin(1e-12));
  }
}

TEST_CASE("permutation invariance of scalar metrics") {
  Rng rng(25);
  ChangeTypeIndex idx(3);
  ConfusionMatrix q(idx.num_types());
  for (int i = 0; i < q.num_types(); ++i)
    for (int j = 0; j < q.num_types(); ++j) q.at(i, j) = rng.int_range(0, 40);
  // random permutation of indices >= 1
  std::vector<int> perm(static_cast<std::size_t>(q.num_types()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::vector<int> tail(perm.begin() + 1, perm.end());
  rng.shuffle(tail);
  std::copy(tail.begin(), tail.end(), perm.begin() + 1);
  ConfusionMatrix qp(q.num_types());
  for (int i = 0; i < q.num_types(); ++i)
    for (int j = 0; j < q.num_types(); ++j)
      qp.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]) = q.at(i, j);
  CHECK(oa(qp) == Catch::Approx(oa(q)).margin(1e-12));
  CHECK(kappa(qp) == Catch::Approx(kappa(q)).margin(1e-12));
  CHECK(iou_pair(qp).first == Catch::Approx(iou_pair(q).first).margin(1e-12));
  CHECK(iou_pair(qp).second == Catch::Approx(iou_pair(q).second).margin(1e-12));
  CHECK(miou(qp) == Catch::Approx(miou(q)).margin(1e-12));
  CHECK(sek(qp) == Catch::Approx(sek(q)).margin(1e-12));
}

TEST_CASE("metric bounds and q00 independence") {
  Rng rng(26);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix q(4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) q.at(i, j) = rng.int_range(0, 25);
    q.at(0, 0) += 1;  // keep the matrix non-empty
    CHECK(oa(q) >= 0.0);
    CHECK(oa(q) <= 1.0);
    const auto [i1, i2] = iou_pair(q);
    CHECK((i1 >= 0.0 && i1 <= 1.0));
    CHECK((i2 >= 0.0 && i2 <= 1.0));
    CHECK(miou(q) <= 1.0);
    CHECK(sek(q) <= 1.0);
    // scaling q00 by 10 pushes OA toward 1 but leaves SeK untouched
    ConfusionMatrix q10 = q;
    q10.at(0, 0) *= 10;
    if (q.total() - q.at(0, 0) > 0) {
      CHECK(oa(q10) >= oa(q));
      CHECK(sek(q10) == Catch::Approx(sek(q)).margin(1e-12));
    }
  }
}

TEST_CASE("sek variant flag") {
  ConfusionMatrix q = worked_example();
  // EntryZeroed keeps missed/hallucinated changes in eta-hat; the deleted
  // variant drops row/col 0 entirely, so the two generally differ.
  const double a = sek(q, SekVariant::EntryZeroed);
  const double b = sek(q, SekVariant::RowColDeleted);
  CHECK(a == Catch::Approx(0.3264).margin(5e-4));
  CHECK(a != b);
  // RowColDeleted: eta_hat from the 2x2 submatrix [[10,1],[0,24]]
  const double changed = 50.0;
  const double rho_hat = 34.0 / changed;
  const double eta_hat = (11.0 * 10.0 + 24.0 * 25.0) / (changed * changed);
  const double want = std::exp(0.7 - 1.0) * (rho_hat - eta_hat) / (1.0 - eta_hat);
  CHECK(b == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("categorical sek") {
  ChangeTypeIndex idx(2);
  SECTION("absent type renders null") {
    ConfusionMatrix q(idx.num_types());
    q.at(0, 0) = 10;
    q.at(1, 1) = 5;
    CHECK_FALSE(categorical_sek(q, idx.pair_to_class(2, 2)).has_value());
  }
  SECTION("perfectly predicted type scores 1") {
    ConfusionMatrix q(idx.num_types());
    q.at(0, 0) = 50;
    q.at(1, 1) = 10;
    CHECK(categorical_sek(q, 1).value() == 1.0);
  }
  SECTION("type 0 rejected") {
    ConfusionMatrix q(idx.num_types());
    q.at(0, 0) = 1;
    CHECK_THROWS_AS(categorical_sek(q, 0), ValueError);
  }
  SECTION("random matrix matches a pixel-loop collapse oracle") {
    Rng rng(27);
    const int n = 3;
    ChangeTypeIndex index(n);
    std::vector<int> p1, p2, g1, g2;
    random_pair_maps(rng, 48 * 48, n, p1, p2);
    random_pair_maps(rng, 48 * 48, n, g1, g2);
    ConfusionMatrix q(index.num_types());
    accumulate(q, index, p1, p2, g1, g2);
    for (int t = 1; t < index.num_types(); ++t) {
      // brute-force 2x2 collapse by pixel loop
      std::vector<std::vector<double>> two(2, std::vector<double>(2, 0.0));
      for (std::size_t p = 0; p < p1.size(); ++p) {
        const int pi = oracle::brute_pair_class(p1[p], p2[p], n) == t ? 1 : 0;
        const int gi = oracle::brute_pair_class(g1[p], g2[p], n) == t ? 1 : 0;
        two[static_cast<std::size_t>(pi)][static_cast<std::size_t>(gi)] += 1.0;
      }
      const auto got = categorical_sek(q, t);
      if (two[1][0] + two[1][1] + two[0][1] == 0.0) {
        CHECK_FALSE(got.has_value());
      } else {
        const auto m = oracle::brute_metrics_from_counts(two);
        CHECK(got.value() == Catch::Approx(m.sek).margin(1e-15));
      }
    }
  }
}

TEST_CASE("report rendering") {
  ChangeTypeIndex idx(2);
  Rng rng(28);
  std::vector<int> p1, p2, g1, g2;
  random_pair_maps(rng, 32 * 32, 2, p1, p2);
  random_pair_maps(rng, 32 * 32, 2, g1, g2);
  ConfusionMatrix q(idx.num_types());
  accumulate(q, idx, p1, p2, g1, g2);
  MetricReport r = report(q, idx);

  SECTION("perfect prediction gives all ones") {
    ConfusionMatrix qd(idx.num_types());
    accumulate(qd, idx, g1, g2, g1, g2);
    MetricReport rp = report(qd, idx);
    CHECK(rp.oa == 1.0);
    CHECK(rp.kappa == 1.0);
    CHECK(rp.miou == 1.0);
    CHECK(rp.sek == 1.0);
    for (const auto& [key, v] : rp.per_type_sek)
      if (v.has_value()) CHECK(*v == 1.0);
  }
  SECTION("collapse prediction reproduces the high-OA pathology") {
    // 90% unchanged scene, prediction all non-change
    std::vector<int> zeros(1000, 0);
    std::vector<int> gt1(1000, 0), gt2(1000, 0);
    for (int p = 0; p < 100; ++p) {
      gt1[static_cast<std::size_t>(p)] = 1;
      gt2[static_cast<std::size_t>(p)] = 2;
    }
    ConfusionMatrix qc(idx.num_types());
    accumulate(qc, idx, zeros, zeros, gt1, gt2);
    MetricReport rc = report(qc, idx);
    CHECK(rc.oa > 0.8);
    CHECK(rc.sek == 0.0);
  }
  SECTION("json round trip") {
    const auto j = report_to_json(r);
    MetricReport r2 = report_from_json(j);
    CHECK(report_to_json(r2) == j);
    CHECK(r2.sek == r.sek);
    CHECK(r2.matrix == r.matrix);
  }
  SECTION("csv and text renderings include the grid") {
    const std::vector<std::string> names = {"non-change", "water", "tree"};
    const auto csv = report_to_csv(r, names);
    CHECK(csv.find("water") != std::string::npos);
    CHECK(csv.find("iou2") != std::string::npos);
    const auto text = report_to_text(r, names);
    CHECK(text.find("SeK") != std::string::npos);
  }
}

TEST_CASE("oracle suite runtime stays under budget") {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(29);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.int_range(2, 6);
    ChangeTypeIndex idx(n);
    std::vector<int> p1, p2, g1, g2;
    random_pair_maps(rng, 32 * 32, n, p1, p2);
    random_pair_maps(rng, 32 * 32, n, g1, g2);
    ConfusionMatrix q(idx.num_types());
    accumulate(q, idx, p1, p2, g1, g2);
    const auto m = oracle::brute_metrics_from_pairs(p1, p2, g1, g2, n);
    REQUIRE(std::abs(sek(q) - m.sek) < 1e-12);
  }
  const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - start)
                           .count();
  CHECK(elapsed < 10000);
}
