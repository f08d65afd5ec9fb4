#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmah/retrieval.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cmah;
using namespace cmah::retrieval;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

RowMat rand_signs(int n, int k, Rng& rng) {
  RowMat m(n, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform01() < 0.5 ? -1.0 : 1.0;
  return m;
}

std::vector<uint32_t> rand_labels(int n, int classes, Rng& rng) {
  std::vector<uint32_t> l(n);
  for (auto& v : l) v = static_cast<uint32_t>(rng.uniform_int(classes));
  return l;
}

CodeDatabase rand_db(int n, int k, int classes, Rng& rng, Modality m = Modality::image) {
  return CodeDatabase::from_sign_rows(rand_signs(n, k, rng), m, rand_labels(n, classes, rng));
}

// Distance straight off the sign matrices, no packing involved.
int dist_oracle(const RowMat& a, Eigen::Index i, const RowMat& b, Eigen::Index j) {
  int d = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) d += a(i, c) != b(j, c) ? 1 : 0;
  return d;
}

// Full ranking as (dist, id) pairs sorted the obvious way.
RankedResult rank_oracle(const RowMat& all, const RowMat& q, Eigen::Index qi, int topk,
                         int64_t exclude) {
  std::vector<std::pair<int, int64_t>> order;
  for (Eigen::Index j = 0; j < all.rows(); ++j) {
    if (j == exclude) continue;
    order.emplace_back(dist_oracle(q, qi, all, j), j);
  }
  std::sort(order.begin(), order.end());
  RankedResult out;
  for (size_t r = 0; r < order.size() && r < static_cast<size_t>(topk); ++r) {
    out.push_back({order[r].second, order[r].first});
  }
  return out;
}

// Definitional mAP: rank every gallery entry per query, sum precision at the
// relevant ranks, normalize by min(k, R_total), average the queries that have
// anything relevant at all. Returns nullopt when no query does.
std::optional<Scalar> map_oracle(const RowMat& q, const std::vector<uint32_t>& ql, const RowMat& g,
                                 const std::vector<uint32_t>& gl, int k, bool exclude_same) {
  Scalar total = 0.0;
  int used = 0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const int64_t exclude = exclude_same && i < g.rows() ? static_cast<int64_t>(i) : -1;
    int64_t r_total = 0;
    for (Eigen::Index j = 0; j < g.rows(); ++j) {
      if (j != exclude && gl[j] == ql[i]) ++r_total;
    }
    if (r_total == 0) continue;
    RankedResult top = rank_oracle(g, q, i, k, exclude);
    int hits = 0;
    Scalar ap = 0.0;
    for (size_t r = 0; r < top.size(); ++r) {
      if (gl[top[r].id] == ql[i]) {
        ++hits;
        ap += static_cast<Scalar>(hits) / static_cast<Scalar>(r + 1);
      }
    }
    total += ap / static_cast<Scalar>(std::min<int64_t>(k, r_total));
    ++used;
  }
  if (used == 0) return std::nullopt;
  return total / used;
}

}  // namespace

TEST_SUITE_BEGIN("retrieval");

TEST_CASE("pack pins: all +1 is a solid low word, all -1 is zero") {
  Array plus = Array::Constant(16, 1.0);
  auto wp = pack(plus, 16);
  REQUIRE(wp.size() == 1);
  CHECK(wp[0] == 0xFFFFu);

  Array minus = Array::Constant(16, -1.0);
  auto wm = pack(minus, 16);
  REQUIRE(wm.size() == 1);
  CHECK(wm[0] == 0u);

  Array one = Array::Constant(16, -1.0);
  one[0] = 1.0;
  CHECK(pack(one, 16)[0] == 1u);
  one[0] = -1.0;
  one[15] = 1.0;
  CHECK(pack(one, 16)[0] == 0x8000u);
}

TEST_CASE("pack/unpack round-trips random sign vectors, including multi-word widths") {
  Rng rng(401);
  for (int k : {1, 16, 63, 64, 65, 100, 128}) {
    for (int rep = 0; rep < 20; ++rep) {
      Array code(k);
      for (int j = 0; j < k; ++j) code[j] = rng.uniform01() < 0.5 ? -1.0 : 1.0;
      auto words = pack(code, k);
      CHECK(static_cast<int>(words.size()) == (k + 63) / 64);
      Array back = unpack(words.data(), k);
      CHECK(cmah::test::bits_equal(code, back));
      // bits at k and beyond stay clear
      if (k % 64 != 0) CHECK((words.back() >> (k % 64)) == 0u);
    }
  }
}

TEST_CASE("pack rejects non-sign values and size mismatches") {
  Array bad = Array::Constant(8, 1.0);
  bad[3] = 0.0;
  CHECK_THROWS_AS(pack(bad, 8), std::invalid_argument);
  bad[3] = 0.5;
  CHECK_THROWS_AS(pack(bad, 8), std::invalid_argument);
  Array ok = Array::Constant(8, 1.0);
  CHECK_THROWS_AS(pack(ok, 9), std::invalid_argument);
  CHECK_THROWS_AS(pack(ok, 0), std::invalid_argument);
}

TEST_CASE("hamming pins and per-bit oracle") {
  Rng rng(402);
  for (int k : {16, 64, 100}) {
    const int words = (k + 63) / 64;
    for (int rep = 0; rep < 40; ++rep) {
      Array a(k), b(k);
      for (int j = 0; j < k; ++j) {
        a[j] = rng.uniform01() < 0.5 ? -1.0 : 1.0;
        b[j] = rng.uniform01() < 0.5 ? -1.0 : 1.0;
      }
      auto wa = pack(a, k), wb = pack(b, k);
      int expect = 0;
      for (int j = 0; j < k; ++j) expect += a[j] != b[j] ? 1 : 0;
      CHECK(hamming(wa.data(), wb.data(), words) == expect);
      CHECK(hamming(wa.data(), wa.data(), words) == 0);
      auto wc = pack((-a).eval(), k);
      CHECK(hamming(wa.data(), wc.data(), words) == k);
    }
  }
}

TEST_CASE("hamming is a metric: symmetry and triangle inequality on random triples") {
  Rng rng(403);
  const int k = 48, words = 1;
  for (int rep = 0; rep < 100; ++rep) {
    uint64_t mask = k == 64 ? ~uint64_t{0} : (uint64_t{1} << k) - 1;
    uint64_t a = (static_cast<uint64_t>(rng.uniform_int(1 << 24)) << 24 |
                  static_cast<uint64_t>(rng.uniform_int(1 << 24))) &
                 mask;
    uint64_t b = (static_cast<uint64_t>(rng.uniform_int(1 << 24)) << 24 |
                  static_cast<uint64_t>(rng.uniform_int(1 << 24))) &
                 mask;
    uint64_t c = (static_cast<uint64_t>(rng.uniform_int(1 << 24)) << 24 |
                  static_cast<uint64_t>(rng.uniform_int(1 << 24))) &
                 mask;
    const int ab = hamming(&a, &b, words);
    const int ba = hamming(&b, &a, words);
    const int ac = hamming(&a, &c, words);
    const int cb = hamming(&c, &b, words);
    CHECK(ab == ba);
    CHECK(ab <= ac + cb);
    CHECK(hamming(&a, &a, words) == 0);
    if (a != b) CHECK(ab > 0);
  }
}

TEST_CASE("from_sign_rows validates entries and label counts") {
  Rng rng(404);
  RowMat rows = rand_signs(4, 16, rng);
  RowMat bad = rows;
  bad(2, 5) = 0.25;
  CHECK_THROWS_AS(CodeDatabase::from_sign_rows(bad, Modality::image), std::invalid_argument);
  CHECK_THROWS_AS(CodeDatabase::from_sign_rows(rows, Modality::image, {1u, 2u}),
                  std::invalid_argument);

  auto db = CodeDatabase::from_sign_rows(rows, Modality::point, {3u, 1u, 4u, 1u});
  CHECK(db.k() == 16);
  CHECK(db.count() == 4);
  CHECK(db.modality() == Modality::point);
  CHECK(db.labeled());
  CHECK(db.label(2) == 4u);
  for (int i = 0; i < 4; ++i) {
    CHECK(cmah::test::bits_equal(db.unpack_row(i), rows.row(i).transpose().array()));
  }

  auto plain = CodeDatabase::from_sign_rows(rows, Modality::image);
  CHECK_FALSE(plain.labeled());
  CHECK_THROWS_AS(plain.label(0), UsageError);
}

TEST_CASE("search pins: exact copy ranks first, full scan when topk exceeds count") {
  Rng rng(405);
  RowMat rows = rand_signs(12, 32, rng);
  auto db = CodeDatabase::from_sign_rows(rows, Modality::image);
  auto q = pack(rows.row(7).transpose().array(), 32);

  auto top = search(q.data(), db, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].id == 7);
  CHECK(top[0].dist == 0);

  auto full = search(q.data(), db, 1000);
  CHECK(full.size() == 12);
  for (size_t r = 1; r < full.size(); ++r) {
    CHECK(full[r - 1].dist <= full[r].dist);
    if (full[r - 1].dist == full[r].dist) CHECK(full[r - 1].id < full[r].id);
  }

  auto without = search(q.data(), db, 1000, 7);
  CHECK(without.size() == 11);
  for (const auto& e : without) CHECK(e.id != 7);
}

TEST_CASE("ties break by ascending id in both search paths") {
  // Four identical codes: every distance ties, order must be 0,1,2,3.
  RowMat rows = RowMat::Constant(4, 16, 1.0);
  auto db = CodeDatabase::from_sign_rows(rows, Modality::image);
  Array q = Array::Constant(16, -1.0);
  auto wq = pack(q, 16);
  auto fast = search(wq.data(), db, 4);
  auto ref = search_reference(wq.data(), db, 4);
  REQUIRE(fast.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(fast[i].id == i);
    CHECK(fast[i].dist == 16);
  }
  CHECK(fast == ref);
}

TEST_CASE("fast search, per-bit reference and rank oracle agree on 120 random instances") {
  Rng rng(406);
  for (int inst = 0; inst < 120; ++inst) {
    const int n = 1 + rng.uniform_int(40);
    const int ks[] = {8, 16, 24, 64, 100};
    const int k = ks[rng.uniform_int(5)];
    const int topk = 1 + rng.uniform_int(n + 3);
    RowMat rows = rand_signs(n, k, rng);
    RowMat qrow = rand_signs(1, k, rng);
    const int64_t exclude = rng.uniform01() < 0.3 ? rng.uniform_int(n) : -1;
    auto db = CodeDatabase::from_sign_rows(rows, Modality::point);
    auto wq = pack(qrow.row(0).transpose().array(), k);

    auto fast = search(wq.data(), db, topk, exclude);
    auto ref = search_reference(wq.data(), db, topk, exclude);
    auto want = rank_oracle(rows, qrow, 0, topk, exclude);
    CHECK(fast == ref);
    CHECK(fast == want);
  }
}

TEST_CASE("fast and reference search rank a 1000x64 database identically for 100 queries") {
  Rng rng(407);
  RowMat rows = rand_signs(1000, 64, rng);
  auto db = CodeDatabase::from_sign_rows(rows, Modality::image);
  RowMat queries = rand_signs(100, 64, rng);
  for (int i = 0; i < 100; ++i) {
    auto wq = pack(queries.row(i).transpose().array(), 64);
    auto fast = search(wq.data(), db, 50);
    auto ref = search_reference(wq.data(), db, 50);
    REQUIRE(fast.size() == 50);
    CHECK(fast == ref);
  }
}

TEST_CASE("map_at_k pins") {
  Rng rng(408);

  // Everything relevant and gallery at least k deep: perfect score.
  RowMat g = rand_signs(30, 16, rng);
  RowMat q = rand_signs(5, 16, rng);
  auto gal = CodeDatabase::from_sign_rows(g, Modality::image, std::vector<uint32_t>(30, 7u));
  auto que = CodeDatabase::from_sign_rows(q, Modality::point, std::vector<uint32_t>(5, 7u));
  EvalOptions opt;
  opt.k = 10;
  opt.exclude_same_index = false;
  CHECK(map_at_k(que, gal, opt) == doctest::Approx(1.0).epsilon(1e-12));

  // Single relevant entry at rank 2 with k=2: AP = (1/2)/min(2,1) = 1/2.
  RowMat g2(3, 8);
  g2.row(0) << 1, 1, 1, 1, 1, 1, 1, 1;
  g2.row(1) << -1, 1, 1, 1, 1, 1, 1, 1;
  g2.row(2) << -1, -1, -1, -1, -1, -1, -1, -1;
  RowMat q2(1, 8);
  q2.row(0) << 1, 1, 1, 1, 1, 1, 1, 1;
  auto gal2 = CodeDatabase::from_sign_rows(g2, Modality::image, {9u, 5u, 9u});
  auto que2 = CodeDatabase::from_sign_rows(q2, Modality::point, {5u});
  EvalOptions opt2;
  opt2.k = 2;
  opt2.exclude_same_index = false;
  CHECK(map_at_k(que2, gal2, opt2) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("aligned identical sets: self-exclusion controls whether the trivial match counts") {
  Rng rng(409);
  RowMat rows = rand_signs(10, 32, rng);
  std::vector<uint32_t> distinct(10);
  for (int i = 0; i < 10; ++i) distinct[i] = static_cast<uint32_t>(i);
  auto a = CodeDatabase::from_sign_rows(rows, Modality::image, distinct);
  auto b = CodeDatabase::from_sign_rows(rows, Modality::point, distinct);

  EvalOptions keep;
  keep.exclude_same_index = false;
  CHECK(map_at_k(a, b, keep) == doctest::Approx(1.0).epsilon(1e-12));

  // With exclusion on, each query's only relevant entry is its own row, so no
  // query has anything left to find.
  EvalOptions drop;
  CHECK_THROWS_AS(map_at_k(a, b, drop), UsageError);
}

TEST_CASE("map_at_k rejects unlabeled inputs, width mismatches and bad k") {
  Rng rng(410);
  auto labeled = rand_db(6, 16, 3, rng);
  auto other = rand_db(6, 32, 3, rng);
  auto bare = CodeDatabase::from_sign_rows(rand_signs(6, 16, rng), Modality::image);
  EvalOptions opt;
  CHECK_THROWS_AS(map_at_k(bare, labeled, opt), UsageError);
  CHECK_THROWS_AS(map_at_k(labeled, bare, opt), UsageError);
  CHECK_THROWS_AS(map_at_k(labeled, other, opt), UsageError);
  EvalOptions bad;
  bad.k = 0;
  CHECK_THROWS_AS(map_at_k(labeled, labeled, bad), UsageError);
}

TEST_CASE("map_at_k matches the definitional oracle on 100 random instances") {
  Rng rng(411);
  int checked = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int nq = 1 + rng.uniform_int(15);
    const int ng = 1 + rng.uniform_int(40);
    const int k = 8 * (1 + rng.uniform_int(3));
    const int classes = 1 + rng.uniform_int(5);
    EvalOptions opt;
    opt.k = 1 + rng.uniform_int(50);
    opt.exclude_same_index = rng.uniform01() < 0.5;
    RowMat qr = rand_signs(nq, k, rng), gr = rand_signs(ng, k, rng);
    auto ql = rand_labels(nq, classes, rng), gl = rand_labels(ng, classes, rng);
    auto que = CodeDatabase::from_sign_rows(qr, Modality::point, ql);
    auto gal = CodeDatabase::from_sign_rows(gr, Modality::image, gl);

    auto want = map_oracle(qr, ql, gr, gl, opt.k, opt.exclude_same_index);
    if (!want) {
      CHECK_THROWS_AS(map_at_k(que, gal, opt), UsageError);
      continue;
    }
    const Scalar got = map_at_k(que, gal, opt);
    CHECK(got == doctest::Approx(*want).epsilon(1e-9));
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
    ++checked;
  }
  CHECK(checked >= 80);  // the degenerate draws should stay rare
}

TEST_CASE("precision_curve pins and shape") {
  Rng rng(412);
  RowMat g = rand_signs(20, 16, rng);
  RowMat q = rand_signs(4, 16, rng);
  auto all7 = std::vector<uint32_t>(20, 7u);
  auto gal = CodeDatabase::from_sign_rows(g, Modality::image, all7);
  auto que = CodeDatabase::from_sign_rows(q, Modality::point, std::vector<uint32_t>(4, 7u));
  auto miss = CodeDatabase::from_sign_rows(q, Modality::point, std::vector<uint32_t>(4, 8u));

  auto curve = precision_curve(que, gal, {1, 5, 10}, false);
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].first == 1);
  CHECK(curve[1].first == 5);
  CHECK(curve[2].first == 10);
  for (const auto& [k, p] : curve) CHECK(p == doctest::Approx(1.0).epsilon(1e-12));

  for (const auto& [k, p] : precision_curve(miss, gal, {1, 5, 10}, false)) {
    CHECK(p == doctest::Approx(0.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(precision_curve(que, gal, {}, false), UsageError);
  CHECK_THROWS_AS(precision_curve(que, gal, {0}, false), UsageError);
}

TEST_CASE("precision at k sits near chance for random codes with balanced labels") {
  Rng rng(413);
  const int classes = 4;
  auto gal = rand_db(400, 16, classes, rng);
  auto que = rand_db(100, 16, classes, rng, Modality::point);
  auto curve = precision_curve(que, gal, {50}, false);
  REQUIRE(curve.size() == 1);
  // 100 queries x 50 slots of Bernoulli(1/4): sigma ~ 0.006, allow 8 of them.
  CHECK(curve[0].second == doctest::Approx(0.25).epsilon(0.2));
  CHECK(std::abs(curve[0].second - 0.25) < 0.05);
}

TEST_CASE("threaded evaluation returns the same numbers as single-threaded") {
  Rng rng(420);
  auto gal = rand_db(300, 32, 4, rng);
  auto que = rand_db(60, 32, 4, rng, Modality::point);
  EvalOptions opt;
  opt.k = 25;
  opt.exclude_same_index = false;
  const Scalar serial = map_at_k(que, gal, opt);
  const auto curve1 = precision_curve(que, gal, {5, 25}, false);

  setenv("CMAH_THREADS", "4", 1);
  const Scalar threaded = map_at_k(que, gal, opt);
  const auto curve4 = precision_curve(que, gal, {5, 25}, false);
  unsetenv("CMAH_THREADS");

  CHECK(serial == threaded);  // bitwise, the reduction order is fixed
  REQUIRE(curve1.size() == curve4.size());
  for (size_t i = 0; i < curve1.size(); ++i) {
    CHECK(curve1[i].first == curve4[i].first);
    CHECK(curve1[i].second == curve4[i].second);
  }
}

TEST_CASE("code files round-trip byte-identically and reload equal") {
  Rng rng(414);
  for (int k : {16, 64, 100}) {
    auto db = rand_db(37, k, 5, rng, Modality::point);
    const std::string p1 = cmah::test::temp_path("codes_a.bin");
    const std::string p2 = cmah::test::temp_path("codes_b.bin");
    db.save(p1);
    auto back = CodeDatabase::load(p1);
    CHECK(back.k() == db.k());
    CHECK(back.count() == db.count());
    CHECK(back.modality() == db.modality());
    CHECK(back.words() == db.words());
    CHECK(back.labels() == db.labels());
    back.save(p2);
    CHECK(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
  }

  // Unlabeled and empty databases are valid files too.
  auto bare = CodeDatabase::from_sign_rows(rand_signs(3, 16, rng), Modality::image);
  const std::string p = cmah::test::temp_path("codes_bare.bin");
  bare.save(p);
  auto back = CodeDatabase::load(p);
  CHECK_FALSE(back.labeled());
  CHECK(back.words() == bare.words());
  std::remove(p.c_str());
}

TEST_CASE("code file loader rejects corruption") {
  Rng rng(415);
  auto db = rand_db(5, 20, 3, rng);
  const std::string good = cmah::test::temp_path("codes_good.bin");
  db.save(good);
  const std::string raw = slurp(good);

  auto write_variant = [&](const std::string& bytes) {
    const std::string p = cmah::test::temp_path("codes_bad.bin");
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.close();
    return p;
  };

  std::string wrong_magic = raw;
  wrong_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(CodeDatabase::load(write_variant(wrong_magic)),
                       doctest::Contains("CMAHCODE"), FormatError);

  CHECK_THROWS_AS(CodeDatabase::load(write_variant(raw.substr(0, 30))), FormatError);
  CHECK_THROWS_AS(CodeDatabase::load(write_variant(raw + 'x')), FormatError);

  // k = 20 leaves 44 dead bits per word; setting one must be caught.
  std::string stray = raw;
  stray[22 + 3] = static_cast<char>(0x01);  // header is 22 bytes, bit 24 of word 0
  CHECK_THROWS_WITH_AS(CodeDatabase::load(write_variant(stray)),
                       doctest::Contains("beyond"), FormatError);

  CHECK_THROWS_AS(CodeDatabase::load(cmah::test::temp_path("codes_missing.bin")), FormatError);
  std::remove(good.c_str());
  std::remove(cmah::test::temp_path("codes_bad.bin").c_str());
}

TEST_SUITE_END();
