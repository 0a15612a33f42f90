#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mnmt/metrics.hpp"
#include "oracles.hpp"

using namespace mnmt;

namespace {

std::vector<std::vector<int32_t>> random_corpus(Rng& rng, size_t segments, int vocab,
                                                int max_len) {
  std::vector<std::vector<int32_t>> out(segments);
  for (auto& seg : out) {
    seg.resize(static_cast<size_t>(rng.below(max_len + 1)));
    for (auto& t : seg) t = static_cast<int32_t>(rng.below(vocab));
  }
  return out;
}

}  // namespace

TEST_CASE("bleu trivial cases") {
  std::vector<std::vector<int32_t>> refs = {{1, 2, 3, 4, 5}, {9, 8, 7}};
  CHECK(corpus_bleu(refs, refs).score == doctest::Approx(100.0).epsilon(1e-12));
  std::vector<std::vector<int32_t>> empty_hyps = {{}, {}};
  CHECK(corpus_bleu(empty_hyps, refs).score == 0.0);
  CHECK_THROWS_AS(corpus_bleu({}, {}), contract_error);
  CHECK_THROWS_AS(corpus_bleu({{1}}, {{1}, {2}}), contract_error);
}

TEST_CASE("bleu matches the independent counting oracle on the classic example") {
  // ref "the cat sat on the mat", hyp "the cat on the mat"
  std::vector<std::vector<int32_t>> refs = {{0, 1, 2, 3, 0, 4}};
  std::vector<std::vector<int32_t>> hyps = {{0, 1, 3, 0, 4}};
  BleuReport rep = corpus_bleu(hyps, refs);
  const double oracle = oracles::brute_force_bleu(hyps, refs);
  CHECK(rep.score == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(rep.score == doctest::Approx(43.99).epsilon(1e-3));
  CHECK(rep.precisions[0] == doctest::Approx(1.0));
  CHECK(rep.precisions[1] == doctest::Approx(0.75));
  CHECK(rep.precisions[2] == doctest::Approx(1.0 / 3));
  CHECK(rep.precisions[3] == doctest::Approx(1.0 / 3));  // add-one smoothing on 0/2
  CHECK(rep.hyp_len == 5);
  CHECK(rep.ref_len == 6);
  CHECK(rep.brevity_penalty == doctest::Approx(std::exp(1.0 - 6.0 / 5.0)).epsilon(1e-12));
}

TEST_CASE("bleu equals the oracle on randomized corpora") {
  Rng rng(71);
  for (int trial = 0; trial < 60; ++trial) {
    size_t segments = 1 + static_cast<size_t>(rng.below(6));
    auto refs = random_corpus(rng, segments, 8, 10);
    auto hyps = random_corpus(rng, segments, 8, 10);
    BleuReport rep = corpus_bleu(hyps, refs);
    CHECK(rep.score == doctest::Approx(oracles::brute_force_bleu(hyps, refs)).epsilon(1e-9));
  }
}

TEST_CASE("bleu report internal identity") {
  Rng rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    auto refs = random_corpus(rng, 4, 6, 9);
    auto hyps = refs;
    // corrupt a little so precisions are interesting but nonzero
    for (auto& seg : hyps)
      if (!seg.empty() && rng.uniform() < 0.7) seg[0] = static_cast<int32_t>(rng.below(6));
    BleuReport rep = corpus_bleu(hyps, refs);
    bool all_positive = true;
    for (double p : rep.precisions) all_positive &= p > 0.0;
    if (!all_positive || rep.hyp_len == 0) continue;
    double expect = 100.0 * rep.brevity_penalty *
                    std::exp((std::log(rep.precisions[0]) + std::log(rep.precisions[1]) +
                              std::log(rep.precisions[2]) + std::log(rep.precisions[3])) /
                             4.0);
    CHECK(rep.score == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("bleu is invariant to consistent segment reordering") {
  Rng rng(79);
  auto refs = random_corpus(rng, 5, 7, 8);
  auto hyps = random_corpus(rng, 5, 7, 8);
  BleuReport a = corpus_bleu(hyps, refs);
  std::vector<size_t> perm = {3, 0, 4, 1, 2};
  std::vector<std::vector<int32_t>> hyps2, refs2;
  for (size_t i : perm) {
    hyps2.push_back(hyps[i]);
    refs2.push_back(refs[i]);
  }
  BleuReport b = corpus_bleu(hyps2, refs2);
  CHECK(a.score == doctest::Approx(b.score).epsilon(1e-12));
}

TEST_CASE("corrupting a perfect hypothesis strictly lowers the score") {
  Rng rng(83);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<int32_t>> refs;
    for (int s = 0; s < 3; ++s) {
      std::vector<int32_t> seg(static_cast<size_t>(5 + rng.below(5)));
      for (auto& t : seg) t = static_cast<int32_t>(rng.below(20));
      refs.push_back(seg);
    }
    auto hyps = refs;
    const double perfect = corpus_bleu(hyps, refs).score;
    CHECK(perfect == doctest::Approx(100.0));
    hyps[0][2] = 99;  // token absent from the reference vocabulary range
    CHECK(corpus_bleu(hyps, refs).score < perfect);
  }
}

TEST_CASE("text-mode scoring tokenizes on whitespace") {
  BleuReport rep = corpus_bleu_text({"the cat on the mat"}, {"the cat sat on the mat"});
  BleuReport ids = corpus_bleu({{0, 1, 3, 0, 4}}, {{0, 1, 2, 3, 0, 4}});
  CHECK(rep.score == doctest::Approx(ids.score).epsilon(1e-12));
}

TEST_CASE("compute_deltas arithmetic and contract") {
  auto mk = [](double pair_g, double other1, double other2, double med) {
    EvalReport r;
    r.by_direction[{"aa", "bb", "generic"}].score = pair_g;
    r.by_direction[{"bb", "aa", "generic"}].score = other1;
    r.by_direction[{"aa", "cc", "generic"}].score = other2;
    r.by_direction[{"aa", "bb", "medical"}].score = med;
    return r;
  };
  EvalReport base = mk(30, 20, 22, 5);
  CHECK(compute_deltas(base, base, "aa", "bb") == std::pair<double, double>{0.0, 0.0});
  EvalReport cur = mk(28, 19, 21, 50);
  auto [d1, d2] = compute_deltas(base, cur, "aa", "bb");
  CHECK(d1 == doctest::Approx(2.0));
  CHECK(d2 == doctest::Approx(1.0));  // medical direction excluded from delta2

  EvalReport missing = base;
  missing.by_direction.erase({"aa", "cc", "generic"});
  CHECK_THROWS_AS(compute_deltas(base, missing, "aa", "bb"), contract_error);
  CHECK_THROWS_AS(compute_deltas(base, cur, "cc", "aa"), contract_error);

  // three other directions with deltas 1,2,3 -> delta2 = 2
  EvalReport b3, c3;
  b3.by_direction[{"aa", "bb", "generic"}].score = 10;
  c3.by_direction[{"aa", "bb", "generic"}].score = 10;
  const char* codes[3][2] = {{"bb", "aa"}, {"aa", "cc"}, {"cc", "aa"}};
  for (int i = 0; i < 3; ++i) {
    b3.by_direction[{codes[i][0], codes[i][1], "generic"}].score = 20;
    c3.by_direction[{codes[i][0], codes[i][1], "generic"}].score = 20 - (i + 1);
  }
  auto [e1, e2] = compute_deltas(b3, c3, "aa", "bb");
  CHECK(e1 == doctest::Approx(0.0));
  CHECK(e2 == doctest::Approx(2.0));
}

TEST_CASE("evaluate on an untrained model is deterministic and self-consistent") {
  CorpusSpec spec;
  spec.languages = {{"xa", 1, ReorderRule::identity}, {"xb", 2, ReorderRule::swap_adjacent_pairs}};
  spec.domains = {{"generic", 0, 6, 2, 4}};
  spec.pairs = {{"xa", "xb", "generic", 0, 0, 6}, {"xb", "xa", "generic", 0, 0, 6}};
  Vocabulary vocab = build_vocabulary(spec);
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_encoder_layers = 2;
  cfg.n_decoder_layers = 1;
  cfg.ffn_dim = 16;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 10;
  auto params = init_params<float>(cfg, 3);

  std::map<Direction, Dataset> tests;
  for (const auto& pair : spec.pairs)
    tests.emplace(Direction{pair.src, pair.tgt, pair.domain},
                  generate_pair(spec, vocab, pair, "test", 6, 11));

  EvalReport a = evaluate(cfg, params, vocab, tests, 9);
  EvalReport b = evaluate(cfg, params, vocab, tests, 9);
  REQUIRE(a.by_direction.size() == 2);
  for (const auto& [dir, rep] : a.by_direction)
    CHECK(rep.score == b.by_direction.at(dir).score);
  auto [d1, d2] = compute_deltas(a, b, "xa", "xb");
  CHECK(d1 == 0.0);
  CHECK(d2 == 0.0);

  ModelConfig wrong = cfg;
  wrong.vocab_size = cfg.vocab_size + 7;
  auto wrong_params = init_params<float>(wrong, 3);
  CHECK_THROWS_AS(evaluate(wrong, wrong_params, vocab, tests, 9), config_error);
}

TEST_CASE("report CSV round trip") {
  std::filesystem::create_directories("tmp_metrics");
  std::vector<ReportRow> rows;
  ReportRow r;
  r.run_id = "runX";
  r.step = 40;
  r.direction = {"aa", "bb", "medical"};
  r.bleu.score = 61.25;
  r.bleu.precisions[0] = 0.9;
  r.bleu.precisions[1] = 0.8;
  r.bleu.precisions[2] = 0.7;
  r.bleu.precisions[3] = 0.6;
  r.bleu.brevity_penalty = 0.95;
  rows.push_back(r);
  write_report_csv("tmp_metrics/report.csv", rows);
  auto loaded = read_report_csv("tmp_metrics/report.csv");
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].run_id == "runX");
  CHECK(loaded[0].step == 40);
  CHECK(loaded[0].direction == Direction{"aa", "bb", "medical"});
  CHECK(loaded[0].bleu.score == doctest::Approx(61.25));
  CHECK(loaded[0].bleu.brevity_penalty == doctest::Approx(0.95));
}
