#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "fgmdm/corpus.hpp"
#include "fgmdm/evaluation.hpp"
#include "test_helpers.hpp"

using namespace fgmdm;
using Catch::Approx;

namespace {

Tensor gaussian_rows(Rng& rng, int n, int d) {
  Tensor t = Tensor::zeros({n, d});
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

GaussianStats stats_of(const Tensor& mean, const Tensor& cov) {
  GaussianStats s;
  s.mean = mean;
  s.cov = cov;
  s.count = 1000;
  return s;
}

Tensor identity_cov(int d) {
  Tensor c = Tensor::zeros({d, d});
  for (int i = 0; i < d; ++i) c.data[static_cast<std::size_t>(i) * d + i] = 1.0f;
  return c;
}

/// Records grouped so tests can slice held-out variations by template.
struct EvalCorpus {
  Skeleton skel;
  std::vector<DatasetRecord> all;       // 12 templates x 4 variations
  std::vector<DatasetRecord> train;     // variations 0..1 of each template
  std::vector<DatasetRecord> held_out;  // 16 unseen variations
};

EvalCorpus build_eval_corpus() {
  EvalCorpus c;
  c.skel = default_skeleton();
  const auto templates = default_templates();
  c.all = generate_dataset(c.skel, templates, 4, 913);
  const int v = 4;
  const int nt = static_cast<int>(templates.size());
  for (int ti = 0; ti < nt; ++ti) {
    c.train.push_back(c.all[static_cast<std::size_t>(ti * v + 0)]);
    c.train.push_back(c.all[static_cast<std::size_t>(ti * v + 1)]);
    c.held_out.push_back(c.all[static_cast<std::size_t>(ti * v + 2)]);
  }
  // Pad the candidate pool to 16 with a fourth variation of the held-out
  // composition templates (indices 8..11 in the default list).
  for (int ti = 8; ti < 12; ++ti)
    c.held_out.push_back(c.all[static_cast<std::size_t>(ti * v + 3)]);
  return c;
}

EvaluatorConfig fast_eval_config() {
  EvaluatorConfig cfg;
  cfg.feature_width = 67;
  cfg.d_text = 64;
  cfg.hidden = 48;
  cfg.d_eval = 24;
  cfg.batch = 12;
  cfg.steps = 500;
  cfg.lr = 1e-3;
  return cfg;
}

const EvaluatorBundle& shared_trained_evaluator() {
  static const EvaluatorBundle bundle = [] {
    const EvalCorpus corpus = build_eval_corpus();
    TextEmbedder embedder({64});
    return train_evaluator(corpus.train, embedder, fast_eval_config(), 501);
  }();
  return bundle;
}

}  // namespace

TEST_CASE("gaussian statistics match hand-computed mean and covariance") {
  // Rows (1,2), (3,4), (5,12): mean (3,6); unbiased covariance
  // [[4,10],[10,28]].
  const Tensor feats = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 12});
  const GaussianStats st = gaussian_stats(feats);
  REQUIRE(st.count == 3);
  REQUIRE_FALSE(st.shrinkage);  // n == 3 >= d + 1 == 3
  CHECK(st.mean.data[0] == Approx(3.0));
  CHECK(st.mean.data[1] == Approx(6.0));
  CHECK(st.cov.data[0] == Approx(4.0));
  CHECK(st.cov.data[1] == Approx(10.0));
  CHECK(st.cov.data[2] == Approx(10.0));
  CHECK(st.cov.data[3] == Approx(28.0));

  SECTION("fewer rows than width + 1 adds the flagged diagonal ridge") {
    const Tensor wide = Tensor::from({3, 4}, {1, 0, 0, 0,  //
                                              0, 1, 0, 0,  //
                                              0, 0, 1, 0});
    const GaussianStats ws = gaussian_stats(wide);
    REQUIRE(ws.shrinkage);
    // Without the ridge the (3,3) entry would be exactly zero.
    CHECK(ws.cov.data[15] == Approx(1e-6));
    // Off-diagonal entries are untouched by the ridge.
    CHECK(ws.cov.data[1] == Approx(-1.0 / 6.0).margin(1e-7));
  }

  SECTION("malformed inputs are rejected") {
    CHECK_THROWS_AS(gaussian_stats(Tensor::zeros({1, 4})), ContractError);
    CHECK_THROWS_AS(gaussian_stats(Tensor::zeros({4})), ContractError);
  }
}

TEST_CASE("frechet distance of identical statistics is zero") {
  Rng rng(7);
  const Tensor feats = gaussian_rows(rng, 64, 6);
  const GaussianStats st = gaussian_stats(feats);
  const double self_fid = frechet_distance(st, st);
  CHECK(self_fid >= 0.0);
  CHECK(self_fid <= 1e-6);
}

TEST_CASE("unit mean shift between identity-covariance gaussians scores one") {
  const int d = 5;
  Tensor mu_a = Tensor::zeros({1, d});
  Tensor mu_b = Tensor::zeros({1, d});
  mu_b.data[2] = 1.0f;
  const GaussianStats a = stats_of(mu_a, identity_cov(d));
  const GaussianStats b = stats_of(mu_b, identity_cov(d));
  CHECK(frechet_distance(a, b) == Approx(1.0).margin(1e-8));
}

TEST_CASE("frechet distance matches the diagonal closed form") {
  // For diagonal covariances the distance reduces to
  //   sum((mu_a - mu_b)^2) + sum(sa + sb - 2 sqrt(sa sb)).
  Rng rng(21);
  const int d = 7;
  Tensor mu_a = Tensor::zeros({1, d}), mu_b = Tensor::zeros({1, d});
  Tensor cov_a = Tensor::zeros({d, d}), cov_b = Tensor::zeros({d, d});
  double expected = 0.0;
  for (int i = 0; i < d; ++i) {
    mu_a.data[i] = static_cast<float>(rng.normal());
    mu_b.data[i] = static_cast<float>(rng.normal());
    const float sa = static_cast<float>(0.2 + rng.uniform() * 3.0);
    const float sb = static_cast<float>(0.2 + rng.uniform() * 3.0);
    cov_a.data[static_cast<std::size_t>(i) * d + i] = sa;
    cov_b.data[static_cast<std::size_t>(i) * d + i] = sb;
    const double dm = static_cast<double>(mu_a.data[i]) - mu_b.data[i];
    expected += dm * dm + sa + sb - 2.0 * std::sqrt(double(sa) * sb);
  }
  const GaussianStats a = stats_of(mu_a, cov_a);
  const GaussianStats b = stats_of(mu_b, cov_b);
  CHECK(frechet_distance(a, b) == Approx(expected).margin(1e-6));
}

TEST_CASE("frechet distance reproduces a dense reference value") {
  // Reference computed independently with a matrix square root of the
  // product S_a S_b (both formulations agree analytically): 29.930409524120.
  const int d = 5;
  const std::vector<double> mu_a = {-0.22180410920646204, 0.6488165016242814,
                                    -0.3178911946054081, -0.010978255182129314,
                                    1.6654165038518933};
  const std::vector<double> mu_b = {0.8957864342574032, -1.2026011883336214,
                                    2.7996271147006393, -1.0211962469348412,
                                    0.8481069967984006};
  const std::vector<double> sa = {
      3.994667337668,      -4.023812471128531,  -0.7441207150944482,
      3.9887198664990704,  0.9261604240218773,  -4.023812471128531,
      14.561152457395906,  -5.5642090501788894, -6.505005708342362,
      2.9412622770931374,  -0.7441207150944482, -5.5642090501788894,
      4.72548015195488,    1.7288956068395365,  -1.6289458782274886,
      3.9887198664990704,  -6.505005708342362,  1.7288956068395365,
      9.230042562669984,   0.5191443577925898,  0.9261604240218773,
      2.9412622770931374,  -1.6289458782274886, 0.5191443577925898,
      4.00410016501466};
  const std::vector<double> sb = {
      1.0711355047927975,   2.689513886466548,   -0.5612213548113772,
      -0.38037723877266233, -0.6882969753177686, 2.689513886466548,
      9.14833498039995,     -2.2060324622419873, -3.921391453959374,
      0.2762938751228069,   -0.5612213548113772, -2.2060324622419873,
      4.515112676030899,    4.264237793045769,   2.16635087167605,
      -0.38037723877266233, -3.921391453959374,  4.264237793045769,
      8.37347955522735,     -3.132208322521149,  -0.6882969753177686,
      0.2762938751228069,   2.16635087167605,    -3.132208322521149,
      8.122307684679035};

  auto to_tensor = [](const std::vector<double>& v, std::vector<int> shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < v.size(); ++i)
      t.data[i] = static_cast<float>(v[i]);
    return t;
  };
  // Mirror the upper triangle so float rounding cannot break symmetry.
  Tensor ca = to_tensor(sa, {d, d}), cb = to_tensor(sb, {d, d});
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      ca.data[static_cast<std::size_t>(j) * d + i] =
          ca.data[static_cast<std::size_t>(i) * d + j];
      cb.data[static_cast<std::size_t>(j) * d + i] =
          cb.data[static_cast<std::size_t>(i) * d + j];
    }
  const GaussianStats a = stats_of(to_tensor(mu_a, {1, d}), ca);
  const GaussianStats b = stats_of(to_tensor(mu_b, {1, d}), cb);

  const double fwd = frechet_distance(a, b);
  const double rev = frechet_distance(b, a);
  CHECK(fwd == Approx(29.930409524120).margin(1e-3));
  SECTION("and is symmetric in its arguments") {
    CHECK(std::abs(fwd - rev) <= 1e-8);
  }
}

TEST_CASE("frechet distance stays non-negative for near-identical sets") {
  Rng rng(33);
  const Tensor base = gaussian_rows(rng, 80, 6);
  Tensor nudged = base;
  for (auto& v : nudged.data) v += 1e-4f * static_cast<float>(rng.normal());
  const double fid = frechet_distance(gaussian_stats(base), gaussian_stats(nudged));
  CHECK(fid >= 0.0);
  CHECK(fid < 1e-2);
}

TEST_CASE("frechet distance validates its inputs") {
  Rng rng(5);
  const GaussianStats a = gaussian_stats(gaussian_rows(rng, 30, 4));
  const GaussianStats b = gaussian_stats(gaussian_rows(rng, 30, 5));
  CHECK_THROWS_AS(frechet_distance(a, b), ContractError);

  GaussianStats crooked = a;
  crooked.cov.data[1] += 1e-5f;  // break symmetry beyond the 1e-8 tolerance
  CHECK_THROWS_AS(frechet_distance(crooked, a), ContractError);
  CHECK_THROWS_AS(frechet_distance(a, crooked), ContractError);
}

TEST_CASE("diversity of two features is their distance") {
  const Tensor feats = Tensor::from({2, 2}, {0, 0, 3, 4});
  // Every drawn pair is (0,1) in some order, so the mean distance is exact.
  CHECK(diversity(feats, 16, 9) == Approx(5.0));

  SECTION("identical rows give zero diversity") {
    const Tensor same = Tensor::from({4, 3}, std::vector<float>(12, 2.5f));
    CHECK(diversity(same, 32, 1) == 0.0);
  }
  SECTION("fewer than two features is a contract violation") {
    CHECK_THROWS_AS(diversity(Tensor::zeros({1, 3}), 8, 0), ContractError);
    CHECK_THROWS_AS(diversity(Tensor::zeros({0, 3}), 8, 0), ContractError);
  }
  SECTION("pair count must be positive") {
    CHECK_THROWS_AS(diversity(Tensor::zeros({4, 3}), 0, 0), ContractError);
  }
}

TEST_CASE("diversity of standard normal features matches the analytic mean") {
  // For x, y ~ N(0, I_8), E||x - y|| = sqrt(2) * E chi_8 = 3.8772427989.
  Rng rng(42);
  const Tensor feats = gaussian_rows(rng, 2000, 8);
  const double est = diversity(feats, 4000, 77);
  CHECK(est == Approx(3.877242798855816).epsilon(0.05));
}

TEST_CASE("diversity is deterministic in the seed") {
  Rng rng(11);
  const Tensor feats = gaussian_rows(rng, 50, 6);
  const double a = diversity(feats, 32, 123);
  const double b = diversity(feats, 32, 123);
  const double c = diversity(feats, 32, 124);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("matching distance averages paired distances") {
  // Single 3-4-5 pair.
  const Tensor t = Tensor::from({1, 2}, {0, 0});
  const Tensor m = Tensor::from({1, 2}, {3, 4});
  CHECK(mm_dist(t, m) == Approx(5.0));

  // Two pairs at distances 5 and 13 average to 9.
  const Tensor t2 = Tensor::from({2, 2}, {0, 0, 1, 1});
  const Tensor m2 = Tensor::from({2, 2}, {3, 4, 6, 13});
  CHECK(mm_dist(t2, m2) == Approx(9.0));

  SECTION("identical pairs score zero") {
    CHECK(mm_dist(m2, m2) == 0.0);
  }
  SECTION("count or width mismatch is a contract violation") {
    CHECK_THROWS_AS(mm_dist(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})),
                    ContractError);
    CHECK_THROWS_AS(mm_dist(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})),
                    ContractError);
  }
}

TEST_CASE("evaluator training reduces the contrastive loss") {
  const EvaluatorBundle& bundle = shared_trained_evaluator();
  REQUIRE(bundle.losses.size() == 500);
  REQUIRE_FALSE(bundle.single_class);
  double tail = 0.0;
  for (std::size_t i = bundle.losses.size() - 25; i < bundle.losses.size(); ++i)
    tail += bundle.losses[i];
  tail /= 25.0;
  INFO("initial " << bundle.losses.front() << " tail " << tail);
  CHECK(tail < bundle.losses.front());
  CHECK(bundle.losses.back() < bundle.losses.front());

  SECTION("evaluator features are unit length") {
    const EvalCorpus corpus = build_eval_corpus();
    const Tensor f =
        evaluator_motion_feature(bundle, corpus.held_out[0].motion);
    double norm = 0.0;
    for (float v : f.data) norm += static_cast<double>(v) * v;
    CHECK(std::sqrt(norm) == Approx(1.0).margin(1e-4));
    TextEmbedder embedder({64});
    const Tensor tf = evaluator_text_feature(
        bundle, embedder, corpus.held_out[0].parts.full_text);
    norm = 0.0;
    for (float v : tf.data) norm += static_cast<double>(v) * v;
    CHECK(std::sqrt(norm) == Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("trained evaluator retrieves held-out pairs above chance") {
  const EvaluatorBundle& bundle = shared_trained_evaluator();
  const EvalCorpus corpus = build_eval_corpus();
  TextEmbedder embedder({64});
  REQUIRE(corpus.held_out.size() == 16);
  const double top1 = retrieval_top1(bundle, embedder, corpus.held_out);
  INFO("top-1 over 16 held-out candidates: " << top1);
  CHECK(top1 > 0.5);
}

TEST_CASE("matched text-motion pairs score lower than shuffled pairs") {
  const EvaluatorBundle& bundle = shared_trained_evaluator();
  const EvalCorpus corpus = build_eval_corpus();
  TextEmbedder embedder({64});

  std::vector<Motion> motions;
  std::vector<std::string> texts;
  for (const auto& r : corpus.held_out) {
    motions.push_back(r.motion);
    texts.push_back(r.parts.full_text);
  }
  const Tensor motion_f = evaluator_motion_features(bundle, motions);
  const Tensor text_f = evaluator_text_features(bundle, embedder, texts);

  // Shuffle by rotating the motions one slot against the texts.
  std::vector<Motion> rotated(motions.begin() + 1, motions.end());
  rotated.push_back(motions.front());
  const Tensor rotated_f = evaluator_motion_features(bundle, rotated);

  const double matched = mm_dist(text_f, motion_f);
  const double shuffled = mm_dist(text_f, rotated_f);
  INFO("matched " << matched << " shuffled " << shuffled);
  CHECK(matched < shuffled);
}

TEST_CASE("evaluator training is deterministic in the seed") {
  EvalCorpus corpus = build_eval_corpus();
  TextEmbedder embedder({64});
  EvaluatorConfig cfg = fast_eval_config();
  cfg.steps = 40;
  const EvaluatorBundle a = train_evaluator(corpus.train, embedder, cfg, 5);
  const EvaluatorBundle b = train_evaluator(corpus.train, embedder, cfg, 5);
  const EvaluatorBundle c = train_evaluator(corpus.train, embedder, cfg, 6);

  REQUIRE(a.params.size() == b.params.size());
  bool same_ab = true, same_ac = true;
  for (std::size_t p = 0; p < a.params.size(); ++p) {
    if (a.params.value_at(p).data != b.params.value_at(p).data) same_ab = false;
    if (a.params.value_at(p).data != c.params.value_at(p).data) same_ac = false;
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
  CHECK(a.losses == b.losses);
}

TEST_CASE("single-class data trains with a warning flag instead of failing") {
  const Skeleton skel = default_skeleton();
  auto templates = default_templates();
  templates.resize(1);
  const auto records = generate_dataset(skel, templates, 4, 3);
  TextEmbedder embedder({64});
  EvaluatorConfig cfg = fast_eval_config();
  cfg.steps = 20;
  const EvaluatorBundle bundle = train_evaluator(records, embedder, cfg, 8);
  CHECK(bundle.single_class);
  CHECK(bundle.losses.size() == 20);
}

TEST_CASE("evaluator rejects inconsistent wiring") {
  const EvalCorpus corpus = build_eval_corpus();
  EvaluatorConfig cfg = fast_eval_config();
  SECTION("embedder width must match the config") {
    TextEmbedder wrong({32});
    CHECK_THROWS_AS(train_evaluator(corpus.train, wrong, cfg, 1), ConfigError);
  }
  SECTION("motion width must match the config") {
    EvaluatorConfig narrow = cfg;
    narrow.feature_width = 11;
    TextEmbedder embedder({64});
    CHECK_THROWS_AS(train_evaluator(corpus.train, embedder, narrow, 1),
                    ConfigError);
  }
  SECTION("empty record list is a contract violation") {
    TextEmbedder embedder({64});
    CHECK_THROWS_AS(train_evaluator({}, embedder, cfg, 1), ContractError);
  }
  SECTION("config bounds are validated") {
    EvaluatorConfig bad = cfg;
    bad.temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.batch = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("evaluation report serializes to a single parseable line") {
  EvalReport r;
  r.fid = 1.5;
  r.diversity = 2.25;
  r.mm_dist = 0.75;
  r.n_gen = 128;
  r.n_ref = 256;
  r.seed = 99;
  r.shrinkage = true;
  const std::string line = r.to_json();
  CHECK(line.find('\n') == std::string::npos);

  const EvalReport back = EvalReport::from_json(line);
  CHECK(back.fid == r.fid);
  CHECK(back.diversity == r.diversity);
  CHECK(back.mm_dist == r.mm_dist);
  CHECK(back.n_gen == r.n_gen);
  CHECK(back.n_ref == r.n_ref);
  CHECK(back.seed == r.seed);
  CHECK(back.shrinkage == r.shrinkage);

  CHECK_THROWS_AS(EvalReport::from_json("not json"), ParseError);
  CHECK_THROWS_AS(EvalReport::from_json("{\"fid\": 1.0}"), ParseError);
}

TEST_CASE("full evaluation of a motion set produces a reproducible report") {
  const EvaluatorBundle& bundle = shared_trained_evaluator();
  const EvalCorpus corpus = build_eval_corpus();
  TextEmbedder embedder({64});

  std::vector<Motion> generated, reference;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    if (i % 2 == 0) {
      generated.push_back(corpus.train[i].motion);
      prompts.push_back(corpus.train[i].parts.full_text);
    } else {
      reference.push_back(corpus.train[i].motion);
    }
  }

  const EvalReport rep = evaluate_motion_set(bundle, embedder, generated,
                                             prompts, reference, 32, 17);
  CHECK(rep.fid >= 0.0);
  CHECK(rep.diversity > 0.0);
  CHECK(rep.mm_dist > 0.0);
  CHECK(rep.n_gen == static_cast<long long>(generated.size()));
  CHECK(rep.n_ref == static_cast<long long>(reference.size()));
  CHECK(rep.seed == 17);
  // Both sets have 12 members, fewer than d_eval + 1 = 25.
  CHECK(rep.shrinkage);

  const EvalReport rerun = evaluate_motion_set(bundle, embedder, generated,
                                               prompts, reference, 32, 17);
  CHECK(rep.to_json() == rerun.to_json());

  SECTION("prompt list must pair with the generated motions") {
    std::vector<std::string> short_prompts(prompts.begin(), prompts.end() - 1);
    CHECK_THROWS_AS(evaluate_motion_set(bundle, embedder, generated,
                                        short_prompts, reference, 32, 17),
                    ContractError);
  }
}
