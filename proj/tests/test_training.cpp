#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fgmdm/corpus.hpp"
#include "fgmdm/sampling.hpp"
#include "fgmdm/training.hpp"
#include "test_helpers.hpp"

using namespace fgmdm;
using Catch::Approx;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
    std::filesystem::remove(path);
  }
  ~TempFile() { std::filesystem::remove(path); }
};

Tensor random_tensor2(Rng& rng, int r, int c, float scale = 1.0f) {
  Tensor t = Tensor::zeros({r, c});
  for (auto& v : t.data) v = static_cast<float>(rng.normal()) * scale;
  return t;
}

/// Small motion derived from the rest pose with per-frame root drift and one
/// rotating joint, so FK targets are nontrivial.
Motion wiggly_motion(const Skeleton& skel, int frames, double amp,
                     double drift) {
  Motion m = make_rest_motion(frames, skel.joint_count());
  for (int i = 0; i < frames; ++i) {
    m.root[i][0] += drift * i;
    const double ang = amp * std::sin(2.0 * M_PI * i / frames);
    m.quats[i][4] = quat_from_axis_angle({0, 0, 1}, ang);
    m.quats[i][10] = quat_from_axis_angle({1, 0, 0}, 0.5 * ang);
  }
  return m;
}

/// Serialized parameter block used for bit-exact comparisons.
std::string params_bytes(const ModelBundle& mb) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(mb, os);
  return os.str();
}

ModelBundle tiny_trained_bundle(double cond_dropout, std::uint64_t seed,
                                int steps = 60,
                                std::vector<TelemetryRow>* telemetry = nullptr,
                                const TrainCallback& cb = {}) {
  const Skeleton skel = default_skeleton();
  const auto templates = default_templates();
  // two base templates, two variations: enough signal, fast to train
  std::vector<MotionTemplate> two = {templates[0], templates[2]};
  const auto records = generate_dataset(skel, two, 2, 11);

  DenoiserConfig net;
  net.layers = 1;
  net.heads = 2;
  net.d_model = 32;
  net.ff = 64;
  net.dropout = 0.1;
  net.n_max = 40;
  net.feature_width = flat_width(skel.joint_count());
  ConditioningConfig cond;
  cond.d_model = 32;
  cond.d_text = 24;
  cond.total_steps = 50;
  DiffusionConfig diff;
  diff.total_steps = 50;
  diff.dropout_p = cond_dropout;
  TrainingConfig tc;
  tc.batch_size = 4;
  tc.total_steps = steps;
  tc.lr = 1e-3;
  tc.seed = seed;
  tc.checkpoint_interval = 25;
  TextEmbedder embedder({cond.d_text, 77});
  return train(skel, records, embedder, net, cond, diff, tc, telemetry, cb);
}

}  // namespace

// ---------------------------------------------------------------------------
// Feature statistics
// ---------------------------------------------------------------------------

TEST_CASE("feature statistics match hand-computed mean and deviation") {
  Tensor a = Tensor::from({2, 2}, {1.f, 10.f, 3.f, 10.f});
  Tensor b = Tensor::from({1, 2}, {5.f, 10.f});
  const FeatureStats st = compute_feature_stats({a, b});
  CHECK(st.mean.data[0] == Approx(3.0));        // (1+3+5)/3
  CHECK(st.mean.data[1] == Approx(10.0));
  CHECK(st.std_dev.data[0] == Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-5));
  CHECK(st.std_dev.data[1] == Approx(1e-6));    // constant column floored

  const Tensor norm = normalize_features(a, st);
  CHECK(norm.data[0] == Approx((1.0 - 3.0) / std::sqrt(8.0 / 3.0)).epsilon(1e-5));
  const Tensor back = denormalize_features(norm, st);
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(back.data[i] == Approx(a.data[i]).margin(1e-5));

  REQUIRE_THROWS_AS(compute_feature_stats({}), ContractError);
  Tensor wrong = Tensor::zeros({1, 3});
  REQUIRE_THROWS_AS(compute_feature_stats({a, wrong}), ContractError);
  REQUIRE_THROWS_AS(normalize_features(wrong, st), ContractError);
}

TEST_CASE("tape denormalization equals the plain version") {
  Rng rng(5);
  const Tensor x = random_tensor2(rng, 4, 6);
  FeatureStats st;
  st.mean = random_tensor2(rng, 1, 6, 0.5f);
  st.std_dev = Tensor::full({1, 6}, 1.0f);
  for (auto& v : st.std_dev.data)
    v = 0.5f + static_cast<float>(rng.uniform());
  const Tensor want = denormalize_features(x, st);
  Tape tape;
  const auto got = tape.value(denormalize_var(tape, tape.input(x), st));
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(got.data[i] == Approx(want.data[i]).margin(1e-6));
}

// ---------------------------------------------------------------------------
// Simple loss
// ---------------------------------------------------------------------------

TEST_CASE("the simple loss is the batch mean of squared distances") {
  Tensor one = Tensor::from({1, 1}, {1.f});
  Tensor zero = Tensor::from({1, 1}, {0.f});
  CHECK(loss_simple({one}, {one}) == 0.0);
  CHECK(loss_simple({one}, {zero}) == 1.0);

  Rng rng(7);
  std::vector<Tensor> x0, xh;
  for (int b = 0; b < 3; ++b) {
    x0.push_back(random_tensor2(rng, 4, 5));
    xh.push_back(random_tensor2(rng, 4, 5));
  }
  // independent elementwise loop
  double want = 0.0;
  for (int b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < x0[b].numel(); ++i) {
      const double d = double(x0[b].data[i]) - double(xh[b].data[i]);
      want += d * d;
    }
  want /= 3.0;
  CHECK(loss_simple(x0, xh) == Approx(want).epsilon(1e-6));

  REQUIRE_THROWS_AS(loss_simple({}, {}), ContractError);
  REQUIRE_THROWS_AS(loss_simple({one}, {one, one}), ContractError);
  Tensor wide = Tensor::zeros({1, 2});
  REQUIRE_THROWS_AS(loss_simple({one}, {wide}), ContractError);
}

// ---------------------------------------------------------------------------
// Geometric losses
// ---------------------------------------------------------------------------

TEST_CASE("perfect predictions give zero geometric loss") {
  // arms-only motion: the feet stay exactly still, so the contact frames
  // carry zero foot velocity and even the skate term vanishes
  const Skeleton skel = default_skeleton();
  Motion m = make_rest_motion(6, skel.joint_count());
  for (int i = 0; i < 6; ++i)
    m.quats[i][4] = quat_from_axis_angle({0, 0, 1}, 0.4 * std::sin(1.1 * i));
  const auto contact = foot_contact_mask(skel, m);
  const GeoLosses g = geometric_losses(skel, m, m, contact);
  CHECK(g.pos == 0.0);
  CHECK(g.foot == 0.0);
  CHECK(g.vel == 0.0);
}

TEST_CASE("an all-zero contact mask removes the foot loss entirely") {
  const Skeleton skel = default_skeleton();
  const Motion gt = wiggly_motion(skel, 6, 0.4, 0.01);
  Motion pred = wiggly_motion(skel, 6, 0.9, 0.05);  // sloppy prediction
  FootContactMask none;
  none.joints = skel.foot_joints;
  none.contact.assign(5, std::vector<char>(none.joints.size(), 0));
  const GeoLosses g = geometric_losses(skel, gt, pred, none);
  CHECK(g.foot == 0.0);
  CHECK(g.pos > 0.0);
  CHECK(g.vel > 0.0);
}

TEST_CASE("a constant offset on the prediction leaves the velocity loss alone") {
  const Skeleton skel = default_skeleton();
  const Motion gt = wiggly_motion(skel, 6, 0.4, 0.01);
  Motion pred = wiggly_motion(skel, 6, 0.7, 0.03);
  const auto contact = foot_contact_mask(skel, gt);
  const GeoLosses before = geometric_losses(skel, gt, pred, contact);
  for (auto& r : pred.root) {
    r[0] += 0.37;
    r[1] += 0.11;
  }
  const GeoLosses after = geometric_losses(skel, gt, pred, contact);
  CHECK(after.vel == Approx(before.vel).epsilon(1e-4));
  CHECK(after.pos > before.pos);  // positions do move
}

TEST_CASE("a pure root shift produces the hand-computed position loss") {
  const Skeleton skel = default_skeleton();
  const int n = 5, J = skel.joint_count();
  const Motion gt = make_rest_motion(n, J);
  Motion pred = gt;
  for (auto& r : pred.root) r[0] += 0.2;  // every joint moves by 0.2 in x
  const auto contact = foot_contact_mask(skel, gt);
  const GeoLosses g = geometric_losses(skel, gt, pred, contact);
  CHECK(g.pos == Approx(double(J) * 0.04).epsilon(1e-9));
  CHECK(g.vel == 0.0);   // constant offset
  CHECK(g.foot == 0.0);  // prediction is static
}

TEST_CASE("geometric losses reject malformed inputs") {
  const Skeleton skel = default_skeleton();
  const Motion one = make_rest_motion(1, skel.joint_count());
  const Motion two = make_rest_motion(2, skel.joint_count());
  FootContactMask mask = foot_contact_mask(skel, two);
  REQUIRE_THROWS_AS(geometric_losses(skel, one, one, mask), ContractError);
  REQUIRE_THROWS_AS(geometric_losses(skel, two, one, mask), ContractError);
  FootContactMask stale = mask;
  stale.contact.push_back(stale.contact[0]);
  REQUIRE_THROWS_AS(geometric_losses(skel, two, two, stale), ContractError);
}

TEST_CASE("tape geometric losses agree with the plain computation") {
  const Skeleton skel = default_skeleton();
  const Motion gt = wiggly_motion(skel, 6, 0.4, 0.01);
  const Motion pred = wiggly_motion(skel, 6, 0.8, 0.04);
  const auto contact = foot_contact_mask(skel, gt);
  const GeoLosses want = geometric_losses(skel, gt, pred, contact);

  TapeT<double> tape;
  const TensorT<double> x0 = motion_to_flat<double>(gt);
  const TensorT<double> xh = motion_to_flat<double>(pred);
  const auto gt_pos_v = fk_motion(skel, gt);
  TensorT<double> gt_pos =
      TensorT<double>::zeros({gt.frames(), 3 * skel.joint_count()});
  for (int i = 0; i < gt.frames(); ++i)
    for (int j = 0; j < skel.joint_count(); ++j)
      for (int k = 0; k < 3; ++k)
        gt_pos.data[(i * skel.joint_count() + j) * 3 + k] = gt_pos_v[i][j][k];
  const auto vars = geometric_loss_vars(tape, skel, x0, gt_pos,
                                        tape.input(xh), contact);
  CHECK(tape.value(vars.pos).data[0] == Approx(want.pos).epsilon(1e-6));
  CHECK(tape.value(vars.foot).data[0] == Approx(want.foot).epsilon(1e-6));
  CHECK(tape.value(vars.vel).data[0] == Approx(want.vel).epsilon(1e-6));
}

TEST_CASE("geometric loss gradients through FK match finite differences") {
  Rng rng(31);
  const Skeleton skel = testutil::random_chain(rng, 4);
  const int n = 3, J = 4;
  TensorT<double> x0 = TensorT<double>::zeros({n, flat_width(J)});
  TensorT<double> xh = x0;
  for (auto& v : x0.data) v = rng.normal() * 0.5;
  for (auto& v : xh.data) v = rng.normal() * 0.5;
  // keep quaternion norms away from zero
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j) {
      x0.data[i * flat_width(J) + 3 + 4 * j] += 1.0;
      xh.data[i * flat_width(J) + 3 + 4 * j] += 1.0;
    }
  FootContactMask contact;
  contact.joints = {1, 3};
  contact.contact = {{1, 0}, {0, 1}};

  // ground-truth positions for the pos term
  const Motion gt = flat_to_motion(x0, 20.0);
  const auto gp = fk_motion(skel, gt);
  TensorT<double> gt_pos = TensorT<double>::zeros({n, 3 * J});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j)
      for (int k = 0; k < 3; ++k) gt_pos.data[(i * J + j) * 3 + k] = gp[i][j][k];

  auto rep = testutil::fd_check(
      {xh},
      [&](TapeT<double>& t, std::vector<TapeT<double>::Var> v) {
        const auto g = geometric_loss_vars(t, skel, x0, gt_pos, v[0], contact);
        return t.add(t.add(g.pos, g.foot), g.vel);
      },
      1e-6);
  INFO("checked " << rep.checked << " max rel " << rep.max_rel_err);
  CHECK(rep.max_rel_err < 1e-3);
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

TEST_CASE("the total loss is affine in each weight") {
  GeoLosses g{2.0, 4.0, 3.0};
  LossWeights w;
  CHECK(total_loss(1.0, g, LossWeights{0, 0, 0}) == 1.0);
  CHECK(total_loss(1.0, g, LossWeights{1, 1, 1}) == 10.0);

  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const double simple = rng.uniform() * 3;
    GeoLosses geo{rng.uniform(), rng.uniform(), rng.uniform()};
    LossWeights lw{rng.uniform() * 2, rng.uniform() * 2, rng.uniform() * 2};
    const double want = simple + lw.lambda_pos * geo.pos +
                        lw.lambda_vel * geo.vel + lw.lambda_foot * geo.foot;
    CHECK(total_loss(simple, geo, lw) == Approx(want).epsilon(1e-12));
    // affine in lambda_pos: L(l+d) - L(l) == d * pos
    LossWeights bumped = lw;
    bumped.lambda_pos += 0.5;
    CHECK(total_loss(simple, geo, bumped) -
              total_loss(simple, geo, lw) ==
          Approx(0.5 * geo.pos).epsilon(1e-9));
  }
  LossWeights bad;
  bad.lambda_vel = -1.0;
  REQUIRE_THROWS_AS(total_loss(0.0, g, bad), ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoints round-trip bit-exactly") {
  const ModelBundle mb = tiny_trained_bundle(0.1, 3, 3);
  std::ostringstream os(std::ios::binary);
  save_checkpoint(mb, os);
  const std::string bytes = os.str();

  std::istringstream is(bytes);
  const ModelBundle back = load_checkpoint(is);
  REQUIRE(back.params.size() == mb.params.size());
  for (std::size_t i = 0; i < mb.params.size(); ++i) {
    CHECK(back.params.name_at(i) == mb.params.name_at(i));
    CHECK(back.params.value_at(i).shape == mb.params.value_at(i).shape);
    CHECK(back.params.value_at(i).data == mb.params.value_at(i).data);
  }
  CHECK(back.adam.t == mb.adam.t);
  for (std::size_t i = 0; i < mb.adam.m.size(); ++i) {
    CHECK(back.adam.m[i].data == mb.adam.m[i].data);
    CHECK(back.adam.v[i].data == mb.adam.v[i].data);
  }
  CHECK(back.norm.mean.data == mb.norm.mean.data);
  CHECK(back.norm.std_dev.data == mb.norm.std_dev.data);
  CHECK(back.step == mb.step);
  CHECK(back.rng_state == mb.rng_state);
  CHECK(back.net.d_model == mb.net.d_model);
  CHECK(back.net.use_part_tokens == mb.net.use_part_tokens);
  CHECK(back.cond.d_text == mb.cond.d_text);
  CHECK(back.diff.schedule == mb.diff.schedule);
  CHECK(back.fps == mb.fps);

  // saving the loaded bundle reproduces the same bytes
  std::ostringstream os2(std::ios::binary);
  save_checkpoint(back, os2);
  CHECK(os2.str() == bytes);
}

TEST_CASE("checkpoint loading rejects bad magic, versions and truncation") {
  const ModelBundle mb = tiny_trained_bundle(0.1, 4, 2);
  std::ostringstream os(std::ios::binary);
  save_checkpoint(mb, os);
  std::string bytes = os.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::istringstream m(bad_magic);
  REQUIRE_THROWS_AS(load_checkpoint(m), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 9;  // little-endian version field
  std::istringstream v(bad_version);
  REQUIRE_THROWS_AS(load_checkpoint(v), VersionError);

  std::istringstream t(bytes.substr(0, bytes.size() / 2));
  REQUIRE_THROWS_AS(load_checkpoint(t), FormatError);
}

TEST_CASE("file checkpoints are atomic and leave no temporary behind") {
  const ModelBundle mb = tiny_trained_bundle(0.1, 5, 2);
  TempFile f("fgmdm_ckpt_test.bin");
  save_checkpoint(mb, f.path);
  CHECK_FALSE(std::filesystem::exists(f.path + ".tmp"));
  const ModelBundle back = load_checkpoint(f.path);
  CHECK(back.step == mb.step);
  REQUIRE_THROWS_AS(load_checkpoint(f.path + ".missing"), IoError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST_CASE("the training smoke run halves the moving-average loss") {
  const Skeleton skel = default_skeleton();
  const auto records = generate_dataset(skel, default_templates(), 1, 19);
  REQUIRE(records.size() == 12);

  DenoiserConfig net;
  net.layers = 1;
  net.heads = 2;
  net.d_model = 32;
  net.ff = 64;
  net.dropout = 0.1;
  net.n_max = 40;
  net.feature_width = flat_width(skel.joint_count());
  ConditioningConfig cond;
  cond.d_model = 32;
  cond.d_text = 24;
  cond.total_steps = 50;
  DiffusionConfig diff;
  diff.total_steps = 50;
  TrainingConfig tc;
  tc.batch_size = 4;
  tc.total_steps = 200;
  tc.lr = 1e-3;
  tc.seed = 2;
  TextEmbedder embedder({cond.d_text, 77});

  std::vector<TelemetryRow> telemetry;
  const ModelBundle mb =
      train(skel, records, embedder, net, cond, diff, tc, &telemetry);
  REQUIRE(telemetry.size() == 200);
  auto ma = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += telemetry[i].total;
    return s / 20.0;
  };
  const double initial = ma(0);
  const double final_ma = ma(telemetry.size() - 20);
  INFO("initial " << initial << " final " << final_ma);
  CHECK(final_ma < 0.5 * initial);
  CHECK(mb.step == 200);

  for (const auto& r : telemetry) {
    CHECK(r.grad_norm <= tc.grad_clip + 1e-6);
    CHECK(std::isfinite(r.total));
  }
}

TEST_CASE("training is bit-deterministic in the seed") {
  std::vector<TelemetryRow> t1, t2;
  const ModelBundle a = tiny_trained_bundle(0.1, 21, 8, &t1);
  const ModelBundle b = tiny_trained_bundle(0.1, 21, 8, &t2);
  const ModelBundle c = tiny_trained_bundle(0.1, 22, 8);
  CHECK(params_bytes(a) == params_bytes(b));
  CHECK(params_bytes(a) != params_bytes(c));
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].total == t2[i].total);
    CHECK(t1[i].grad_norm == t2[i].grad_norm);
  }
}

TEST_CASE("checkpoint callbacks fire on the configured interval") {
  std::vector<long long> seen;
  tiny_trained_bundle(0.1, 23, 60, nullptr,
                      [&](const ModelBundle&, long long step) {
                        seen.push_back(step);
                      });
  CHECK(seen == std::vector<long long>({25, 50, 60}));
}

TEST_CASE("a diverged run aborts with the failing step in the message") {
  const Skeleton skel = default_skeleton();
  const auto templates = default_templates();
  std::vector<MotionTemplate> one = {templates[0]};
  const auto records = generate_dataset(skel, one, 1, 1);
  DenoiserConfig net;
  net.layers = 1;
  net.heads = 1;
  net.d_model = 16;
  net.ff = 32;
  net.dropout = 0.0;
  net.n_max = 40;
  net.feature_width = flat_width(skel.joint_count());
  ConditioningConfig cond;
  cond.d_model = 16;
  cond.d_text = 8;
  cond.total_steps = 10;
  DiffusionConfig diff;
  diff.total_steps = 10;
  TrainingConfig tc;
  tc.batch_size = 2;
  tc.total_steps = 10;
  tc.lr = 1e12;  // guaranteed blow-up
  tc.seed = 3;
  TextEmbedder embedder({cond.d_text, 1});
  try {
    train(skel, records, embedder, net, cond, diff, tc);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("training validates its configuration wiring") {
  const Skeleton skel = default_skeleton();
  const auto templates = default_templates();
  std::vector<MotionTemplate> one = {templates[0]};
  const auto records = generate_dataset(skel, one, 1, 1);
  DenoiserConfig net;
  net.layers = 1;
  net.heads = 1;
  net.d_model = 16;
  net.ff = 32;
  net.n_max = 40;
  net.feature_width = flat_width(skel.joint_count());
  ConditioningConfig cond;
  cond.d_model = 16;
  cond.d_text = 8;
  cond.total_steps = 10;
  DiffusionConfig diff;
  diff.total_steps = 10;
  TrainingConfig tc;
  tc.batch_size = 2;
  tc.total_steps = 1;
  TextEmbedder embedder({cond.d_text, 1});

  REQUIRE_THROWS_AS(
      train(skel, {}, embedder, net, cond, diff, tc), ContractError);
  ConditioningConfig wrong_d = cond;
  wrong_d.d_model = 8;
  REQUIRE_THROWS_AS(
      train(skel, records, embedder, net, wrong_d, diff, tc), ConfigError);
  ConditioningConfig wrong_t = cond;
  wrong_t.total_steps = 99;
  REQUIRE_THROWS_AS(
      train(skel, records, embedder, net, wrong_t, diff, tc), ConfigError);
  TextEmbedder wrong_e({cond.d_text + 1, 1});
  REQUIRE_THROWS_AS(train(skel, records, wrong_e, net, cond, diff, tc),
                    ConfigError);
}

TEST_CASE("telemetry serializes to the documented CSV layout") {
  std::vector<TelemetryRow> rows(2);
  rows[0] = {1, 0.5, 0.25, 0.125, 0.0, 0.875, 1.0};
  rows[1] = {2, 0.25, 0.2, 0.1, 0.01, 0.56, 0.9};
  std::ostringstream os;
  write_telemetry_csv(rows, os);
  const std::string text = os.str();
  CHECK(text.find("step,loss_simple,loss_pos,loss_vel,loss_foot,loss_total,"
                  "grad_norm\n") == 0);
  CHECK(text.find("\n1,0.5,0.25,0.125,0,0.875,1\n") != std::string::npos);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

TEST_CASE("sampling is deterministic in the seed and decodes unit quats") {
  const ModelBundle mb = tiny_trained_bundle(0.1, 31, 20);
  const TextEmbedder embedder({mb.cond.d_text, 77});
  const Skeleton skel = default_skeleton();
  FineGrainedDescription desc;
  for (int p = 0; p < kPartCount; ++p) desc.parts[p] = part_filler(p);
  desc.parts[0] = "The arms raise up high.";
  desc.full_text = desc.parts[0];

  const Motion a = sample_motion(skel, mb, embedder, desc, 16, 5);
  const Motion b = sample_motion(skel, mb, embedder, desc, 16, 5);
  const Motion c = sample_motion(skel, mb, embedder, desc, 16, 6);
  REQUIRE(a.frames() == 16);
  REQUIRE(a.joint_count() == skel.joint_count());
  CHECK(motion_to_flat<float>(a).data == motion_to_flat<float>(b).data);
  CHECK(motion_to_flat<float>(a).data != motion_to_flat<float>(c).data);
  for (const auto& frame : a.quats)
    for (const auto& q : frame)
      CHECK(quat_norm(q) == Approx(1.0).margin(1e-6));
}

TEST_CASE("a model trained with full condition dropout samples prompt-free") {
  ModelBundle mb = tiny_trained_bundle(1.0, 37, 30);
  mb.diff.guidance_scale = 0.0;  // pure unconditional branch
  const TextEmbedder embedder({mb.cond.d_text, 77});
  const Skeleton skel = default_skeleton();

  FineGrainedDescription d1, d2;
  for (int p = 0; p < kPartCount; ++p) {
    d1.parts[p] = part_filler(p);
    d2.parts[p] = part_filler(p);
  }
  d1.parts[0] = "The arms wave.";
  d2.parts[1] = "The legs march in place.";
  d1.full_text = d1.parts[0];
  d2.full_text = d2.parts[1];

  const Motion a = sample_motion(skel, mb, embedder, d1, 12, 9);
  const Motion b = sample_motion(skel, mb, embedder, d2, 12, 9);
  CHECK(motion_to_flat<float>(a).data == motion_to_flat<float>(b).data);
}

TEST_CASE("sampling rejects broken bundles") {
  ModelBundle mb = tiny_trained_bundle(0.1, 41, 2);
  const TextEmbedder embedder({mb.cond.d_text, 77});
  const Skeleton skel = default_skeleton();
  FineGrainedDescription desc;
  for (int p = 0; p < kPartCount; ++p) desc.parts[p] = part_filler(p);
  desc.full_text = desc.parts[0];

  REQUIRE_THROWS_AS(
      sample_motion(skel, mb, embedder, desc, mb.net.n_max + 1, 1),
      ContractError);
  REQUIRE_THROWS_AS(sample_motion(skel, mb, embedder, desc, 0, 1),
                    ContractError);

  ModelBundle poisoned = mb;
  poisoned.params.get("net.in_w").data[0] =
      std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_AS(sample_motion(skel, poisoned, embedder, desc, 8, 1),
                    NumericError);

  ModelBundle no_norm = mb;
  no_norm.norm = FeatureStats{};
  REQUIRE_THROWS_AS(sample_motion(skel, no_norm, embedder, desc, 8, 1),
                    ContractError);
}
