#pragma once
// Training: feature normalization, the simple and geometric losses, the
// deterministic training loop, checkpoints, and loss telemetry.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgmdm/autograd.hpp"
#include "fgmdm/common.hpp"
#include "fgmdm/conditioning.hpp"
#include "fgmdm/dataset.hpp"
#include "fgmdm/denoiser.hpp"
#include "fgmdm/diffusion.hpp"
#include "fgmdm/skeleton.hpp"

namespace fgmdm {

// ---------------------------------------------------------------------------
// Feature normalization
// ---------------------------------------------------------------------------

/// Per-dimension mean and standard deviation over a feature set, used to
/// standardize motion features before diffusion. Deviations are floored so
/// constant dimensions stay decodable.
struct FeatureStats {
  Tensor mean;     // [1, D]
  Tensor std_dev;  // [1, D]

  int width() const { return mean.numel() ? mean.cols() : 0; }
};

inline FeatureStats compute_feature_stats(const std::vector<Tensor>& feats,
                                          float floor = 1e-6f) {
  if (feats.empty())
    throw ContractError("feature stats: need at least one feature tensor");
  const int D = feats[0].cols();
  std::vector<double> sum(D, 0.0), sum_sq(D, 0.0);
  long long count = 0;
  for (const Tensor& f : feats) {
    if (f.rank() != 2 || f.cols() != D)
      throw ContractError("feature stats: inconsistent feature width");
    const int n = f.rows();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < D; ++j) {
        const double v = f.data[static_cast<std::size_t>(i) * D + j];
        sum[j] += v;
        sum_sq[j] += v * v;
      }
    count += n;
  }
  FeatureStats st;
  st.mean = Tensor::zeros({1, D});
  st.std_dev = Tensor::zeros({1, D});
  for (int j = 0; j < D; ++j) {
    const double mu = sum[j] / double(count);
    const double var = std::max(0.0, sum_sq[j] / double(count) - mu * mu);
    st.mean.data[j] = static_cast<float>(mu);
    st.std_dev.data[j] = std::max(floor, static_cast<float>(std::sqrt(var)));
  }
  return st;
}

/// Identity stats (mean 0, deviation 1) for a given width.
inline FeatureStats identity_stats(int width) {
  FeatureStats st;
  st.mean = Tensor::zeros({1, width});
  st.std_dev = Tensor::full({1, width}, 1.0f);
  return st;
}

inline Tensor normalize_features(const Tensor& x, const FeatureStats& st) {
  if (x.cols() != st.width())
    throw ContractError("normalize: feature width mismatch");
  Tensor out = x;
  const int D = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < D; ++j) {
      auto& v = out.data[static_cast<std::size_t>(i) * D + j];
      v = (v - st.mean.data[j]) / st.std_dev.data[j];
    }
  return out;
}

inline Tensor denormalize_features(const Tensor& x, const FeatureStats& st) {
  if (x.cols() != st.width())
    throw ContractError("denormalize: feature width mismatch");
  Tensor out = x;
  const int D = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < D; ++j) {
      auto& v = out.data[static_cast<std::size_t>(i) * D + j];
      v = v * st.std_dev.data[j] + st.mean.data[j];
    }
  return out;
}

/// Tape version of denormalize for loss paths that need raw-scale features.
inline Tape::Var denormalize_var(Tape& tape, Tape::Var x,
                                 const FeatureStats& st) {
  const auto sd = tape.constant(st.std_dev);
  const auto mu = tape.constant(st.mean);
  return tape.add_row(tape.mul_row(x, sd), mu);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossWeights {
  double lambda_pos = 1.0;
  double lambda_vel = 1.0;
  double lambda_foot = 1.0;

  void validate() const {
    if (!(lambda_pos >= 0.0) || !(lambda_vel >= 0.0) || !(lambda_foot >= 0.0))
      throw ConfigError("loss weights: lambdas must be finite and >= 0");
  }
};

/// Mean over the batch of the squared L2 distance between clean and
/// predicted feature tensors.
inline double loss_simple(const std::vector<Tensor>& x0,
                          const std::vector<Tensor>& x0_hat) {
  if (x0.empty() || x0.size() != x0_hat.size())
    throw ContractError("loss_simple: batch sizes must match and be nonempty");
  double acc = 0.0;
  for (std::size_t b = 0; b < x0.size(); ++b) {
    if (!x0[b].same_shape(x0_hat[b]))
      throw ContractError("loss_simple: shape mismatch in batch element " +
                          std::to_string(b));
    for (std::size_t i = 0; i < x0[b].numel(); ++i) {
      const double d = double(x0[b].data[i]) - double(x0_hat[b].data[i]);
      acc += d * d;
    }
  }
  return acc / double(x0.size());
}

struct GeoLosses {
  double pos = 0.0;
  double foot = 0.0;
  double vel = 0.0;
};

/// Position, foot-skate, and velocity losses between a ground-truth motion
/// and a prediction, with the contact mask taken from the ground truth.
///   pos  = (1/n)      sum_i |FK(x0_i) - FK(xh_i)|^2
///   foot = (1/(n-1))  sum_i |(FK(xh_{i+1}) - FK(xh_i)) * f_i|^2  (foot joints)
///   vel  = (1/(n-1))  sum_i |(x0_{i+1}-x0_i) - (xh_{i+1}-xh_i)|^2 (features)
inline GeoLosses geometric_losses(const Skeleton& skel, const Motion& x0,
                                  const Motion& x0_hat,
                                  const FootContactMask& contact) {
  const int n = x0.frames();
  if (n != x0_hat.frames() || x0.joint_count() != x0_hat.joint_count())
    throw ContractError("geometric losses: motion shapes must match");
  if (n < 2)
    throw ContractError("geometric losses: need at least two frames");
  if (static_cast<int>(contact.contact.size()) != n - 1)
    throw ContractError("geometric losses: contact mask frame count mismatch");

  const auto pos_gt = fk_motion(skel, x0);
  const auto pos_pr = fk_motion(skel, x0_hat);
  GeoLosses g;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < x0.joint_count(); ++j)
      for (int k = 0; k < 3; ++k) {
        const double d = pos_gt[i][j][k] - pos_pr[i][j][k];
        g.pos += d * d;
      }
  g.pos /= double(n);

  for (int i = 0; i + 1 < n; ++i)
    for (std::size_t f = 0; f < contact.joints.size(); ++f) {
      if (!contact.contact[i][f]) continue;
      const int j = contact.joints[f];
      for (int k = 0; k < 3; ++k) {
        const double d = pos_pr[i + 1][j][k] - pos_pr[i][j][k];
        g.foot += d * d;
      }
    }
  g.foot /= double(n - 1);

  const Tensor f0 = motion_to_flat<float>(x0);
  const Tensor fh = motion_to_flat<float>(x0_hat);
  const int D = f0.cols();
  for (int i = 0; i + 1 < n; ++i)
    for (int j = 0; j < D; ++j) {
      const double v_gt = double(f0.data[(i + 1) * D + j]) - f0.data[i * D + j];
      const double v_pr = double(fh.data[(i + 1) * D + j]) - fh.data[i * D + j];
      const double d = v_gt - v_pr;
      g.vel += d * d;
    }
  g.vel /= double(n - 1);
  return g;
}

inline double total_loss(double simple, const GeoLosses& geo,
                         const LossWeights& w) {
  w.validate();
  return simple + w.lambda_pos * geo.pos + w.lambda_vel * geo.vel +
         w.lambda_foot * geo.foot;
}

// ---------------------------------------------------------------------------
// Tape losses (per batch element, raw feature scale)
// ---------------------------------------------------------------------------

template <typename T>
struct GeoLossVarsT {
  typename TapeT<T>::Var pos;
  typename TapeT<T>::Var foot;
  typename TapeT<T>::Var vel;
};
using GeoLossVars = GeoLossVarsT<float>;

/// Sum of squared differences between a variable and a constant tensor.
template <typename T>
typename TapeT<T>::Var sum_sq_diff(TapeT<T>& tape, typename TapeT<T>::Var a,
                                   const TensorT<T>& b) {
  const auto d = tape.sub(a, tape.constant(b));
  return tape.sum(tape.mul(d, d));
}

/// Differentiable geometric losses. `x0_flat` carries the ground truth on the
/// raw feature scale; `x0_hat_flat` must be on the same scale. `gt_positions`
/// are the precomputed FK positions of the ground truth as [n, 3J].
template <typename T>
GeoLossVarsT<T> geometric_loss_vars(TapeT<T>& tape, const Skeleton& skel,
                                    const TensorT<T>& x0_flat,
                                    const TensorT<T>& gt_positions,
                                    typename TapeT<T>::Var x0_hat_flat,
                                    const FootContactMask& contact) {
  const TensorT<T>& xv = tape.value(x0_hat_flat);
  const int n = xv.rows();
  if (n < 2)
    throw ContractError("geometric losses: need at least two frames");
  if (!xv.same_shape(x0_flat))
    throw ContractError("geometric losses: feature shape mismatch");

  GeoLossVarsT<T> out;
  const auto pred_pos = fk_positions(tape, x0_hat_flat, skel);
  out.pos = tape.scale(sum_sq_diff(tape, pred_pos, gt_positions),
                       T(1) / T(n));

  // foot loss: gate predicted foot velocities by the ground-truth contacts
  const int J = skel.joint_count();
  TensorT<T> gate = TensorT<T>::zeros({n - 1, 3 * J});
  for (int i = 0; i + 1 < n; ++i)
    for (std::size_t f = 0; f < contact.joints.size(); ++f)
      if (contact.contact[i][f]) {
        const int j = contact.joints[f];
        for (int k = 0; k < 3; ++k)
          gate.data[static_cast<std::size_t>(i) * 3 * J + 3 * j + k] = T(1);
      }
  const auto v_pred = tape.sub(tape.row_slice(pred_pos, 1, n),
                               tape.row_slice(pred_pos, 0, n - 1));
  const auto gated = tape.mul(v_pred, tape.constant(gate));
  out.foot = tape.scale(tape.sum(tape.mul(gated, gated)), T(1) / T(n - 1));

  // velocity loss on the feature representation itself
  const int D = x0_flat.cols();
  TensorT<T> gt_vel = TensorT<T>::zeros({n - 1, D});
  for (int i = 0; i + 1 < n; ++i)
    for (int j = 0; j < D; ++j)
      gt_vel.data[static_cast<std::size_t>(i) * D + j] =
          x0_flat.data[static_cast<std::size_t>(i + 1) * D + j] -
          x0_flat.data[static_cast<std::size_t>(i) * D + j];
  const auto pr_vel = tape.sub(tape.row_slice(x0_hat_flat, 1, n),
                               tape.row_slice(x0_hat_flat, 0, n - 1));
  out.vel = tape.scale(sum_sq_diff(tape, pr_vel, gt_vel), T(1) / T(n - 1));
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration and telemetry
// ---------------------------------------------------------------------------

struct TrainingConfig {
  int batch_size = 64;
  int total_steps = 2000;
  double lr = 1e-4;
  double grad_clip = 1.0;
  int checkpoint_interval = 500;  // 0 disables periodic checkpoints
  std::uint64_t seed = 0;
  bool standardize_features = true;
  LossWeights weights;

  void validate() const {
    if (batch_size < 1) throw ConfigError("training: batch size must be >= 1");
    if (total_steps < 1)
      throw ConfigError("training: total steps must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("training: lr must be > 0");
    if (!(grad_clip > 0.0))
      throw ConfigError("training: grad clip must be > 0");
    if (checkpoint_interval < 0)
      throw ConfigError("training: checkpoint interval must be >= 0");
    weights.validate();
  }
};

struct TelemetryRow {
  long long step = 0;
  double simple = 0, pos = 0, vel = 0, foot = 0, total = 0, grad_norm = 0;
};

inline void write_telemetry_csv(const std::vector<TelemetryRow>& rows,
                                std::ostream& os) {
  os << "step,loss_simple,loss_pos,loss_vel,loss_foot,loss_total,grad_norm\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n",
                  r.step, r.simple, r.pos, r.vel, r.foot, r.total,
                  r.grad_norm);
    os << buf;
  }
}

inline void write_telemetry_csv(const std::vector<TelemetryRow>& rows,
                                const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("telemetry: cannot open " + path);
  write_telemetry_csv(rows, os);
  if (!os) throw IoError("telemetry: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Model bundle and checkpoints
// ---------------------------------------------------------------------------

/// Everything needed to resume training or to sample: configs, parameters,
/// optimizer state, feature statistics and the master rng state.
struct ModelBundle {
  DenoiserConfig net;
  ConditioningConfig cond;
  DiffusionConfig diff;
  double fps = 20.0;
  ParamStore params;
  AdamState adam;
  FeatureStats norm;
  long long step = 0;
  std::string rng_state;
};

namespace checkpoint_detail {

constexpr char kMagic[4] = {'F', 'G', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_i64(std::ostream& os, std::int64_t v) {
  const auto u = static_cast<std::uint64_t>(v);
  put_u32(os, static_cast<std::uint32_t>(u & 0xffffffffull));
  put_u32(os, static_cast<std::uint32_t>(u >> 32));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint: truncated file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline std::int64_t get_i64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return static_cast<std::int64_t>(lo | (hi << 32));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("checkpoint: truncated string");
  return s;
}

inline void put_f32_data(std::ostream& os, const std::vector<float>& v) {
  for (float x : v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(x));
    std::memcpy(&bits, &x, 4);
    put_u32(os, bits);
  }
}

inline void get_f32_data(std::istream& is, std::vector<float>& v) {
  for (float& x : v) {
    const std::uint32_t bits = get_u32(is);
    std::memcpy(&x, &bits, 4);
  }
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
  put_f32_data(os, t.data);
}

inline Tensor get_tensor(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  Tensor t = Tensor::zeros(shape);
  get_f32_data(is, t.data);
  return t;
}

inline nlohmann::ordered_json configs_to_json(const ModelBundle& mb) {
  nlohmann::ordered_json j;
  j["net"] = {{"layers", mb.net.layers},
              {"heads", mb.net.heads},
              {"d_model", mb.net.d_model},
              {"ff", mb.net.ff},
              {"dropout", mb.net.dropout},
              {"n_max", mb.net.n_max},
              {"feature_width", mb.net.feature_width},
              {"use_part_tokens", mb.net.use_part_tokens}};
  j["cond"] = {{"d_model", mb.cond.d_model},
               {"d_text", mb.cond.d_text},
               {"total_steps", mb.cond.total_steps}};
  j["diff"] = {{"total_steps", mb.diff.total_steps},
               {"schedule", mb.diff.schedule},
               {"guidance_scale", mb.diff.guidance_scale},
               {"dropout_p", mb.diff.dropout_p}};
  j["fps"] = mb.fps;
  return j;
}

inline void configs_from_json(const nlohmann::json& j, ModelBundle& mb) {
  const auto& n = j.at("net");
  mb.net.layers = n.at("layers");
  mb.net.heads = n.at("heads");
  mb.net.d_model = n.at("d_model");
  mb.net.ff = n.at("ff");
  mb.net.dropout = n.at("dropout");
  mb.net.n_max = n.at("n_max");
  mb.net.feature_width = n.at("feature_width");
  mb.net.use_part_tokens = n.at("use_part_tokens");
  const auto& c = j.at("cond");
  mb.cond.d_model = c.at("d_model");
  mb.cond.d_text = c.at("d_text");
  mb.cond.total_steps = c.at("total_steps");
  const auto& d = j.at("diff");
  mb.diff.total_steps = d.at("total_steps");
  mb.diff.schedule = d.at("schedule");
  mb.diff.guidance_scale = d.at("guidance_scale");
  mb.diff.dropout_p = d.at("dropout_p");
  mb.fps = j.at("fps");
}

}  // namespace checkpoint_detail

inline void save_checkpoint(const ModelBundle& mb, std::ostream& os) {
  namespace cd = checkpoint_detail;
  os.write(cd::kMagic, 4);
  cd::put_u32(os, cd::kVersion);
  cd::put_string(os, cd::configs_to_json(mb).dump());
  cd::put_u32(os, static_cast<std::uint32_t>(mb.params.size()));
  for (std::size_t i = 0; i < mb.params.size(); ++i) {
    cd::put_string(os, mb.params.name_at(i));
    cd::put_tensor(os, mb.params.value_at(i));
  }
  cd::put_u32(os, mb.norm.mean.numel() ? 1 : 0);
  if (mb.norm.mean.numel()) {
    cd::put_tensor(os, mb.norm.mean);
    cd::put_tensor(os, mb.norm.std_dev);
  }
  cd::put_i64(os, mb.adam.t);
  cd::put_u32(os, static_cast<std::uint32_t>(mb.adam.m.size()));
  for (std::size_t i = 0; i < mb.adam.m.size(); ++i) {
    cd::put_tensor(os, mb.adam.m[i]);
    cd::put_tensor(os, mb.adam.v[i]);
  }
  cd::put_i64(os, mb.step);
  cd::put_string(os, mb.rng_state);
  if (!os) throw IoError("checkpoint: stream write failed");
}

/// Atomic file save: writes to a temporary sibling and renames into place.
inline void save_checkpoint(const ModelBundle& mb, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open " + tmp);
    save_checkpoint(mb, os);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: rename failed for " + path);
}

inline ModelBundle load_checkpoint(std::istream& is) {
  namespace cd = checkpoint_detail;
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, cd::kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = cd::get_u32(is);
  if (version != cd::kVersion)
    throw VersionError("checkpoint: unsupported version " +
                       std::to_string(version));
  ModelBundle mb;
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(cd::get_string(is));
    cd::configs_from_json(cfg, mb);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config block: ") +
                      e.what());
  }
  const std::uint32_t n_params = cd::get_u32(is);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = cd::get_string(is);
    mb.params.add(name, cd::get_tensor(is));
  }
  if (cd::get_u32(is)) {
    mb.norm.mean = cd::get_tensor(is);
    mb.norm.std_dev = cd::get_tensor(is);
  }
  mb.adam.t = cd::get_i64(is);
  const std::uint32_t n_adam = cd::get_u32(is);
  for (std::uint32_t i = 0; i < n_adam; ++i) {
    mb.adam.m.push_back(cd::get_tensor(is));
    mb.adam.v.push_back(cd::get_tensor(is));
  }
  mb.step = cd::get_i64(is);
  mb.rng_state = cd::get_string(is);
  if (!is) throw FormatError("checkpoint: truncated file");
  return mb;
}

inline ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  return load_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace training_detail {

/// Precomputed per-record state so the loop does no redundant work.
struct PreparedRecord {
  Tensor features_raw;    // [n, D]
  Tensor features_norm;   // [n, D]
  Tensor gt_positions;    // [n, 3J]
  FootContactMask contact;
  TextFeatures text;
};

inline Tensor positions_tensor(const Skeleton& skel, const Motion& m) {
  const auto pos = fk_motion(skel, m);
  const int n = m.frames(), J = m.joint_count();
  Tensor out = Tensor::zeros({n, 3 * J});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j)
      for (int k = 0; k < 3; ++k)
        out.data[static_cast<std::size_t>(i) * 3 * J + 3 * j + k] =
            static_cast<float>(pos[i][j][k]);
  return out;
}

}  // namespace training_detail

/// Called after each optimizer step; may save checkpoints.
using TrainCallback = std::function<void(const ModelBundle&, long long step)>;

/// Deterministic training loop. All randomness (batch indices, timesteps,
/// noise, condition dropout, feature dropout) flows from one master rng
/// seeded by the config, so equal seeds give bit-identical results.
inline ModelBundle train(const Skeleton& skel,
                         const std::vector<DatasetRecord>& records,
                         const TextEmbedder& embedder,
                         const DenoiserConfig& net_cfg,
                         const ConditioningConfig& cond_cfg,
                         const DiffusionConfig& diff_cfg,
                         const TrainingConfig& train_cfg,
                         std::vector<TelemetryRow>* telemetry = nullptr,
                         const TrainCallback& on_checkpoint = {}) {
  net_cfg.validate();
  cond_cfg.validate();
  diff_cfg.validate();
  train_cfg.validate();
  if (records.empty())
    throw ContractError("train: training split is empty");
  if (cond_cfg.d_model != net_cfg.d_model)
    throw ConfigError("train: conditioning and denoiser d_model differ");
  if (cond_cfg.total_steps != diff_cfg.total_steps)
    throw ConfigError("train: conditioning and diffusion step counts differ");
  if (embedder.dim() != cond_cfg.d_text)
    throw ConfigError("train: embedder width does not match d_text");

  const int J = skel.joint_count();
  const int D = flat_width(J);
  if (net_cfg.feature_width != D)
    throw ConfigError("train: denoiser feature width does not match skeleton");

  // Prepare records: features, FK targets, contacts, text embeddings.
  std::vector<training_detail::PreparedRecord> prep;
  prep.reserve(records.size());
  std::vector<Tensor> all_feats;
  double fps = 20.0;
  for (const auto& r : records) {
    if (r.motion.joint_count() != J)
      throw ContractError("train: record joint count mismatch for " + r.id);
    if (r.motion.frames() > net_cfg.n_max)
      throw ContractError("train: record longer than n_max: " + r.id);
    if (r.motion.frames() < 2)
      throw ContractError("train: record needs at least two frames: " + r.id);
    training_detail::PreparedRecord p;
    p.features_raw = motion_to_flat<float>(r.motion);
    p.gt_positions = training_detail::positions_tensor(skel, r.motion);
    p.contact = foot_contact_mask(skel, r.motion);
    p.text = embed_description(embedder, r.parts);
    all_feats.push_back(p.features_raw);
    prep.push_back(std::move(p));
    fps = r.motion.fps;
  }
  const FeatureStats stats = train_cfg.standardize_features
                                 ? compute_feature_stats(all_feats)
                                 : identity_stats(D);
  for (auto& p : prep) p.features_norm = normalize_features(p.features_raw, stats);

  const NoiseSchedule ns =
      make_schedule(diff_cfg.schedule, diff_cfg.total_steps);

  ModelBundle mb;
  mb.net = net_cfg;
  mb.cond = cond_cfg;
  mb.diff = diff_cfg;
  mb.fps = fps;
  mb.norm = stats;
  Rng rng(train_cfg.seed);
  init_conditioning_params(mb.params, cond_cfg, rng);
  init_denoiser_params(mb.params, net_cfg, rng);
  mb.adam = AdamState::init(mb.params);
  AdamConfig adam_cfg;
  adam_cfg.lr = static_cast<float>(train_cfg.lr);

  const int B = train_cfg.batch_size;
  for (long long step = 1; step <= train_cfg.total_steps; ++step) {
    std::vector<int> batch(B);
    for (int e = 0; e < B; ++e)
      batch[e] = rng.uniform_int(0, static_cast<int>(records.size()) - 1);

    Tape tape;
    const BoundParams bound = bind_params(tape, mb.params);
    Tape::Var total{}, simple_acc{}, pos_acc{}, vel_acc{}, foot_acc{};
    for (int e = 0; e < B; ++e) {
      const auto& p = prep[batch[e]];
      const int t = rng.uniform_int(1, diff_cfg.total_steps);
      const Tensor eps = gaussian_like(p.features_norm, rng);
      const Tensor x_t = q_sample(p.features_norm, t, ns, eps);
      auto tokens = build_tokens(tape, bound, cond_cfg, p.text, t);
      tokens =
          condition_dropout(tape, bound, tokens, diff_cfg.dropout_p, rng);
      Rng* drop = net_cfg.dropout > 0.0 ? &rng : nullptr;
      const auto x0_hat_n = denoise(tape, bound, net_cfg, tokens,
                                    tape.constant(x_t), drop);
      const auto simple_e = sum_sq_diff(tape, x0_hat_n, p.features_norm);
      const auto x0_hat_raw = denormalize_var(tape, x0_hat_n, stats);
      const auto geo = geometric_loss_vars(tape, skel, p.features_raw,
                                           p.gt_positions, x0_hat_raw,
                                           p.contact);
      auto total_e = simple_e;
      const auto& w = train_cfg.weights;
      if (w.lambda_pos > 0)
        total_e = tape.add(total_e,
                           tape.scale(geo.pos, float(w.lambda_pos)));
      if (w.lambda_vel > 0)
        total_e = tape.add(total_e,
                           tape.scale(geo.vel, float(w.lambda_vel)));
      if (w.lambda_foot > 0)
        total_e = tape.add(total_e,
                           tape.scale(geo.foot, float(w.lambda_foot)));
      auto acc = [&tape](Tape::Var& slot, Tape::Var v) {
        slot = slot.valid() ? tape.add(slot, v) : v;
      };
      acc(total, total_e);
      acc(simple_acc, simple_e);
      acc(pos_acc, geo.pos);
      acc(vel_acc, geo.vel);
      acc(foot_acc, geo.foot);
    }
    const float inv_b = 1.0f / float(B);
    total = tape.scale(total, inv_b);
    const double loss_value = tape.value(total).data[0];
    if (!std::isfinite(loss_value))
      throw NumericError("train: non-finite loss at step " +
                         std::to_string(step));
    tape.backward(total);
    auto grads = collect_grads(tape, bound);
    const float clip = static_cast<float>(train_cfg.grad_clip);
    const float pre_clip = clip_grad_norm(grads, clip);
    const float post_clip = std::min(pre_clip, clip);
    adam_step(mb.params, grads, mb.adam, adam_cfg);
    mb.step = step;
    mb.rng_state = rng.save_state();

    if (telemetry) {
      TelemetryRow row;
      row.step = step;
      row.simple = tape.value(simple_acc).data[0] * inv_b;
      row.pos = tape.value(pos_acc).data[0] * inv_b;
      row.vel = tape.value(vel_acc).data[0] * inv_b;
      row.foot = tape.value(foot_acc).data[0] * inv_b;
      row.total = loss_value;
      row.grad_norm = post_clip;
      telemetry->push_back(row);
    }
    if (on_checkpoint && train_cfg.checkpoint_interval > 0 &&
        (step % train_cfg.checkpoint_interval == 0 ||
         step == train_cfg.total_steps))
      on_checkpoint(mb, step);
  }
  return mb;
}

}  // namespace fgmdm
