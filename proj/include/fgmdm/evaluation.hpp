#pragma once

// Motion-set evaluation: Frechet distance between Gaussian fits of feature
// sets, sample diversity, text-motion matching distance, and the small
// contrastive text-motion evaluator that provides the shared feature space
// the other metrics are computed in.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include <fgmdm/autograd.hpp>
#include <fgmdm/common.hpp>
#include <fgmdm/dataset.hpp>
#include <fgmdm/skeleton.hpp>
#include <fgmdm/tensor.hpp>
#include <fgmdm/text_embed.hpp>
#include <fgmdm/training.hpp>

namespace fgmdm {

// ---------------------------------------------------------------------------
// Gaussian statistics of a feature set
// ---------------------------------------------------------------------------

struct GaussianStats {
  Tensor mean;  // [1, d]
  Tensor cov;   // [d, d], symmetric
  long long count = 0;
  bool shrinkage = false;  // true when the diagonal ridge was applied
};

/// Mean and unbiased covariance of a feature matrix [N, d]. When N < d + 1
/// the sample covariance is rank-deficient, so a small ridge (1e-6 on the
/// diagonal) is added and flagged.
inline GaussianStats gaussian_stats(const Tensor& features) {
  if (features.shape.size() != 2)
    throw ContractError("gaussian_stats: features must be [N, d]");
  const int n = features.shape[0];
  const int d = features.shape[1];
  if (n < 2)
    throw ContractError("gaussian_stats: need at least 2 feature rows");

  GaussianStats st;
  st.count = n;
  st.mean = Tensor::zeros({1, d});
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      mu[static_cast<std::size_t>(j)] +=
          static_cast<double>(features.data[static_cast<std::size_t>(i) * d + j]);
  for (int j = 0; j < d; ++j) {
    mu[static_cast<std::size_t>(j)] /= n;
    st.mean.data[static_cast<std::size_t>(j)] =
        static_cast<float>(mu[static_cast<std::size_t>(j)]);
  }

  st.cov = Tensor::zeros({d, d});
  std::vector<double> acc(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < d; ++a) {
      const double xa =
          static_cast<double>(features.data[static_cast<std::size_t>(i) * d + a]) -
          mu[static_cast<std::size_t>(a)];
      for (int b = a; b < d; ++b) {
        const double xb =
            static_cast<double>(features.data[static_cast<std::size_t>(i) * d + b]) -
            mu[static_cast<std::size_t>(b)];
        acc[static_cast<std::size_t>(a) * d + b] += xa * xb;
      }
    }
  }
  st.shrinkage = (n < d + 1);
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      double v = acc[static_cast<std::size_t>(a) * d + b] / (n - 1);
      if (st.shrinkage && a == b) v += 1e-6;
      st.cov.data[static_cast<std::size_t>(a) * d + b] = static_cast<float>(v);
      st.cov.data[static_cast<std::size_t>(b) * d + a] = static_cast<float>(v);
    }
  }
  return st;
}

namespace eval_detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  const int r = t.shape[0], c = t.shape[1];
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      m(i, j) = static_cast<double>(t.data[static_cast<std::size_t>(i) * c + j]);
  return m;
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (numerical noise) are clamped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw NumericError("frechet_distance: eigendecomposition failed");
  Eigen::VectorXd s = es.eigenvalues();
  for (Eigen::Index i = 0; i < s.size(); ++i)
    s[i] = std::sqrt(std::max(0.0, s[i]));
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

inline void check_symmetric(const Tensor& cov, const char* who) {
  const int d = cov.shape[0];
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double a = cov.data[static_cast<std::size_t>(i) * d + j];
      const double b = cov.data[static_cast<std::size_t>(j) * d + i];
      if (std::abs(a - b) > 1e-8)
        throw ContractError(std::string(who) + ": covariance is not symmetric");
    }
}

}  // namespace eval_detail

/// Frechet distance between two Gaussians:
///   ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}).
/// Symmetric in its arguments and clamped to be non-negative.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.shape.size() != 2 || b.mean.shape.size() != 2 ||
      a.cov.shape.size() != 2 || b.cov.shape.size() != 2)
    throw ContractError("frechet_distance: malformed statistics");
  const int d = a.mean.shape[1];
  if (b.mean.shape[1] != d || a.cov.shape[0] != d || a.cov.shape[1] != d ||
      b.cov.shape[0] != d || b.cov.shape[1] != d)
    throw ContractError("frechet_distance: dimension mismatch between statistics");
  eval_detail::check_symmetric(a.cov, "frechet_distance");
  eval_detail::check_symmetric(b.cov, "frechet_distance");

  double dmu2 = 0.0;
  for (int j = 0; j < d; ++j) {
    const double diff = static_cast<double>(a.mean.data[static_cast<std::size_t>(j)]) -
                        static_cast<double>(b.mean.data[static_cast<std::size_t>(j)]);
    dmu2 += diff * diff;
  }

  const Eigen::MatrixXd sa = eval_detail::to_eigen(a.cov);
  const Eigen::MatrixXd sb = eval_detail::to_eigen(b.cov);
  const Eigen::MatrixXd ra = eval_detail::psd_sqrt(sa);
  Eigen::MatrixXd inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose().eval());  // keep exactly symmetric
  const double tr_mean = eval_detail::psd_sqrt(inner).trace();
  const double fid = dmu2 + sa.trace() + sb.trace() - 2.0 * tr_mean;
  return std::max(0.0, fid);
}

// ---------------------------------------------------------------------------
// Diversity and matching distance
// ---------------------------------------------------------------------------

/// Mean Euclidean distance between `pair_count` randomly drawn pairs of
/// distinct rows of `features` [N, d]. Deterministic in `seed`.
inline double diversity(const Tensor& features, int pair_count, std::uint64_t seed) {
  if (features.shape.size() != 2)
    throw ContractError("diversity: features must be [N, d]");
  const int n = features.shape[0];
  const int d = features.shape[1];
  if (n < 2) throw ContractError("diversity: need at least 2 feature rows");
  if (pair_count < 1) throw ContractError("diversity: pair_count must be >= 1");

  Rng rng(seed);
  double total = 0.0;
  for (int p = 0; p < pair_count; ++p) {
    const int i = rng.uniform_int(0, n - 1);
    int j = rng.uniform_int(0, n - 2);
    if (j >= i) ++j;  // uniform over indices distinct from i
    double s = 0.0;
    for (int c = 0; c < d; ++c) {
      const double diff =
          static_cast<double>(features.data[static_cast<std::size_t>(i) * d + c]) -
          static_cast<double>(features.data[static_cast<std::size_t>(j) * d + c]);
      s += diff * diff;
    }
    total += std::sqrt(s);
  }
  return total / pair_count;
}

/// Mean Euclidean distance between corresponding rows of two feature
/// matrices [N, d] (text features vs. the features of the motions generated
/// from those texts).
inline double mm_dist(const Tensor& text_features, const Tensor& motion_features) {
  if (text_features.shape.size() != 2 || motion_features.shape.size() != 2)
    throw ContractError("mm_dist: features must be [N, d]");
  if (text_features.shape[0] != motion_features.shape[0])
    throw ContractError("mm_dist: feature counts do not match");
  if (text_features.shape[1] != motion_features.shape[1])
    throw ContractError("mm_dist: feature widths do not match");
  const int n = text_features.shape[0];
  const int d = text_features.shape[1];
  if (n < 1) throw ContractError("mm_dist: need at least one pair");

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) {
      const double diff =
          static_cast<double>(text_features.data[static_cast<std::size_t>(i) * d + c]) -
          static_cast<double>(motion_features.data[static_cast<std::size_t>(i) * d + c]);
      s += diff * diff;
    }
    total += std::sqrt(s);
  }
  return total / n;
}

// ---------------------------------------------------------------------------
// Contrastive text-motion evaluator
// ---------------------------------------------------------------------------

struct EvaluatorConfig {
  int feature_width = 67;  // flat motion feature width (3 + 4 * joints)
  int d_text = 256;        // hashed text embedding width
  int hidden = 64;
  int d_eval = 32;  // shared embedding width
  int batch = 16;
  int steps = 500;
  double lr = 1e-3;
  double temperature = 0.07;

  void validate() const {
    if (feature_width < 1 || d_text < 1 || hidden < 1 || d_eval < 1)
      throw ConfigError("evaluator: widths must be >= 1");
    if (batch < 2) throw ConfigError("evaluator: batch must be >= 2");
    if (steps < 1) throw ConfigError("evaluator: steps must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("evaluator: lr must be positive");
    if (!(temperature > 0.0))
      throw ConfigError("evaluator: temperature must be positive");
  }
};

struct EvaluatorBundle {
  EvaluatorConfig cfg;
  ParamStore params;
  FeatureStats norm;          // motion feature normalization
  bool single_class = false;  // training data had < 2 distinct templates
  std::vector<double> losses;  // per-step contrastive loss
};

template <typename T>
void init_evaluator_params(ParamStoreT<T>& store, const EvaluatorConfig& cfg,
                           Rng& rng) {
  cfg.validate();
  auto dense = [&](const std::string& name, int in, int out) {
    TensorT<T> w = TensorT<T>::zeros({in, out});
    xavier_init(w, rng);
    store.add(name + "_w", std::move(w));
    store.add(name + "_b", TensorT<T>::zeros({1, out}));
  };
  dense("eval.motion_in", cfg.feature_width, cfg.hidden);
  dense("eval.motion_out", cfg.hidden, cfg.d_eval);
  dense("eval.text_in", cfg.d_text, cfg.hidden);
  dense("eval.text_out", cfg.hidden, cfg.d_eval);
}

namespace eval_detail {

/// Per-frame projection + GELU, temporal mean pooling, projection head,
/// L2 normalization. `flat_norm` is a normalized [n, feature_width] motion.
template <typename T>
typename TapeT<T>::Var encode_motion_var(TapeT<T>& tape,
                                         const BoundParamsT<T>& bound,
                                         typename TapeT<T>::Var flat_norm) {
  auto h = tape.add_row(tape.matmul(flat_norm, bound.at("eval.motion_in_w")),
                        bound.at("eval.motion_in_b"));
  h = tape.gelu(h);
  h = tape.mean_rows(h);
  auto z = tape.add_row(tape.matmul(h, bound.at("eval.motion_out_w")),
                        bound.at("eval.motion_out_b"));
  return tape.l2_normalize_rows(z);
}

/// Text projection head over a hashed embedding [1, d_text].
template <typename T>
typename TapeT<T>::Var encode_text_var(TapeT<T>& tape,
                                       const BoundParamsT<T>& bound,
                                       typename TapeT<T>::Var text_embedding) {
  auto h = tape.add_row(tape.matmul(text_embedding, bound.at("eval.text_in_w")),
                        bound.at("eval.text_in_b"));
  h = tape.gelu(h);
  auto z = tape.add_row(tape.matmul(h, bound.at("eval.text_out_w")),
                        bound.at("eval.text_out_b"));
  return tape.l2_normalize_rows(z);
}

template <typename T>
TensorT<T> embedding_tensor(const TextEmbedder& embedder, const std::string& text) {
  const std::vector<float> e = embedder.embed(text);
  TensorT<T> out = TensorT<T>::zeros({1, static_cast<int>(e.size())});
  for (std::size_t i = 0; i < e.size(); ++i) out.data[i] = static_cast<T>(e[i]);
  return out;
}

}  // namespace eval_detail

/// Evaluator feature for one motion: [1, d_eval], unit norm.
inline Tensor evaluator_motion_feature(const EvaluatorBundle& bundle,
                                       const Motion& motion) {
  Tape tape;
  auto bound = bind_params(tape, bundle.params);
  const Tensor flat =
      normalize_features(motion_to_flat<float>(motion), bundle.norm);
  if (flat.shape[1] != bundle.cfg.feature_width)
    throw ContractError("evaluator: motion feature width does not match config");
  auto z = eval_detail::encode_motion_var(tape, bound, tape.constant(flat));
  return tape.value(z);
}

/// Evaluator feature for one text: [1, d_eval], unit norm.
inline Tensor evaluator_text_feature(const EvaluatorBundle& bundle,
                                     const TextEmbedder& embedder,
                                     const std::string& text) {
  if (embedder.dim() != bundle.cfg.d_text)
    throw ConfigError("evaluator: embedder width does not match config");
  Tape tape;
  auto bound = bind_params(tape, bundle.params);
  auto z = eval_detail::encode_text_var(
      tape, bound,
      tape.constant(eval_detail::embedding_tensor<float>(embedder, text)));
  return tape.value(z);
}

/// Stack evaluator motion features for a set of motions into [N, d_eval].
inline Tensor evaluator_motion_features(const EvaluatorBundle& bundle,
                                        const std::vector<Motion>& motions) {
  if (motions.empty())
    throw ContractError("evaluator: need at least one motion");
  Tensor out = Tensor::zeros({static_cast<int>(motions.size()), bundle.cfg.d_eval});
  for (std::size_t i = 0; i < motions.size(); ++i) {
    const Tensor f = evaluator_motion_feature(bundle, motions[i]);
    std::copy(f.data.begin(), f.data.end(),
              out.data.begin() +
                  static_cast<std::ptrdiff_t>(i) * bundle.cfg.d_eval);
  }
  return out;
}

/// Stack evaluator text features for a set of texts into [N, d_eval].
inline Tensor evaluator_text_features(const EvaluatorBundle& bundle,
                                      const TextEmbedder& embedder,
                                      const std::vector<std::string>& texts) {
  if (texts.empty()) throw ContractError("evaluator: need at least one text");
  Tensor out = Tensor::zeros({static_cast<int>(texts.size()), bundle.cfg.d_eval});
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const Tensor f = evaluator_text_feature(bundle, embedder, texts[i]);
    std::copy(f.data.begin(), f.data.end(),
              out.data.begin() +
                  static_cast<std::ptrdiff_t>(i) * bundle.cfg.d_eval);
  }
  return out;
}

/// Train the contrastive evaluator on dataset records with a symmetric
/// temperature-scaled InfoNCE objective over in-batch negatives.
/// Deterministic in `seed`. A single-class dataset is tolerated (the flag is
/// set on the returned bundle so callers can skip retrieval checks).
inline EvaluatorBundle train_evaluator(const std::vector<DatasetRecord>& records,
                                       const TextEmbedder& embedder,
                                       const EvaluatorConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  if (records.empty())
    throw ContractError("train_evaluator: no training records");
  if (embedder.dim() != cfg.d_text)
    throw ConfigError("train_evaluator: embedder width does not match config");

  EvaluatorBundle bundle;
  bundle.cfg = cfg;

  std::set<std::string> templates;
  for (const auto& r : records) templates.insert(r.template_name);
  bundle.single_class = templates.size() < 2;

  std::vector<Tensor> flats;
  std::vector<Tensor> text_embeddings;
  flats.reserve(records.size());
  text_embeddings.reserve(records.size());
  for (const auto& r : records) {
    Tensor f = motion_to_flat<float>(r.motion);
    if (f.shape[1] != cfg.feature_width)
      throw ConfigError("train_evaluator: motion width does not match config");
    flats.push_back(std::move(f));
    text_embeddings.push_back(
        eval_detail::embedding_tensor<float>(embedder, r.parts.full_text));
  }
  bundle.norm = compute_feature_stats(flats);
  for (auto& f : flats) f = normalize_features(f, bundle.norm);

  Rng rng(seed);
  init_evaluator_params(bundle.params, cfg, rng);
  AdamConfig adam_cfg;
  adam_cfg.lr = static_cast<float>(cfg.lr);
  AdamState adam = AdamState::init(bundle.params);

  const int b = cfg.batch;
  Tensor eye = Tensor::zeros({b, b});
  for (int i = 0; i < b; ++i) eye.data[static_cast<std::size_t>(i) * b + i] = 1.0f;

  bundle.losses.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> batch(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i)
      batch[static_cast<std::size_t>(i)] =
          rng.uniform_int(0, static_cast<int>(records.size()) - 1);

    Tape tape;
    auto bound = bind_params(tape, bundle.params);
    std::vector<Tape::Var> motion_rows, text_rows;
    motion_rows.reserve(static_cast<std::size_t>(b));
    text_rows.reserve(static_cast<std::size_t>(b));
    for (int i : batch) {
      motion_rows.push_back(eval_detail::encode_motion_var(
          tape, bound, tape.constant(flats[static_cast<std::size_t>(i)])));
      text_rows.push_back(eval_detail::encode_text_var(
          tape, bound,
          tape.constant(text_embeddings[static_cast<std::size_t>(i)])));
    }
    auto motion_f = tape.concat_rows(motion_rows);  // [b, d_eval]
    auto text_f = tape.concat_rows(text_rows);      // [b, d_eval]

    // logits[i][j] = <text_i, motion_j> / temperature
    auto logits = tape.scale(tape.matmul_nt(text_f, motion_f),
                             static_cast<float>(1.0 / cfg.temperature));
    auto eye_c = tape.constant(eye);
    auto diag_t2m = tape.mul(tape.log_softmax_rows(logits), eye_c);
    auto diag_m2t = tape.mul(tape.log_softmax_rows(tape.transpose(logits)), eye_c);
    auto loss = tape.scale(
        tape.add(tape.sum(diag_t2m), tape.sum(diag_m2t)),
        -0.5f / static_cast<float>(b));

    const double loss_value = static_cast<double>(tape.value(loss).data[0]);
    if (!std::isfinite(loss_value))
      throw NumericError("train_evaluator: non-finite loss at step " +
                         std::to_string(step));
    bundle.losses.push_back(loss_value);

    tape.backward(loss);
    auto grads = collect_grads(tape, bound);
    adam_step(bundle.params, grads, adam, adam_cfg);
  }
  return bundle;
}

/// Top-1 text-to-motion retrieval accuracy: for each record's text, rank all
/// candidate motions by evaluator similarity and count how often the paired
/// motion comes first.
inline double retrieval_top1(const EvaluatorBundle& bundle,
                             const TextEmbedder& embedder,
                             const std::vector<DatasetRecord>& candidates) {
  if (candidates.size() < 2)
    throw ContractError("retrieval_top1: need at least 2 candidates");
  const int n = static_cast<int>(candidates.size());
  const int d = bundle.cfg.d_eval;
  std::vector<Tensor> motion_f, text_f;
  motion_f.reserve(candidates.size());
  text_f.reserve(candidates.size());
  for (const auto& r : candidates) {
    motion_f.push_back(evaluator_motion_feature(bundle, r.motion));
    text_f.push_back(
        evaluator_text_feature(bundle, embedder, r.parts.full_text));
  }
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_sim = -2.0;
    for (int j = 0; j < n; ++j) {
      double sim = 0.0;
      for (int c = 0; c < d; ++c)
        sim += static_cast<double>(text_f[static_cast<std::size_t>(i)].data[c]) *
               static_cast<double>(motion_f[static_cast<std::size_t>(j)].data[c]);
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    if (best == i) ++hits;
  }
  return static_cast<double>(hits) / n;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
  double fid = 0.0;
  double diversity = 0.0;
  double mm_dist = 0.0;
  long long n_gen = 0;
  long long n_ref = 0;
  std::uint64_t seed = 0;
  bool shrinkage = false;  // set when either Gaussian fit needed the ridge

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["fid"] = fid;
    j["diversity"] = diversity;
    j["mm_dist"] = mm_dist;
    j["n_gen"] = n_gen;
    j["n_ref"] = n_ref;
    j["seed"] = seed;
    j["shrinkage"] = shrinkage;
    return j.dump();
  }

  static EvalReport from_json(const std::string& line) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("eval report: ") + e.what());
    }
    EvalReport r;
    try {
      r.fid = j.at("fid").get<double>();
      r.diversity = j.at("diversity").get<double>();
      r.mm_dist = j.at("mm_dist").get<double>();
      r.n_gen = j.at("n_gen").get<long long>();
      r.n_ref = j.at("n_ref").get<long long>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.shrinkage = j.value("shrinkage", false);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("eval report: ") + e.what());
    }
    return r;
  }
};

/// Full evaluation of a generated motion set against a reference set.
/// Features come from the trained evaluator's motion encoder; MM Dist pairs
/// each generated motion with the text it was generated from.
inline EvalReport evaluate_motion_set(const EvaluatorBundle& evaluator,
                                      const TextEmbedder& embedder,
                                      const std::vector<Motion>& generated,
                                      const std::vector<std::string>& prompts,
                                      const std::vector<Motion>& reference,
                                      int diversity_pairs, std::uint64_t seed) {
  if (generated.size() != prompts.size())
    throw ContractError("evaluate: generated motions and prompts must pair up");
  const Tensor gen_f = evaluator_motion_features(evaluator, generated);
  const Tensor ref_f = evaluator_motion_features(evaluator, reference);
  const Tensor txt_f = evaluator_text_features(evaluator, embedder, prompts);

  const GaussianStats gs = gaussian_stats(gen_f);
  const GaussianStats rs = gaussian_stats(ref_f);

  EvalReport rep;
  rep.fid = frechet_distance(gs, rs);
  rep.diversity = diversity(gen_f, diversity_pairs, seed);
  rep.mm_dist = mm_dist(txt_f, gen_f);
  rep.n_gen = static_cast<long long>(generated.size());
  rep.n_ref = static_cast<long long>(reference.size());
  rep.seed = seed;
  rep.shrinkage = gs.shrinkage || rs.shrinkage;
  return rep;
}

}  // namespace fgmdm
