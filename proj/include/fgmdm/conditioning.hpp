#pragma once
// Conditioning: turns a six-part motion description and a diffusion timestep
// into one global token and six part tokens for the denoiser.

#include <array>
#include <cmath>
#include <string>

#include "fgmdm/autograd.hpp"
#include "fgmdm/common.hpp"
#include "fgmdm/paraphrase.hpp"
#include "fgmdm/parts.hpp"
#include "fgmdm/text_embed.hpp"

namespace fgmdm {

struct ConditioningConfig {
  int d_model = 512;
  int d_text = 256;
  int total_steps = 1000;  // valid timestep range is 1..total_steps

  void validate() const {
    if (d_model < 1 || d_text < 1 || total_steps < 1)
      throw ConfigError("conditioning: dimensions and steps must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

/// Xavier/Glorot uniform fill for a [fan_in, fan_out] weight matrix.
template <typename T>
void xavier_init(TensorT<T>& w, Rng& rng) {
  if (w.rank() != 2)
    throw ContractError("xavier_init: expected a rank-2 weight");
  const double limit =
      std::sqrt(6.0 / (double(w.shape[0]) + double(w.shape[1])));
  for (auto& v : w.data)
    v = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Fixed sinusoidal code for an integer timestep: alternating
/// sin/cos(t / 10000^(2i/d)) pairs. Distinct integers map to distinct codes.
template <typename T = float>
TensorT<T> sinusoidal_time_embedding(int t, int d_model) {
  if (d_model < 1)
    throw ContractError("time embedding: d_model must be >= 1");
  TensorT<T> pe = TensorT<T>::zeros({1, d_model});
  for (int i = 0; 2 * i < d_model; ++i) {
    const double div = std::pow(10000.0, (2.0 * i) / d_model);
    pe.data[2 * i] = static_cast<T>(std::sin(t / div));
    if (2 * i + 1 < d_model)
      pe.data[2 * i + 1] = static_cast<T>(std::cos(t / div));
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Adds the conditioning parameters: a learned projection over the sinusoidal
/// time code, shared text projections for the global and part tokens, and the
/// learned null token used when the condition is dropped.
template <typename T>
void init_conditioning_params(ParamStoreT<T>& params,
                              const ConditioningConfig& cfg, Rng& rng) {
  cfg.validate();
  TensorT<T> time_w = TensorT<T>::zeros({cfg.d_model, cfg.d_model});
  TensorT<T> gl_w = TensorT<T>::zeros({cfg.d_text, cfg.d_model});
  TensorT<T> pt_w = TensorT<T>::zeros({cfg.d_text, cfg.d_model});
  xavier_init(time_w, rng);
  xavier_init(gl_w, rng);
  xavier_init(pt_w, rng);
  params.add("cond.time_w", std::move(time_w));
  params.add("cond.time_b", TensorT<T>::zeros({1, cfg.d_model}));
  params.add("cond.gl_w", std::move(gl_w));
  params.add("cond.gl_b", TensorT<T>::zeros({1, cfg.d_model}));
  params.add("cond.pt_w", std::move(pt_w));
  params.add("cond.pt_b", TensorT<T>::zeros({1, cfg.d_model}));
  params.add("cond.null", TensorT<T>::zeros({1, cfg.d_model}));
}

// ---------------------------------------------------------------------------
// Text features and tokens
// ---------------------------------------------------------------------------

/// Raw hashed text embeddings for one description, precomputed off-tape.
template <typename T>
struct TextFeaturesT {
  TensorT<T> full;                           // [1, d_text]
  std::array<TensorT<T>, kPartCount> parts;  // each [1, d_text]
};
using TextFeatures = TextFeaturesT<float>;

template <typename T = float>
TextFeaturesT<T> embed_description(const TextEmbedder& embedder,
                                   const FineGrainedDescription& desc) {
  auto cast = [](const Tensor& src) {
    TensorT<T> out = TensorT<T>::zeros(src.shape);
    for (std::size_t i = 0; i < src.data.size(); ++i)
      out.data[i] = static_cast<T>(src.data[i]);
    return out;
  };
  TextFeaturesT<T> tf;
  tf.full = cast(embedder.embed_tensor(desc.full_text));
  for (int p = 0; p < kPartCount; ++p)
    tf.parts[p] = cast(embedder.embed_tensor(desc.parts[p]));
  return tf;
}

/// Tape handles for the conditioning tokens of one (description, t) pair.
template <typename T>
struct ConditionTokensT {
  using Var = typename TapeT<T>::Var;
  Var gl;
  std::array<Var, kPartCount> pt;
  Var time_vec;  // learned projection of the sinusoidal code, reused on drop
  bool null_flag = false;
  int t = 0;
};
using ConditionTokens = ConditionTokensT<float>;

/// gl = proj_g(full) + time(t); pt_j = proj_p(parts_j) + time(t). The time
/// vector is folded additively into every token.
template <typename T>
ConditionTokensT<T> build_tokens(TapeT<T>& tape, const BoundParamsT<T>& bound,
                                 const ConditioningConfig& cfg,
                                 const TextFeaturesT<T>& tf, int t) {
  cfg.validate();
  if (t < 1 || t > cfg.total_steps)
    throw ContractError("build_tokens: timestep out of range");
  if (tf.full.rank() != 2 || tf.full.cols() != cfg.d_text)
    throw ContractError("build_tokens: text feature width mismatch");

  ConditionTokensT<T> tok;
  tok.t = t;
  const auto code =
      tape.constant(sinusoidal_time_embedding<T>(t, cfg.d_model));
  tok.time_vec = tape.add(tape.matmul(code, bound.at("cond.time_w")),
                          bound.at("cond.time_b"));
  tok.gl = tape.add(
      tape.add(tape.matmul(tape.constant(tf.full), bound.at("cond.gl_w")),
               bound.at("cond.gl_b")),
      tok.time_vec);
  for (int p = 0; p < kPartCount; ++p) {
    if (tf.parts[p].rank() != 2 || tf.parts[p].cols() != cfg.d_text)
      throw ContractError("build_tokens: part feature width mismatch");
    tok.pt[p] = tape.add(
        tape.add(
            tape.matmul(tape.constant(tf.parts[p]), bound.at("cond.pt_w")),
            bound.at("cond.pt_b")),
        tok.time_vec);
  }
  return tok;
}

/// Classifier-free-guidance dropout: with probability p the whole condition
/// is replaced by the learned null token (plus the time vector, so the
/// denoiser still sees t). All-or-nothing; consumes exactly one uniform.
template <typename T>
ConditionTokensT<T> condition_dropout(TapeT<T>& tape,
                                      const BoundParamsT<T>& bound,
                                      const ConditionTokensT<T>& tokens,
                                      double p, Rng& rng) {
  if (p < 0.0 || p > 1.0)
    throw ContractError("condition_dropout: p must be in [0, 1]");
  const double u = rng.uniform();
  if (u >= p) return tokens;
  ConditionTokensT<T> out = tokens;
  const auto null_tok = tape.add(bound.at("cond.null"), tokens.time_vec);
  out.gl = null_tok;
  for (int j = 0; j < kPartCount; ++j) out.pt[j] = null_tok;
  out.null_flag = true;
  return out;
}

/// Null-condition tokens without a dropout draw (used at sampling time for
/// the unconditional guidance branch).
template <typename T>
ConditionTokensT<T> null_tokens(TapeT<T>& tape, const BoundParamsT<T>& bound,
                                const ConditioningConfig& cfg, int t) {
  cfg.validate();
  if (t < 1 || t > cfg.total_steps)
    throw ContractError("null_tokens: timestep out of range");
  ConditionTokensT<T> tok;
  tok.t = t;
  const auto code =
      tape.constant(sinusoidal_time_embedding<T>(t, cfg.d_model));
  tok.time_vec = tape.add(tape.matmul(code, bound.at("cond.time_w")),
                          bound.at("cond.time_b"));
  const auto null_tok = tape.add(bound.at("cond.null"), tok.time_vec);
  tok.gl = null_tok;
  for (int j = 0; j < kPartCount; ++j) tok.pt[j] = null_tok;
  tok.null_flag = true;
  return tok;
}

}  // namespace fgmdm
