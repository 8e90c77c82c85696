#pragma once
// Denoiser network: a transformer encoder that reads [global token,
// part tokens, frame tokens] and predicts the clean motion features.

#include <cstdint>
#include <string>
#include <vector>

#include "fgmdm/autograd.hpp"
#include "fgmdm/common.hpp"
#include "fgmdm/conditioning.hpp"

namespace fgmdm {

struct DenoiserConfig {
  int layers = 8;
  int heads = 4;
  int d_model = 512;
  int ff = 0;  // feed-forward width; 0 means 4 * d_model
  double dropout = 0.1;
  int n_max = 196;         // longest supported frame sequence
  int feature_width = 67;  // flattened per-frame motion features (D_flat)
  bool use_part_tokens = true;  // false drops the six part tokens (ablation)

  int ff_width() const { return ff > 0 ? ff : 4 * d_model; }
  int cond_tokens() const { return use_part_tokens ? 1 + kPartCount : 1; }

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || n_max < 1 ||
        feature_width < 1)
      throw ConfigError("denoiser: sizes must be >= 1");
    if (d_model % heads != 0)
      throw ConfigError("denoiser: d_model must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("denoiser: dropout must be in [0, 1)");
  }
};

/// Learned parameter count for one config (conditioning params not included).
inline std::int64_t denoiser_param_count(const DenoiserConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d_model;
  const std::int64_t f = cfg.ff_width();
  const std::int64_t D = cfg.feature_width;
  const std::int64_t in_proj = D * d + d;
  const std::int64_t attn = 4 * (d * d + d);
  const std::int64_t ffn = d * f + f + f * d + d;
  const std::int64_t norms = 2 * (2 * d);
  const std::int64_t out_proj = d * D + D;
  return in_proj + cfg.layers * (attn + ffn + norms) + out_proj;
}

/// Adds the denoiser parameters under "net.*". The output projection and the
/// layer-norm biases start at zero so a fresh network predicts all zeros.
template <typename T>
void init_denoiser_params(ParamStoreT<T>& params, const DenoiserConfig& cfg,
                          Rng& rng) {
  cfg.validate();
  const int d = cfg.d_model;
  const int f = cfg.ff_width();
  const int D = cfg.feature_width;
  auto xavier = [&rng](std::vector<int> shape) {
    TensorT<T> w = TensorT<T>::zeros(shape);
    xavier_init(w, rng);
    return w;
  };
  params.add("net.in_w", xavier({D, d}));
  params.add("net.in_b", TensorT<T>::zeros({1, d}));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "net.l" + std::to_string(l) + ".";
    params.add(p + "q_w", xavier({d, d}));
    params.add(p + "q_b", TensorT<T>::zeros({1, d}));
    params.add(p + "k_w", xavier({d, d}));
    params.add(p + "k_b", TensorT<T>::zeros({1, d}));
    params.add(p + "v_w", xavier({d, d}));
    params.add(p + "v_b", TensorT<T>::zeros({1, d}));
    params.add(p + "o_w", xavier({d, d}));
    params.add(p + "o_b", TensorT<T>::zeros({1, d}));
    params.add(p + "ln1_g", TensorT<T>::full({d}, T(1)));
    params.add(p + "ln1_b", TensorT<T>::zeros({d}));
    params.add(p + "ff1_w", xavier({d, f}));
    params.add(p + "ff1_b", TensorT<T>::zeros({1, f}));
    params.add(p + "ff2_w", xavier({f, d}));
    params.add(p + "ff2_b", TensorT<T>::zeros({1, d}));
    params.add(p + "ln2_g", TensorT<T>::full({d}, T(1)));
    params.add(p + "ln2_b", TensorT<T>::zeros({d}));
  }
  params.add("net.out_w", TensorT<T>::zeros({d, D}));
  params.add("net.out_b", TensorT<T>::zeros({1, D}));
}

/// Fixed sinusoidal position table for n frame tokens, rows 0..n-1.
template <typename T = float>
TensorT<T> positional_table(int n, int d_model) {
  if (n < 1) throw ContractError("positional_table: n must be >= 1");
  TensorT<T> out = TensorT<T>::zeros({n, d_model});
  for (int i = 0; i < n; ++i) {
    const TensorT<T> row = sinusoidal_time_embedding<T>(i, d_model);
    for (int j = 0; j < d_model; ++j)
      out.data[static_cast<std::size_t>(i) * d_model + j] = row.data[j];
  }
  return out;
}

namespace denoiser_detail {

/// Multi-head self-attention block over a [S, d] sequence.
template <typename T>
typename TapeT<T>::Var self_attention(TapeT<T>& tape,
                                      const BoundParamsT<T>& bound,
                                      const std::string& p, int heads,
                                      typename TapeT<T>::Var x) {
  using Var = typename TapeT<T>::Var;
  const int d = tape.value(x).cols();
  const int dh = d / heads;
  const Var q = tape.add_row(tape.matmul(x, bound.at(p + "q_w")),
                             bound.at(p + "q_b"));
  const Var k = tape.add_row(tape.matmul(x, bound.at(p + "k_w")),
                             bound.at(p + "k_b"));
  const Var v = tape.add_row(tape.matmul(x, bound.at(p + "v_w")),
                             bound.at(p + "v_b"));
  std::vector<Var> head_out;
  head_out.reserve(heads);
  const T inv_sqrt = T(1) / static_cast<T>(std::sqrt(double(dh)));
  for (int h = 0; h < heads; ++h) {
    const Var qh = tape.col_slice(q, h * dh, (h + 1) * dh);
    const Var kh = tape.col_slice(k, h * dh, (h + 1) * dh);
    const Var vh = tape.col_slice(v, h * dh, (h + 1) * dh);
    const Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
    head_out.push_back(tape.matmul(tape.softmax_rows(scores), vh));
  }
  const Var merged =
      heads == 1 ? head_out[0] : tape.concat_cols(head_out);
  return tape.add_row(tape.matmul(merged, bound.at(p + "o_w")),
                      bound.at(p + "o_b"));
}

}  // namespace denoiser_detail

/// Runs the encoder on [GL, PT_1..6, frames] and returns the predicted clean
/// features for the n frame positions ([n, feature_width]). Pass drop_rng to
/// enable dropout (training); leave it null for deterministic inference.
template <typename T>
typename TapeT<T>::Var denoise(TapeT<T>& tape, const BoundParamsT<T>& bound,
                               const DenoiserConfig& cfg,
                               const ConditionTokensT<T>& tokens,
                               typename TapeT<T>::Var x_t,
                               Rng* drop_rng = nullptr) {
  using Var = typename TapeT<T>::Var;
  cfg.validate();
  const TensorT<T>& xv = tape.value(x_t);
  if (xv.rank() != 2 || xv.cols() != cfg.feature_width)
    throw ContractError("denoise: expected [n, feature_width] input");
  const int n = xv.rows();
  if (n > cfg.n_max) throw ContractError("denoise: n exceeds n_max");

  // Frame tokens: projected features plus sinusoidal positions.
  Var frames = tape.add_row(tape.matmul(x_t, bound.at("net.in_w")),
                            bound.at("net.in_b"));
  frames =
      tape.add(frames, tape.constant(positional_table<T>(n, cfg.d_model)));

  std::vector<Var> rows;
  rows.reserve(static_cast<std::size_t>(cfg.cond_tokens()) + 1);
  rows.push_back(tokens.gl);
  if (cfg.use_part_tokens)
    for (int p = 0; p < kPartCount; ++p) rows.push_back(tokens.pt[p]);
  rows.push_back(frames);
  Var seq = tape.concat_rows(rows);

  const bool training = drop_rng != nullptr && cfg.dropout > 0.0;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "net.l" + std::to_string(l) + ".";
    Var att =
        denoiser_detail::self_attention(tape, bound, p, cfg.heads, seq);
    if (training) att = tape.dropout(att, T(cfg.dropout), *drop_rng);
    seq = tape.layer_norm_rows(tape.add(seq, att), bound.at(p + "ln1_g"),
                               bound.at(p + "ln1_b"));
    Var ff = tape.add_row(
        tape.matmul(tape.gelu(tape.add_row(tape.matmul(seq, bound.at(p + "ff1_w")),
                                           bound.at(p + "ff1_b"))),
                    bound.at(p + "ff2_w")),
        bound.at(p + "ff2_b"));
    if (training) ff = tape.dropout(ff, T(cfg.dropout), *drop_rng);
    seq = tape.layer_norm_rows(tape.add(seq, ff), bound.at(p + "ln2_g"),
                               bound.at(p + "ln2_b"));
  }

  const int n_cond = cfg.cond_tokens();
  const Var out_frames = tape.row_slice(seq, n_cond, n_cond + n);
  return tape.add_row(tape.matmul(out_frames, bound.at("net.out_w")),
                      bound.at("net.out_b"));
}

}  // namespace fgmdm
