#pragma once
// Sampling: the reverse diffusion loop driving the trained denoiser, with
// optional classifier-free guidance, ending in a decoded Motion.

#include <cmath>
#include <cstdint>
#include <string>

#include "fgmdm/training.hpp"

namespace fgmdm {

namespace sampling_detail {

inline void check_params_finite(const ParamStore& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    for (float v : params.value_at(i).data)
      if (!std::isfinite(v))
        throw NumericError("sample: non-finite parameter in " +
                           params.name_at(i));
}

}  // namespace sampling_detail

/// Draws one motion of n frames for a description. Deterministic in the
/// seed. guidance_scale == 1 skips the unconditional branch entirely.
inline Motion sample_motion(const Skeleton& skel, const ModelBundle& mb,
                            const TextEmbedder& embedder,
                            const FineGrainedDescription& desc, int n,
                            std::uint64_t seed) {
  mb.net.validate();
  mb.cond.validate();
  mb.diff.validate();
  if (n < 1) throw ContractError("sample: need at least one frame");
  if (n > mb.net.n_max) throw ContractError("sample: n exceeds n_max");
  if (embedder.dim() != mb.cond.d_text)
    throw ConfigError("sample: embedder width does not match d_text");
  if (mb.norm.width() != mb.net.feature_width)
    throw ContractError("sample: feature statistics missing or mismatched");
  sampling_detail::check_params_finite(mb.params);

  const NoiseSchedule ns = make_schedule(mb.diff.schedule, mb.diff.total_steps);
  const TextFeatures text = embed_description(embedder, desc);
  const float s = static_cast<float>(mb.diff.guidance_scale);

  Rng rng(seed);
  Tensor x = Tensor::zeros({n, mb.net.feature_width});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());

  for (int t = mb.diff.total_steps; t >= 1; --t) {
    Tape tape;
    const BoundParams bound = bind_params(tape, mb.params);
    const auto xin = tape.constant(x);
    const auto cond_tok = build_tokens(tape, bound, mb.cond, text, t);
    const Tensor cond_pred =
        tape.value(denoise(tape, bound, mb.net, cond_tok, xin));
    Tensor x0_hat;
    if (s == 1.0f) {
      x0_hat = cond_pred;
    } else {
      const auto null_tok = null_tokens(tape, bound, mb.cond, t);
      const Tensor null_pred =
          tape.value(denoise(tape, bound, mb.net, null_tok, xin));
      x0_hat = guidance_combine(cond_pred, null_pred, s);
    }
    x = posterior_step(x, x0_hat, t, ns, rng);
  }

  Motion m = flat_to_motion(denormalize_features(x, mb.norm), mb.fps);
  for (auto& frame : m.quats)
    for (auto& q : frame) q = quat_normalize(q);
  return m;
}

}  // namespace fgmdm
