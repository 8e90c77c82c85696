#pragma once
// Synthetic motion-text corpus: parametric motion templates, their textual
// phrasings, and the rule lexicon that mirrors them for offline paraphrasing.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/paraphrase.hpp"
#include "fgmdm/parts.hpp"
#include "fgmdm/skeleton.hpp"

namespace fgmdm {

// ---------------------------------------------------------------------------
// Parametric rotation curves
// ---------------------------------------------------------------------------

enum class Waveform {
  kSine,      // full oscillation about the rest pose
  kHalfSine,  // one-sided: move out and return, then rest half the period
  kStep       // one-sided with a widened rest phase (planted-foot gait)
};

inline double wave_value(Waveform w, double x) {
  const double s = std::sin(x);
  switch (w) {
    case Waveform::kSine:
      return s;
    case Waveform::kHalfSine:
      return s > 0.0 ? s : 0.0;
    case Waveform::kStep: {
      // Zero while sin <= c so the limb rests > half the period; rescaled so
      // the peak still reaches the configured amplitude.
      constexpr double c = 0.2;
      return s > c ? (s - c) / (1.0 - c) : 0.0;
    }
  }
  return 0.0;
}

/// One joint's local rotation over time: angle(t) = amp * w(2*pi*f*t + phase)
/// about a fixed axis, in radians.
struct JointCurve {
  std::string joint;
  Vec3 axis{0.0, 0.0, 1.0};
  double amp = 0.0;  // radians
  double freq_hz = 1.0;
  double phase = 0.0;  // radians
  Waveform wave = Waveform::kHalfSine;
};

/// Optional root-translation curve (metres), same waveform family.
struct RootCurve {
  Vec3 axis{0.0, 0.0, 0.0};
  double amp = 0.0;
  double freq_hz = 1.0;
  double phase = 0.0;
  Waveform wave = Waveform::kHalfSine;
};

// ---------------------------------------------------------------------------
// Motion templates
// ---------------------------------------------------------------------------

/// A named parametric motion plus the text used to describe it. Phrasings and
/// part texts carry a "{m}" marker where the manner adverb is spliced in.
struct MotionTemplate {
  std::string name;
  std::vector<JointCurve> curves;
  RootCurve root_curve;
  std::vector<std::string> phrasings;
  std::array<std::string, kPartCount> part_texts;  // "" -> inactive part
  bool held_out = false;  // reserved for zero-shot composition tests
  int frames = 32;
  double fps = 20.0;
};

inline void validate_template(const MotionTemplate& t) {
  if (t.name.empty()) throw ContractError("motion template: empty name");
  if (t.phrasings.empty())
    throw ContractError("motion template '" + t.name + "': no phrasings");
  if (t.frames < 2)
    throw ContractError("motion template '" + t.name + "': frames < 2");
  if (t.fps <= 0.0)
    throw ContractError("motion template '" + t.name + "': fps <= 0");
  bool any_amp = false;
  for (const JointCurve& c : t.curves) {
    if (c.joint.empty())
      throw ContractError("motion template '" + t.name + "': unnamed joint");
    if (vnorm(c.axis) <= 0.0)
      throw ContractError("motion template '" + t.name + "': zero axis");
    if (c.amp < 0.0 || c.freq_hz < 0.0)
      throw ContractError("motion template '" + t.name +
                          "': negative amplitude or frequency");
    if (c.amp > 0.0) any_amp = true;
  }
  if (!any_amp)
    throw ContractError("motion template '" + t.name +
                        "': no curve with nonzero amplitude");
}

// ---------------------------------------------------------------------------
// Manner variants
// ---------------------------------------------------------------------------

inline constexpr int kMannerCount = 3;

inline const char* manner_adverb(int manner) {
  switch (manner) {
    case 0: return "";
    case 1: return "slowly ";
    case 2: return "quickly ";
  }
  throw ContractError("manner index out of range");
}

/// Amplitude multiplier per manner. At fixed frequency a larger amplitude
/// means higher peak velocity, so "quickly" scales up and "slowly" down.
inline double manner_scale(int manner) {
  switch (manner) {
    case 0: return 1.0;
    case 1: return 0.7;
    case 2: return 1.3;
  }
  throw ContractError("manner index out of range");
}

/// Splice the manner adverb into a "{m}" marker (all occurrences).
inline std::string apply_manner(std::string text, int manner) {
  const std::string marker = "{m}";
  const std::string adv = manner_adverb(manner);
  for (std::size_t at = text.find(marker); at != std::string::npos;
       at = text.find(marker, at)) {
    text.replace(at, marker.size(), adv);
    at += adv.size();
  }
  return text;
}

// ---------------------------------------------------------------------------
// Motion synthesis
// ---------------------------------------------------------------------------

/// Evaluate a template's curves into a Motion. amp_scale multiplies every
/// amplitude uniformly (manner and per-record jitter); phase_offset shifts
/// every curve by the same amount.
inline Motion synthesize_motion(const Skeleton& skel, const MotionTemplate& t,
                                double amp_scale, double phase_offset) {
  validate_template(t);
  const int joints = static_cast<int>(skel.joints.size());
  std::vector<int> curve_joint(t.curves.size());
  std::vector<Vec3> curve_axis(t.curves.size());
  for (std::size_t c = 0; c < t.curves.size(); ++c) {
    const int j = skel.find(t.curves[c].joint);
    if (j < 0)
      throw ContractError("motion template '" + t.name +
                          "': unknown joint '" + t.curves[c].joint + "'");
    curve_joint[c] = j;
    const double n = vnorm(t.curves[c].axis);
    curve_axis[c] = {t.curves[c].axis[0] / n, t.curves[c].axis[1] / n,
                     t.curves[c].axis[2] / n};
  }
  Vec3 root_axis{0.0, 0.0, 0.0};
  const bool has_root = t.root_curve.amp > 0.0 && vnorm(t.root_curve.axis) > 0.0;
  if (has_root) {
    const double n = vnorm(t.root_curve.axis);
    root_axis = {t.root_curve.axis[0] / n, t.root_curve.axis[1] / n,
                 t.root_curve.axis[2] / n};
  }

  Motion m = make_rest_motion(t.frames, joints, t.fps);
  for (int i = 0; i < t.frames; ++i) {
    const double tsec = i / t.fps;
    for (std::size_t c = 0; c < t.curves.size(); ++c) {
      const JointCurve& cv = t.curves[c];
      const double angle =
          amp_scale * cv.amp *
          wave_value(cv.wave,
                     2.0 * M_PI * cv.freq_hz * tsec + cv.phase + phase_offset);
      const Quat q = quat_from_axis_angle(curve_axis[c], angle);
      m.quats[i][curve_joint[c]] =
          quat_mul(m.quats[i][curve_joint[c]], q);
    }
    if (has_root) {
      const double d =
          amp_scale * t.root_curve.amp *
          wave_value(t.root_curve.wave, 2.0 * M_PI * t.root_curve.freq_hz *
                                                tsec +
                                            t.root_curve.phase + phase_offset);
      m.root[i][0] += root_axis[0] * d;
      m.root[i][1] += root_axis[1] * d;
      m.root[i][2] += root_axis[2] * d;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Default corpus
// ---------------------------------------------------------------------------

namespace corpus_detail {

inline const char* kArmsRaiseText =
    "The arms {m}lift on the left side until the hand points upward.";
inline const char* kArmsWaveText =
    "The arms {m}swing at the elbow while the right hand waves back and "
    "forth.";
inline const char* kLegsMarchText =
    "The legs {m}stride in place, each knee rising in turn while the feet "
    "press down between steps.";
inline const char* kLegsKickText =
    "The legs {m}snap forward on the left side, the knee extending into a "
    "kick.";
inline const char* kTorsoBowText =
    "The torso {m}folds forward from the chest into a deep bow.";
inline const char* kNeckNodText =
    "The neck {m}tips the head forward and back in a nodding rhythm.";
inline const char* kWaistSwayText =
    "The waist {m}rocks from side to side in a steady sway.";
inline const char* kButtocksCrouchText =
    "The buttocks {m}sink toward the ground as the pelvis tilts and drops.";

/// Merge two templates into a held-out composition with fresh phrasings.
inline MotionTemplate compose(const std::string& name, const MotionTemplate& a,
                              const MotionTemplate& b,
                              std::vector<std::string> phrasings) {
  MotionTemplate t;
  t.name = name;
  t.curves = a.curves;
  t.curves.insert(t.curves.end(), b.curves.begin(), b.curves.end());
  t.root_curve = a.root_curve.amp > 0.0 ? a.root_curve : b.root_curve;
  t.phrasings = std::move(phrasings);
  for (int p = 0; p < kPartCount; ++p) {
    t.part_texts[p] = a.part_texts[p];
    if (!b.part_texts[p].empty()) {
      if (!t.part_texts[p].empty()) t.part_texts[p] += " ";
      t.part_texts[p] += b.part_texts[p];
    }
  }
  t.held_out = true;
  t.frames = a.frames;
  t.fps = a.fps;
  return t;
}

}  // namespace corpus_detail

/// Eight base templates plus four held-out pairwise compositions.
/// Frequencies are integer cycle counts over the default 32-frame, 20 fps
/// clip (0.625 = 1 cycle, 1.25 = 2, 1.875 = 3) so motions loop cleanly.
inline std::vector<MotionTemplate> default_templates() {
  using corpus_detail::compose;
  const double kPi = M_PI;
  std::vector<MotionTemplate> out;

  MotionTemplate raise;
  raise.name = "raise_left_arm";
  raise.curves = {
      {"l_shoulder", {0, 0, 1}, 1.35, 0.625, 0.0, Waveform::kHalfSine},
      {"l_elbow", {0, 0, 1}, 0.70, 0.625, 0.0, Waveform::kHalfSine},
      {"l_wrist", {0, 0, 1}, 0.40, 0.625, 0.0, Waveform::kHalfSine},
  };
  raise.phrasings = {
      "A person {m}raises the left arm.",
      "Someone {m}lifts their left arm into the air.",
      "A man {m}raises his left arm overhead.",
  };
  raise.part_texts[part_index("arms")] = corpus_detail::kArmsRaiseText;
  out.push_back(raise);

  MotionTemplate wave;
  wave.name = "wave_right_arm";
  wave.curves = {
      {"r_shoulder", {0, 0, -1}, 1.20, 0.625, 0.0, Waveform::kHalfSine},
      {"r_elbow", {0, 0, 1}, 0.55, 1.875, 0.0, Waveform::kSine},
  };
  wave.phrasings = {
      "A person {m}waves with the right arm.",
      "Someone {m}waves their right hand.",
      "A woman {m}waves her right arm in greeting.",
  };
  wave.part_texts[part_index("arms")] = corpus_detail::kArmsWaveText;
  out.push_back(wave);

  MotionTemplate march;
  march.name = "march";
  march.curves = {
      {"l_hip", {-1, 0, 0}, 0.30, 1.25, 0.0, Waveform::kStep},
      {"l_knee", {1, 0, 0}, 1.45, 1.25, 0.0, Waveform::kStep},
      {"r_hip", {-1, 0, 0}, 0.30, 1.25, kPi, Waveform::kStep},
      {"r_knee", {1, 0, 0}, 1.45, 1.25, kPi, Waveform::kStep},
  };
  march.phrasings = {
      "A person {m}marches in place.",
      "Someone {m}marches on the spot.",
      "A man {m}marches without moving forward.",
  };
  march.part_texts[part_index("legs")] = corpus_detail::kLegsMarchText;
  out.push_back(march);

  MotionTemplate kick;
  kick.name = "kick_left_leg";
  kick.curves = {
      {"l_hip", {-1, 0, 0}, 0.90, 0.625, 0.0, Waveform::kHalfSine},
      {"l_knee", {1, 0, 0}, 0.45, 0.625, 0.8, Waveform::kHalfSine},
  };
  kick.phrasings = {
      "A person {m}kicks forward with the left leg.",
      "Someone {m}kicks out with their left leg.",
      "A man {m}delivers a kick with his left leg.",
  };
  kick.part_texts[part_index("legs")] = corpus_detail::kLegsKickText;
  out.push_back(kick);

  MotionTemplate bow;
  bow.name = "bow_torso";
  bow.curves = {
      {"torso", {1, 0, 0}, 0.60, 0.625, 0.0, Waveform::kHalfSine},
  };
  bow.phrasings = {
      "A person {m}bows forward.",
      "Someone {m}bows politely.",
      "A woman {m}takes a bow.",
  };
  bow.part_texts[part_index("torso")] = corpus_detail::kTorsoBowText;
  out.push_back(bow);

  MotionTemplate nod;
  nod.name = "nod_neck";
  nod.curves = {
      {"neck", {1, 0, 0}, 0.25, 1.25, 0.0, Waveform::kHalfSine},
  };
  nod.phrasings = {
      "A person {m}nods their head.",
      "Someone {m}nods in agreement.",
      "A man {m}nods his head up and down.",
  };
  nod.part_texts[part_index("neck")] = corpus_detail::kNeckNodText;
  out.push_back(nod);

  MotionTemplate sway;
  sway.name = "sway_waist";
  sway.curves = {
      {"waist", {0, 0, 1}, 0.45, 1.25, 0.0, Waveform::kSine},
  };
  sway.phrasings = {
      "A person {m}sways at the waist.",
      "Someone {m}sways their waist from side to side.",
      "A woman {m}rocks her waist side to side.",
  };
  sway.part_texts[part_index("waist")] = corpus_detail::kWaistSwayText;
  out.push_back(sway);

  MotionTemplate crouch;
  crouch.name = "crouch";
  crouch.curves = {
      {"pelvis", {1, 0, 0}, 0.40, 0.625, 0.0, Waveform::kHalfSine},
  };
  crouch.root_curve = {{0, -1, 0}, 0.10, 0.625, 0.0, Waveform::kHalfSine};
  crouch.phrasings = {
      "A person {m}crouches down.",
      "Someone {m}crouches low.",
      "A man {m}drops into a crouch.",
  };
  crouch.part_texts[part_index("buttocks")] =
      corpus_detail::kButtocksCrouchText;
  out.push_back(crouch);

  out.push_back(compose(
      "raise_arm_march", raise, march,
      {"A person {m}raises the left arm while marching in place.",
       "Someone {m}marches in place and lifts their left arm.",
       "A man {m}raises his left arm as he marches on the spot."}));
  out.push_back(compose(
      "wave_nod", wave, nod,
      {"A person {m}waves the right hand while nodding the head.",
       "Someone {m}nods while waving their right arm.",
       "A woman {m}waves her right hand and nods."}));
  out.push_back(compose(
      "bow_march", bow, march,
      {"A person {m}bows while marching in place.",
       "Someone {m}marches on the spot and bows.",
       "A man {m}bows repeatedly as he marches."}));
  out.push_back(compose(
      "sway_crouch", sway, crouch,
      {"A person {m}sways at the waist while crouching down.",
       "Someone {m}crouches low and sways their waist.",
       "A woman {m}rocks her waist side to side in a low crouch."}));
  return out;
}

/// Rule lexicon sharing the templates' part phrase tables, so the offline
/// paraphraser reproduces the corpus annotations for corpus sentences.
inline Lexicon default_lexicon() {
  auto neutral = [](const char* text) { return apply_manner(text, 0); };
  const std::string arms_raise = neutral(corpus_detail::kArmsRaiseText);
  const std::string arms_wave = neutral(corpus_detail::kArmsWaveText);
  const std::string legs_march = neutral(corpus_detail::kLegsMarchText);
  const std::string legs_kick = neutral(corpus_detail::kLegsKickText);
  const std::string torso_bow = neutral(corpus_detail::kTorsoBowText);
  const std::string neck_nod = neutral(corpus_detail::kNeckNodText);
  const std::string waist_sway = neutral(corpus_detail::kWaistSwayText);
  const std::string buttocks_crouch =
      neutral(corpus_detail::kButtocksCrouchText);

  Lexicon lex;
  auto add = [&lex](std::vector<std::string> keywords, int part,
                    const std::string& text) {
    LexiconEntry e;
    e.keywords = std::move(keywords);
    e.parts[part] = text;
    lex.entries.push_back(e);
  };
  const int arms = part_index("arms");
  const int legs = part_index("legs");
  const int torso = part_index("torso");
  const int neck = part_index("neck");
  const int buttocks = part_index("buttocks");
  const int waist = part_index("waist");

  add({"raises", "arm"}, arms, arms_raise);
  add({"lifts", "arm"}, arms, arms_raise);
  add({"waves", "arm"}, arms, arms_wave);
  add({"waves", "hand"}, arms, arms_wave);
  add({"waving", "arm"}, arms, arms_wave);
  add({"waving", "hand"}, arms, arms_wave);
  add({"marches"}, legs, legs_march);
  add({"marching"}, legs, legs_march);
  add({"kicks", "leg"}, legs, legs_kick);
  add({"kick", "leg"}, legs, legs_kick);
  add({"bows"}, torso, torso_bow);
  add({"bow"}, torso, torso_bow);
  add({"nods"}, neck, neck_nod);
  add({"nodding"}, neck, neck_nod);
  add({"sways", "waist"}, waist, waist_sway);
  add({"swaying", "waist"}, waist, waist_sway);
  add({"rocks", "waist"}, waist, waist_sway);
  add({"crouches"}, buttocks, buttocks_crouch);
  add({"crouch"}, buttocks, buttocks_crouch);
  add({"crouching"}, buttocks, buttocks_crouch);
  return lex;
}

}  // namespace fgmdm
