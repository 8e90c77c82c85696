#pragma once

// The six body parts used throughout: canonical order, lookup, and the
// keyword lists that map free-text sentences onto parts.

#include <array>
#include <string>
#include <vector>

namespace fgmdm {

inline const std::array<std::string, 6>& part_names() {
  static const std::array<std::string, 6> names = {
      "arms", "legs", "torso", "neck", "buttocks", "waist"};
  return names;
}

inline constexpr int kPartCount = 6;

/// Index into part_names(), or -1 for unknown labels.
inline int part_index(const std::string& name) {
  const auto& names = part_names();
  for (int i = 0; i < kPartCount; ++i)
    if (names[i] == name) return i;
  return -1;
}

/// Words that attribute a sentence to a part (singular/plural and common
/// sub-part names, lowercase).
inline const std::vector<std::string>& part_keywords(int part) {
  static const std::array<std::vector<std::string>, 6> kw = {{
      {"arm", "arms", "hand", "hands", "elbow", "elbows", "wrist", "wrists",
       "shoulder", "shoulders", "forearm", "forearms"},
      {"leg", "legs", "knee", "knees", "foot", "feet", "ankle", "ankles",
       "thigh", "thighs", "heel", "heels"},
      {"torso", "chest", "spine", "trunk", "ribcage"},
      {"neck", "head", "chin", "gaze"},
      {"buttocks", "hip", "hips", "pelvis", "glutes"},
      {"waist", "midsection", "abdomen", "core"},
  }};
  return kw.at(static_cast<std::size_t>(part));
}

}  // namespace fgmdm
