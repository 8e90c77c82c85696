#pragma once

// Fine-grained paraphrasing of vague motion text into per-body-part
// sentences: the exact chat prompt, a deterministic offline rule paraphraser,
// and the parser that turns a free-text answer back into six part sentences.

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/parts.hpp"

namespace fgmdm {

/// Bumped whenever the prompt wording changes; part of every cache key so
/// stale cached answers can never leak across prompt revisions.
inline constexpr const char* kPromptTemplateVersion = "prompt-v1";

struct FineGrainedDescription {
  std::string full_text;                       // whole paraphrased paragraph
  std::array<std::string, kPartCount> parts;   // one entry per part, in order
  bool degraded = false;                       // true when any part used filler
};

/// Neutral sentence used when a part is never mentioned.
inline std::string part_filler(int part) {
  return "The " + part_names()[static_cast<std::size_t>(part)] +
         " remains still.";
}

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

struct QaExemplar {
  std::string question;
  std::string answer;
};

/// Four hand-written Q&A pairs that pin the answer format. The first is the
/// kick example; the rest follow its structure (every part mentioned).
inline const std::vector<QaExemplar>& prompt_exemplars() {
  static const std::vector<QaExemplar> ex = {
      {"A man kicks something or someone with his left leg.",
       "His left leg extends out with force as he kicks something or someone. "
       "His arms are held steady at his sides. His torso is slightly twisted. "
       "His buttocks and waist muscles are contracted. His neck remains "
       "neutral."},
      {"A person raises their left arm above their head.",
       "His left arm lifts upward until the hand is above his head. His legs "
       "remain planted on the ground. His torso stays upright. His neck is "
       "straight as he looks forward. His buttocks stay level. His waist is "
       "held steady."},
      {"A man walks forward at a steady pace.",
       "His legs alternate steps forward at a steady rhythm. His arms swing "
       "gently by his sides. His torso leans slightly forward. His neck stays "
       "relaxed. His buttocks shift with each stride. His waist rotates subtly "
       "to balance the steps."},
      {"A person bows politely.",
       "His torso bends forward into a deep bow. His arms hang close to his "
       "body. His legs stay straight and together. His neck lowers so that he "
       "faces the floor. His buttocks push back slightly. His waist folds to "
       "support the bow."},
  };
  return ex;
}

/// The full instruction sent to the chat model for one vague sentence.
inline std::string build_prompt(const std::string& sentence) {
  std::string trimmed = sentence;
  const auto notspace = [](unsigned char c) { return !std::isspace(c); };
  trimmed.erase(trimmed.begin(),
                std::find_if(trimmed.begin(), trimmed.end(), notspace));
  trimmed.erase(std::find_if(trimmed.rbegin(), trimmed.rend(), notspace).base(),
                trimmed.end());
  if (trimmed.empty())
    throw ContractError("build_prompt: sentence must be nonempty");

  std::string p =
      "Translate the motion described by the given sentences to the motion "
      "of each body part only using one paragraph. The available body parts "
      "include ['arms', 'legs', 'torso', 'neck', 'buttocks', 'waist']. "
      "Here are some examples:[";
  for (const QaExemplar& ex : prompt_exemplars())
    p += "Question: " + ex.question + " Answer: " + ex.answer + " ";
  p.pop_back();  // drop the trailing space inside the bracket
  p += "]. Question: " + trimmed;
  return p;
}

// ---------------------------------------------------------------------------
// Answer parsing
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    cur.push_back(c);
    if (c == '.') {
      // trim leading whitespace
      std::size_t b = 0;
      while (b < cur.size() && std::isspace(static_cast<unsigned char>(cur[b])))
        ++b;
      if (b + 1 < cur.size()) out.push_back(cur.substr(b));
      cur.clear();
    }
  }
  std::size_t b = 0;
  while (b < cur.size() && std::isspace(static_cast<unsigned char>(cur[b])))
    ++b;
  std::size_t e = cur.size();
  while (e > b && std::isspace(static_cast<unsigned char>(cur[e - 1]))) --e;
  if (e > b) out.push_back(cur.substr(b, e - b) + ".");
  return out;
}

inline std::vector<std::string> lowercase_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isalpha(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

}  // namespace detail

/// Splits the answer on periods and assigns every sentence to each part whose
/// name or synonym appears in it. Parts never mentioned receive the filler
/// sentence and flip the degraded flag.
inline FineGrainedDescription parse_answer(const std::string& raw_text) {
  if (raw_text.empty()) throw ParseError("paraphrase answer is empty");
  FineGrainedDescription d;
  d.full_text = raw_text;
  const auto sentences = detail::split_sentences(raw_text);
  for (const std::string& sentence : sentences) {
    const auto words = detail::lowercase_words(sentence);
    for (int part = 0; part < kPartCount; ++part) {
      const auto& kws = part_keywords(part);
      const bool mentioned =
          std::any_of(words.begin(), words.end(), [&](const std::string& w) {
            return std::find(kws.begin(), kws.end(), w) != kws.end();
          });
      if (!mentioned) continue;
      if (!d.parts[part].empty()) d.parts[part] += " ";
      d.parts[part] += sentence;
    }
  }
  for (int part = 0; part < kPartCount; ++part) {
    if (d.parts[part].empty()) {
      d.parts[part] = part_filler(part);
      d.degraded = true;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Offline rule paraphraser
// ---------------------------------------------------------------------------

/// Keyword-triggered phrase table: an entry fires when all of its keywords
/// occur in the sentence; it then contributes its non-empty part sentences.
struct LexiconEntry {
  std::vector<std::string> keywords;            // lowercase single words
  std::array<std::string, kPartCount> parts;    // empty string = inactive
};

struct Lexicon {
  std::vector<LexiconEntry> entries;
};

/// Deterministic stand-in for the chat model: matches lexicon entries against
/// the sentence and assembles the same six-part structure. full_text is the
/// part sentences joined in vocabulary order, so parsing it back reproduces
/// the same parts (each sentence only names its own part).
inline FineGrainedDescription rule_paraphrase(const std::string& sentence,
                                              const Lexicon& lexicon) {
  const auto words = detail::lowercase_words(sentence);
  auto has_word = [&](const std::string& kw) {
    return std::find(words.begin(), words.end(), kw) != words.end();
  };
  FineGrainedDescription d;
  bool any_match = false;
  for (const LexiconEntry& entry : lexicon.entries) {
    const bool fires = !entry.keywords.empty() &&
                       std::all_of(entry.keywords.begin(), entry.keywords.end(),
                                   has_word);
    if (!fires) continue;
    any_match = true;
    for (int part = 0; part < kPartCount; ++part) {
      if (entry.parts[part].empty()) continue;
      if (!d.parts[part].empty()) d.parts[part] += " ";
      d.parts[part] += entry.parts[part];
    }
  }
  for (int part = 0; part < kPartCount; ++part)
    if (d.parts[part].empty()) d.parts[part] = part_filler(part);
  d.degraded = !any_match;
  for (int part = 0; part < kPartCount; ++part) {
    if (part) d.full_text += " ";
    d.full_text += d.parts[part];
  }
  return d;
}

}  // namespace fgmdm
