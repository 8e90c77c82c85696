#pragma once

// Deterministic text embedding: hashed bag of word 1- and 2-grams with
// signed buckets, L2-normalized. Stands in for a frozen neural text encoder:
// identical text always maps to the identical vector, related phrasings
// share unigram buckets, and no model weights are needed.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/tensor.hpp"

namespace fgmdm {

struct TextEmbedderConfig {
  int dim = 256;
  std::uint64_t seed = 0x7465787453454544ull;  // any fixed value works
};

class TextEmbedder {
 public:
  explicit TextEmbedder(TextEmbedderConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.dim < 1) throw ConfigError("text embedder: dim must be >= 1");
  }

  int dim() const { return cfg_.dim; }

  /// Lowercased alphanumeric tokens.
  static std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
      if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
  }

  /// Unit-norm embedding; all-zero for text with no tokens.
  std::vector<float> embed(const std::string& text) const {
    std::vector<float> acc(static_cast<std::size_t>(cfg_.dim), 0.0f);
    const auto words = tokenize(text);
    auto bump = [&](const std::string& gram) {
      const std::uint64_t h = fnv1a64(gram, mix64(cfg_.seed));
      const std::size_t idx = h % static_cast<std::uint64_t>(cfg_.dim);
      const float sign = (mix64(h) & 1) ? 1.0f : -1.0f;
      acc[idx] += sign;
    };
    for (std::size_t i = 0; i < words.size(); ++i) {
      bump(words[i]);
      if (i + 1 < words.size()) bump(words[i] + " " + words[i + 1]);
    }
    double ss = 0;
    for (float v : acc) ss += double(v) * double(v);
    if (ss > 0) {
      const float inv = static_cast<float>(1.0 / std::sqrt(ss));
      for (float& v : acc) v *= inv;
    }
    return acc;
  }

  Tensor embed_tensor(const std::string& text) const {
    return Tensor::from({1, cfg_.dim}, embed(text));
  }

 private:
  TextEmbedderConfig cfg_;
};

}  // namespace fgmdm
