#pragma once

// Chat-completion client with a JSONL cache, exponential-backoff retries and
// bounded request concurrency, plus the offline path through the rule
// paraphraser. The cache is content-addressed over (prompt template version,
// sentence), so prompt revisions invalidate old answers automatically.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "fgmdm/common.hpp"
#include "fgmdm/paraphrase.hpp"

namespace fgmdm {

struct LlmClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-3.5-turbo";
  std::string api_key;          // read from FGMDM_API_KEY when empty
  double timeout_seconds = 30;
  int max_retries = 4;          // additional attempts after the first
  int max_in_flight = 2;
  int backoff_base_ms = 500;    // doubled on every retry; tests shrink this

  void validate() const {
    if (max_in_flight < 1)
      throw ConfigError("llm client: max_in_flight must be >= 1");
    if (max_retries < 0)
      throw ConfigError("llm client: max_retries must be >= 0");
    if (backoff_base_ms < 0)
      throw ConfigError("llm client: backoff_base_ms must be >= 0");
  }
};

/// Counters exposed for tests and telemetry.
struct LlmClientStats {
  int cache_hits = 0;
  int requests = 0;   // HTTP requests actually sent
  int backoffs = 0;   // sleeps taken after a retryable failure
};

inline std::string paraphrase_cache_key(const std::string& sentence) {
  const std::uint64_t h =
      fnv1a64(sentence, fnv1a64(kPromptTemplateVersion));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Append-only JSONL cache; one {key, sentence, raw, parts, degraded,
/// timestamp} object per line. Loading tolerates a missing file (fresh
/// cache), not a malformed one.
class ParaphraseCache {
 public:
  struct Entry {
    std::string key;
    std::string sentence;
    std::string raw;
    FineGrainedDescription parsed;
    std::int64_t timestamp = 0;  // unix seconds
  };

  ParaphraseCache() = default;

  explicit ParaphraseCache(const std::string& path) : path_(path) {
    std::ifstream f(path_);
    if (!f) return;  // nothing cached yet
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("paraphrase cache: ") + e.what(), lineno);
      }
      Entry e;
      try {
        e.key = j.at("key").get<std::string>();
        e.sentence = j.at("sentence").get<std::string>();
        e.raw = j.at("raw").get<std::string>();
        e.parsed.full_text = e.raw;
        const auto& parts = j.at("parts");
        for (int p = 0; p < kPartCount; ++p)
          e.parsed.parts[p] = parts.at(part_names()[p]).get<std::string>();
        e.parsed.degraded = j.at("degraded").get<bool>();
        e.timestamp = j.value("timestamp", std::int64_t{0});
      } catch (const nlohmann::json::exception& e2) {
        throw ParseError(std::string("paraphrase cache: ") + e2.what(),
                         lineno);
      }
      map_[e.key] = std::move(e);
    }
  }

  bool get(const std::string& key, Entry* out) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) return false;
    if (out) *out = it->second;
    return true;
  }

  void put(Entry e) {
    std::lock_guard<std::mutex> lk(mu_);
    if (map_.count(e.key)) return;  // entries are immutable once written
    if (!path_.empty()) {
      std::ofstream f(path_, std::ios::app);
      if (!f) throw IoError("paraphrase cache: cannot append to " + path_);
      nlohmann::json parts;
      for (int p = 0; p < kPartCount; ++p)
        parts[part_names()[p]] = e.parsed.parts[p];
      const nlohmann::json j = {
          {"key", e.key},           {"sentence", e.sentence},
          {"raw", e.raw},           {"parts", parts},
          {"degraded", e.parsed.degraded}, {"timestamp", e.timestamp},
      };
      f << j.dump() << "\n";
      if (!f.good()) throw IoError("paraphrase cache: write failed " + path_);
    }
    map_[e.key] = std::move(e);
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lk(mu_);
    return map_.size();
  }

 private:
  std::string path_;  // empty = memory only
  mutable std::mutex mu_;
  std::unordered_map<std::string, Entry> map_;
};

// ---------------------------------------------------------------------------
// HTTP plumbing
// ---------------------------------------------------------------------------

namespace detail {

struct EndpointParts {
  std::string base;  // scheme://host[:port]
  std::string path;  // /v1/...
};

inline EndpointParts split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw ConfigError("llm client: endpoint must include a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  EndpointParts p;
  if (path_start == std::string::npos) {
    p.base = url;
    p.path = "/";
  } else {
    p.base = url.substr(0, path_start);
    p.path = url.substr(path_start);
  }
  return p;
}

inline std::string extract_answer(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("chat response is not JSON: ") + e.what());
  }
  try {
    return j.at("choices").at(0).at("message").at("content")
        .get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("chat response missing fields: ") + e.what());
  }
}

}  // namespace detail

/// One paraphrase request with retries. Throws TransportError once retries
/// are exhausted, ParseError on malformed responses.
inline std::string chat_completion_request(const std::string& prompt,
                                           const LlmClientConfig& cfg,
                                           LlmClientStats* stats) {
  const auto ep = detail::split_endpoint(cfg.endpoint);
  httplib::Client client(ep.base);
  client.set_connection_timeout(std::chrono::milliseconds(
      static_cast<int>(cfg.timeout_seconds * 1000)));
  client.set_read_timeout(std::chrono::milliseconds(
      static_cast<int>(cfg.timeout_seconds * 1000)));

  const nlohmann::json req = {
      {"model", cfg.model},
      {"messages",
       nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
  };
  httplib::Headers headers;
  if (!cfg.api_key.empty())
    headers.emplace("Authorization", "Bearer " + cfg.api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) {
      if (stats) ++stats->backoffs;
      std::this_thread::sleep_for(std::chrono::milliseconds(
          static_cast<long long>(cfg.backoff_base_ms) << (attempt - 1)));
    }
    if (stats) ++stats->requests;
    auto res = client.Post(ep.path, headers, req.dump(), "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return detail::extract_answer(res->body);
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;  // retryable
    }
    throw TransportError("llm client: HTTP " + std::to_string(res->status) +
                         " from " + cfg.endpoint);
  }
  throw TransportError("llm client: retries exhausted (" + last_error + ")");
}

// ---------------------------------------------------------------------------
// Cached entry point
// ---------------------------------------------------------------------------

inline std::string resolve_api_key(const LlmClientConfig& cfg) {
  if (!cfg.api_key.empty()) return cfg.api_key;
  const char* env = std::getenv("FGMDM_API_KEY");
  return env ? env : "";
}

/// Paraphrases one sentence, consulting the cache first. In offline mode the
/// rule paraphraser replaces the network; results are cached either way.
inline FineGrainedDescription call_llm_cached(const std::string& sentence,
                                              const LlmClientConfig& cfg,
                                              ParaphraseCache& cache,
                                              bool offline,
                                              const Lexicon& lexicon,
                                              LlmClientStats* stats = nullptr) {
  cfg.validate();
  const std::string key = paraphrase_cache_key(sentence);
  ParaphraseCache::Entry hit;
  if (cache.get(key, &hit)) {
    if (stats) ++stats->cache_hits;
    return hit.parsed;
  }

  ParaphraseCache::Entry e;
  e.key = key;
  e.sentence = sentence;
  e.timestamp = static_cast<std::int64_t>(std::time(nullptr));
  if (offline) {
    e.parsed = rule_paraphrase(sentence, lexicon);
    e.raw = e.parsed.full_text;
  } else {
    LlmClientConfig effective = cfg;
    effective.api_key = resolve_api_key(cfg);
    if (effective.api_key.empty())
      throw ConfigError(
          "llm client: no API key (set FGMDM_API_KEY or pass --offline)");
    const std::string prompt = build_prompt(sentence);
    e.raw = chat_completion_request(prompt, effective, stats);
    e.parsed = parse_answer(e.raw);
  }
  cache.put(e);
  return e.parsed;
}

/// Batch paraphrase with at most cfg.max_in_flight requests running at once.
/// Output order matches input order; the first error wins and is rethrown
/// after all workers stop.
inline std::vector<FineGrainedDescription> paraphrase_all(
    const std::vector<std::string>& sentences, const LlmClientConfig& cfg,
    ParaphraseCache& cache, bool offline, const Lexicon& lexicon,
    LlmClientStats* stats = nullptr) {
  cfg.validate();
  std::vector<FineGrainedDescription> out(sentences.size());
  std::mutex stats_mu;
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    while (true) {
      {
        std::lock_guard<std::mutex> lk(err_mu);
        if (first_error) return;
      }
      const std::size_t i = next.fetch_add(1);
      if (i >= sentences.size()) return;
      try {
        LlmClientStats local;
        out[i] = call_llm_cached(sentences[i], cfg, cache, offline, lexicon,
                                 stats ? &local : nullptr);
        if (stats) {
          std::lock_guard<std::mutex> lk(stats_mu);
          stats->cache_hits += local.cache_hits;
          stats->requests += local.requests;
          stats->backoffs += local.backoffs;
        }
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const int n_workers = std::min<std::size_t>(
      static_cast<std::size_t>(cfg.max_in_flight), sentences.size());
  std::vector<std::thread> threads;
  for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace fgmdm
