#pragma once
// Dataset records: generation from motion templates, per-part activity
// probing, and the JSONL interchange format.

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgmdm/common.hpp"
#include "fgmdm/corpus.hpp"
#include "fgmdm/paraphrase.hpp"
#include "fgmdm/parts.hpp"
#include "fgmdm/skeleton.hpp"

namespace fgmdm {

inline constexpr const char* kMotionLayout = "root3+quat4xJ";

struct DatasetRecord {
  std::string id;
  std::string vague_text;
  FineGrainedDescription parts;
  Motion motion;
  std::string template_name;
  std::string split;  // "train" | "test" | "zero_shot"
};

inline bool operator==(const DatasetRecord& a, const DatasetRecord& b) {
  if (a.id != b.id || a.vague_text != b.vague_text ||
      a.template_name != b.template_name || a.split != b.split)
    return false;
  if (a.parts.full_text != b.parts.full_text ||
      a.parts.degraded != b.parts.degraded || a.parts.parts != b.parts.parts)
    return false;
  const Motion& ma = a.motion;
  const Motion& mb = b.motion;
  if (ma.fps != mb.fps || ma.frames() != mb.frames() ||
      ma.joint_count() != mb.joint_count())
    return false;
  for (int i = 0; i < ma.frames(); ++i) {
    if (ma.root[i] != mb.root[i]) return false;
    for (int j = 0; j < ma.joint_count(); ++j) {
      const Quat& qa = ma.quats[i][j];
      const Quat& qb = mb.quats[i][j];
      if (qa.w != qb.w || qa.x != qb.x || qa.y != qb.y || qa.z != qb.z)
        return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Part activity probe
// ---------------------------------------------------------------------------

/// Per-part motion intensity: mean geodesic rotation change per frame
/// (radians/frame), averaged over the part's joints.
struct ProbeReport {
  std::array<double, kPartCount> scores{};

  int argmax() const {
    int best = 0;
    for (int p = 1; p < kPartCount; ++p)
      if (scores[p] > scores[best]) best = p;
    return best;
  }
};

inline ProbeReport probe_part_activity(const Skeleton& skel, const Motion& m) {
  const int n = m.frames();
  if (n < 2)
    throw ContractError("part activity probe: need at least 2 frames");
  if (m.joint_count() != static_cast<int>(skel.joints.size()))
    throw ContractError("part activity probe: joint count mismatch");
  ProbeReport r;
  for (int p = 0; p < kPartCount; ++p) {
    const std::vector<int>& js = skel.part_joints[p];
    if (js.empty()) continue;
    double acc = 0.0;
    for (int j : js)
      for (int i = 0; i + 1 < n; ++i)
        acc += quat_geodesic_angle(m.quats[i][j], m.quats[i + 1][j]);
    r.scores[p] = acc / (static_cast<double>(js.size()) * (n - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Deterministic corpus generation. Each record draws its manner, amplitude
/// jitter (0.9..1.1), phase offset (-0.3..0.3) and phrasing from an RNG
/// seeded only by (seed, template index, variation index), so records can be
/// produced in any order or in parallel.
inline std::vector<DatasetRecord> generate_dataset(
    const Skeleton& skel, const std::vector<MotionTemplate>& templates,
    int variations_per_template, std::uint64_t seed) {
  if (templates.empty())
    throw ContractError("generate_dataset: empty template list");
  if (variations_per_template < 1)
    throw ContractError("generate_dataset: variations_per_template must be >= 1");
  for (const MotionTemplate& t : templates) validate_template(t);

  std::vector<DatasetRecord> out;
  out.reserve(templates.size() * variations_per_template);
  for (std::size_t ti = 0; ti < templates.size(); ++ti) {
    const MotionTemplate& t = templates[ti];
    for (int vi = 0; vi < variations_per_template; ++vi) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ti),
                          static_cast<std::uint64_t>(vi)));
      const int manner = rng.uniform_int(0, kMannerCount - 1);
      const double amp_jitter = 0.9 + 0.2 * rng.uniform();
      const double phase_off = -0.3 + 0.6 * rng.uniform();
      const int phrase =
          rng.uniform_int(0, static_cast<int>(t.phrasings.size()) - 1);

      DatasetRecord rec;
      char idx[16];
      std::snprintf(idx, sizeof(idx), "%03d", vi);
      rec.id = t.name + "-" + idx;
      rec.vague_text = apply_manner(t.phrasings[phrase], manner);
      bool any_filler = false;
      for (int p = 0; p < kPartCount; ++p) {
        if (t.part_texts[p].empty()) {
          rec.parts.parts[p] = part_filler(p);
          any_filler = true;
        } else {
          rec.parts.parts[p] = apply_manner(t.part_texts[p], manner);
        }
        if (p) rec.parts.full_text += " ";
        rec.parts.full_text += rec.parts.parts[p];
      }
      rec.parts.degraded = any_filler;
      rec.motion = synthesize_motion(skel, t, manner_scale(manner) * amp_jitter,
                                     phase_off);
      rec.template_name = t.name;
      rec.split = t.held_out ? "zero_shot" : (vi % 5 == 4 ? "test" : "train");
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL interchange
// ---------------------------------------------------------------------------

namespace dataset_detail {

inline void validate_quat_norms(const Motion& m, const char* context) {
  for (int i = 0; i < m.frames(); ++i)
    for (int j = 0; j < m.joint_count(); ++j) {
      const Quat& q = m.quats[i][j];
      const double norm =
          std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
      if (std::fabs(norm - 1.0) > 1e-3) {
        std::ostringstream msg;
        msg << context << ": quaternion norm " << norm << " at frame " << i
            << " joint " << j << " drifts more than 1e-3 from unit";
        throw ValidationError(msg.str());
      }
    }
}

inline nlohmann::ordered_json record_to_json(const DatasetRecord& r) {
  validate_quat_norms(r.motion, "dataset write");
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["vague_text"] = r.vague_text;
  nlohmann::ordered_json parts;
  for (int p = 0; p < kPartCount; ++p) parts[part_names()[p]] = r.parts.parts[p];
  j["parts"] = parts;
  j["fps"] = r.motion.fps;
  j["n"] = r.motion.frames();
  j["layout"] = kMotionLayout;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (int i = 0; i < r.motion.frames(); ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    row.push_back(r.motion.root[i][0]);
    row.push_back(r.motion.root[i][1]);
    row.push_back(r.motion.root[i][2]);
    for (int q = 0; q < r.motion.joint_count(); ++q) {
      const Quat& qu = r.motion.quats[i][q];
      row.push_back(qu.w);
      row.push_back(qu.x);
      row.push_back(qu.y);
      row.push_back(qu.z);
    }
    rows.push_back(std::move(row));
  }
  j["motion"] = std::move(rows);
  j["template"] = r.template_name;
  j["split"] = r.split;
  return j;
}

inline DatasetRecord record_from_json(const nlohmann::json& j, int line_no) {
  DatasetRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.vague_text = j.at("vague_text").get<std::string>();
    const auto& parts = j.at("parts");
    if (!parts.is_object() || parts.size() != std::size_t(kPartCount))
      throw ParseError("parts object must have exactly the 6 part labels",
                       line_no);
    for (int p = 0; p < kPartCount; ++p)
      r.parts.parts[p] = parts.at(part_names()[p]).get<std::string>();
    for (int p = 0; p < kPartCount; ++p) {
      if (p) r.parts.full_text += " ";
      r.parts.full_text += r.parts.parts[p];
    }
    r.parts.degraded = false;
    for (int p = 0; p < kPartCount; ++p)
      if (r.parts.parts[p] == part_filler(p)) r.parts.degraded = true;

    r.motion.fps = j.at("fps").get<double>();
    if (!(r.motion.fps > 0.0))
      throw ParseError("fps must be positive", line_no);
    if (j.at("layout").get<std::string>() != kMotionLayout)
      throw ParseError(std::string("unsupported layout (expected ") +
                           kMotionLayout + ")",
                       line_no);
    const int n = j.at("n").get<int>();
    const auto& rows = j.at("motion");
    if (!rows.is_array() || static_cast<int>(rows.size()) != n)
      throw ParseError("motion row count does not match n", line_no);
    int width = -1;
    for (const auto& row : rows) {
      if (!row.is_array())
        throw ParseError("motion rows must be arrays", line_no);
      if (width < 0) {
        width = static_cast<int>(row.size());
        if (width < 7 || (width - 3) % 4 != 0)
          throw ParseError("motion row width must be 3 + 4*J", line_no);
      } else if (static_cast<int>(row.size()) != width) {
        throw ParseError("inconsistent motion row widths", line_no);
      }
      const int joints = (width - 3) / 4;
      Vec3 root{row[0].get<double>(), row[1].get<double>(),
                row[2].get<double>()};
      std::vector<Quat> qs(joints);
      for (int q = 0; q < joints; ++q) {
        qs[q].w = row[3 + 4 * q + 0].get<double>();
        qs[q].x = row[3 + 4 * q + 1].get<double>();
        qs[q].y = row[3 + 4 * q + 2].get<double>();
        qs[q].z = row[3 + 4 * q + 3].get<double>();
      }
      r.motion.root.push_back(root);
      r.motion.quats.push_back(std::move(qs));
    }
    r.template_name = j.at("template").get<std::string>();
    r.split = j.at("split").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad dataset record: ") + e.what(), line_no);
  }
  validate_quat_norms(r.motion, "dataset read");
  return r;
}

}  // namespace dataset_detail

inline void write_jsonl(const std::vector<DatasetRecord>& records,
                        std::ostream& os) {
  for (const DatasetRecord& r : records)
    os << dataset_detail::record_to_json(r).dump() << "\n";
}

inline void write_jsonl(const std::vector<DatasetRecord>& records,
                        const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  write_jsonl(records, f);
  if (!f) throw IoError("failed while writing: " + path);
}

inline std::vector<DatasetRecord> read_jsonl(std::istream& is) {
  std::vector<DatasetRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    out.push_back(dataset_detail::record_from_json(j, line_no));
  }
  return out;
}

inline std::vector<DatasetRecord> read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  return read_jsonl(f);
}

/// Serialize to a string (used for byte-identity checks and manifests).
inline std::string dataset_to_string(const std::vector<DatasetRecord>& recs) {
  std::ostringstream os;
  write_jsonl(recs, os);
  return os.str();
}

}  // namespace fgmdm
