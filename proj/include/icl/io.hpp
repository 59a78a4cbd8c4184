#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "icl/common.hpp"
#include "icl/config.hpp"
#include "icl/geometry.hpp"
#include "icl/model.hpp"

namespace icl {

inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'C', 'K', 'P', 'T', '1'};

namespace detail {

inline void write_matrix(std::ostream& out, const Matrix& M) {
  out.write(reinterpret_cast<const char*>(M.data()),
            static_cast<std::streamsize>(sizeof(double) * M.size()));
}

inline void read_matrix(std::istream& in, Matrix& M) {
  in.read(reinterpret_cast<char*>(M.data()),
          static_cast<std::streamsize>(sizeof(double) * M.size()));
  if (!in) throw DomainError("checkpoint: truncated matrix payload");
}

}  // namespace detail

// Versioned checkpoint: magic, JSON header (dims, step, seed, and the raw
// config text so the dictionary and prompt distribution can be rebuilt),
// then the float64 blocks column-major.
inline void save_checkpoint(const std::string& path, const ModelState& s,
                            const std::string& config_text, long step,
                            std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot open checkpoint for writing: " + path);
  nlohmann::json h;
  h["version"] = 1;
  h["d_x"] = s.WQ.rows();
  h["d_y"] = s.WO.cols();
  h["m"] = s.WO.rows();
  h["step"] = step;
  h["seed"] = seed;
  h["config"] = config_text;
  const std::string hs = h.dump();
  const std::uint64_t hlen = hs.size();
  out.write(kCheckpointMagic, 8);
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  detail::write_matrix(out, s.WQ);
  detail::write_matrix(out, s.WK);
  detail::write_matrix(out, s.WO);
  Matrix r = s.r;
  detail::write_matrix(out, r);
  if (!out) throw DomainError("checkpoint write failed: " + path);
}

struct Checkpoint {
  ModelState state;
  std::string config_text;
  long step = 0;
  std::uint64_t seed = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DomainError("checkpoint: bad magic (not a checkpoint file)");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen > (1u << 26)) throw DomainError("checkpoint: bad header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DomainError("checkpoint: truncated header");
  nlohmann::json h = nlohmann::json::parse(hs);
  if (h.at("version").get<int>() != 1)
    throw DomainError("checkpoint: unsupported version");
  Checkpoint ck;
  const long d_x = h.at("d_x").get<long>();
  const long d_y = h.at("d_y").get<long>();
  const long m = h.at("m").get<long>();
  ck.step = h.at("step").get<long>();
  ck.seed = h.at("seed").get<std::uint64_t>();
  ck.config_text = h.at("config").get<std::string>();
  ck.state.WQ.resize(d_x, d_x);
  ck.state.WK.resize(d_x, d_x);
  ck.state.WO.resize(m, d_y);
  detail::read_matrix(in, ck.state.WQ);
  detail::read_matrix(in, ck.state.WK);
  detail::read_matrix(in, ck.state.WO);
  Matrix r(m, 1);
  detail::read_matrix(in, r);
  ck.state.r = r.col(0);
  return ck;
}

// Dictionary serialization: JSON geometry header + M and Q column-major
// (derived bases are rebuilt deterministically from the header on load).
inline void save_dictionary(const std::string& path, const Dictionary& dict) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot open dictionary file for writing: " + path);
  nlohmann::json h;
  h["d_x"] = dict.cfg.d_x;
  h["d_y"] = dict.cfg.d_y;
  h["K1"] = dict.cfg.K1;
  h["K2"] = dict.cfg.K2;
  h["u_norm"] = dict.cfg.u_norm;
  h["q_norm"] = dict.cfg.q_norm;
  h["kappa_x"] = dict.cfg.kappa_x;
  h["kappa_y"] = dict.cfg.kappa_y;
  h["rotation_seed"] = dict.cfg.rotation_seed;
  const std::string hs = h.dump();
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  detail::write_matrix(out, dict.M);
  detail::write_matrix(out, dict.Q);
  if (!out) throw DomainError("dictionary write failed: " + path);
}

inline Dictionary load_dictionary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open dictionary file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen > (1u << 20)) throw DomainError("dictionary: bad header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json h = nlohmann::json::parse(hs);
  GeometryConfig g;
  g.d_x = h.at("d_x").get<int>();
  g.d_y = h.at("d_y").get<int>();
  g.K1 = h.at("K1").get<int>();
  g.K2 = h.at("K2").get<int>();
  g.u_norm = h.at("u_norm").get<double>();
  g.q_norm = h.at("q_norm").get<double>();
  g.kappa_x = h.at("kappa_x").get<double>();
  g.kappa_y = h.at("kappa_y").get<double>();
  g.rotation_seed = h.at("rotation_seed").get<std::int64_t>();
  Dictionary dict = build_dictionary(g);
  Matrix M(g.d_x, g.K()), Q(g.d_y, g.K());
  detail::read_matrix(in, M);
  detail::read_matrix(in, Q);
  if ((M - dict.M).norm() > 1e-12 * (1.0 + dict.M.norm()) ||
      (Q - dict.Q).norm() > 1e-12 * (1.0 + dict.Q.norm()))
    throw DomainError("dictionary: stored matrices disagree with the header");
  return dict;
}

inline void write_manifest(const std::string& path, const ExperimentConfig& cfg,
                           double wall_clock_sec, long steps,
                           bool stopped_early) {
  nlohmann::json j;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  j["config_hash"] = hex;
  j["master_seed"] = cfg.train.seed;
  j["stream_seeds"] = {
      {"dictionary", 1}, {"model_init", 2}, {"train_sampling", 3},
      {"test_set", 4},   {"noise_probe", 5}, {"attention_stat", 6},
      {"ood_eval", 7}};
  j["artifact_version"] = kArtifactVersion;
#ifdef ICL_GIT_DESCRIBE
  j["git_describe"] = ICL_GIT_DESCRIBE;
#else
  j["git_describe"] = "unknown";
#endif
  j["wall_clock_sec"] = wall_clock_sec;
  j["steps"] = steps;
  j["stopped_early"] = stopped_early;
  std::ofstream out(path);
  if (!out) throw DomainError("cannot open manifest for writing: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace icl
