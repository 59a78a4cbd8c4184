#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "icl/common.hpp"
#include "icl/geometry.hpp"
#include "icl/model.hpp"
#include "icl/promptgen.hpp"
#include "icl/trainer.hpp"

namespace icl {

// Flat key-value experiment configuration ("key = value", '#' comments).
struct ExperimentConfig {
  GeometryConfig geometry;
  PromptConfig prompt;
  ModelConfig model;
  TrainConfig train;
  long epochs = 0;            // T = epochs * steps_per_epoch unless T given
  long steps_per_epoch = 100;
  double delta = 0.05;        // theory failure probability
  double C1 = 1.0, C2 = 1.0;  // theory constants
  std::vector<OodSpec> ood;
  double ood_ratio_min = 0.5, ood_ratio_max = 2.0;

  void validate() const {
    geometry.validate();
    prompt.validate(geometry);
    model.validate();
    train.validate();
  }
};

namespace detail {

struct KvDoc {
  std::map<std::string, std::string> kv;
  std::map<std::string, int> line_of;

  bool has(const std::string& k) const { return kv.count(k) > 0; }

  const std::string& raw(const std::string& k) const {
    auto it = kv.find(k);
    if (it == kv.end())
      throw ConfigError("missing required field: " + k);
    return it->second;
  }

  double num(const std::string& k) const {
    const std::string& v = raw(k);
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
      throw ConfigError("field " + k + ": not a number: '" + v + "'");
    return x;
  }

  long integer(const std::string& k) const {
    const double x = num(k);
    const long i = static_cast<long>(x);
    if (static_cast<double>(i) != x)
      throw ConfigError("field " + k + ": expected an integer");
    return i;
  }

  double num_or(const std::string& k, double dflt) const {
    return has(k) ? num(k) : dflt;
  }
  long int_or(const std::string& k, long dflt) const {
    return has(k) ? integer(k) : dflt;
  }
  bool bool_or(const std::string& k, bool dflt) const {
    if (!has(k)) return dflt;
    const std::string& v = raw(k);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("field " + k + ": expected a boolean");
  }

  std::vector<double> list(const std::string& k) const {
    std::vector<double> out;
    std::stringstream ss(raw(k));
    std::string item;
    while (std::getline(ss, item, ',')) {
      char* end = nullptr;
      const double x = std::strtod(item.c_str(), &end);
      if (end == item.c_str())
        throw ConfigError("field " + k + ": malformed number list");
      out.push_back(x);
    }
    return out;
  }

  // "a,b;c,d" -> row-major matrix rows separated by ';'.
  Matrix matrix(const std::string& k) const {
    std::vector<std::vector<double>> rows;
    std::stringstream ss(raw(k));
    std::string row;
    while (std::getline(ss, row, ';')) {
      std::vector<double> r;
      std::stringstream rs(row);
      std::string item;
      while (std::getline(rs, item, ',')) {
        char* end = nullptr;
        const double x = std::strtod(item.c_str(), &end);
        if (end == item.c_str())
          throw ConfigError("field " + k + ": malformed matrix");
        r.push_back(x);
      }
      rows.push_back(r);
    }
    if (rows.empty()) throw ConfigError("field " + k + ": empty matrix");
    Matrix M(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows[0].size())
        throw ConfigError("field " + k + ": ragged matrix rows");
      for (std::size_t j = 0; j < rows[i].size(); ++j) M(i, j) = rows[i][j];
    }
    return M;
  }
};

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline KvDoc parse_kv(std::istream& in) {
  KvDoc doc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (doc.kv.count(key))
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": duplicate key '" + key + "'");
    doc.kv[key] = val;
    doc.line_of[key] = lineno;
  }
  return doc;
}

inline OodSpec parse_ood_spec(const KvDoc& doc, const std::string& prefix,
                              double ratio_min, double ratio_max) {
  OodSpec spec;
  spec.name = doc.has(prefix + ".name") ? doc.raw(prefix + ".name") : prefix;
  const std::string v = doc.raw(prefix + ".variant");
  if (v == "length_shift") spec.variant = OodSpec::Variant::length_shift;
  else if (v == "mixture_shift") spec.variant = OodSpec::Variant::mixture_shift;
  else if (v == "z_shift") spec.variant = OodSpec::Variant::z_shift;
  else if (v == "data_shift") spec.variant = OodSpec::Variant::data_shift;
  else throw ConfigError("field " + prefix + ".variant: unknown variant '" + v + "'");
  spec.L_star = static_cast<int>(doc.int_or(prefix + ".L_star", -1));
  if (doc.has(prefix + ".mixture")) spec.mixture_star = doc.list(prefix + ".mixture");
  if (doc.has(prefix + ".a_weights")) spec.wa = doc.matrix(prefix + ".a_weights");
  if (doc.has(prefix + ".b_weights")) spec.wb = doc.matrix(prefix + ".b_weights");
  if (doc.has(prefix + ".c_weights")) spec.wc = doc.matrix(prefix + ".c_weights");
  if (doc.has(prefix + ".d_weights")) spec.wd = doc.matrix(prefix + ".d_weights");
  spec.nu_star_seed = doc.int_or(prefix + ".nu_star_seed", 0);
  spec.ratio_min = ratio_min;
  spec.ratio_max = ratio_max;
  return spec;
}

}  // namespace detail

inline ExperimentConfig parse_config(std::istream& in) {
  detail::KvDoc doc = detail::parse_kv(in);
  ExperimentConfig c;
  c.geometry.d_x = static_cast<int>(doc.integer("d_x"));
  c.geometry.d_y = static_cast<int>(doc.integer("d_y"));
  c.geometry.K1 = static_cast<int>(doc.integer("K1"));
  c.geometry.K2 = static_cast<int>(doc.integer("K2"));
  c.geometry.u_norm = doc.num("u_norm");
  c.geometry.q_norm = doc.num("q_norm");
  c.geometry.kappa_x = doc.num("kappa_x");
  c.geometry.kappa_y = doc.num("kappa_y");
  c.geometry.rotation_seed = doc.int_or("rotation_seed", -1);

  c.prompt.L = static_cast<int>(doc.integer("L"));
  c.prompt.sigma_xi = doc.num("sigma_xi");
  c.prompt.extra_feature_prob = doc.num_or("extra_feature_prob", -1.0);
  if (doc.has("mixture")) c.prompt.mixture = doc.list("mixture");
  c.prompt.require_query_match = doc.bool_or("require_query_match", true);

  c.model.m = static_cast<int>(doc.integer("m"));
  c.model.sigma0 = doc.num("sigma0");
  c.model.sigma1 = doc.num("sigma1");
  c.model.r_scale = doc.num_or("r_scale", -1.0);

  c.train.B = static_cast<int>(doc.integer("B"));
  c.train.lambda = doc.num("lambda");
  c.train.gamma = doc.num("gamma");
  c.steps_per_epoch = doc.int_or("steps_per_epoch", 100);
  if (doc.has("T")) {
    c.train.T = doc.integer("T");
    c.epochs = doc.int_or("epochs", 0);
  } else {
    c.epochs = doc.integer("epochs");
    c.train.T = c.epochs * c.steps_per_epoch;
  }
  c.train.eps = doc.num_or("eps", 0.0);
  c.train.eval_every = doc.int_or("eval_every", 100);
  c.train.n_test = static_cast<int>(doc.integer("n_test"));
  c.train.seed = static_cast<std::uint64_t>(doc.integer("seed"));
  c.train.noise_draws = static_cast<int>(doc.int_or("noise_draws", 256));

  c.delta = doc.num_or("delta", 0.05);
  c.C1 = doc.num_or("C1", 1.0);
  c.C2 = doc.num_or("C2", 1.0);
  c.ood_ratio_min = doc.num_or("ood_ratio_min", 0.5);
  c.ood_ratio_max = doc.num_or("ood_ratio_max", 2.0);

  for (int i = 1;; ++i) {
    const std::string prefix = "ood" + std::to_string(i);
    if (!doc.has(prefix + ".variant")) break;
    c.ood.push_back(detail::parse_ood_spec(doc, prefix, c.ood_ratio_min,
                                           c.ood_ratio_max));
  }

  // Reject unknown keys so typos surface instead of silently using defaults.
  static const char* known[] = {
      "d_x", "d_y", "K1", "K2", "u_norm", "q_norm", "kappa_x", "kappa_y",
      "rotation_seed", "L", "sigma_xi", "extra_feature_prob", "mixture",
      "require_query_match", "m", "sigma0", "sigma1", "r_scale", "B", "lambda",
      "gamma", "steps_per_epoch", "T", "epochs", "eps", "eval_every", "n_test",
      "seed", "noise_draws", "delta", "C1", "C2", "ood_ratio_min",
      "ood_ratio_max"};
  for (const auto& [k, v] : doc.kv) {
    bool ok = false;
    for (const char* kn : known)
      if (k == kn) { ok = true; break; }
    if (!ok && k.rfind("ood", 0) == 0 && k.find('.') != std::string::npos)
      ok = true;
    if (!ok) throw ConfigError("unknown config field: " + k);
  }

  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_config(in);
}

// Canonical serialization of the *effective* configuration (defaults filled
// in, keys sorted); its FNV-1a hash is the manifest config hash, stable under
// reordering of the source file.
inline std::string canonical_config_string(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  auto put = [&](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv[k] = buf;
  };
  auto puti = [&](const std::string& k, long v) { kv[k] = std::to_string(v); };
  puti("d_x", c.geometry.d_x);
  puti("d_y", c.geometry.d_y);
  puti("K1", c.geometry.K1);
  puti("K2", c.geometry.K2);
  put("u_norm", c.geometry.u_norm);
  put("q_norm", c.geometry.q_norm);
  put("kappa_x", c.geometry.kappa_x);
  put("kappa_y", c.geometry.kappa_y);
  puti("rotation_seed", c.geometry.rotation_seed);
  puti("L", c.prompt.L);
  put("sigma_xi", c.prompt.sigma_xi);
  put("extra_feature_prob", c.prompt.effective_extra_prob(c.geometry));
  for (std::size_t i = 0; i < c.prompt.mixture.size(); ++i)
    put("mixture." + std::to_string(i), c.prompt.mixture[i]);
  puti("require_query_match", c.prompt.require_query_match ? 1 : 0);
  puti("m", c.model.m);
  put("sigma0", c.model.sigma0);
  put("sigma1", c.model.sigma1);
  put("r_scale", c.model.effective_r_scale());
  puti("B", c.train.B);
  put("lambda", c.train.lambda);
  put("gamma", c.train.gamma);
  puti("T", c.train.T);
  put("eps", c.train.eps);
  puti("eval_every", c.train.eval_every);
  puti("n_test", c.train.n_test);
  puti("seed", static_cast<long>(c.train.seed));
  puti("noise_draws", c.train.noise_draws);
  put("delta", c.delta);
  put("C1", c.C1);
  put("C2", c.C2);
  put("ood_ratio_min", c.ood_ratio_min);
  put("ood_ratio_max", c.ood_ratio_max);
  for (std::size_t i = 0; i < c.ood.size(); ++i) {
    const auto& o = c.ood[i];
    const std::string p = "ood" + std::to_string(i + 1) + ".";
    kv[p + "variant"] = std::to_string(static_cast<int>(o.variant));
    kv[p + "name"] = o.name;
    puti(p + "L_star", o.L_star);
    for (std::size_t j = 0; j < o.mixture_star.size(); ++j)
      put(p + "mixture." + std::to_string(j), o.mixture_star[j]);
    auto putm = [&](const std::string& name, const Matrix& M) {
      for (long r = 0; r < M.rows(); ++r)
        for (long cc = 0; cc < M.cols(); ++cc)
          put(p + name + "." + std::to_string(r) + "." + std::to_string(cc),
              M(r, cc));
    };
    putm("a_weights", o.wa);
    putm("b_weights", o.wb);
    putm("c_weights", o.wc);
    putm("d_weights", o.wd);
    puti(p + "nu_star_seed", o.nu_star_seed);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  return fnv1a64(canonical_config_string(c));
}

}  // namespace icl
