#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "transadapter/checkpoint.hpp"

namespace transadapter {

/// Bad command line or configuration (maps to exit code 1).
class UsageError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct RunPaths {
  std::string data_src, data_tgt;   // training splits
  std::string eval_src, eval_tgt;   // optional held-out splits
  std::string out = "run";          // directory for loss.csv and mix.log
  std::string ckpt;                 // defaults to <out>/model.tadp
  std::string pseudo_ckpt;          // optional pre-trained source-only labeler
};

struct RunConfig {
  TrainConfig train;
  RunPaths paths;
};

inline bool apply_path_entry(RunPaths &p, const std::string &key, const std::string &value) {
  if (key == "data_src") p.data_src = value;
  else if (key == "data_tgt") p.data_tgt = value;
  else if (key == "eval_src") p.eval_src = value;
  else if (key == "eval_tgt") p.eval_tgt = value;
  else if (key == "out") p.out = value;
  else if (key == "ckpt") p.ckpt = value;
  else if (key == "pseudo_ckpt") p.pseudo_ckpt = value;
  else return false;
  return true;
}

inline RunConfig parse_run_config(std::istream &in, const std::string &what) {
  RunConfig rc;
  try {
    for (const auto &e : parse_key_values(in, what))
      if (!apply_config_entry(rc.train, e.key, e.value) && !apply_path_entry(rc.paths, e.key, e.value))
        throw UsageError(what + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
  } catch (const UsageError &) {
    throw;
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw UsageError("cannot open config file " + path.string());
  return parse_run_config(in, path.string());
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// One-line JSON summary of an evaluation; identical for `train` and `eval`.
/// Split label used in eval lines: the file stem ("source_eval.tds" -> "source_eval").
inline std::string split_label(const std::filesystem::path &path) { return path.stem().string(); }

inline std::string eval_line(const std::string &split, const Dataset &data, const EvalResult &r) {
  nlohmann::ordered_json j;
  j["eval"] = split;
  j["domain"] = domain_name(data.domain);
  j["count"] = data.size();
  j["accuracy"] = r.accuracy;
  nlohmann::json per = nlohmann::json::array();
  for (double a : r.per_class)
    per.push_back(std::isnan(a) ? nlohmann::json(nullptr) : nlohmann::json(a));
  j["per_class"] = per;
  return j.dump();
}

inline std::string embeddings_csv_header(std::size_t channels) {
  std::string h = "id,domain,label";
  for (std::size_t c = 0; c < channels; ++c)
    h += ",f" + std::to_string(c);
  return h + '\n';
}

/// One row per sample; target rows carry label -1.
inline void write_embedding_rows(std::ostream &out, const Dataset &data, const EvalResult &r) {
  const std::size_t C = r.embeddings.dim(1);
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << i << ',' << domain_name(data.domain) << ','
        << (data.domain == Domain::source ? static_cast<long>(data.labels[i]) : -1L);
    for (std::size_t c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", r.embeddings.values()[i * C + c]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void write_embeddings_csv(std::ostream &out, const Dataset &data, const EvalResult &r) {
  out << embeddings_csv_header(r.embeddings.dim(1));
  write_embedding_rows(out, data, r);
}

inline void export_embeddings(const TransAdapterModel &model, const Dataset &data,
                              const std::filesystem::path &path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  write_embeddings_csv(out, data, evaluate(model, data));
}

// ---------------------------------------------------------------------------
// Training pipeline
// ---------------------------------------------------------------------------

struct PipelineSinks {
  std::ostream *loss_csv = nullptr; // header + one row per step
  std::ostream *audit = nullptr;    // mix decisions, CFT blocks, pseudo-label summary
  std::ostream *log = nullptr;      // human-readable progress
  std::uint64_t log_every = 100;
};

struct PseudoLabelerInfo {
  double threshold = 0.0;
  double labeler_source_accuracy = 0.0;
  std::size_t retained = 0;
  std::size_t candidates = 0;
};

/// Source-only labeler, its threshold, and the retained target set.
inline PseudoLabelSet stage_pseudo_labels(const TransAdapterModel &labeler, const Dataset &target_train,
                                          const Dataset &threshold_split, PseudoLabelerInfo *info = nullptr) {
  const double acc = evaluate(labeler, threshold_split).accuracy;
  const double threshold = pseudo_threshold_from_accuracy(acc);
  PseudoLabelSet set = pseudo_label(labeler, target_train, threshold);
  if (info)
    *info = {threshold, acc, set.size(), set.candidates};
  return set;
}

inline TrainConfig source_only(TrainConfig cfg) {
  cfg.toggles = ModuleToggles::none();
  return cfg;
}

/// Trains from `state` up to stop_step, streaming logs into the sinks.
inline void run_training(TrainingState &state, const TrainingData &data, const TrainConfig &cfg,
                         std::uint64_t stop_step, const PipelineSinks &sinks) {
  if (sinks.loss_csv && state.optim.step == 0)
    *sinks.loss_csv << loss_csv_header();
  train(state.model, state.optim, data, cfg, stop_step, [&](const LossReport &r, const DomainBatch &b) {
    if (std::abs(r.l_total - total_loss(r.l_cls, r.l_local, r.l_global, r.lambda_local, r.lambda_global)) > 1e-12)
      throw NumericError("loss report is not additive at step " + std::to_string(r.step));
    if (sinks.loss_csv)
      *sinks.loss_csv << format_loss_row(r);
    if (sinks.audit) {
      if (r.cft_block)
        *sinks.audit << "cft step=" << r.step << " block=" << *r.cft_block << '\n';
      *sinks.audit << format_mix_log(r.step, b.mixes);
    }
    if (sinks.log && sinks.log_every && (r.step % sinks.log_every == 0 || r.step + 1 == cfg.total_steps)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "# step %llu/%llu l_total=%.6f l_cls=%.6f lr=%.6f\n",
                    static_cast<unsigned long long>(r.step), static_cast<unsigned long long>(cfg.total_steps),
                    r.l_total, r.l_cls, r.lr);
      *sinks.log << buf << std::flush;
    }
  });
}

inline TrainingState fresh_state(const TrainConfig &cfg) {
  TrainingState s{make_model(cfg), {}};
  s.optim = OptimState::for_params(s.model.parameters(), cfg);
  return s;
}

} // namespace transadapter
