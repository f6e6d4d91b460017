// C shim over the harness: opaque handles around config / trace / run record,
// exceptions mapped to status codes, messages parked in a thread-local slot.

#include "semkb/semkb.h"

#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>
#include <string>
#include <utility>

#include "cdg.hpp"
#include "common.hpp"
#include "harness.hpp"
#include "mimo.hpp"

struct semkb_config {
  semkb::harness::ExperimentConfig value;
};

struct semkb_trace {
  semkb::mimo::ChannelTrace value;
};

struct semkb_record {
  semkb::harness::RunRecord value;
};

namespace {

constexpr const char* kVersion = "1.0.0";

thread_local std::string g_last_error;

semkb_status status_of(semkb::errc kind) {
  switch (kind) {
    case semkb::errc::config: return SEMKB_ERR_CONFIG;
    case semkb::errc::invalid_input: return SEMKB_ERR_INVALID_INPUT;
    case semkb::errc::shape: return SEMKB_ERR_SHAPE;
    case semkb::errc::numeric: return SEMKB_ERR_NUMERIC;
    case semkb::errc::vocab: return SEMKB_ERR_VOCAB;
    case semkb::errc::context_overflow: return SEMKB_ERR_CONTEXT_OVERFLOW;
    case semkb::errc::state: return SEMKB_ERR_STATE;
    case semkb::errc::generation: return SEMKB_ERR_GENERATION;
    case semkb::errc::empty_generation: return SEMKB_ERR_EMPTY_GENERATION;
    case semkb::errc::metric: return SEMKB_ERR_METRIC;
    case semkb::errc::format: return SEMKB_ERR_FORMAT;
    case semkb::errc::backend: return SEMKB_ERR_BACKEND;
    case semkb::errc::io: return SEMKB_ERR_IO;
  }
  return SEMKB_ERR_UNKNOWN;
}

semkb_status set_error(semkb_status status, const std::string& msg) {
  g_last_error = msg;
  return status;
}

// clears the error slot, runs the body, and folds any escaping exception into
// a status + message
template <typename F>
semkb_status guarded(F&& body) {
  g_last_error.clear();
  try {
    return body();
  } catch (const semkb::error& e) {
    return set_error(status_of(e.kind()), e.what());
  } catch (const std::exception& e) {
    return set_error(SEMKB_ERR_UNKNOWN, e.what());
  } catch (...) {
    return set_error(SEMKB_ERR_UNKNOWN, "unrecognized failure");
  }
}

semkb_status null_argument(const char* name) {
  return set_error(SEMKB_ERR_NULL_ARGUMENT, std::string(name) + " is null");
}

// validates the mutation on a copy so a rejected change leaves cfg untouched
template <typename F>
semkb_status mutate_config(semkb_config* cfg, F&& change) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    semkb::harness::ExperimentConfig next = cfg->value;
    change(next);
    next.validate();
    cfg->value = std::move(next);
    return SEMKB_OK;
  });
}

semkb_status copy_string(const std::string& text, char* buf, size_t buf_len, const char* what) {
  if (buf_len < text.size() + 1)
    return set_error(SEMKB_ERR_INVALID_INPUT, std::string(what) + " buffer needs at least " +
                                                  std::to_string(text.size() + 1) +
                                                  " bytes, got " + std::to_string(buf_len));
  std::memcpy(buf, text.c_str(), text.size() + 1);
  return SEMKB_OK;
}

}  // namespace

extern "C" {

const char* semkb_version(void) { return kVersion; }

const char* semkb_last_error(void) { return g_last_error.c_str(); }

semkb_status semkb_config_parse(const char* text, semkb_config** out) {
  return guarded([&]() -> semkb_status {
    if (!text) return null_argument("text");
    if (!out) return null_argument("out");
    auto handle = std::make_unique<semkb_config>();
    handle->value = semkb::harness::parse_config(text);
    *out = handle.release();
    return SEMKB_OK;
  });
}

semkb_status semkb_config_load(const char* path, semkb_config** out) {
  return guarded([&]() -> semkb_status {
    if (!path) return null_argument("path");
    if (!out) return null_argument("out");
    auto handle = std::make_unique<semkb_config>();
    handle->value = semkb::harness::load_config(path);
    *out = handle.release();
    return SEMKB_OK;
  });
}

void semkb_config_free(semkb_config* cfg) { delete cfg; }

semkb_status semkb_config_hash(const semkb_config* cfg, char* buf, size_t buf_len) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    if (!buf) return null_argument("buf");
    return copy_string(semkb::harness::config_hash(cfg->value), buf, buf_len, "hash");
  });
}

semkb_status semkb_config_set_seed(semkb_config* cfg, uint64_t seed) {
  return mutate_config(cfg, [&](semkb::harness::ExperimentConfig& next) {
    next.sweep.seeds = {seed};
  });
}

semkb_status semkb_config_set_ablations(semkb_config* cfg, int disable_sdg, int disable_cdg) {
  return mutate_config(cfg, [&](semkb::harness::ExperimentConfig& next) {
    next.ablations.disable_sdg = disable_sdg != 0;
    next.ablations.disable_cdg = disable_cdg != 0;
  });
}

semkb_status semkb_config_set_snr_grid(semkb_config* cfg, const double* snr_db, size_t count) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    if (!snr_db) return null_argument("snr_db");
    semkb::harness::ExperimentConfig next = cfg->value;
    next.sweep.snr_grid_db.assign(snr_db, snr_db + count);
    next.validate();
    cfg->value = std::move(next);
    return SEMKB_OK;
  });
}

semkb_status semkb_config_set_feedback_bits(semkb_config* cfg, int64_t bits) {
  return mutate_config(cfg, [&](semkb::harness::ExperimentConfig& next) {
    next.mimo.feedback_bits = bits;
  });
}

semkb_status semkb_gen_csi(const semkb_config* cfg, uint64_t seed, uint32_t length,
                           const char* path) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    if (!path) return null_argument("path");
    if (length == 0 || length > size_t(std::numeric_limits<int>::max()))
      return set_error(SEMKB_ERR_INVALID_INPUT,
                       "length must be in [1, " +
                           std::to_string(std::numeric_limits<int>::max()) + "], got " +
                           std::to_string(length));
    const auto trace =
        semkb::mimo::generate_trace(cfg->value.channel_params(), seed, int(length));
    semkb::harness::save_csi(trace, path);
    return SEMKB_OK;
  });
}

semkb_status semkb_csi_load(const char* path, semkb_trace** out) {
  return guarded([&]() -> semkb_status {
    if (!path) return null_argument("path");
    if (!out) return null_argument("out");
    auto handle = std::make_unique<semkb_trace>();
    handle->value = semkb::harness::load_csi(path);
    *out = handle.release();
    return SEMKB_OK;
  });
}

void semkb_trace_free(semkb_trace* trace) { delete trace; }

semkb_status semkb_trace_dims(const semkb_trace* trace, uint16_t* n_r, uint16_t* n_t,
                              uint32_t* length) {
  return guarded([&]() -> semkb_status {
    if (!trace) return null_argument("trace");
    if (n_r) *n_r = uint16_t(trace->value.n_r());
    if (n_t) *n_t = uint16_t(trace->value.n_t());
    if (length) *length = uint32_t(trace->value.length());
    return SEMKB_OK;
  });
}

semkb_status semkb_train_cdg(const semkb_config* cfg, uint64_t seed, const char* checkpoint_path,
                             double* final_total, double* final_ce, double* final_nmse) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    if (!checkpoint_path) return null_argument("checkpoint_path");
    const auto trained = semkb::harness::train_predictor(cfg->value, seed);
    if (trained.history.empty())
      return set_error(SEMKB_ERR_STATE, "cdg.epochs is 0: nothing was trained");
    semkb::cdg::save_checkpoint(trained.model, checkpoint_path);
    if (final_total) *final_total = trained.history.back().total;
    if (final_ce) *final_ce = trained.history.back().ce;
    if (final_nmse) *final_nmse = trained.history.back().nmse;
    return SEMKB_OK;
  });
}

semkb_status semkb_train_cdfc(const semkb_config* cfg, uint64_t seed, double snr_db,
                              const char* out_dir, semkb_filter_stats* stats,
                              double* final_loss) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    semkb::harness::ExperimentConfig narrowed = cfg->value;
    narrowed.sweep.seeds = {seed};
    narrowed.sweep.snr_grid_db = {snr_db};
    narrowed.validate();
    const auto record = semkb::harness::run_experiment(narrowed, 1);
    if (record.cdfc_losses.empty())
      return set_error(SEMKB_ERR_STATE,
                       "the codec took no training steps (cdfc.epochs is 0 or the training "
                       "split is empty)");
    if (out_dir) semkb::harness::emit_results(record, out_dir);
    if (stats) {
      stats->samples = record.filter.samples;
      stats->accepted = record.filter.accepted;
      stats->fallbacks = record.filter.fallbacks;
      stats->generation_calls = record.filter.generation_calls;
    }
    if (final_loss) *final_loss = record.cdfc_losses.back().loss;
    return SEMKB_OK;
  });
}

semkb_status semkb_run(const semkb_config* cfg, int workers, const semkb_trace* csi_or_null,
                       semkb_record** out) {
  return guarded([&]() -> semkb_status {
    if (!cfg) return null_argument("cfg");
    if (!out) return null_argument("out");
    if (workers < 0)
      return set_error(SEMKB_ERR_INVALID_INPUT,
                       "workers must be >= 0, got " + std::to_string(workers));
    auto handle = std::make_unique<semkb_record>();
    handle->value = semkb::harness::run_experiment(cfg->value, workers,
                                                   csi_or_null ? &csi_or_null->value : nullptr);
    *out = handle.release();
    return SEMKB_OK;
  });
}

void semkb_record_free(semkb_record* record) { delete record; }

semkb_status semkb_record_metric_count(const semkb_record* record, size_t* count) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!count) return null_argument("count");
    *count = record->value.metrics.size();
    return SEMKB_OK;
  });
}

semkb_status semkb_record_metric(const semkb_record* record, size_t index,
                                 semkb_metric_row* out) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!out) return null_argument("out");
    const auto& rows = record->value.metrics;
    if (index >= rows.size())
      return set_error(SEMKB_ERR_INVALID_INPUT, "metric index " + std::to_string(index) +
                                                    " out of range (" +
                                                    std::to_string(rows.size()) + " rows)");
    const auto& row = rows[index];
    out->seed = row.seed;
    out->snr_db = row.snr_db;
    std::snprintf(out->variant, sizeof(out->variant), "%s", row.variant.c_str());
    out->map = row.map;
    out->rank1 = row.rank1;
    out->rank5 = row.rank5;
    out->rank10 = row.rank10;
    out->nmse = row.nmse;
    return SEMKB_OK;
  });
}

semkb_status semkb_record_filter(const semkb_record* record, semkb_filter_stats* out) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!out) return null_argument("out");
    out->samples = record->value.filter.samples;
    out->accepted = record->value.filter.accepted;
    out->fallbacks = record->value.filter.fallbacks;
    out->generation_calls = record->value.filter.generation_calls;
    return SEMKB_OK;
  });
}

semkb_status semkb_record_wall_clock(const semkb_record* record, double* seconds) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!seconds) return null_argument("seconds");
    *seconds = record->value.wall_clock_s;
    return SEMKB_OK;
  });
}

semkb_status semkb_record_variant(const semkb_record* record, char* buf, size_t buf_len) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!buf) return null_argument("buf");
    return copy_string(record->value.variant, buf, buf_len, "variant");
  });
}

semkb_status semkb_record_emit(const semkb_record* record, const char* out_dir,
                               const char* format) {
  return guarded([&]() -> semkb_status {
    if (!record) return null_argument("record");
    if (!out_dir) return null_argument("out_dir");
    if (!format) return null_argument("format");
    semkb::harness::EmitFormat parsed;
    if (std::strcmp(format, "jsonl") == 0) {
      parsed = semkb::harness::EmitFormat::jsonl;
    } else if (std::strcmp(format, "csv") == 0) {
      parsed = semkb::harness::EmitFormat::csv;
    } else if (std::strcmp(format, "both") == 0) {
      parsed = semkb::harness::EmitFormat::both;
    } else {
      return set_error(SEMKB_ERR_INVALID_INPUT, std::string("format must be \"jsonl\", "
                                                            "\"csv\", or \"both\", got '") +
                                                    format + "'");
    }
    semkb::harness::emit_results(record->value, out_dir, parsed);
    return SEMKB_OK;
  });
}

}  // extern "C"
