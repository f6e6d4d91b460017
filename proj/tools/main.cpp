// command-line front end over the C API: generate channel trace files, train
// the CSI predictor or the text codec standalone, and run evaluation sweeps

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "semkb/semkb.h"

namespace {

// exit codes: 0 success, 2 bad configuration or arguments, 3 runtime failure
int exit_code_of(semkb_status status) { return status == SEMKB_ERR_CONFIG ? 2 : 3; }

int report_failure(semkb_status status) {
  std::fprintf(stderr, "error: %s\n", semkb_last_error());
  return exit_code_of(status);
}

struct config_handle {
  semkb_config* ptr = nullptr;
  ~config_handle() { semkb_config_free(ptr); }
};

struct trace_handle {
  semkb_trace* ptr = nullptr;
  ~trace_handle() { semkb_trace_free(ptr); }
};

struct record_handle {
  semkb_record* ptr = nullptr;
  ~record_handle() { semkb_record_free(ptr); }
};

// options shared by the run-style subcommands; seed overrides the config's
// whole sweep seed list when given
struct run_opts {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string csi;
  int workers = 0;
};

void add_config_seed(CLI::App* sub, run_opts& opts) {
  sub->add_option("--config", opts.config, "experiment configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", opts.seed, "run a single seed instead of the configured list")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
}

void add_sweep_opts(CLI::App* sub, run_opts& opts) {
  sub->add_option("--csi", opts.csi, "channel trace file standing in for the channel model")
      ->check(CLI::ExistingFile);
  sub->add_option("--workers", opts.workers, "sweep-point threads, 0 = hardware concurrency")
      ->check(CLI::Range(0, 1024));
}

int load_config(const run_opts& opts, config_handle& cfg) {
  semkb_status status = semkb_config_load(opts.config.c_str(), &cfg.ptr);
  if (status != SEMKB_OK) return report_failure(status);
  if (opts.seed_set) {
    status = semkb_config_set_seed(cfg.ptr, opts.seed);
    if (status != SEMKB_OK) return report_failure(status);
  }
  return 0;
}

int load_trace(const run_opts& opts, trace_handle& trace) {
  if (opts.csi.empty()) return 0;
  const semkb_status status = semkb_csi_load(opts.csi.c_str(), &trace.ptr);
  return status == SEMKB_OK ? 0 : report_failure(status);
}

void print_filter(const semkb_filter_stats& f) {
  const double accept = f.samples ? 100.0 * double(f.accepted) / double(f.samples) : 0.0;
  std::printf("filter: %" PRId64 " samples, %" PRId64 " accepted (%.1f%%), %" PRId64
              " fallbacks, %" PRId64 " generation calls\n",
              f.samples, f.accepted, accept, f.fallbacks, f.generation_calls);
}

int print_record(semkb_record* rec) {
  size_t count = 0;
  semkb_status status = semkb_record_metric_count(rec, &count);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("%-6s %-8s %-14s %-8s %-8s %-8s %-8s %s\n", "seed", "snr_db", "variant", "map",
              "rank@1", "rank@5", "rank@10", "csi_nmse");
  for (size_t i = 0; i < count; ++i) {
    semkb_metric_row row;
    status = semkb_record_metric(rec, i, &row);
    if (status != SEMKB_OK) return report_failure(status);
    std::printf("%-6" PRIu64 " %-8g %-14s %-8.4f %-8.4f %-8.4f %-8.4f %.6g\n", row.seed,
                row.snr_db, row.variant, row.map, row.rank1, row.rank5, row.rank10, row.nmse);
  }
  semkb_filter_stats filter;
  status = semkb_record_filter(rec, &filter);
  if (status != SEMKB_OK) return report_failure(status);
  print_filter(filter);
  double seconds = 0.0;
  status = semkb_record_wall_clock(rec, &seconds);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("wall clock: %.2f s\n", seconds);
  return 0;
}

int run_gen_csi(const std::string& config, std::uint64_t seed, std::uint32_t length,
                const std::string& out) {
  config_handle cfg;
  semkb_status status = semkb_config_load(config.c_str(), &cfg.ptr);
  if (status != SEMKB_OK) return report_failure(status);
  status = semkb_gen_csi(cfg.ptr, seed, length, out.c_str());
  if (status != SEMKB_OK) return report_failure(status);
  trace_handle trace;
  status = semkb_csi_load(out.c_str(), &trace.ptr);
  if (status != SEMKB_OK) return report_failure(status);
  uint16_t n_r = 0, n_t = 0;
  uint32_t written = 0;
  status = semkb_trace_dims(trace.ptr, &n_r, &n_t, &written);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("wrote %s: %u x %u gains, %u samples\n", out.c_str(), n_r, n_t, written);
  return 0;
}

int run_train_cdg(const run_opts& opts, const std::string& out) {
  config_handle cfg;
  if (const int rc = load_config(opts, cfg)) return rc;
  const std::uint64_t seed = opts.seed_set ? opts.seed : 1;
  double total = 0.0, ce = 0.0, nmse = 0.0;
  const semkb_status status =
      semkb_train_cdg(cfg.ptr, seed, out.c_str(), &total, &ce, &nmse);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("trained predictor (seed %" PRIu64 "): total=%.6g ce=%.6g nmse=%.6g\n", seed,
              total, ce, nmse);
  std::printf("checkpoint: %s\n", out.c_str());
  return 0;
}

int run_train_cdfc(const run_opts& opts, double snr_db, const std::string& out) {
  config_handle cfg;
  if (const int rc = load_config(opts, cfg)) return rc;
  const std::uint64_t seed = opts.seed_set ? opts.seed : 1;
  semkb_filter_stats stats;
  double final_loss = 0.0;
  const semkb_status status = semkb_train_cdfc(cfg.ptr, seed, snr_db,
                                               out.empty() ? nullptr : out.c_str(), &stats,
                                               &final_loss);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("trained codec (seed %" PRIu64 ", %g dB): final loss %.6g\n", seed, snr_db,
              final_loss);
  print_filter(stats);
  if (!out.empty()) std::printf("diagnostics: %s\n", out.c_str());
  return 0;
}

int run_eval(const run_opts& opts) {
  config_handle cfg;
  if (const int rc = load_config(opts, cfg)) return rc;
  trace_handle trace;
  if (const int rc = load_trace(opts, trace)) return rc;
  record_handle rec;
  const semkb_status status = semkb_run(cfg.ptr, opts.workers, trace.ptr, &rec.ptr);
  if (status != SEMKB_OK) return report_failure(status);
  return print_record(rec.ptr);
}

int run_sweep(const run_opts& opts, const std::string& out, const std::string& format) {
  config_handle cfg;
  if (const int rc = load_config(opts, cfg)) return rc;
  trace_handle trace;
  if (const int rc = load_trace(opts, trace)) return rc;
  record_handle rec;
  semkb_status status = semkb_run(cfg.ptr, opts.workers, trace.ptr, &rec.ptr);
  if (status != SEMKB_OK) return report_failure(status);
  status = semkb_record_emit(rec.ptr, out.c_str(), format.c_str());
  if (status != SEMKB_OK) return report_failure(status);
  size_t count = 0;
  status = semkb_record_metric_count(rec.ptr, &count);
  if (status != SEMKB_OK) return report_failure(status);
  double seconds = 0.0;
  status = semkb_record_wall_clock(rec.ptr, &seconds);
  if (status != SEMKB_OK) return report_failure(status);
  std::printf("wrote %zu metric rows to %s (%.2f s)\n", count, out.c_str(), seconds);
  return 0;
}

int run_ablate(const run_opts& opts, const std::string& out, const std::string& format) {
  config_handle cfg;
  if (const int rc = load_config(opts, cfg)) return rc;
  trace_handle trace;
  if (const int rc = load_trace(opts, trace)) return rc;
  const int flags[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  std::printf("%-14s %s\n", "variant", "mean_map");
  for (const auto& flag : flags) {
    semkb_status status = semkb_config_set_ablations(cfg.ptr, flag[0], flag[1]);
    if (status != SEMKB_OK) return report_failure(status);
    record_handle rec;
    status = semkb_run(cfg.ptr, opts.workers, trace.ptr, &rec.ptr);
    if (status != SEMKB_OK) return report_failure(status);
    char variant[24];
    status = semkb_record_variant(rec.ptr, variant, sizeof(variant));
    if (status != SEMKB_OK) return report_failure(status);
    status = semkb_record_emit(rec.ptr, (out + "/" + variant).c_str(), format.c_str());
    if (status != SEMKB_OK) return report_failure(status);
    size_t count = 0;
    status = semkb_record_metric_count(rec.ptr, &count);
    if (status != SEMKB_OK) return report_failure(status);
    double mean_map = 0.0;
    for (size_t i = 0; i < count; ++i) {
      semkb_metric_row row;
      status = semkb_record_metric(rec.ptr, i, &row);
      if (status != SEMKB_OK) return report_failure(status);
      mean_map += row.map;
    }
    if (count) mean_map /= double(count);
    std::printf("%-14s %.4f\n", variant, mean_map);
  }
  std::printf("results under %s/<variant>/\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic text link over a fading MIMO channel: knowledge-backed caption "
               "augmentation, CSI prediction, and a similarity-gated codec"};
  app.require_subcommand(1);
  app.footer("a remote text backend (sdg.backend = \"remote\") reads SEMKB_BACKEND_URL");

  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  std::uint32_t gen_length = 0;
  auto* gen = app.add_subcommand("gen-csi", "generate a channel trace file");
  gen->add_option("--config", gen_config, "experiment configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "trace seed")->required();
  gen->add_option("--length", gen_length, "number of samples")
      ->required()
      ->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "output trace path")->required();

  run_opts cdg_opts;
  std::string cdg_out;
  auto* train_cdg = app.add_subcommand(
      "train-cdg", "train the CSI predictor for one seed and save its checkpoint");
  add_config_seed(train_cdg, cdg_opts);
  train_cdg->add_option("--out", cdg_out, "checkpoint path")->required();

  run_opts cdfc_opts;
  std::string cdfc_out;
  double cdfc_snr = 10.0;
  auto* train_cdfc = app.add_subcommand(
      "train-cdfc", "train the text codec at one SNR point and report filter statistics");
  add_config_seed(train_cdfc, cdfc_opts);
  train_cdfc->add_option("--snr", cdfc_snr, "channel SNR in dB")->required();
  train_cdfc->add_option("--out", cdfc_out, "directory for diagnostic metric files");

  run_opts eval_opts;
  auto* eval = app.add_subcommand("eval", "run the configured sweep and print the metrics");
  add_config_seed(eval, eval_opts);
  add_sweep_opts(eval, eval_opts);

  run_opts sweep_opts;
  std::string sweep_out, sweep_format = "both";
  auto* sweep = app.add_subcommand("sweep", "run the configured sweep and write result files");
  add_config_seed(sweep, sweep_opts);
  add_sweep_opts(sweep, sweep_opts);
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--format", sweep_format, "metric file format")
      ->check(CLI::IsMember({"jsonl", "csv", "both"}));

  run_opts ablate_opts;
  std::string ablate_out, ablate_format = "both";
  auto* ablate = app.add_subcommand(
      "ablate", "sweep all four ablation variants into per-variant directories");
  add_config_seed(ablate, ablate_opts);
  add_sweep_opts(ablate, ablate_opts);
  ablate->add_option("--out", ablate_out, "output directory")->required();
  ablate->add_option("--format", ablate_format, "metric file format")
      ->check(CLI::IsMember({"jsonl", "csv", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (app.got_subcommand(gen)) return run_gen_csi(gen_config, gen_seed, gen_length, gen_out);
  if (app.got_subcommand(train_cdg)) return run_train_cdg(cdg_opts, cdg_out);
  if (app.got_subcommand(train_cdfc)) return run_train_cdfc(cdfc_opts, cdfc_snr, cdfc_out);
  if (app.got_subcommand(eval)) return run_eval(eval_opts);
  if (app.got_subcommand(sweep)) return run_sweep(sweep_opts, sweep_out, sweep_format);
  if (app.got_subcommand(ablate)) return run_ablate(ablate_opts, ablate_out, ablate_format);
  return 2;
}
