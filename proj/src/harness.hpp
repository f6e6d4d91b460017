#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cdfc.hpp"
#include "cdg.hpp"
#include "common.hpp"
#include "lmkb.hpp"
#include "mimo.hpp"
#include "sdg.hpp"

namespace semkb::harness {

// Experiment configuration, loaded from a sectioned key = value text file
// (TOML subset: [section] headers, bool/int/float/string/array values, inf and
// -inf literals, # comments). Unknown sections or keys are rejected so a typo
// cannot silently run the wrong sweep.
struct ExperimentConfig {
  struct Channel {
    std::string model_tag = "nlos_like";  // "los_like" | "nlos_like"
    int n_r = 16;
    int n_t = 16;
    double doppler_hz = 50.0;
    double k_factor_db = -std::numeric_limits<double>::infinity();
    double sample_interval_ms = 1.0;
  } channel;

  struct Mimo {
    int d = 2;
    bool equalize = true;
    std::int64_t feedback_bits = -1;  // -1 = unquantized precoder feedback
  } mimo;

  struct Cdg {
    int t_his = 16;
    int t_pre = 4;
    int l_patch = 8;
    int stride = 2;
    int d_e = 16;
    double lambda = 1.0;
    int epochs = 200;
    double lr = 0.05;
  } cdg;

  struct Sdg {
    std::string backend = "mock";  // "mock" | "toy" | "remote"
    double tau = 1.0;
    int max_len = 32;
    double hallucination_rate = 0.0;
  } sdg;

  struct Cdfc {
    double gamma = 0.5;
    int max_retries = 5;
    std::string fusion_pairing = "cross";  // "cross" | "matched"
    int n_feat = 8;
    int epochs = 4;
    double lr = 0.05;
  } cdfc;

  struct Sweep {
    std::vector<double> snr_grid_db = {0.0, 5.0, 10.0, 15.0, 20.0, 25.0};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
  } sweep;

  struct Dataset {
    int n_classes = 64;
    int captions_per_class = 5;
    int vocab_size = 200;
  } dataset;

  struct Ablations {
    bool disable_sdg = false;
    bool disable_cdg = false;
  } ablations;

  // range checks; throws a config error naming the offending field
  void validate() const;

  mimo::ChannelModelParams channel_params() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// 16 hex digits over a canonical key = value rendering; stable across
// platforms (shortest round-trip float formatting, fixed field order)
std::string config_hash(const ExperimentConfig& cfg);

// Synthetic retrieval corpus: classes are (color, garment) pairs, captions are
// templated sentences over those attributes with per-caption synonym choices.
// Every caption-bearing word has an anti-token "~word" whose embedding is the
// exact negation, and synonyms embed as small perturbations of their base
// word, so hallucinated and paraphrased generations are geometrically
// distinguishable from the start.
struct RetrievalCorpus {
  lmkb::Vocab vocab;
  lmkb::EmbeddingTable table;  // [|V|, d_emb], aligned with vocab rows
  rmat gallery;                // [n_classes, d_proto] unit-norm prototypes
  std::vector<cdfc::TrainSample> train;
  std::vector<cdfc::TrainSample> test;
  sdg::Thesaurus thesaurus;  // symmetric synonym pools over caption words
  int n_classes = 0;
};

// 80/20 train/test split per class by caption index (floor(0.8 n) train);
// deterministic in seed. vocab_size is honored exactly: the natural vocabulary
// is padded with unused distractor words, and a budget below the natural size
// is a config error.
RetrievalCorpus synth_dataset(const ExperimentConfig::Dataset& cfg, int d_emb, int d_proto,
                              std::uint64_t seed);

// CSIF1 trace file: little-endian header (magic "CSIF", version u16 = 1,
// n_r u16, n_t u16, length u32, sample_interval_ms f32, first t_index i64,
// 6 reserved zero bytes) followed by length * n_r * n_t row-major (re, im)
// f32 pairs. Gains are stored at f32, so save -> load -> save is
// byte-identical and load -> save round-trips bitwise.
void save_csi(const mimo::ChannelTrace& trace, const std::string& path);
mimo::ChannelTrace load_csi(const std::string& path);

struct MetricRow {
  std::uint64_t seed = 0;
  double snr_db = 0.0;
  std::string variant;  // "full" | "no_sdg" | "no_cdg" | "no_sdg_no_cdg"
  double map = 0.0;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double nmse = 0.0;  // precoder-source CSI error vs the true channel

  bool operator==(const MetricRow&) const = default;
};

struct EpochRow {
  std::uint64_t seed = 0;
  int epoch = 0;
  double total = 0.0;
  double ce = 0.0;
  double nmse = 0.0;

  bool operator==(const EpochRow&) const = default;
};

struct StepRow {
  std::uint64_t seed = 0;
  double snr_db = 0.0;
  int step = 0;
  double loss = 0.0;

  bool operator==(const StepRow&) const = default;
};

struct FilterStats {
  std::int64_t samples = 0;  // filtered transmissions
  std::int64_t accepted = 0;
  std::int64_t fallbacks = 0;
  std::int64_t generation_calls = 0;

  double accept_rate() const { return samples ? double(accepted) / double(samples) : 0.0; }
  double fallback_rate() const { return samples ? double(fallbacks) / double(samples) : 0.0; }

  bool operator==(const FilterStats&) const = default;
};

struct UserNmseRow {
  int user_id = 0;           // seed index
  std::int64_t position = 0;  // slot t_index
  double nmse = 0.0;

  bool operator==(const UserNmseRow&) const = default;
};

struct RunRecord {
  std::string config_hash;
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricRow> metrics;     // seed-major, SNR ascending within seed
  std::vector<EpochRow> cdg_losses;   // empty when prediction is disabled
  std::vector<StepRow> cdfc_losses;
  FilterStats filter;
  std::vector<UserNmseRow> user_nmse;
  double wall_clock_s = 0.0;  // excluded from emitted metric rows and equality

  // everything except wall clock
  bool same_payload(const RunRecord& other) const;
};

// Full pipeline for one config: per seed, synthesize the corpus, generate
// channel traces, train the CSI predictor (unless disabled), precompute one
// channel slot per evaluation time index (reused across the SNR grid), then
// per SNR point train the text codec under the configured ablations and score
// the held-out queries. Deterministic in (config, seeds); sweep points run on
// `workers` threads (0 = hardware concurrency) without affecting results.
// `csi_override` replaces the generated channel with a loaded trace, shared
// by every seed and split 60/40 into predictor-training and evaluation spans.
RunRecord run_experiment(const ExperimentConfig& cfg, int workers = 0,
                         const mimo::ChannelTrace* csi_override = nullptr);

enum class EmitFormat { jsonl, csv, both };

// Writes metrics.jsonl / metrics.csv (identical rows, identical float
// rendering), plot.tsv (x = SNR, mean-over-seeds series for this variant),
// and run.json (the full record, the only file carrying wall clock). Returns
// the paths written. Reruns of the same config and seeds are byte-identical
// except run.json.
std::vector<std::string> emit_results(const RunRecord& record, const std::string& out_dir,
                                      EmitFormat format = EmitFormat::both);

std::vector<MetricRow> read_metrics_jsonl(const std::string& path);

// backend selection for the generation path; "remote" reads SEMKB_BACKEND_URL
std::unique_ptr<lmkb::TextBackend> make_backend(const ExperimentConfig::Sdg& cfg,
                                                const RetrievalCorpus& corpus,
                                                std::uint64_t seed);

// the CSI-predictor training a sweep runs for one seed, exposed so it can be
// driven (and its checkpoint persisted) standalone: same word table, same
// generated trace, same derived seeds, hence the same model
cdg::TrainResult train_predictor(const ExperimentConfig& cfg,
                                 const lmkb::EmbeddingTable& table,
                                 const mimo::ChannelTrace& train_trace, std::uint64_t seed);
cdg::TrainResult train_predictor(const ExperimentConfig& cfg, std::uint64_t seed);

// shortest round-trip decimal rendering used for hashes and result files
std::string format_double(double v);

}  // namespace semkb::harness
