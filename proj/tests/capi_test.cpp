#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cdg.hpp"
#include "doctest.h"
#include "harness.hpp"
#include "semkb/semkb.h"

using namespace semkb;

namespace {

// removes the directory when the test block ends
struct ScratchDir {
  std::filesystem::path path;
  explicit ScratchDir(const std::string& name) : path(name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// same settings as harness_test's tiny_config, as config text so the C parse
// entry point is on the path under test
const char* kTinyText = R"([channel]
n_r = 2
n_t = 2
doppler_hz = 40.0

[mimo]
d = 2

[cdg]
t_his = 8
t_pre = 2
l_patch = 4
stride = 2
d_e = 8
epochs = 3

[sdg]
tau = 0.8

[cdfc]
epochs = 2

[sweep]
snr_grid_db = [5.0, 20.0]
seeds = [1, 2]

[dataset]
n_classes = 4
captions_per_class = 3
vocab_size = 100
)";

// owning wrapper so failed REQUIREs cannot leak handles
struct ConfigHandle {
  semkb_config* ptr = nullptr;
  ~ConfigHandle() { semkb_config_free(ptr); }
};

struct TraceHandle {
  semkb_trace* ptr = nullptr;
  ~TraceHandle() { semkb_trace_free(ptr); }
};

struct RecordHandle {
  semkb_record* ptr = nullptr;
  ~RecordHandle() { semkb_record_free(ptr); }
};

semkb_config* parse_tiny() {
  semkb_config* cfg = nullptr;
  REQUIRE(semkb_config_parse(kTinyText, &cfg) == SEMKB_OK);
  REQUIRE(cfg != nullptr);
  return cfg;
}

std::string hash_of(const semkb_config* cfg) {
  char buf[17];
  REQUIRE(semkb_config_hash(cfg, buf, sizeof(buf)) == SEMKB_OK);
  return std::string(buf);
}

}  // namespace

TEST_CASE("version and error slot start clean") {
  REQUIRE(semkb_version() != nullptr);
  CHECK(std::strlen(semkb_version()) > 0);
  REQUIRE(semkb_last_error() != nullptr);
  CHECK(std::string(semkb_last_error()).empty());
}

TEST_CASE("config parse and hash mirror the native parser") {
  ConfigHandle cfg{parse_tiny()};

  const std::string h = hash_of(cfg.ptr);
  CHECK(h.size() == 16);
  CHECK(h == harness::config_hash(harness::parse_config(kTinyText)));

  char small[16];
  CHECK(semkb_config_hash(cfg.ptr, small, sizeof(small)) == SEMKB_ERR_INVALID_INPUT);
  CHECK(std::string(semkb_last_error()).find("17 bytes") != std::string::npos);
}

TEST_CASE("config mutators apply validated changes") {
  ConfigHandle cfg{parse_tiny()};
  auto native = harness::parse_config(kTinyText);

  REQUIRE(semkb_config_set_seed(cfg.ptr, 42) == SEMKB_OK);
  native.sweep.seeds = {42};
  CHECK(hash_of(cfg.ptr) == harness::config_hash(native));

  REQUIRE(semkb_config_set_ablations(cfg.ptr, 1, 0) == SEMKB_OK);
  native.ablations.disable_sdg = true;
  CHECK(hash_of(cfg.ptr) == harness::config_hash(native));

  const double grid[3] = {0.0, 10.0, 20.0};
  REQUIRE(semkb_config_set_snr_grid(cfg.ptr, grid, 3) == SEMKB_OK);
  native.sweep.snr_grid_db = {0.0, 10.0, 20.0};
  CHECK(hash_of(cfg.ptr) == harness::config_hash(native));

  REQUIRE(semkb_config_set_feedback_bits(cfg.ptr, 64) == SEMKB_OK);
  native.mimo.feedback_bits = 64;
  CHECK(hash_of(cfg.ptr) == harness::config_hash(native));

  // rejected changes leave the config exactly as it was
  const std::string before = hash_of(cfg.ptr);
  const double bad_grid[1] = {std::nan("")};
  CHECK(semkb_config_set_snr_grid(cfg.ptr, bad_grid, 1) == SEMKB_ERR_CONFIG);
  CHECK(semkb_config_set_snr_grid(cfg.ptr, grid, 0) == SEMKB_ERR_CONFIG);
  CHECK(semkb_config_set_feedback_bits(cfg.ptr, 0) == SEMKB_ERR_CONFIG);
  CHECK(hash_of(cfg.ptr) == before);
}

TEST_CASE("failures map to distinct status codes and messages") {
  semkb_config* out = nullptr;
  CHECK(semkb_config_parse("[nope]\n", &out) == SEMKB_ERR_CONFIG);
  CHECK(out == nullptr);
  CHECK(std::string(semkb_last_error()).find("unknown section") != std::string::npos);

  CHECK(semkb_config_parse(nullptr, &out) == SEMKB_ERR_NULL_ARGUMENT);
  CHECK(std::string(semkb_last_error()) == "text is null");
  ConfigHandle cfg{parse_tiny()};
  CHECK(semkb_config_parse(kTinyText, nullptr) == SEMKB_ERR_NULL_ARGUMENT);
  CHECK(semkb_config_hash(nullptr, nullptr, 0) == SEMKB_ERR_NULL_ARGUMENT);
  CHECK(semkb_run(nullptr, 0, nullptr, nullptr) == SEMKB_ERR_NULL_ARGUMENT);
  CHECK(semkb_trace_dims(nullptr, nullptr, nullptr, nullptr) == SEMKB_ERR_NULL_ARGUMENT);

  CHECK(semkb_config_load("no_such_dir/none.toml", &out) == SEMKB_ERR_IO);
  CHECK(out == nullptr);
  CHECK(std::string(semkb_last_error()).find("none.toml") != std::string::npos);

  // a success clears the slot again
  char buf[17];
  REQUIRE(semkb_config_hash(cfg.ptr, buf, sizeof(buf)) == SEMKB_OK);
  CHECK(std::string(semkb_last_error()).empty());
}

TEST_CASE("csi generation and loading round-trip through the C surface") {
  ScratchDir dir("capi_csi_scratch");
  ConfigHandle cfg{parse_tiny()};
  const std::string path = dir.file("link.csif");

  REQUIRE(semkb_gen_csi(cfg.ptr, 17, 80, path.c_str()) == SEMKB_OK);
  TraceHandle trace;
  REQUIRE(semkb_csi_load(path.c_str(), &trace.ptr) == SEMKB_OK);

  uint16_t n_r = 0, n_t = 0;
  uint32_t length = 0;
  REQUIRE(semkb_trace_dims(trace.ptr, &n_r, &n_t, &length) == SEMKB_OK);
  CHECK(n_r == 2);
  CHECK(n_t == 2);
  CHECK(length == 80);
  uint16_t only_rows = 0;  // out pointers are individually optional
  CHECK(semkb_trace_dims(trace.ptr, &only_rows, nullptr, nullptr) == SEMKB_OK);
  CHECK(only_rows == 2);

  // the file is the same one the native writer produces for this model + seed
  const auto native = mimo::generate_trace(harness::parse_config(kTinyText).channel_params(),
                                           17, 80);
  harness::save_csi(native, dir.file("native.csif"));
  CHECK(read_file(path) == read_file(dir.file("native.csif")));

  CHECK(semkb_gen_csi(cfg.ptr, 17, 0, path.c_str()) == SEMKB_ERR_INVALID_INPUT);
  CHECK(semkb_gen_csi(cfg.ptr, 17, 8, (dir.path / "missing" / "x.csif").string().c_str()) ==
        SEMKB_ERR_IO);

  semkb_trace* bad = nullptr;
  CHECK(semkb_csi_load(dir.file("absent.csif").c_str(), &bad) == SEMKB_ERR_IO);
  std::ofstream(dir.file("junk.csif"), std::ios::binary) << "not a trace";
  CHECK(semkb_csi_load(dir.file("junk.csif").c_str(), &bad) == SEMKB_ERR_FORMAT);
  CHECK(bad == nullptr);
}

TEST_CASE("train_cdg writes the same checkpoint the sweep's predictor would") {
  ScratchDir dir("capi_cdg_scratch");
  ConfigHandle cfg{parse_tiny()};

  double total = -1.0, ce = -1.0, nmse = -1.0;
  const std::string path = dir.file("predictor.cdg");
  REQUIRE(semkb_train_cdg(cfg.ptr, 9, path.c_str(), &total, &ce, &nmse) == SEMKB_OK);
  CHECK(std::isfinite(total));
  CHECK(std::isfinite(ce));
  CHECK(std::isfinite(nmse));

  const auto native = harness::train_predictor(harness::parse_config(kTinyText), 9);
  CHECK(total == native.history.back().total);
  CHECK(ce == native.history.back().ce);
  CHECK(nmse == native.history.back().nmse);
  cdg::save_checkpoint(native.model, dir.file("native.cdg"));
  CHECK(read_file(path) == read_file(dir.file("native.cdg")));
  CHECK_NOTHROW(cdg::load_checkpoint(path));

  // out pointers are optional
  REQUIRE(semkb_train_cdg(cfg.ptr, 9, path.c_str(), nullptr, nullptr, nullptr) == SEMKB_OK);

  std::string text(kTinyText);
  text.replace(text.find("epochs = 3"), 10, "epochs = 0");
  ConfigHandle untrained;
  REQUIRE(semkb_config_parse(text.c_str(), &untrained.ptr) == SEMKB_OK);
  const std::string skipped = dir.file("skipped.cdg");
  CHECK(semkb_train_cdg(untrained.ptr, 9, skipped.c_str(), &total, nullptr, nullptr) ==
        SEMKB_ERR_STATE);
  CHECK_FALSE(std::filesystem::exists(skipped));
}

TEST_CASE("train_cdfc matches a one-point sweep and reports filter stats") {
  ScratchDir dir("capi_cdfc_scratch");
  ConfigHandle cfg{parse_tiny()};

  semkb_filter_stats stats{};
  double final_loss = -1.0;
  REQUIRE(semkb_train_cdfc(cfg.ptr, 3, 10.0, nullptr, &stats, &final_loss) == SEMKB_OK);

  auto narrowed = harness::parse_config(kTinyText);
  narrowed.sweep.seeds = {3};
  narrowed.sweep.snr_grid_db = {10.0};
  const auto native = harness::run_experiment(narrowed, 1);
  CHECK(final_loss == native.cdfc_losses.back().loss);
  CHECK(stats.samples == native.filter.samples);
  CHECK(stats.accepted == native.filter.accepted);
  CHECK(stats.fallbacks == native.filter.fallbacks);
  CHECK(stats.generation_calls == native.filter.generation_calls);
  CHECK(stats.samples > 0);
  CHECK(stats.accepted + stats.fallbacks == stats.samples);

  const std::string out = dir.file("diag");
  REQUIRE(semkb_train_cdfc(cfg.ptr, 3, 10.0, out.c_str(), nullptr, nullptr) == SEMKB_OK);
  const auto rows = harness::read_metrics_jsonl(out + "/metrics.jsonl");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0] == native.metrics[0]);

  // a split with no training captions cannot train a codec
  std::string text(kTinyText);
  text.replace(text.find("n_classes = 4"), 13, "n_classes = 2");
  text.replace(text.find("captions_per_class = 3"), 22, "captions_per_class = 1");
  ConfigHandle starved;
  REQUIRE(semkb_config_parse(text.c_str(), &starved.ptr) == SEMKB_OK);
  CHECK(semkb_train_cdfc(starved.ptr, 3, 10.0, nullptr, &stats, &final_loss) ==
        SEMKB_ERR_STATE);
  CHECK(std::string(semkb_last_error()).find("no training steps") != std::string::npos);
}

TEST_CASE("run and record accessors mirror the native sweep") {
  ScratchDir dir("capi_run_scratch");
  ConfigHandle cfg{parse_tiny()};
  RecordHandle rec;
  REQUIRE(semkb_run(cfg.ptr, 2, nullptr, &rec.ptr) == SEMKB_OK);

  const auto native = harness::run_experiment(harness::parse_config(kTinyText), 1);
  size_t count = 0;
  REQUIRE(semkb_record_metric_count(rec.ptr, &count) == SEMKB_OK);
  REQUIRE(count == native.metrics.size());
  for (size_t i = 0; i < count; ++i) {
    semkb_metric_row row{};
    REQUIRE(semkb_record_metric(rec.ptr, i, &row) == SEMKB_OK);
    CHECK(row.seed == native.metrics[i].seed);
    CHECK(row.snr_db == native.metrics[i].snr_db);
    CHECK(std::string(row.variant) == native.metrics[i].variant);
    CHECK(row.map == native.metrics[i].map);
    CHECK(row.rank1 == native.metrics[i].rank1);
    CHECK(row.rank5 == native.metrics[i].rank5);
    CHECK(row.rank10 == native.metrics[i].rank10);
    CHECK(row.nmse == native.metrics[i].nmse);
  }

  semkb_filter_stats stats{};
  REQUIRE(semkb_record_filter(rec.ptr, &stats) == SEMKB_OK);
  CHECK(stats.samples == native.filter.samples);
  CHECK(stats.accepted == native.filter.accepted);

  double seconds = -1.0;
  REQUIRE(semkb_record_wall_clock(rec.ptr, &seconds) == SEMKB_OK);
  CHECK(seconds >= 0.0);

  char variant[24];
  REQUIRE(semkb_record_variant(rec.ptr, variant, sizeof(variant)) == SEMKB_OK);
  CHECK(std::string(variant) == "full");
  char tight[4];
  CHECK(semkb_record_variant(rec.ptr, tight, sizeof(tight)) == SEMKB_ERR_INVALID_INPUT);

  semkb_metric_row row{};
  CHECK(semkb_record_metric(rec.ptr, count, &row) == SEMKB_ERR_INVALID_INPUT);
  CHECK(std::string(semkb_last_error()).find("out of range") != std::string::npos);

  REQUIRE(semkb_record_emit(rec.ptr, dir.file("out").c_str(), "jsonl") == SEMKB_OK);
  CHECK(std::filesystem::exists(dir.path / "out" / "metrics.jsonl"));
  CHECK_FALSE(std::filesystem::exists(dir.path / "out" / "metrics.csv"));
  CHECK(harness::read_metrics_jsonl(dir.file("out") + "/metrics.jsonl") == native.metrics);
  CHECK(semkb_record_emit(rec.ptr, dir.file("out").c_str(), "tsv") ==
        SEMKB_ERR_INVALID_INPUT);
}

TEST_CASE("a loaded trace drives the run through the C surface") {
  ScratchDir dir("capi_override_scratch");
  ConfigHandle cfg{parse_tiny()};
  REQUIRE(semkb_config_set_seed(cfg.ptr, 5) == SEMKB_OK);

  const std::string path = dir.file("field.csif");
  REQUIRE(semkb_gen_csi(cfg.ptr, 17, 80, path.c_str()) == SEMKB_OK);
  TraceHandle trace;
  REQUIRE(semkb_csi_load(path.c_str(), &trace.ptr) == SEMKB_OK);

  RecordHandle rec;
  REQUIRE(semkb_run(cfg.ptr, 1, trace.ptr, &rec.ptr) == SEMKB_OK);

  auto native_cfg = harness::parse_config(kTinyText);
  native_cfg.sweep.seeds = {5};
  const auto loaded = harness::load_csi(path);
  const auto native = harness::run_experiment(native_cfg, 1, &loaded);

  size_t count = 0;
  REQUIRE(semkb_record_metric_count(rec.ptr, &count) == SEMKB_OK);
  REQUIRE(count == native.metrics.size());
  for (size_t i = 0; i < count; ++i) {
    semkb_metric_row row{};
    REQUIRE(semkb_record_metric(rec.ptr, i, &row) == SEMKB_OK);
    CHECK(row.map == native.metrics[i].map);
    CHECK(row.nmse == native.metrics[i].nmse);
  }

  // a trace too short to cover training and evaluation is a shape error
  const std::string stub_path = dir.file("stub.csif");
  REQUIRE(semkb_gen_csi(cfg.ptr, 17, 12, stub_path.c_str()) == SEMKB_OK);
  TraceHandle stub;
  REQUIRE(semkb_csi_load(stub_path.c_str(), &stub.ptr) == SEMKB_OK);
  RecordHandle none;
  CHECK(semkb_run(cfg.ptr, 1, stub.ptr, &none.ptr) != SEMKB_OK);
  CHECK(none.ptr == nullptr);
}
