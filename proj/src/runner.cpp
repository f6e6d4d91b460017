#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <memory>
#include <thread>

#include "cdg.hpp"
#include "eval.hpp"
#include "harness.hpp"

namespace semkb::harness {

namespace {

// desk-scale codec geometry; the config owns everything experiment-shaped,
// these stay fixed so sweeps vary one thing at a time
constexpr int kDEmb = 16;
constexpr int kDHidden = 16;
constexpr int kDProto = 8;
constexpr int kBatch = 16;
constexpr int kEvalSlots = 8;
constexpr int kEvalHop = 3;
constexpr int kCdgWindows = 12;

std::string variant_name(const ExperimentConfig::Ablations& a) {
  if (a.disable_sdg && a.disable_cdg) return "no_sdg_no_cdg";
  if (a.disable_sdg) return "no_sdg";
  if (a.disable_cdg) return "no_cdg";
  return "full";
}

struct SnrOutcome {
  MetricRow row;
  std::vector<StepRow> steps;
  FilterStats filter;
};

// trains the codec at one sweep point and scores the held-out queries
SnrOutcome run_snr_point(const ExperimentConfig& cfg, const RetrievalCorpus& corpus,
                         const std::vector<cdfc::ChannelSlot>& slots, std::uint64_t seed,
                         int snr_idx, double seed_nmse, const std::string& variant) {
  const double snr_db = cfg.sweep.snr_grid_db[static_cast<std::size_t>(snr_idx)];
  cdfc::ChannelContext ctx;
  ctx.slots = slots;
  ctx.equalize = cfg.mimo.equalize;
  ctx.snr_db = snr_db;
  ctx.noise_seed = derive_seed(seed, "run.noise", static_cast<std::uint64_t>(snr_idx));
  ctx.validate();

  cdfc::JsccCodec codec = cdfc::make_codec(corpus.table, kDHidden, cfg.cdfc.n_feat, kDProto,
                                           derive_seed(seed, "run.codec"));
  std::unique_ptr<lmkb::TextBackend> backend;
  if (!cfg.ablations.disable_sdg)
    backend = make_backend(cfg.sdg, corpus, derive_seed(seed, "run.backend",
                                                        static_cast<std::uint64_t>(snr_idx)));

  cdfc::StepConfig step_cfg;
  step_cfg.lr = cfg.cdfc.lr;
  step_cfg.filter = {cfg.cdfc.gamma, cfg.cdfc.max_retries};
  step_cfg.gen = {"Rewrite the caption", cfg.sdg.tau, cfg.sdg.max_len};
  step_cfg.pairing =
      cfg.cdfc.fusion_pairing == "matched" ? cdfc::Pairing::matched : cdfc::Pairing::cross;
  step_cfg.disable_sdg = cfg.ablations.disable_sdg;

  SnrOutcome out;
  const std::uint64_t train_seed = derive_seed(seed, "run.cdfc", static_cast<std::uint64_t>(snr_idx));
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.cdfc.epochs; ++epoch) {
    for (std::size_t offset = 0; offset < corpus.train.size(); offset += kBatch) {
      const std::size_t count = std::min<std::size_t>(kBatch, corpus.train.size() - offset);
      const std::vector<cdfc::TrainSample> batch(corpus.train.begin() + offset,
                                                 corpus.train.begin() + offset + count);
      const cdfc::StepMetrics m = cdfc::train_step(batch, codec, ctx, backend.get(), corpus.vocab,
                                                   corpus.gallery, step_cfg, train_seed, step);
      out.steps.push_back({seed, snr_db, static_cast<int>(step), m.loss});
      out.filter.samples += m.accepted + m.fallbacks;
      out.filter.accepted += m.accepted;
      out.filter.fallbacks += m.fallbacks;
      out.filter.generation_calls += m.generation_calls;
      ++step;
    }
  }

  std::vector<eval::QueryResult> results;
  results.reserve(corpus.test.size());
  for (std::size_t q = 0; q < corpus.test.size(); ++q) {
    const auto& sample = corpus.test[q];
    eval::QueryResult r;
    r.ranking = cdfc::infer(sample.tokens, codec, ctx, corpus.gallery, q % slots.size(),
                            (1ull << 40) + q);
    r.relevant = {sample.label};
    results.push_back(std::move(r));
  }

  out.row.seed = seed;
  out.row.snr_db = snr_db;
  out.row.variant = variant;
  out.row.map = eval::map_score(results);
  out.row.rank1 = eval::rank_at_k(results, 1);
  out.row.rank5 = eval::rank_at_k(results, 5);
  out.row.rank10 = eval::rank_at_k(results, 10);
  out.row.nmse = seed_nmse;
  return out;
}

int cdg_train_length(const ExperimentConfig& cfg) {
  return cfg.cdg.t_his + cfg.cdg.t_pre + cfg.cdg.t_pre * (kCdgWindows - 1);
}

}  // namespace

cdg::TrainResult train_predictor(const ExperimentConfig& cfg, const lmkb::EmbeddingTable& table,
                                 const mimo::ChannelTrace& train_trace, std::uint64_t seed) {
  if (cfg.cdg.d_e > table.dim())
    fail(errc::config, "cdg.d_e must not exceed the word-embedding width (" +
                           std::to_string(table.dim()) + ")");
  cdg::CdgConfig cc;
  cc.dims = {cfg.cdg.t_his, cfg.cdg.t_pre, cfg.cdg.l_patch, cfg.cdg.stride, cfg.cdg.d_e};
  cc.epochs = cfg.cdg.epochs;
  cc.lr = cfg.cdg.lr;
  cc.lambda = cfg.cdg.lambda;
  cc.seed = derive_seed(seed, "run.cdg");
  const auto pairs = cdg::windowed_pairs(train_trace, cfg.cdg.t_his, cfg.cdg.t_pre, cfg.cdg.t_pre);
  return cdg::train_cdg(pairs, table, cc);
}

cdg::TrainResult train_predictor(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const RetrievalCorpus corpus =
      synth_dataset(cfg.dataset, kDEmb, kDProto, derive_seed(seed, "run.dataset"));
  const auto trace = mimo::generate_trace(cfg.channel_params(), derive_seed(seed, "run.trace.train"),
                                          cdg_train_length(cfg));
  return train_predictor(cfg, corpus.table, trace, seed);
}

RunRecord run_experiment(const ExperimentConfig& cfg, int workers,
                         const mimo::ChannelTrace* csi_override) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.variant = variant_name(cfg.ablations);
  rec.seeds = cfg.sweep.seeds;

  const int t_his = cfg.cdg.t_his;
  const int t_pre = cfg.cdg.t_pre;
  const int l_train = cdg_train_length(cfg);
  const int l_eval = t_his + t_pre + kEvalHop * (kEvalSlots - 1);

  if (csi_override != nullptr) {
    csi_override->validate();
    if (csi_override->n_r() != cfg.channel.n_r || csi_override->n_t() != cfg.channel.n_t)
      fail(errc::config, "override trace is " + std::to_string(csi_override->n_r()) + "x" +
                             std::to_string(csi_override->n_t()) +
                             " but the config expects " + std::to_string(cfg.channel.n_r) + "x" +
                             std::to_string(cfg.channel.n_t));
    const auto total = static_cast<std::size_t>(csi_override->length());
    const std::size_t head = total * 3 / 5;
    if (head < static_cast<std::size_t>(t_his + t_pre) ||
        total - head < static_cast<std::size_t>(l_eval))
      fail(errc::config, "override trace too short: needs >= " +
                             std::to_string((t_his + t_pre) * 5 / 3 + l_eval) + " samples");
  }

  const int n_snr = static_cast<int>(cfg.sweep.snr_grid_db.size());
  int n_workers = workers > 0 ? workers : static_cast<int>(std::thread::hardware_concurrency());
  n_workers = std::clamp(n_workers, 1, n_snr);

  for (std::size_t seed_idx = 0; seed_idx < cfg.sweep.seeds.size(); ++seed_idx) {
    const std::uint64_t seed = cfg.sweep.seeds[seed_idx];
    const RetrievalCorpus corpus =
        synth_dataset(cfg.dataset, kDEmb, kDProto, derive_seed(seed, "run.dataset"));

    mimo::ChannelTrace train_trace, eval_trace;
    if (csi_override != nullptr) {
      const std::size_t head = csi_override->length() * 3 / 5;
      train_trace = csi_override->slice(0, head);
      eval_trace = csi_override->slice(head, csi_override->length() - head);
    } else {
      const auto params = cfg.channel_params();
      train_trace = mimo::generate_trace(params, derive_seed(seed, "run.trace.train"), l_train);
      eval_trace = mimo::generate_trace(params, derive_seed(seed, "run.trace.eval"), l_eval);
    }

    std::unique_ptr<cdg::CdgModel> predictor;
    if (!cfg.ablations.disable_cdg) {
      auto trained = train_predictor(cfg, corpus.table, train_trace, seed);
      for (std::size_t e = 0; e < trained.history.size(); ++e)
        rec.cdg_losses.push_back({seed, static_cast<int>(e), trained.history[e].total,
                                  trained.history[e].ce, trained.history[e].nmse});
      predictor = std::make_unique<cdg::CdgModel>(std::move(trained.model));
    }

    // one slot per evaluation time index, shared by the whole SNR grid; the
    // stale comparator reuses the last sample the predictor would have seen
    std::vector<cdfc::ChannelSlot> slots;
    double err_sq = 0.0, truth_sq = 0.0;
    for (int j = 0; j < kEvalSlots; ++j) {
      const std::size_t v = static_cast<std::size_t>(t_his + t_pre - 1 + j * kEvalHop);
      const cmat& h_true = eval_trace.h(v);
      cmat h_precode;
      if (cfg.ablations.disable_cdg) {
        h_precode = eval_trace.h(v - static_cast<std::size_t>(t_pre));
      } else {
        const auto history =
            eval_trace.slice(v - static_cast<std::size_t>(t_pre + t_his - 1), t_his);
        const auto predicted = cdg::predict(history, *predictor);
        h_precode = predicted.h(static_cast<std::size_t>(t_pre - 1));
      }
      slots.push_back(cdfc::make_slot(h_true, h_precode, cfg.mimo.d, cfg.mimo.feedback_bits));
      const double e2 = (h_precode - h_true).squaredNorm();
      const double t2 = h_true.squaredNorm();
      rec.user_nmse.push_back(
          {static_cast<int>(seed_idx), eval_trace.realizations[v].t_index, e2 / t2});
      err_sq += e2;
      truth_sq += t2;
    }
    const double seed_nmse = err_sq / truth_sq;

    std::vector<SnrOutcome> outcomes(static_cast<std::size_t>(n_snr));
    std::vector<std::unique_ptr<error>> errors(static_cast<std::size_t>(n_snr));
    std::vector<std::exception_ptr> raw_errors(static_cast<std::size_t>(n_snr));
    std::atomic<int> next{0};
    const auto worker = [&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n_snr) return;
        try {
          outcomes[static_cast<std::size_t>(i)] =
              run_snr_point(cfg, corpus, slots, seed, i, seed_nmse, rec.variant);
        } catch (const error& e) {
          errors[static_cast<std::size_t>(i)] = std::make_unique<error>(e);
        } catch (...) {
          raw_errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    };
    if (n_workers == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    for (int i = 0; i < n_snr; ++i) {
      if (errors[static_cast<std::size_t>(i)])
        fail(errors[static_cast<std::size_t>(i)]->kind(),
             "sweep point seed=" + std::to_string(seed) + " snr_db=" +
                 format_double(cfg.sweep.snr_grid_db[static_cast<std::size_t>(i)]) + ": " +
                 errors[static_cast<std::size_t>(i)]->what());
      if (raw_errors[static_cast<std::size_t>(i)])
        std::rethrow_exception(raw_errors[static_cast<std::size_t>(i)]);
    }

    for (auto& o : outcomes) {
      rec.metrics.push_back(std::move(o.row));
      rec.cdfc_losses.insert(rec.cdfc_losses.end(), o.steps.begin(), o.steps.end());
      rec.filter.samples += o.filter.samples;
      rec.filter.accepted += o.filter.accepted;
      rec.filter.fallbacks += o.filter.fallbacks;
      rec.filter.generation_calls += o.filter.generation_calls;
    }
  }

  rec.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rec;
}

}  // namespace semkb::harness
