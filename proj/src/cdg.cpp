#include "cdg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace semkb::cdg {

namespace {

void fill_scaled_uniform(rmat& m, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

struct ForwardCache {
  csi::PatchSet pset;
  csi::NormStats stats;
  rmat e_proj;                             // [|V|, d_E]
  std::vector<lmkb::CrossAttnCache> attn;  // per component row
  rmat h_all;                              // [rows * N, d_E]
  rmat probs;                              // [rows * N, |V|]
  rmat flat;                               // [rows, T_pre]
  int n_patch = 0;
  int rows = 0;
};

// the whole prediction chain up to the normalized-domain output
ForwardCache forward_chain(CdgModel& model, const mimo::ChannelTrace& his) {
  if (static_cast<int>(his.length()) < model.dims.l_patch)
    fail(errc::invalid_input, "cdg: history shorter than one patch");

  ForwardCache fc;
  const csi::CsiTensorReal real = csi::complex_to_real(his);
  auto normed = csi::normalize(real);
  fc.stats = normed.second;
  fc.pset = csi::patch(normed.first, model.dims.l_patch, model.dims.stride);
  fc.n_patch = fc.pset.n_patch();
  fc.rows = static_cast<int>(fc.pset.rows.size());

  fc.e_proj = lmkb::project_vocab(model.table, model.alignment.w_proj);
  const std::vector<rmat> embeds = csi_embed(fc.pset, model.w_emb);

  rmat z_all(fc.rows * fc.n_patch, model.dims.d_e);
  fc.attn.resize(static_cast<std::size_t>(fc.rows));
  for (int r = 0; r < fc.rows; ++r) {
    z_all.middleRows(r * fc.n_patch, fc.n_patch) = lmkb::cross_attention(
        embeds[static_cast<std::size_t>(r)], fc.e_proj, model.alignment,
        &fc.attn[static_cast<std::size_t>(r)]);
  }

  fc.h_all = model.backbone->forward(z_all, fc.rows);
  fc.probs = lmkb::output_head(fc.h_all, model.w_out);

  fc.flat.resize(fc.rows, model.dims.t_pre);
  for (int r = 0; r < fc.rows; ++r)
    fc.flat.row(r) = fc.probs.row(r * fc.n_patch + fc.n_patch - 1) * model.w_linear;
  return fc;
}

void apply_sgd(CdgModel& model, const CdgGrads& grads, double lr) {
  model.w_emb -= lr * grads.w_emb;
  model.alignment.w_proj -= lr * grads.w_proj;
  for (std::size_t h = 0; h < model.alignment.heads.size(); ++h) {
    model.alignment.heads[h].wq -= lr * grads.heads[h].wq;
    model.alignment.heads[h].wk -= lr * grads.heads[h].wk;
    model.alignment.heads[h].wv -= lr * grads.heads[h].wv;
  }
  model.alignment.w_mix -= lr * grads.w_mix;
  model.w_out -= lr * grads.w_out;
  model.w_linear -= lr * grads.w_linear;
}

}  // namespace

CdgModel make_cdg_model(const CdgConfig& cfg, const lmkb::EmbeddingTable& table) {
  const auto& d = cfg.dims;
  if (d.l_patch < 1 || d.stride < 1 || d.t_pre < 1 || d.d_e < 1)
    fail(errc::config, "cdg: patch/stride/horizon/width must be positive");
  if (cfg.heads < 1 || cfg.d_k < 1) fail(errc::config, "cdg: heads and d_k must be positive");
  if (d.d_e % cfg.heads != 0) fail(errc::config, "cdg: d_e must divide evenly across heads");
  if (cfg.l_depth < 0 || cfg.max_seq < 1) fail(errc::config, "cdg: bad backbone geometry");
  if (table.vocab_size() < 1 || table.dim() < 1) fail(errc::config, "cdg: empty word table");

  CdgModel model;
  model.dims = d;
  model.max_seq = cfg.max_seq;
  model.table = table;

  Rng rng(derive_seed(cfg.seed, "cdg.init"));
  model.w_emb.resize(d.l_patch, d.d_e);
  fill_scaled_uniform(model.w_emb, d.l_patch, rng);
  model.w_out.resize(d.d_e, table.vocab_size());
  fill_scaled_uniform(model.w_out, d.d_e, rng);
  model.w_linear.resize(table.vocab_size(), d.t_pre);
  fill_scaled_uniform(model.w_linear, table.vocab_size(), rng);

  // d_hat == d_e so targets can be matched in the projected-table space
  model.alignment =
      lmkb::AlignmentParams::random(table.dim(), d.d_e, d.d_e, cfg.heads, cfg.d_k, cfg.seed);

  lmkb::BackboneConfig bcfg;
  bcfg.l_depth = cfg.l_depth;
  bcfg.d_llm = d.d_e;
  bcfg.heads = cfg.heads;
  bcfg.max_seq = cfg.max_seq;
  bcfg.seed = derive_seed(cfg.seed, "cdg.backbone");
  model.backbone = std::make_unique<lmkb::ToyTransformer>(bcfg);
  return model;
}

std::vector<rmat> csi_embed(const csi::PatchSet& p, const rmat& w_emb) {
  if (p.rows.empty()) fail(errc::invalid_input, "csi_embed: empty patch set");
  if (p.l_patch != static_cast<int>(w_emb.rows()))
    fail(errc::shape, "csi_embed: patch length does not match embedding rows");
  std::vector<rmat> out;
  out.reserve(p.rows.size());
  for (const rmat& row : p.rows) out.push_back(row * w_emb);
  return out;
}

rmat align(const rmat& e, const CdgModel& model, const lmkb::EmbeddingTable& table) {
  const rmat e_proj = lmkb::project_vocab(table, model.alignment.w_proj);
  return lmkb::cross_attention(e, e_proj, model.alignment);
}

mimo::ChannelTrace predict(const mimo::ChannelTrace& his, CdgModel& model) {
  const ForwardCache fc = forward_chain(model, his);
  mimo::ChannelTrace out =
      csi::to_csi(fc.flat, model.dims.t_pre, his.n_r(), his.n_t(), fc.stats);

  const std::int64_t last = his.realizations[his.length() - 1].t_index;
  const std::int64_t step =
      his.length() >= 2 ? last - his.realizations[his.length() - 2].t_index : 1;
  for (std::size_t i = 0; i < out.realizations.size(); ++i) {
    out.realizations[i].t_index = last + static_cast<std::int64_t>(i + 1) * step;
    out.realizations[i].sample_interval_ms = his.sample_interval_ms();
  }
  return out;
}

TargetTokens derive_target_tokens(const mimo::ChannelTrace& trace, const CdgModel& model) {
  if (static_cast<int>(trace.length()) < model.dims.l_patch)
    fail(errc::invalid_input, "derive_target_tokens: trace shorter than one patch");

  const csi::CsiTensorReal real = csi::complex_to_real(trace);
  const auto normed = csi::normalize(real);
  const csi::PatchSet pset = csi::patch(normed.first, model.dims.l_patch, model.dims.stride);
  const rmat e_proj = lmkb::project_vocab(model.table, model.alignment.w_proj);

  rvec proj_norms(e_proj.rows());
  for (Eigen::Index v = 0; v < e_proj.rows(); ++v) proj_norms(v) = e_proj.row(v).norm();

  TargetTokens out;
  out.rows.reserve(pset.rows.size());
  for (const rmat& row : pset.rows) {
    const rmat emb = row * model.w_emb;  // [N_patch, d_E]
    lmkb::TokenSeq ids(static_cast<std::size_t>(emb.rows()));
    for (Eigen::Index i = 0; i < emb.rows(); ++i) {
      const double q_norm = emb.row(i).norm();
      int best = 0;
      double best_sim = -2.0;
      for (Eigen::Index v = 0; v < e_proj.rows(); ++v) {
        const double den = q_norm * proj_norms(v);
        const double sim = den > 0.0 ? emb.row(i).dot(e_proj.row(v)) / den : -2.0;
        if (sim > best_sim) {
          best_sim = sim;
          best = static_cast<int>(v);
        }
      }
      ids[static_cast<std::size_t>(i)] = best;
    }
    out.rows.push_back(std::move(ids));
  }
  return out;
}

double ce_loss(const rmat& pred_dists, const lmkb::TokenSeq& targets) {
  if (targets.size() != static_cast<std::size_t>(pred_dists.rows()) + 1)
    fail(errc::shape, "ce_loss: need one more target than prediction rows");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < pred_dists.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i) + 1];
    if (t < 0 || t >= static_cast<int>(pred_dists.cols()))
      fail(errc::vocab, "ce_loss: target id outside vocabulary");
    const double p = pred_dists(i, t);
    if (!(p > 0.0) || !std::isfinite(p)) fail(errc::numeric, "ce_loss: non-positive probability");
    loss -= std::log(p);
  }
  return loss;
}

double nmse_loss(const mimo::ChannelTrace& pred, const mimo::ChannelTrace& truth) {
  if (pred.length() != truth.length() || pred.n_r() != truth.n_r() || pred.n_t() != truth.n_t())
    fail(errc::shape, "nmse_loss: trace shapes differ");
  if (pred.length() == 0) fail(errc::invalid_input, "nmse_loss: empty traces");

  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.length(); ++i) {
    num += (pred.h(i) - truth.h(i)).squaredNorm();
    den += truth.h(i).squaredNorm();
  }
  if (!(den > 0.0)) fail(errc::metric, "nmse_loss: zero-norm truth");
  return num / den;
}

double total_loss(double ce, double nmse, double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda))
    fail(errc::config, "total_loss: lambda must be non-negative");
  return ce + lambda * nmse;
}

CdgLosses cdg_loss_and_grads(CdgModel& model, const mimo::ChannelTrace& his,
                             const mimo::ChannelTrace& future, double lambda,
                             const TargetTokens& targets, CdgGrads* grads) {
  if (lambda < 0.0 || !std::isfinite(lambda))
    fail(errc::config, "cdg: lambda must be non-negative");
  if (static_cast<int>(future.length()) != model.dims.t_pre)
    fail(errc::shape, "cdg: future window length differs from prediction horizon");

  ForwardCache fc = forward_chain(model, his);
  const int R = fc.rows;
  const int N = fc.n_patch;
  const int V = model.vocab_size();
  if (N < 2) fail(errc::invalid_input, "cdg: need at least two patches for next-patch loss");
  if (targets.rows.size() != static_cast<std::size_t>(R))
    fail(errc::shape, "cdg: targets do not cover every component row");

  double ce_sum = 0.0;
  for (int r = 0; r < R; ++r)
    ce_sum += ce_loss(fc.probs.middleRows(r * N, N - 1), targets.rows[static_cast<std::size_t>(r)]);
  const double ce = ce_sum / R;

  const csi::CsiTensorReal truth_real = csi::complex_to_real(future);
  const rmat pred_real =
      (fc.flat.array() * fc.stats.sigma + fc.stats.mu).matrix();
  const double den = truth_real.series.squaredNorm();
  if (!(den > 0.0)) fail(errc::metric, "cdg: zero-norm future window");
  const double nmse = (pred_real - truth_real.series).squaredNorm() / den;

  CdgLosses losses;
  losses.ce = ce;
  losses.nmse = nmse;
  losses.total = ce + lambda * nmse;
  if (grads == nullptr) return losses;

  // loss gradient w.r.t. the output distributions: cross-entropy rows plus the
  // reconstruction head reading each sequence's final position
  rmat d_probs = rmat::Zero(static_cast<Eigen::Index>(R) * N, V);
  for (int r = 0; r < R; ++r) {
    const auto& ids = targets.rows[static_cast<std::size_t>(r)];
    for (int i = 0; i + 1 < N; ++i) {
      const int t = ids[static_cast<std::size_t>(i) + 1];
      const Eigen::Index g = static_cast<Eigen::Index>(r) * N + i;
      d_probs(g, t) -= 1.0 / (R * fc.probs(g, t));
    }
  }

  const rmat d_flat =
      (2.0 * lambda * fc.stats.sigma / den) * (pred_real - truth_real.series);
  grads->w_linear = rmat::Zero(V, model.dims.t_pre);
  for (int r = 0; r < R; ++r) {
    const Eigen::Index g = static_cast<Eigen::Index>(r) * N + N - 1;
    d_probs.row(g) += d_flat.row(r) * model.w_linear.transpose();
    grads->w_linear += fc.probs.row(g).transpose() * d_flat.row(r);
  }

  rmat d_h, d_w_out;
  lmkb::output_head_backward(d_probs, fc.probs, fc.h_all, model.w_out, &d_h, &d_w_out);
  grads->w_out = d_w_out;

  model.backbone->zero_grads();
  const rmat d_z = model.backbone->backward(d_h);

  const int H = static_cast<int>(model.alignment.heads.size());
  grads->w_emb = rmat::Zero(model.dims.l_patch, model.dims.d_e);
  grads->w_mix = rmat::Zero(model.alignment.w_mix.rows(), model.alignment.w_mix.cols());
  grads->heads.assign(static_cast<std::size_t>(H), lmkb::HeadParams{});
  for (int h = 0; h < H; ++h) {
    const auto& hp = model.alignment.heads[static_cast<std::size_t>(h)];
    grads->heads[static_cast<std::size_t>(h)].wq = rmat::Zero(hp.wq.rows(), hp.wq.cols());
    grads->heads[static_cast<std::size_t>(h)].wk = rmat::Zero(hp.wk.rows(), hp.wk.cols());
    grads->heads[static_cast<std::size_t>(h)].wv = rmat::Zero(hp.wv.rows(), hp.wv.cols());
  }
  rmat d_e_proj = rmat::Zero(V, model.dims.d_e);

  for (int r = 0; r < R; ++r) {
    const auto g = lmkb::cross_attention_backward(
        d_z.middleRows(r * N, N), fc.attn[static_cast<std::size_t>(r)], model.alignment);
    grads->w_emb += fc.pset.rows[static_cast<std::size_t>(r)].transpose() * g.d_q_src;
    d_e_proj += g.d_e_proj;
    for (int h = 0; h < H; ++h) {
      grads->heads[static_cast<std::size_t>(h)].wq += g.d_heads[static_cast<std::size_t>(h)].wq;
      grads->heads[static_cast<std::size_t>(h)].wk += g.d_heads[static_cast<std::size_t>(h)].wk;
      grads->heads[static_cast<std::size_t>(h)].wv += g.d_heads[static_cast<std::size_t>(h)].wv;
    }
    grads->w_mix += g.d_w_mix;
  }
  grads->w_proj = model.table.e_word.transpose() * d_e_proj;
  return losses;
}

std::vector<TracePair> windowed_pairs(const mimo::ChannelTrace& trace, int t_his, int t_pre,
                                      int hop) {
  if (t_his < 1 || t_pre < 1 || hop < 1)
    fail(errc::config, "windowed_pairs: window sizes and hop must be positive");
  std::vector<TracePair> out;
  const std::size_t need = static_cast<std::size_t>(t_his) + static_cast<std::size_t>(t_pre);
  for (std::size_t s = 0; s + need <= trace.length(); s += static_cast<std::size_t>(hop)) {
    out.emplace_back(trace.slice(s, static_cast<std::size_t>(t_his)),
                     trace.slice(s + static_cast<std::size_t>(t_his),
                                 static_cast<std::size_t>(t_pre)));
  }
  if (out.empty()) fail(errc::invalid_input, "windowed_pairs: trace shorter than one window");
  return out;
}

TrainResult train_cdg(const std::vector<TracePair>& dataset, const lmkb::EmbeddingTable& table,
                      const CdgConfig& cfg) {
  if (dataset.empty()) fail(errc::invalid_input, "train_cdg: empty dataset");
  if (cfg.epochs < 0) fail(errc::config, "train_cdg: negative epoch count");
  if (cfg.lambda < 0.0) fail(errc::config, "train_cdg: negative lambda");

  TrainResult out{make_cdg_model(cfg, table), {}};
  out.history.reserve(static_cast<std::size_t>(cfg.epochs));

  Rng order_rng(derive_seed(cfg.seed, "cdg.order"));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0u);

  CdgGrads grads;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // next-patch targets follow the current embedding/projection geometry but
    // are constants within the epoch
    std::vector<TargetTokens> targets(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i)
      targets[i] = derive_target_tokens(dataset[i].first, out.model);

    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.below(i))]);

    EpochLoss sums;
    for (std::size_t idx : order) {
      const CdgLosses l = cdg_loss_and_grads(out.model, dataset[idx].first, dataset[idx].second,
                                             cfg.lambda, targets[idx], &grads);
      sums.total += l.total;
      sums.ce += l.ce;
      sums.nmse += l.nmse;
      apply_sgd(out.model, grads, cfg.lr);
    }
    const double n = static_cast<double>(dataset.size());
    out.history.push_back({sums.total / n, sums.ce / n, sums.nmse / n});
  }
  return out;
}

namespace {

void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    fail(errc::format, "checkpoint: truncated header field");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_mat(std::ofstream& f, const rmat& m) {
  write_u32(f, static_cast<std::uint32_t>(m.rows()));
  write_u32(f, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const float v = static_cast<float>(m(i, j));
      static_assert(sizeof(float) == 4);
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
}

rmat read_mat(std::ifstream& f, Eigen::Index want_rows, Eigen::Index want_cols,
              const char* what) {
  const auto rows = static_cast<Eigen::Index>(read_u32(f));
  const auto cols = static_cast<Eigen::Index>(read_u32(f));
  if (rows != want_rows || cols != want_cols)
    fail(errc::format, std::string("checkpoint: unexpected shape for ") + what);
  rmat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      float v = 0.0f;
      if (!f.read(reinterpret_cast<char*>(&v), 4))
        fail(errc::format, std::string("checkpoint: truncated data for ") + what);
      m(i, j) = static_cast<double>(v);
    }
  }
  return m;
}

}  // namespace

void save_checkpoint(const CdgModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "checkpoint: cannot open for writing: " + path);
  f.write("CDG1", 4);

  const auto& d = model.dims;
  write_u32(f, static_cast<std::uint32_t>(d.t_his));
  write_u32(f, static_cast<std::uint32_t>(d.t_pre));
  write_u32(f, static_cast<std::uint32_t>(d.l_patch));
  write_u32(f, static_cast<std::uint32_t>(d.stride));
  write_u32(f, static_cast<std::uint32_t>(d.d_e));
  write_u32(f, static_cast<std::uint32_t>(model.alignment.heads.size()));
  write_u32(f, static_cast<std::uint32_t>(model.alignment.d_k()));
  write_u32(f, static_cast<std::uint32_t>(model.vocab_size()));
  write_u32(f, static_cast<std::uint32_t>(model.table.dim()));
  write_u32(f, static_cast<std::uint32_t>(model.backbone->config().l_depth));
  write_u32(f, static_cast<std::uint32_t>(model.max_seq));

  write_mat(f, model.w_emb);
  write_mat(f, model.alignment.w_proj);
  for (const auto& head : model.alignment.heads) {
    write_mat(f, head.wq);
    write_mat(f, head.wk);
    write_mat(f, head.wv);
  }
  write_mat(f, model.alignment.w_mix);
  write_mat(f, model.w_out);
  write_mat(f, model.w_linear);
  write_mat(f, model.table.e_word);
  for (const auto& view : const_cast<CdgModel&>(model).backbone->param_views())
    write_mat(f, *view.value);

  if (!f.good()) fail(errc::io, "checkpoint: write failed: " + path);
}

CdgModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "checkpoint: cannot open for reading: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "CDG1", 4) != 0)
    fail(errc::format, "checkpoint: bad magic");

  CdgConfig cfg;
  cfg.dims.t_his = static_cast<int>(read_u32(f));
  cfg.dims.t_pre = static_cast<int>(read_u32(f));
  cfg.dims.l_patch = static_cast<int>(read_u32(f));
  cfg.dims.stride = static_cast<int>(read_u32(f));
  cfg.dims.d_e = static_cast<int>(read_u32(f));
  cfg.heads = static_cast<int>(read_u32(f));
  cfg.d_k = static_cast<int>(read_u32(f));
  const int vocab = static_cast<int>(read_u32(f));
  const int d_llm = static_cast<int>(read_u32(f));
  cfg.l_depth = static_cast<int>(read_u32(f));
  cfg.max_seq = static_cast<int>(read_u32(f));

  const auto& d = cfg.dims;
  CdgModel model;
  model.dims = d;
  model.max_seq = cfg.max_seq;

  model.w_emb = read_mat(f, d.l_patch, d.d_e, "w_emb");
  lmkb::AlignmentParams align;
  align.w_proj = read_mat(f, d_llm, d.d_e, "w_proj");
  align.heads.resize(static_cast<std::size_t>(cfg.heads));
  for (auto& head : align.heads) {
    head.wq = read_mat(f, d.d_e, cfg.d_k, "wq");
    head.wk = read_mat(f, d.d_e, cfg.d_k, "wk");
    head.wv = read_mat(f, d.d_e, cfg.d_k, "wv");
  }
  align.w_mix = read_mat(f, static_cast<Eigen::Index>(cfg.heads) * cfg.d_k, d.d_e, "w_mix");
  model.alignment = std::move(align);
  model.w_out = read_mat(f, d.d_e, vocab, "w_out");
  model.w_linear = read_mat(f, vocab, d.t_pre, "w_linear");
  model.table.e_word = read_mat(f, vocab, d_llm, "word table");

  lmkb::BackboneConfig bcfg;
  bcfg.l_depth = cfg.l_depth;
  bcfg.d_llm = d.d_e;
  bcfg.heads = cfg.heads;
  bcfg.max_seq = cfg.max_seq;
  model.backbone = std::make_unique<lmkb::ToyTransformer>(bcfg);
  for (auto& view : model.backbone->param_views())
    *view.value = read_mat(f, view.value->rows(), view.value->cols(), view.name.c_str());

  if (f.peek() != std::ifstream::traits_type::eof())
    fail(errc::format, "checkpoint: trailing bytes");
  return model;
}

}  // namespace semkb::cdg
