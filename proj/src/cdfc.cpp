#include "cdfc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace semkb::cdfc {

namespace {

constexpr double kSigmaFloor = 1e-12;   // below this a stream is zeroed, not equalized
constexpr double kMaxPooledGap = 36.0;  // keeps the two-way softmax inside (0, 1)
constexpr std::uint64_t kUsesPerSalt = 1024;

void fill_scaled_uniform(rmat& m, double scale, Rng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-scale, scale);
}

// shared decoder forward: h = tanh(v1 y + b1), g = v2 h + b2,
// logits = exp(log_temp) * gallery * g
rvec decoder_forward(const rvec& y_hat, const JsccCodec& codec, const rmat& gallery, rvec* h_out,
                     rvec* g_out) {
  if (y_hat.size() != codec.n_feat())
    fail(errc::shape, "decode: feature length " + std::to_string(y_hat.size()) + " != n_feat " +
                          std::to_string(codec.n_feat()));
  if (gallery.rows() == 0) fail(errc::invalid_input, "decode: empty gallery");
  if (gallery.cols() != codec.d_proto())
    fail(errc::shape, "decode: gallery width " + std::to_string(gallery.cols()) +
                          " != prototype dim " + std::to_string(codec.d_proto()));
  if (!y_hat.allFinite()) fail(errc::numeric, "decode: non-finite feature");

  rvec h = (codec.v1 * y_hat + codec.b1).array().tanh().matrix();
  rvec g = codec.v2 * h + codec.b2;
  rvec logits = std::exp(codec.log_temp) * (gallery * g);
  if (h_out) *h_out = std::move(h);
  if (g_out) *g_out = std::move(g);
  return logits;
}

struct EncodeCache {
  rvec bag;
  rvec q;  // tanh(w1 bag)
  rvec t;
};

EncodeCache encode_cache(const lmkb::TokenSeq& tokens, const JsccCodec& codec) {
  EncodeCache c;
  c.bag = embed_bag(tokens, codec.table);
  c.q = (codec.w1 * c.bag).array().tanh().matrix();
  c.t = codec.w2 * c.q;
  if (!c.t.allFinite()) fail(errc::numeric, "encode: non-finite feature");
  return c;
}

void encoder_backward(const EncodeCache& cache, const rvec& g_t, const JsccCodec& codec, rmat* g_w1,
                      rmat* g_w2) {
  *g_w2 += g_t * cache.q.transpose();
  const rvec d_pre =
      ((codec.w2.transpose() * g_t).array() * (1.0 - cache.q.array().square())).matrix();
  *g_w1 += d_pre * cache.bag.transpose();
}

void zero_like(SampleGrads& g, const JsccCodec& codec) {
  g.w1 = rmat::Zero(codec.w1.rows(), codec.w1.cols());
  g.w2 = rmat::Zero(codec.w2.rows(), codec.w2.cols());
  g.v1 = rmat::Zero(codec.v1.rows(), codec.v1.cols());
  g.v2 = rmat::Zero(codec.v2.rows(), codec.v2.cols());
  g.b1 = rvec::Zero(codec.b1.size());
  g.b2 = rvec::Zero(codec.b2.size());
  g.log_temp = 0.0;
}

}  // namespace

JsccCodec make_codec(const lmkb::EmbeddingTable& table, int d_hidden, int n_feat, int d_proto,
                     std::uint64_t seed) {
  if (table.vocab_size() == 0) fail(errc::config, "make_codec: empty embedding table");
  if (d_hidden < 1) fail(errc::config, "make_codec: d_hidden must be positive");
  if (d_proto < 1) fail(errc::config, "make_codec: d_proto must be positive");
  if (n_feat < 2 || n_feat % 2 != 0)
    fail(errc::config, "make_codec: n_feat must be even and >= 2 (features travel as complex pairs)");

  JsccCodec codec;
  codec.table = table;
  Rng rng(derive_seed(seed, "cdfc.init"));
  // uniform(+-sqrt(3/fan_in)) has variance 1/fan_in, which keeps activation
  // scale roughly constant layer to layer
  const auto init_scale = [](int fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); };
  codec.w1.resize(d_hidden, table.dim());
  fill_scaled_uniform(codec.w1, init_scale(table.dim()), rng);
  codec.w2.resize(n_feat, d_hidden);
  fill_scaled_uniform(codec.w2, init_scale(d_hidden), rng);
  codec.v1.resize(d_hidden, n_feat);
  fill_scaled_uniform(codec.v1, init_scale(n_feat), rng);
  codec.b1 = rvec::Zero(d_hidden);
  codec.v2.resize(d_proto, d_hidden);
  fill_scaled_uniform(codec.v2, init_scale(d_hidden), rng);
  codec.b2 = rvec::Zero(d_proto);
  codec.log_temp = 0.0;
  return codec;
}

rvec embed_bag(const lmkb::TokenSeq& tokens, const lmkb::EmbeddingTable& table) {
  if (tokens.empty()) fail(errc::invalid_input, "embed_bag: empty token sequence");
  const rmat e = lmkb::embed_tokens(tokens, table);
  return e.colwise().mean().transpose();
}

rvec encode(const lmkb::TokenSeq& tokens, const JsccCodec& codec) {
  return encode_cache(tokens, codec).t;
}

double cosine_sim(const rvec& a, const rvec& b) {
  if (a.size() != b.size())
    fail(errc::shape, "cosine_sim: length mismatch " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) fail(errc::metric, "cosine_sim: zero-norm input");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

FilterResult filter(const rvec& t_i, const std::string& source, lmkb::TextBackend& backend,
                    const lmkb::Vocab& vocab, const JsccCodec& codec, const FilterConfig& cfg,
                    const GenSettings& gen, std::uint64_t seed) {
  if (cfg.gamma < -1.0 || cfg.gamma > 1.0 || !std::isfinite(cfg.gamma))
    fail(errc::config, "filter: gamma must lie in [-1, 1]");
  if (cfg.max_retries < 1) fail(errc::config, "filter: max_retries must be positive");
  if (t_i.size() != codec.n_feat()) fail(errc::shape, "filter: source feature length mismatch");

  const sdg::Prompt prompt = sdg::build_prompt(source, gen.instruction);

  FilterResult result;
  bool produced = false;
  std::optional<error> last_failure;

  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    ++result.attempts;
    lmkb::TokenSeq candidate;
    rvec t_a;
    try {
      const sdg::GeneratedSource out = sdg::generate(prompt, gen.tau, gen.max_len, backend, vocab,
                                                     derive_seed(seed, "cdfc.attempt",
                                                                 static_cast<std::uint64_t>(attempt)));
      candidate = out.token_ids;
      t_a = encode(candidate, codec);
      produced = true;
    } catch (const error& e) {
      if (e.kind() == errc::generation || e.kind() == errc::empty_generation) {
        last_failure = e;
        continue;
      }
      throw;
    }
    double sim;
    try {
      sim = cosine_sim(t_i, t_a);
    } catch (const error& e) {
      if (e.kind() == errc::metric) continue;  // degenerate candidate, zero norm
      throw;
    }
    result.sims.push_back(sim);
    if (sim > cfg.gamma) {
      result.pair = {t_i, std::move(t_a), sim};
      result.tokens_a = std::move(candidate);
      return result;
    }
  }

  if (!produced) {
    const std::string detail = last_failure ? last_failure->what() : "no attempts";
    fail(errc::generation, "filter: every generation attempt failed: " + detail);
  }

  result.pair = {t_i, t_i, 1.0};
  result.tokens_a = sdg::tokenize(source, vocab);
  result.fallback = true;
  return result;
}

FusionWeights pooled_softmax(double eta_i, double eta_a) {
  if (!std::isfinite(eta_i) || !std::isfinite(eta_a))
    fail(errc::numeric, "pooled_softmax: non-finite pooled gradient");
  FusionWeights w;
  w.eta_i = eta_i;
  w.eta_a = eta_a;
  const double gap = std::clamp(eta_i - eta_a, -kMaxPooledGap, kMaxPooledGap);
  w.theta_i = 1.0 / (1.0 + std::exp(-gap));
  w.theta_a = 1.0 - w.theta_i;
  return w;
}

FusionWeights importance_weights(const rvec& t_i, const rvec& t_a, const JsccCodec& codec,
                                 const rmat& gallery, int label) {
  DecoderGrads g_i, g_a;
  decoder_loss_and_grads(t_i, codec, gallery, label, &g_i);
  decoder_loss_and_grads(t_a, codec, gallery, label, &g_a);
  return pooled_softmax(g_i.input.mean(), g_a.input.mean());
}

rvec fuse(const rvec& t_i, const rvec& t_a, const FusionWeights& w, Pairing pairing) {
  if (t_i.size() != t_a.size())
    fail(errc::shape, "fuse: feature length mismatch " + std::to_string(t_i.size()) + " vs " +
                          std::to_string(t_a.size()));
  const double c = pairing == Pairing::cross ? w.theta_a : w.theta_i;
  if (!std::isfinite(c) || c <= 0.0 || c >= 1.0)
    fail(errc::invalid_input, "fuse: weights must lie strictly inside (0, 1)");
  return t_a + c * (t_i - t_a);
}

rvec decode(const rvec& y_hat, const JsccCodec& codec, const rmat& gallery) {
  return decoder_forward(y_hat, codec, gallery, nullptr, nullptr);
}

double task_loss(const rvec& logits, int label) {
  if (logits.size() == 0) fail(errc::invalid_input, "task_loss: empty logits");
  if (label < 0 || label >= logits.size())
    fail(errc::invalid_input, "task_loss: label " + std::to_string(label) + " outside gallery of " +
                                  std::to_string(logits.size()));
  if (!logits.allFinite()) fail(errc::numeric, "task_loss: non-finite logits");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return std::max(0.0, lse - logits(label));
}

double decoder_loss_and_grads(const rvec& y_hat, const JsccCodec& codec, const rmat& gallery,
                              int label, DecoderGrads* grads) {
  rvec h, g;
  const rvec logits = decoder_forward(y_hat, codec, gallery, &h, &g);
  const double loss = task_loss(logits, label);
  if (!grads) return loss;

  const double m = logits.maxCoeff();
  rvec probs = (logits.array() - m).exp().matrix();
  probs /= probs.sum();
  rvec d_logits = probs;
  d_logits(label) -= 1.0;

  grads->log_temp = d_logits.dot(logits);  // logits scale linearly in exp(log_temp)
  const rvec d_g = std::exp(codec.log_temp) * (gallery.transpose() * d_logits);
  grads->v2 = d_g * h.transpose();
  grads->b2 = d_g;
  const rvec d_pre = ((codec.v2.transpose() * d_g).array() * (1.0 - h.array().square())).matrix();
  grads->b1 = d_pre;
  grads->v1 = d_pre * y_hat.transpose();
  grads->input = codec.v1.transpose() * d_pre;
  return loss;
}

ChannelSlot make_slot(const cmat& h_true, const cmat& h_precode, int d,
                      std::int64_t feedback_bits) {
  if (h_true.rows() != h_precode.rows() || h_true.cols() != h_precode.cols())
    fail(errc::shape, "make_slot: true and precoder channel shapes differ");
  const int max_d = static_cast<int>(std::min(h_true.rows(), h_true.cols()));
  if (d < 1 || d > max_d)
    fail(errc::config, "make_slot: stream count " + std::to_string(d) + " outside [1, " +
                           std::to_string(max_d) + "]");

  const mimo::SvdTriple triple = mimo::svd_decompose(h_precode);
  ChannelSlot slot;
  slot.h_true = h_true;
  const cmat v_d = triple.v.leftCols(d);
  slot.v_tx = feedback_bits >= 0 ? mimo::quantize_feedback(v_d, feedback_bits) : v_d;
  slot.u_rx = triple.u.leftCols(d);
  slot.sigma_rx = triple.s.head(d);
  return slot;
}

void ChannelContext::validate() const {
  if (slots.empty()) fail(errc::config, "channel context: no slots");
  if (std::isnan(snr_db)) fail(errc::config, "channel context: snr is NaN");
  const auto& first = slots.front();
  for (const auto& s : slots) {
    if (s.h_true.rows() != first.h_true.rows() || s.h_true.cols() != first.h_true.cols() ||
        s.v_tx.cols() != first.v_tx.cols())
      fail(errc::shape, "channel context: inconsistent slot shapes");
    if (s.v_tx.rows() != s.h_true.cols() || s.u_rx.rows() != s.h_true.rows() ||
        s.u_rx.cols() != s.v_tx.cols() || s.sigma_rx.size() != s.v_tx.cols())
      fail(errc::shape, "channel context: slot matrices disagree");
  }
}

ChannelPass channel_forward(const rvec& z, const ChannelContext& ctx, std::size_t slot,
                            std::uint64_t salt) {
  ctx.validate();
  if (slot >= ctx.slots.size())
    fail(errc::invalid_input, "channel_forward: slot " + std::to_string(slot) + " out of range");
  if (z.size() == 0 || z.size() % 2 != 0)
    fail(errc::invalid_input, "channel_forward: feature length must be even and positive");

  const ChannelSlot& cs = ctx.slots[slot];
  const int d = static_cast<int>(cs.v_tx.cols());

  ChannelPass pass;
  pass.n_sym = static_cast<int>(z.size() / 2);
  pass.d = d;
  pass.a = cs.u_rx.adjoint() * cs.h_true * cs.v_tx;
  if (ctx.equalize) {
    for (int i = 0; i < d; ++i) {
      if (cs.sigma_rx(i) < kSigmaFloor)
        pass.a.row(i).setZero();
      else
        pass.a.row(i) /= cs.sigma_rx(i);
    }
  }

  const int uses = (pass.n_sym + d - 1) / d;
  if (static_cast<std::uint64_t>(uses) >= kUsesPerSalt)
    fail(errc::invalid_input, "channel_forward: feature too long for the salt budget");

  pass.z_hat = rvec::Zero(z.size());
  for (int u = 0; u < uses; ++u) {
    cvec s = cvec::Zero(d);
    for (int j = 0; j < d; ++j) {
      const int k = u * d + j;
      if (k < pass.n_sym) s(j) = cplx(z(2 * k), z(2 * k + 1));
    }
    const cvec x = cs.v_tx * s;
    mimo::NoiseModel noise;
    noise.snr_db = ctx.snr_db;
    noise.rng_seed = derive_seed(ctx.noise_seed, "cdfc.noise",
                                 salt * kUsesPerSalt + static_cast<std::uint64_t>(u));
    const cvec y = mimo::transmit(x, cs.h_true, noise);
    cvec r = cs.u_rx.adjoint() * y;
    if (ctx.equalize) {
      for (int i = 0; i < d; ++i) r(i) = cs.sigma_rx(i) < kSigmaFloor ? 0.0 : r(i) / cs.sigma_rx(i);
    }
    for (int j = 0; j < d; ++j) {
      const int k = u * d + j;
      if (k < pass.n_sym) {
        pass.z_hat(2 * k) = r(j).real();
        pass.z_hat(2 * k + 1) = r(j).imag();
      }
    }
  }
  return pass;
}

rvec channel_backward(const rvec& g_z_hat, const ChannelPass& pass) {
  if (g_z_hat.size() != 2 * static_cast<Eigen::Index>(pass.n_sym))
    fail(errc::shape, "channel_backward: gradient length mismatch");
  const int d = pass.d;
  const cmat a_h = pass.a.adjoint();
  const int uses = (pass.n_sym + d - 1) / d;

  rvec g_z = rvec::Zero(g_z_hat.size());
  for (int u = 0; u < uses; ++u) {
    cvec g_r = cvec::Zero(d);
    for (int j = 0; j < d; ++j) {
      const int k = u * d + j;
      if (k < pass.n_sym) g_r(j) = cplx(g_z_hat(2 * k), g_z_hat(2 * k + 1));
    }
    const cvec g_s = a_h * g_r;
    for (int j = 0; j < d; ++j) {
      const int k = u * d + j;
      if (k < pass.n_sym) {
        g_z(2 * k) = g_s(j).real();
        g_z(2 * k + 1) = g_s(j).imag();
      }
    }
  }
  return g_z;
}

double sample_loss_and_grads(const lmkb::TokenSeq& tokens_i, const lmkb::TokenSeq* tokens_a,
                             const FusionWeights* w, Pairing pairing, int label,
                             const JsccCodec& codec, const ChannelContext& ctx, std::size_t slot,
                             std::uint64_t salt, const rmat& gallery, SampleGrads* grads) {
  if (tokens_a && !w)
    fail(errc::invalid_input, "sample_loss_and_grads: fused path needs fusion weights");

  const EncodeCache enc_i = encode_cache(tokens_i, codec);
  std::optional<EncodeCache> enc_a;
  rvec z;
  if (tokens_a) {
    enc_a = encode_cache(*tokens_a, codec);
    z = fuse(enc_i.t, enc_a->t, *w, pairing);
  } else {
    z = enc_i.t;
  }

  const ChannelPass pass = channel_forward(z, ctx, slot, salt);
  DecoderGrads dec;
  const double loss =
      decoder_loss_and_grads(pass.z_hat, codec, gallery, label, grads ? &dec : nullptr);
  if (!grads) return loss;

  zero_like(*grads, codec);
  grads->v1 = dec.v1;
  grads->b1 = dec.b1;
  grads->v2 = dec.v2;
  grads->b2 = dec.b2;
  grads->log_temp = dec.log_temp;

  const rvec g_z = channel_backward(dec.input, pass);
  if (tokens_a) {
    const double c = pairing == Pairing::cross ? w->theta_a : w->theta_i;
    const rvec g_ti = c * g_z;
    const rvec g_ta = (1.0 - c) * g_z;
    encoder_backward(enc_i, g_ti, codec, &grads->w1, &grads->w2);
    encoder_backward(*enc_a, g_ta, codec, &grads->w1, &grads->w2);
  } else {
    encoder_backward(enc_i, g_z, codec, &grads->w1, &grads->w2);
  }
  return loss;
}

StepMetrics train_step(const std::vector<TrainSample>& batch, JsccCodec& codec,
                       const ChannelContext& ctx, lmkb::TextBackend* backend,
                       const lmkb::Vocab& vocab, const rmat& gallery, const StepConfig& cfg,
                       std::uint64_t seed, std::uint64_t step) {
  if (batch.empty()) fail(errc::invalid_input, "train_step: empty batch");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr))
    fail(errc::config, "train_step: learning rate must be finite and non-negative");
  if (!cfg.disable_sdg && backend == nullptr)
    fail(errc::config, "train_step: generation enabled but no backend supplied");
  ctx.validate();

  constexpr std::uint64_t kSaltStride = std::uint64_t{1} << 20;
  if (batch.size() >= kSaltStride) fail(errc::invalid_input, "train_step: batch too large");

  SampleGrads acc;
  zero_like(acc, codec);
  SampleGrads one;

  StepMetrics metrics;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const TrainSample& sample = batch[k];
    const std::size_t slot = (step * batch.size() + k) % ctx.slots.size();
    const std::uint64_t salt = step * kSaltStride + k;

    double loss = 0.0;
    bool fused = false;
    FilterResult fr;
    if (!cfg.disable_sdg) {
      const rvec t_i = encode(sample.tokens, codec);
      fr = filter(t_i, sample.text, *backend, vocab, codec, cfg.filter, cfg.gen,
                  derive_seed(seed, "cdfc.sample", salt));
      metrics.generation_calls += fr.attempts;
      fused = !fr.fallback;
    }

    if (fused) {
      ++metrics.accepted;
      const FusionWeights w =
          importance_weights(fr.pair.t_i, fr.pair.t_a, codec, gallery, sample.label);
      loss = sample_loss_and_grads(sample.tokens, &fr.tokens_a, &w, cfg.pairing, sample.label,
                                   codec, ctx, slot, salt, gallery, &one);
    } else {
      // disable-sdg ablation and filter fallback share this exact call, so an
      // all-fallback run reproduces the ablation's trajectory bit for bit
      if (!cfg.disable_sdg) ++metrics.fallbacks;
      loss = sample_loss_and_grads(sample.tokens, nullptr, nullptr, cfg.pairing, sample.label,
                                   codec, ctx, slot, salt, gallery, &one);
    }

    metrics.loss += loss;
    acc.w1 += one.w1;
    acc.w2 += one.w2;
    acc.v1 += one.v1;
    acc.b1 += one.b1;
    acc.v2 += one.v2;
    acc.b2 += one.b2;
    acc.log_temp += one.log_temp;
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  metrics.loss *= inv_b;
  codec.w1 -= cfg.lr * inv_b * acc.w1;
  codec.w2 -= cfg.lr * inv_b * acc.w2;
  codec.v1 -= cfg.lr * inv_b * acc.v1;
  codec.b1 -= cfg.lr * inv_b * acc.b1;
  codec.v2 -= cfg.lr * inv_b * acc.v2;
  codec.b2 -= cfg.lr * inv_b * acc.b2;
  codec.log_temp -= cfg.lr * inv_b * acc.log_temp;
  return metrics;
}

std::vector<int> infer(const lmkb::TokenSeq& tokens, const JsccCodec& codec,
                       const ChannelContext& ctx, const rmat& gallery, std::size_t slot,
                       std::uint64_t salt) {
  const rvec t_i = encode(tokens, codec);
  const ChannelPass pass = channel_forward(t_i, ctx, slot, salt);
  const rvec logits = decode(pass.z_hat, codec, gallery);

  std::vector<int> order(static_cast<std::size_t>(logits.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits(a) > logits(b); });
  return order;
}

}  // namespace semkb::cdfc
