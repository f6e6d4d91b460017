#include "lmkb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace semkb::lmkb {

namespace {

constexpr double kLnEps = 1e-5;

void fill_scaled_uniform(rmat& m, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
}

rmat softmax_rows(const rmat& scores) {
  rmat out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double mx = scores.row(i).maxCoeff();
    out.row(i) = (scores.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// d(softmax)/d(scores) applied to an upstream gradient, row-wise
rmat softmax_backward_rows(const rmat& probs, const rmat& d_probs) {
  rmat d_scores(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double dot = probs.row(i).cwiseProduct(d_probs.row(i)).sum();
    d_scores.row(i) = (probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
  }
  return d_scores;
}

}  // namespace

int Vocab::id_of(const std::string& word) const {
  const auto it = index.find(word);
  return it == index.end() ? unk_id : it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) fail(errc::vocab, "token id out of range");
  return tokens[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
  Vocab v;
  v.tokens.reserve(words.size() + 2);
  for (const auto& w : words) {
    if (v.index.count(w)) continue;
    v.index.emplace(w, v.size());
    v.tokens.push_back(w);
  }
  v.unk_id = v.size();
  v.index.emplace("<unk>", v.unk_id);
  v.tokens.push_back("<unk>");
  v.end_id = v.size();
  v.index.emplace("<end>", v.end_id);
  v.tokens.push_back("<end>");
  return v;
}

EmbeddingTable EmbeddingTable::random(int vocab, int dim, std::uint64_t seed) {
  if (vocab < 1 || dim < 1) fail(errc::config, "embedding table needs positive shape");
  EmbeddingTable t;
  t.e_word.resize(vocab, dim);
  Rng rng(derive_seed(seed, "lmkb.embedding"));
  fill_scaled_uniform(t.e_word, dim, rng);
  return t;
}

rmat embed_tokens(const TokenSeq& ids, const EmbeddingTable& table) {
  rmat out(static_cast<Eigen::Index>(ids.size()), table.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.vocab_size())
      fail(errc::vocab, "embed_tokens: token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.e_word.row(ids[i]);
  }
  return out;
}

rmat project_vocab(const EmbeddingTable& table, const rmat& w_proj) {
  if (table.dim() != w_proj.rows()) fail(errc::shape, "project_vocab: inner dimensions differ");
  return table.e_word * w_proj;
}

rmat output_head(const rmat& h, const rmat& w_out) {
  if (h.cols() != w_out.rows()) fail(errc::shape, "output_head: inner dimensions differ");
  return softmax_rows(h * w_out);
}

void output_head_backward(const rmat& d_probs, const rmat& probs, const rmat& h,
                          const rmat& w_out, rmat* d_h, rmat* d_w_out) {
  const rmat d_logits = softmax_backward_rows(probs, d_probs);
  if (d_h) *d_h = d_logits * w_out.transpose();
  if (d_w_out) *d_w_out = h.transpose() * d_logits;
}

int sample_with_temperature(const rvec& logits, double tau, std::uint64_t seed) {
  if (logits.size() == 0) fail(errc::numeric, "sample_with_temperature: empty logits");
  if (tau < 0.0) fail(errc::config, "sample_with_temperature: negative temperature");

  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (std::isnan(logits(i)) || logits(i) == std::numeric_limits<double>::infinity())
      fail(errc::numeric, "sample_with_temperature: non-finite logit");
    mx = std::max(mx, logits(i));
  }
  if (std::isinf(mx)) fail(errc::numeric, "sample_with_temperature: degenerate distribution");

  if (tau == 0.0) {  // greedy sentinel, ties to the lowest index
    int best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
      if (logits(i) > logits(best)) best = static_cast<int>(i);
    return best;
  }

  rvec weights(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    weights(i) = std::exp((logits(i) - mx) / tau);
  const double total = weights.sum();

  Rng rng(derive_seed(seed, "lmkb.sample"));
  const double u = rng.uniform() * total;
  double acc = 0.0;
  int last_live = 0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights(i) > 0.0) last_live = static_cast<int>(i);
    acc += weights(i);
    if (u < acc) return static_cast<int>(i);
  }
  return last_live;  // rounding spill
}

ToyTransformer::ToyTransformer(const BackboneConfig& cfg) : cfg_(cfg) {
  if (cfg_.d_llm < 1 || cfg_.l_depth < 0 || cfg_.heads < 1 || cfg_.max_seq < 1)
    fail(errc::config, "backbone config out of range");
  if (cfg_.d_head == 0) cfg_.d_head = cfg_.d_llm / cfg_.heads;
  if (cfg_.heads * cfg_.d_head != cfg_.d_llm)
    fail(errc::config, "backbone config: heads * d_head must equal d_llm");
  d_hidden_ = 2 * cfg_.d_llm;

  Rng rng(derive_seed(cfg_.seed, "backbone.init"));
  const int d = cfg_.d_llm;
  layers_.resize(static_cast<std::size_t>(cfg_.l_depth));
  grads_.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& p = layers_[l];
    p.ln1_g = rmat::Ones(1, d);
    p.ln1_b = rmat::Zero(1, d);
    p.wq.resize(d, d);
    p.wk.resize(d, d);
    p.wv.resize(d, d);
    p.wo.resize(d, d);
    fill_scaled_uniform(p.wq, d, rng);
    fill_scaled_uniform(p.wk, d, rng);
    fill_scaled_uniform(p.wv, d, rng);
    fill_scaled_uniform(p.wo, d, rng);
    p.ln2_g = rmat::Ones(1, d);
    p.ln2_b = rmat::Zero(1, d);
    p.w1.resize(d, d_hidden_);
    fill_scaled_uniform(p.w1, d, rng);
    p.b1 = rmat::Zero(1, d_hidden_);
    p.w2.resize(d_hidden_, d);
    fill_scaled_uniform(p.w2, d_hidden_, rng);
    p.b2 = rmat::Zero(1, d);

    auto& g = grads_[l];
    g = p;
    for (rmat* m : {&g.ln1_g, &g.ln1_b, &g.wq, &g.wk, &g.wv, &g.wo, &g.ln2_g, &g.ln2_b, &g.w1,
                    &g.b1, &g.w2, &g.b2})
      m->setZero();
  }
}

namespace {

// row-wise layer norm; returns the output and fills xhat / inv_std for backward
rmat layer_norm_forward(const rmat& x, const rmat& g, const rmat& b, rmat& xhat, rvec& inv_std) {
  xhat.resize(x.rows(), x.cols());
  inv_std.resize(x.rows());
  rmat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    inv_std(i) = inv;
    xhat.row(i) = (x.row(i).array() - mu) * inv;
    out.row(i) = xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
  return out;
}

rmat layer_norm_backward(const rmat& d_out, const rmat& xhat, const rvec& inv_std, const rmat& g,
                         rmat& d_g, rmat& d_b) {
  rmat d_x(d_out.rows(), d_out.cols());
  const double dim = static_cast<double>(d_out.cols());
  for (Eigen::Index i = 0; i < d_out.rows(); ++i) {
    d_g.row(0) += d_out.row(i).cwiseProduct(xhat.row(i));
    d_b.row(0) += d_out.row(i);
    const rvec d_xhat = d_out.row(i).cwiseProduct(g.row(0)).transpose();
    const double mean_dxhat = d_xhat.mean();
    const double mean_dxhat_xhat = d_xhat.cwiseProduct(xhat.row(i).transpose()).sum() / dim;
    d_x.row(i) = (inv_std(i) *
                  (d_xhat.array() - mean_dxhat - xhat.row(i).transpose().array() * mean_dxhat_xhat))
                     .transpose();
  }
  return d_x;
}

}  // namespace

rmat ToyTransformer::forward(const rmat& x, int batch) {
  if (x.cols() != cfg_.d_llm) fail(errc::shape, "backbone forward: width mismatch");
  if (batch < 1 || x.rows() % batch != 0)
    fail(errc::shape, "backbone forward: rows not divisible by batch");
  const int len = static_cast<int>(x.rows()) / batch;
  if (len > cfg_.max_seq) fail(errc::context_overflow, "sequence exceeds backbone context");

  cache_batch_ = batch;
  cache_len_ = len;
  cache_.assign(layers_.size(), LayerCache{});

  const int dk = cfg_.d_head;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  const double neg_inf = -std::numeric_limits<double>::infinity();

  rmat cur = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    auto& c = cache_[l];
    c.x_in = cur;

    c.a = layer_norm_forward(cur, p.ln1_g, p.ln1_b, c.ln1_xhat, c.ln1_inv_std);
    c.q = c.a * p.wq;
    c.k = c.a * p.wk;
    c.v = c.a * p.wv;

    c.z_concat.resize(cur.rows(), cur.cols());
    c.attn.assign(static_cast<std::size_t>(batch) * cfg_.heads, rmat());
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto qb = c.q.middleRows(b * len, len).middleCols(h * dk, dk);
        const auto kb = c.k.middleRows(b * len, len).middleCols(h * dk, dk);
        const auto vb = c.v.middleRows(b * len, len).middleCols(h * dk, dk);
        rmat scores = qb * kb.transpose() * inv_sqrt_dk;
        for (int i = 0; i < len; ++i)
          for (int j = i + 1; j < len; ++j) scores(i, j) = neg_inf;  // causal mask
        rmat a = softmax_rows(scores);
        c.z_concat.middleRows(b * len, len).middleCols(h * dk, dk) = a * vb;
        c.attn[static_cast<std::size_t>(b) * cfg_.heads + h] = std::move(a);
      }
    }
    c.x_mid = cur + c.z_concat * p.wo;

    c.b_out = layer_norm_forward(c.x_mid, p.ln2_g, p.ln2_b, c.ln2_xhat, c.ln2_inv_std);
    c.mlp_h = ((c.b_out * p.w1).rowwise() + p.b1.row(0)).array().tanh();
    cur = c.x_mid + ((c.mlp_h * p.w2).rowwise() + p.b2.row(0));
  }

  cache_valid_ = true;
  return cur;
}

rmat ToyTransformer::backward(const rmat& grad_out) {
  if (!cache_valid_) fail(errc::state, "backbone backward called without a cached forward");
  if (grad_out.rows() != static_cast<Eigen::Index>(cache_batch_) * cache_len_ ||
      grad_out.cols() != cfg_.d_llm)
    fail(errc::shape, "backbone backward: gradient shape mismatch");

  const int batch = cache_batch_;
  const int len = cache_len_;
  const int dk = cfg_.d_head;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  rmat g = grad_out;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& p = layers_[li];
    auto& gr = grads_[li];
    const auto& c = cache_[li];

    // MLP branch: out = x_mid + tanh(b_out W1 + b1) W2 + b2
    gr.b2.row(0) += g.colwise().sum();
    gr.w2 += c.mlp_h.transpose() * g;
    const rmat d_h = (g * p.w2.transpose()).cwiseProduct(
        (1.0 - c.mlp_h.array().square()).matrix());
    gr.b1.row(0) += d_h.colwise().sum();
    gr.w1 += c.b_out.transpose() * d_h;
    const rmat d_b_out = d_h * p.w1.transpose();
    rmat d_x_mid = g + layer_norm_backward(d_b_out, c.ln2_xhat, c.ln2_inv_std, p.ln2_g,
                                           gr.ln2_g, gr.ln2_b);

    // attention branch: x_mid = x_in + z_concat Wo
    gr.wo += c.z_concat.transpose() * d_x_mid;
    const rmat d_z = d_x_mid * p.wo.transpose();
    rmat d_q = rmat::Zero(d_z.rows(), d_z.cols());
    rmat d_k = rmat::Zero(d_z.rows(), d_z.cols());
    rmat d_v = rmat::Zero(d_z.rows(), d_z.cols());
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < cfg_.heads; ++h) {
        const rmat& a = c.attn[static_cast<std::size_t>(b) * cfg_.heads + h];
        const auto qb = c.q.middleRows(b * len, len).middleCols(h * dk, dk);
        const auto kb = c.k.middleRows(b * len, len).middleCols(h * dk, dk);
        const auto vb = c.v.middleRows(b * len, len).middleCols(h * dk, dk);
        const rmat d_zb = d_z.middleRows(b * len, len).middleCols(h * dk, dk);
        const rmat d_a = d_zb * vb.transpose();
        const rmat d_scores = softmax_backward_rows(a, d_a);
        d_q.middleRows(b * len, len).middleCols(h * dk, dk) = d_scores * kb * inv_sqrt_dk;
        d_k.middleRows(b * len, len).middleCols(h * dk, dk) =
            d_scores.transpose() * qb * inv_sqrt_dk;
        d_v.middleRows(b * len, len).middleCols(h * dk, dk) = a.transpose() * d_zb;
      }
    }
    gr.wq += c.a.transpose() * d_q;
    gr.wk += c.a.transpose() * d_k;
    gr.wv += c.a.transpose() * d_v;
    const rmat d_a_total =
        d_q * p.wq.transpose() + d_k * p.wk.transpose() + d_v * p.wv.transpose();
    g = d_x_mid + layer_norm_backward(d_a_total, c.ln1_xhat, c.ln1_inv_std, p.ln1_g, gr.ln1_g,
                                      gr.ln1_b);
  }
  return g;
}

void ToyTransformer::zero_grads() {
  for (auto& g : grads_)
    for (rmat* m : {&g.ln1_g, &g.ln1_b, &g.wq, &g.wk, &g.wv, &g.wo, &g.ln2_g, &g.ln2_b, &g.w1,
                    &g.b1, &g.w2, &g.b2})
      m->setZero();
}

void ToyTransformer::sgd_step(double lr) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& p = layers_[l];
    auto& g = grads_[l];
    p.ln1_g -= lr * g.ln1_g;
    p.ln1_b -= lr * g.ln1_b;
    p.wq -= lr * g.wq;
    p.wk -= lr * g.wk;
    p.wv -= lr * g.wv;
    p.wo -= lr * g.wo;
    p.ln2_g -= lr * g.ln2_g;
    p.ln2_b -= lr * g.ln2_b;
    p.w1 -= lr * g.w1;
    p.b1 -= lr * g.b1;
    p.w2 -= lr * g.w2;
    p.b2 -= lr * g.b2;
  }
}

std::vector<ParamView> ToyTransformer::param_views() {
  std::vector<ParamView> views;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& p = layers_[l];
    auto& g = grads_[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    views.push_back({prefix + "ln1_g", &p.ln1_g, &g.ln1_g});
    views.push_back({prefix + "ln1_b", &p.ln1_b, &g.ln1_b});
    views.push_back({prefix + "wq", &p.wq, &g.wq});
    views.push_back({prefix + "wk", &p.wk, &g.wk});
    views.push_back({prefix + "wv", &p.wv, &g.wv});
    views.push_back({prefix + "wo", &p.wo, &g.wo});
    views.push_back({prefix + "ln2_g", &p.ln2_g, &g.ln2_g});
    views.push_back({prefix + "ln2_b", &p.ln2_b, &g.ln2_b});
    views.push_back({prefix + "w1", &p.w1, &g.w1});
    views.push_back({prefix + "b1", &p.b1, &g.b1});
    views.push_back({prefix + "w2", &p.w2, &g.w2});
    views.push_back({prefix + "b2", &p.b2, &g.b2});
  }
  return views;
}

rmat DeterministicMockBackbone::forward(const rmat& x, int batch) {
  if (x.cols() != width_) fail(errc::shape, "mock backbone: width mismatch");
  if (batch < 1 || x.rows() % batch != 0) fail(errc::shape, "mock backbone: bad batch");
  if (static_cast<int>(x.rows()) / batch > max_seq_)
    fail(errc::context_overflow, "sequence exceeds backbone context");
  saw_forward_ = true;
  return x * scale_;
}

rmat DeterministicMockBackbone::backward(const rmat& grad_out) {
  if (!saw_forward_) fail(errc::state, "mock backbone backward before forward");
  return grad_out * scale_;
}

AlignmentParams AlignmentParams::random(int d_llm, int d_hat, int d_e, int heads, int d_k,
                                        std::uint64_t seed) {
  if (d_llm < 1 || d_hat < 1 || d_e < 1 || heads < 1 || d_k < 1)
    fail(errc::config, "alignment params need positive shape");
  if (d_hat > d_llm) fail(errc::config, "alignment: d_hat must not exceed d_llm");
  AlignmentParams p;
  Rng rng(derive_seed(seed, "alignment.init"));
  p.w_proj.resize(d_llm, d_hat);
  fill_scaled_uniform(p.w_proj, d_llm, rng);
  p.heads.resize(static_cast<std::size_t>(heads));
  for (auto& h : p.heads) {
    h.wq.resize(d_e, d_k);
    h.wk.resize(d_hat, d_k);
    h.wv.resize(d_hat, d_k);
    fill_scaled_uniform(h.wq, d_e, rng);
    fill_scaled_uniform(h.wk, d_hat, rng);
    fill_scaled_uniform(h.wv, d_hat, rng);
  }
  p.w_mix.resize(heads * d_k, d_e);
  fill_scaled_uniform(p.w_mix, heads * d_k, rng);
  return p;
}

rmat cross_attention(const rmat& q_src, const rmat& e_proj, const AlignmentParams& params,
                     CrossAttnCache* cache) {
  if (params.heads.empty()) fail(errc::config, "cross_attention: no heads");
  const int dk = params.d_k();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (const auto& h : params.heads) {
    if (h.wq.rows() != q_src.cols()) fail(errc::shape, "cross_attention: query width mismatch");
    if (h.wk.rows() != e_proj.cols() || h.wv.rows() != e_proj.cols())
      fail(errc::shape, "cross_attention: key/value width mismatch");
    if (h.wq.cols() != dk || h.wk.cols() != dk || h.wv.cols() != dk)
      fail(errc::shape, "cross_attention: head widths disagree");
  }
  if (params.w_mix.rows() != static_cast<Eigen::Index>(params.heads.size()) * dk)
    fail(errc::shape, "cross_attention: mixer rows mismatch");

  rmat concat(q_src.rows(), static_cast<Eigen::Index>(params.heads.size()) * dk);
  CrossAttnCache local;
  CrossAttnCache& c = cache ? *cache : local;
  c.q_src = q_src;
  c.e_proj = e_proj;
  c.q.clear();
  c.k.clear();
  c.v.clear();
  c.attn.clear();
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    rmat q = q_src * params.heads[h].wq;
    rmat k = e_proj * params.heads[h].wk;
    rmat v = e_proj * params.heads[h].wv;
    rmat a = softmax_rows(q * k.transpose() * inv_sqrt_dk);
    concat.middleCols(static_cast<Eigen::Index>(h) * dk, dk) = a * v;
    c.q.push_back(std::move(q));
    c.k.push_back(std::move(k));
    c.v.push_back(std::move(v));
    c.attn.push_back(std::move(a));
  }
  c.concat = concat;
  return concat * params.w_mix;
}

CrossAttnGrads cross_attention_backward(const rmat& grad_out, const CrossAttnCache& cache,
                                        const AlignmentParams& params) {
  const int dk = params.d_k();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  CrossAttnGrads g;
  g.d_w_mix = cache.concat.transpose() * grad_out;
  const rmat d_concat = grad_out * params.w_mix.transpose();
  g.d_q_src = rmat::Zero(cache.q_src.rows(), cache.q_src.cols());
  g.d_e_proj = rmat::Zero(cache.e_proj.rows(), cache.e_proj.cols());
  g.d_heads.resize(params.heads.size());
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    const rmat d_z = d_concat.middleCols(static_cast<Eigen::Index>(h) * dk, dk);
    const rmat& a = cache.attn[h];
    const rmat d_a = d_z * cache.v[h].transpose();
    const rmat d_scores = softmax_backward_rows(a, d_a);
    const rmat d_q = d_scores * cache.k[h] * inv_sqrt_dk;
    const rmat d_k = d_scores.transpose() * cache.q[h] * inv_sqrt_dk;
    const rmat d_v = a.transpose() * d_z;
    g.d_heads[h].wq = cache.q_src.transpose() * d_q;
    g.d_heads[h].wk = cache.e_proj.transpose() * d_k;
    g.d_heads[h].wv = cache.e_proj.transpose() * d_v;
    g.d_q_src += d_q * params.heads[h].wq.transpose();
    g.d_e_proj += d_k * params.heads[h].wk.transpose() + d_v * params.heads[h].wv.transpose();
  }
  return g;
}

}  // namespace semkb::lmkb
