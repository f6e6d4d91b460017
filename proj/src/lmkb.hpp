#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace semkb::lmkb {

using TokenSeq = std::vector<int>;

// Token vocabulary for the text path. CSI tokens need only an id range and an
// embedding table, so the CDG path never touches token strings.
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;
  int unk_id = -1;
  int end_id = -1;

  int size() const { return static_cast<int>(tokens.size()); }
  int id_of(const std::string& word) const;      // OOV -> unk_id
  const std::string& word(int id) const;         // out of range -> vocab error

  // words plus the <unk> / <end> specials appended at the tail
  static Vocab from_words(const std::vector<std::string>& words);
};

struct EmbeddingTable {
  rmat e_word;  // [|V|, d_llm]

  int vocab_size() const { return static_cast<int>(e_word.rows()); }
  int dim() const { return static_cast<int>(e_word.cols()); }

  static EmbeddingTable random(int vocab, int dim, std::uint64_t seed);
};

// row i of the result = table row ids[i]
rmat embed_tokens(const TokenSeq& ids, const EmbeddingTable& table);

// E'_word = E_word * w_proj
rmat project_vocab(const EmbeddingTable& table, const rmat& w_proj);

// row-wise softmax of h * w_out
rmat output_head(const rmat& h, const rmat& w_out);

// gradient of a scalar loss through output_head: given dL/dP (and the cached
// probabilities P), accumulates dL/dh and dL/dw_out
void output_head_backward(const rmat& d_probs, const rmat& probs, const rmat& h,
                          const rmat& w_out, rmat* d_h, rmat* d_w_out);

// draws from softmax(logits / tau); tau = 0 is the greedy-argmax sentinel
int sample_with_temperature(const rvec& logits, double tau, std::uint64_t seed);

struct BackboneConfig {
  int l_depth = 2;
  int d_llm = 32;
  int heads = 2;
  int d_head = 0;  // 0 = d_llm / heads
  int max_seq = 64;
  std::uint64_t seed = 0;
};

struct ParamView {
  std::string name;
  rmat* value;
  rmat* grad;
};

// Numeric backbone interface: forward over a batch of equal-length sequences
// packed as [batch * len, d], plus the backward pass CDG training needs to
// push gradients through a frozen backbone.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual rmat forward(const rmat& x, int batch = 1) = 0;
  virtual rmat backward(const rmat& grad_out) = 0;  // returns input gradients
  virtual void zero_grads() {}
  virtual void sgd_step(double /*lr*/) {}
  virtual std::vector<ParamView> param_views() { return {}; }
  virtual int width() const = 0;
  virtual int max_seq_len() const = 0;
};

// Pre-LN causal transformer stack with hand-written backprop. l_depth = 0 is
// the identity map. tanh MLP activation keeps finite-difference checks clean.
class ToyTransformer : public Backbone {
 public:
  explicit ToyTransformer(const BackboneConfig& cfg);

  rmat forward(const rmat& x, int batch = 1) override;
  rmat backward(const rmat& grad_out) override;
  void zero_grads() override;
  void sgd_step(double lr) override;
  std::vector<ParamView> param_views() override;

  int width() const override { return cfg_.d_llm; }
  int max_seq_len() const override { return cfg_.max_seq; }
  const BackboneConfig& config() const { return cfg_; }

 private:
  struct LayerParams {
    rmat ln1_g, ln1_b;
    rmat wq, wk, wv, wo;
    rmat ln2_g, ln2_b;
    rmat w1, b1, w2, b2;
  };
  struct LayerCache {
    rmat x_in;
    rmat ln1_xhat, a;
    rvec ln1_inv_std;
    rmat q, k, v;
    std::vector<rmat> attn;  // per (sequence, head) [len, len]
    rmat z_concat, x_mid;
    rmat ln2_xhat, b_out;
    rvec ln2_inv_std;
    rmat mlp_h;
  };

  BackboneConfig cfg_;
  int d_hidden_;
  std::vector<LayerParams> layers_;
  std::vector<LayerParams> grads_;

  bool cache_valid_ = false;
  int cache_batch_ = 0, cache_len_ = 0;
  std::vector<LayerCache> cache_;
};

// Identity-times-scale stand-in used by tests that need a backbone with no
// learned transform in the way.
class DeterministicMockBackbone : public Backbone {
 public:
  DeterministicMockBackbone(int width, int max_seq, double scale = 1.0)
      : width_(width), max_seq_(max_seq), scale_(scale) {}

  rmat forward(const rmat& x, int batch = 1) override;
  rmat backward(const rmat& grad_out) override;
  int width() const override { return width_; }
  int max_seq_len() const override { return max_seq_; }

 private:
  int width_, max_seq_;
  double scale_;
  bool saw_forward_ = false;
};

struct HeadParams {
  rmat wq;  // [d_E, d_k]
  rmat wk;  // [d_hat, d_k]
  rmat wv;  // [d_hat, d_k]
};

struct AlignmentParams {
  rmat w_proj;                // [d_llm, d_hat]
  std::vector<HeadParams> heads;
  rmat w_mix;                 // [heads * d_k, d_out]

  int d_k() const { return heads.empty() ? 0 : static_cast<int>(heads.front().wq.cols()); }
  static AlignmentParams random(int d_llm, int d_hat, int d_e, int heads, int d_k,
                                std::uint64_t seed);
};

struct CrossAttnCache {
  rmat q_src, e_proj;
  std::vector<rmat> q, k, v, attn;  // per head
  rmat concat;
};

// Multi-head cross-attention: queries from CSI-patch embeddings, keys/values
// from the projected word-embedding table; heads concatenated then mixed.
rmat cross_attention(const rmat& q_src, const rmat& e_proj, const AlignmentParams& params,
                     CrossAttnCache* cache = nullptr);

struct CrossAttnGrads {
  rmat d_q_src;
  rmat d_e_proj;
  std::vector<HeadParams> d_heads;
  rmat d_w_mix;
};

CrossAttnGrads cross_attention_backward(const rmat& grad_out, const CrossAttnCache& cache,
                                        const AlignmentParams& params);

// Text-generation backend interface (one-shot text in, text out).
class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string generate_text(const std::string& prompt, double temperature,
                                    int max_tokens, std::uint64_t seed) = 0;
  virtual const char* tag() const = 0;
};

// HTTP client for an external generation service. POSTs
// {"prompt", "temperature", "max_tokens", "seed"} and expects {"text"}.
class RemoteBackend : public TextBackend {
 public:
  explicit RemoteBackend(std::string base_url, double timeout_s = 10.0);
  std::string generate_text(const std::string& prompt, double temperature, int max_tokens,
                            std::uint64_t seed) override;
  const char* tag() const override { return "remote"; }

 private:
  std::string base_url_;
  double timeout_s_;
};

}  // namespace semkb::lmkb
