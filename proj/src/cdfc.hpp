#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "lmkb.hpp"
#include "mimo.hpp"
#include "sdg.hpp"

namespace semkb::cdfc {

// Text codec around the MIMO link. The encoder (alpha) is an embedding-bag
// mean followed by a two-layer tanh perceptron with no bias terms, which makes
// it an odd map: sign-flipped embeddings encode to sign-flipped features, so a
// caption made of anti-tokens lands at cosine -1 from its source and the
// similarity filter can reject it from the raw geometry alone. The decoder
// (beta) is a two-layer affine perceptron whose output is scored against
// gallery prototype rows by dot product under a learned log-temperature.
// The embedding table is frozen; trainables are w1, w2, v1, b1, v2, b2,
// log_temp.
struct JsccCodec {
  lmkb::EmbeddingTable table;

  rmat w1;  // [d_hidden, d_emb]   encoder layer 1 (bias-free)
  rmat w2;  // [n_feat, d_hidden]  encoder layer 2 (bias-free)

  rmat v1;  // [d_hidden, n_feat]  decoder layer 1
  rvec b1;
  rmat v2;  // [d_proto, d_hidden] decoder layer 2
  rvec b2;
  double log_temp = 0.0;

  int d_emb() const { return static_cast<int>(w1.cols()); }
  int d_hidden() const { return static_cast<int>(w1.rows()); }
  int n_feat() const { return static_cast<int>(w2.rows()); }
  int d_proto() const { return static_cast<int>(v2.rows()); }
};

// n_feat must be even (features travel as complex symbol pairs)
JsccCodec make_codec(const lmkb::EmbeddingTable& table, int d_hidden, int n_feat, int d_proto,
                     std::uint64_t seed);

// mean embedding of a non-empty token sequence
rvec embed_bag(const lmkb::TokenSeq& tokens, const lmkb::EmbeddingTable& table);

rvec encode(const lmkb::TokenSeq& tokens, const JsccCodec& codec);

// a.b / (|a||b|), clamped into [-1, 1]; zero-norm input -> metric error
double cosine_sim(const rvec& a, const rvec& b);

struct FeaturePair {
  rvec t_i;
  rvec t_a;
  double sim = 1.0;
};

struct FilterConfig {
  double gamma = 0.5;   // cosine acceptance threshold, in [-1, 1]
  int max_retries = 5;  // regenerations after the first attempt
};

// generation settings used by the filter loop
struct GenSettings {
  std::string instruction = "Rewrite the caption";
  double tau = 1.0;
  int max_len = 32;
};

struct FilterResult {
  FeaturePair pair;
  lmkb::TokenSeq tokens_a;   // accepted tokens; source tokens on fallback
  std::vector<double> sims;  // cosine per generation attempt
  int attempts = 0;          // generation calls consumed, <= max_retries + 1
  bool fallback = false;     // no candidate exceeded gamma; t_a := t_i
};

// Generate-encode-compare loop: accept the first candidate whose cosine with
// t_i strictly exceeds gamma; after max_retries + 1 attempts fall back to the
// source feature so fusion degenerates to the identity. Attempts that throw
// from the backend count against the budget; if no attempt produced any
// candidate at all, the last backend failure is rethrown as a generation
// error.
FilterResult filter(const rvec& t_i, const std::string& source, lmkb::TextBackend& backend,
                    const lmkb::Vocab& vocab, const JsccCodec& codec, const FilterConfig& cfg,
                    const GenSettings& gen, std::uint64_t seed);

// theta_a is stored as the exact complement 1 - theta_i, so affine fusion can
// reproduce equal inputs bitwise.
struct FusionWeights {
  double theta_i = 0.5;
  double theta_a = 0.5;
  double eta_i = 0.0;  // pooled raw gradient means (no rectification)
  double eta_a = 0.0;
};

// Two-way softmax over pooled gradient means. The gap is saturated at +/-36
// so both weights stay strictly inside (0, 1) in double precision; theta_a is
// the exact complement of theta_i.
FusionWeights pooled_softmax(double eta_i, double eta_a);

// Task-loss gradients of each feature fed directly through the decoder
// (read-only; the codec is untouched), mean-pooled over components, then the
// two-way softmax above.
FusionWeights importance_weights(const rvec& t_i, const rvec& t_a, const JsccCodec& codec,
                                 const rmat& gallery, int label);

// cross: z = theta_a*t_i + theta_i*t_a (each domain scaled by the other's
// weight); matched: z = theta_i*t_i + theta_a*t_a. Either way the pair of
// coefficients is (c, 1-c), computed as t_a + c*(t_i - t_a) so that equal
// inputs fuse to themselves exactly.
enum class Pairing { cross, matched };

rvec fuse(const rvec& t_i, const rvec& t_a, const FusionWeights& w, Pairing pairing = Pairing::cross);

// gallery [n_items, d_proto] -> logits [n_items]: exp(log_temp) * gallery * g
rvec decode(const rvec& y_hat, const JsccCodec& codec, const rmat& gallery);

// -log softmax(logits)[label]
double task_loss(const rvec& logits, int label);

// gradients of task_loss(decode(y_hat), label) w.r.t. the decoder parameters
// and the decoder input
struct DecoderGrads {
  rmat v1;
  rvec b1;
  rmat v2;
  rvec b2;
  double log_temp = 0.0;
  rvec input;  // d task_loss / d y_hat
};

double decoder_loss_and_grads(const rvec& y_hat, const JsccCodec& codec, const rmat& gallery,
                              int label, DecoderGrads* grads);

// One fading block: the transmitter precodes with v_tx columns (derived from
// predicted CSI, optionally rate-limited by feedback quantization), the true
// channel h_true applies, and the receiver projects onto its own u_rx/sigma_rx
// estimate.
struct ChannelSlot {
  cmat h_true;    // [n_r, n_t]
  cmat v_tx;      // [n_t, d]
  cmat u_rx;      // [n_r, d]
  rvec sigma_rx;  // [d] equalizer scale
};

// SVD of h_precode supplies the precoder/detector; feedback_bits >= 0
// quantizes the transmitter's copy of V_d (the receiver keeps full precision).
ChannelSlot make_slot(const cmat& h_true, const cmat& h_precode, int d,
                      std::int64_t feedback_bits = -1);

struct ChannelContext {
  std::vector<ChannelSlot> slots;
  bool equalize = true;
  double snr_db = std::numeric_limits<double>::infinity();
  std::uint64_t noise_seed = 0;

  void validate() const;
};

// One feature transmission: pack z into complex pairs, stream in blocks of d
// symbols through slot `slot`, detect, unpack. `salt` isolates the noise draws
// of distinct transmissions. `a` keeps the effective per-use symbol map for
// the backward pass.
struct ChannelPass {
  rvec z_hat;
  cmat a;      // [d, d] effective map, shared by every use in the slot
  int n_sym = 0;
  int d = 0;
};

ChannelPass channel_forward(const rvec& z, const ChannelContext& ctx, std::size_t slot,
                            std::uint64_t salt);

// Gradient w.r.t. the transmitted features; additive noise is treated as a
// constant (its power tracks the instantaneous transmit power, but that path
// carries no useful learning signal and is deliberately cut).
rvec channel_backward(const rvec& g_z_hat, const ChannelPass& pass);

struct TrainSample {
  std::string text;
  lmkb::TokenSeq tokens;
  int label = 0;
};

struct SampleGrads {
  rmat w1, w2, v1, v2;
  rvec b1, b2;
  double log_temp = 0.0;
};

// Loss and parameter gradients for one sample pushed through the channel at
// `slot`. tokens_a == nullptr transmits the source feature alone and runs a
// single encoder backward — the exact path shared by the disable-sdg ablation
// and the filter fallback, which keeps their trajectories bitwise identical.
// Otherwise the features are fused under the caller-supplied weights (treated
// as constants, as in gradient-weighting practice).
double sample_loss_and_grads(const lmkb::TokenSeq& tokens_i, const lmkb::TokenSeq* tokens_a,
                             const FusionWeights* w, Pairing pairing, int label,
                             const JsccCodec& codec, const ChannelContext& ctx, std::size_t slot,
                             std::uint64_t salt, const rmat& gallery, SampleGrads* grads);

struct StepConfig {
  double lr = 0.05;
  FilterConfig filter;
  GenSettings gen;
  Pairing pairing = Pairing::cross;
  bool disable_sdg = false;  // bypass generation/fusion entirely
};

struct StepMetrics {
  double loss = 0.0;  // batch-mean task loss
  int accepted = 0;
  int fallbacks = 0;
  int generation_calls = 0;
};

// One SGD step over the batch: per sample encode -> filter -> weight -> fuse
// -> transmit -> decode -> loss; batch-mean gradients applied once at the end.
// Channel slots advance with (step, sample index); generation and noise seeds
// are derived from independent named streams so ablations that skip generation
// see identical channel noise.
StepMetrics train_step(const std::vector<TrainSample>& batch, JsccCodec& codec,
                       const ChannelContext& ctx, lmkb::TextBackend* backend,
                       const lmkb::Vocab& vocab, const rmat& gallery, const StepConfig& cfg,
                       std::uint64_t seed, std::uint64_t step);

// Inference transmits the source feature only — no generation, no fusion.
// Returns gallery indices ranked by descending logit, ties to the lower index.
std::vector<int> infer(const lmkb::TokenSeq& tokens, const JsccCodec& codec,
                       const ChannelContext& ctx, const rmat& gallery, std::size_t slot,
                       std::uint64_t salt);

}  // namespace semkb::cdfc
