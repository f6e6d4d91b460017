#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "csi.hpp"
#include "lmkb.hpp"
#include "mimo.hpp"

namespace semkb::cdg {

struct CdgDims {
  int t_his = 16;
  int t_pre = 4;
  int l_patch = 8;
  int stride = 2;
  int d_e = 16;  // patch-embedding width; also the projected word-table width
};

struct CdgConfig {
  CdgDims dims;
  int heads = 2;
  int d_k = 8;
  int l_depth = 2;
  int max_seq = 64;
  int epochs = 200;
  double lr = 0.05;
  double lambda = 1.0;
  std::uint64_t seed = 0;
};

// CSI-prediction model: patch embedding -> cross-attention alignment against
// the projected word table -> frozen backbone -> vocabulary head, with a
// linear reconstruction head reading the final position. The word table is a
// frozen copy; only w_emb, alignment, w_out, w_linear train.
struct CdgModel {
  CdgDims dims;
  int max_seq = 64;
  rmat w_emb;                       // [L_patch, d_E]
  lmkb::AlignmentParams alignment;  // w_proj [d_llm, d_E], per-head wq/wk/wv, w_mix
  std::unique_ptr<lmkb::ToyTransformer> backbone;  // width d_E, frozen
  rmat w_out;                       // [d_E, |V|]
  rmat w_linear;                    // [|V|, T_pre]
  lmkb::EmbeddingTable table;       // frozen word embeddings [|V|, d_llm]

  int vocab_size() const { return table.vocab_size(); }
};

CdgModel make_cdg_model(const CdgConfig& cfg, const lmkb::EmbeddingTable& table);

// per component row: [N_patch, L_patch] * w_emb -> [N_patch, d_E]
std::vector<rmat> csi_embed(const csi::PatchSet& p, const rmat& w_emb);

// one row's embeddings attended against the projected word table
rmat align(const rmat& e, const CdgModel& model, const lmkb::EmbeddingTable& table);

// full prediction chain; output trace continues his's time indexing.
// Mutates backbone caches: callers own synchronization per model instance.
mimo::ChannelTrace predict(const mimo::ChannelTrace& his, CdgModel& model);

struct TargetTokens {
  std::vector<lmkb::TokenSeq> rows;  // one id sequence per component row
  std::string derivation_tag = "nearest-vocab";
};

// nearest-vocab quantization: each patch embedding is assigned the id of the
// most-cosine-similar row of the projected word table (ties to the lower id)
TargetTokens derive_target_tokens(const mimo::ChannelTrace& trace, const CdgModel& model);

// summed next-token cross-entropy: pred row i scored against targets[i + 1]
double ce_loss(const rmat& pred_dists, const lmkb::TokenSeq& targets);

// ||pred - truth||_F^2 / ||truth||_F^2, pooled over the whole horizon
double nmse_loss(const mimo::ChannelTrace& pred, const mimo::ChannelTrace& truth);

double total_loss(double ce, double nmse, double lambda);

struct CdgGrads {
  rmat w_emb;
  rmat w_proj;
  std::vector<lmkb::HeadParams> heads;
  rmat w_mix;
  rmat w_out;
  rmat w_linear;
};

struct CdgLosses {
  double ce = 0.0;
  double nmse = 0.0;
  double total = 0.0;
};

// loss (and, when grads is non-null, analytic gradients of every trainable
// matrix) for one (history, future) pair with fixed targets
CdgLosses cdg_loss_and_grads(CdgModel& model, const mimo::ChannelTrace& his,
                             const mimo::ChannelTrace& future, double lambda,
                             const TargetTokens& targets, CdgGrads* grads);

using TracePair = std::pair<mimo::ChannelTrace, mimo::ChannelTrace>;

// chops a long trace into (history, future) windows every `hop` steps
std::vector<TracePair> windowed_pairs(const mimo::ChannelTrace& trace, int t_his, int t_pre,
                                      int hop);

struct EpochLoss {
  double total = 0.0;
  double ce = 0.0;
  double nmse = 0.0;
};

struct TrainResult {
  CdgModel model;
  std::vector<EpochLoss> history;
};

// SGD over (w_emb, alignment, w_out, w_linear); backbone and word table stay
// frozen. Targets are re-derived from the current model at each epoch start
// and treated as constants within the epoch.
TrainResult train_cdg(const std::vector<TracePair>& dataset, const lmkb::EmbeddingTable& table,
                      const CdgConfig& cfg);

// versioned binary checkpoint ("CDG1" header, shape-prefixed f32 arrays)
void save_checkpoint(const CdgModel& model, const std::string& path);
CdgModel load_checkpoint(const std::string& path);

}  // namespace semkb::cdg
