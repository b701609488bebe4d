#pragma once

// Prototypical representation debiasing: the self-debiasing (MS),
// interactive debiasing (ID) and regeneration (PR) blocks, and the stack of
// M such modules.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pami/protolearn.hpp"
#include "pami/rng.hpp"
#include "pami/tensor.hpp"

namespace pami {

inline constexpr int kDefaultModuleCount = 5;

struct AttentionConfig {
  int heads = 4;
  int ff_multiplier = 2;  // d_ff = ff_multiplier * C
  double ln_eps = 1e-5;
};

// One transformer encoder layer (MHA + MLP, post-norm, no positional
// encoding).
template <typename T>
struct AttentionParams {
  int heads = 4;
  T eps = T(1e-5);
  ad::Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Tensor<T> w1, b1, w2, b2;
  ad::Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  static AttentionParams init(int channels, const AttentionConfig& cfg, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".bq", bq);
    f(prefix + ".wk", wk);
    f(prefix + ".bk", bk);
    f(prefix + ".wv", wv);
    f(prefix + ".bv", bv);
    f(prefix + ".wo", wo);
    f(prefix + ".bo", bo);
    f(prefix + ".mlp.w1", w1);
    f(prefix + ".mlp.b1", b1);
    f(prefix + ".mlp.w2", w2);
    f(prefix + ".mlp.b2", b2);
    f(prefix + ".ln1.gain", ln1_gain);
    f(prefix + ".ln1.bias", ln1_bias);
    f(prefix + ".ln2.gain", ln2_gain);
    f(prefix + ".ln2.bias", ln2_bias);
  }
};

// Two-layer perceptron in -> hidden -> out with a ReLU in between.
template <typename T>
struct MlpParams {
  ad::Tensor<T> w1, b1, w2, b2;

  static MlpParams init(int in, int hidden, int out, Rng& rng);
  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

// Gating MLPs of the MS block; both map the (avg, max) pair to one logit.
template <typename T>
struct GateParams {
  MlpParams<T> inter;  // per prototype
  MlpParams<T> intra;  // per channel

  static GateParams init(int hidden, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    inter.visit(prefix + ".inter", f);
    intra.visit(prefix + ".intra", f);
  }
};

template <typename T>
struct PRDModuleParams {
  AttentionParams<T> ms_reconstruct;
  AttentionParams<T> ms_alpha;
  AttentionParams<T> ms_beta;
  GateParams<T> gate;
  AttentionParams<T> id_encode;
  ad::Tensor<T> id_mix_gain, id_mix_bias;  // LN applied to P_r^q + P_r'
  AttentionParams<T> id_cross;
  MlpParams<T> fuse_pair;    // 2C -> C
  MlpParams<T> fuse_triple;  // 3C -> C
  AttentionParams<T> pr_fuse;

  static PRDModuleParams init(int channels, const AttentionConfig& cfg, int gate_hidden, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ms_reconstruct.visit(prefix + ".ms.reconstruct", f);
    ms_alpha.visit(prefix + ".ms.alpha", f);
    ms_beta.visit(prefix + ".ms.beta", f);
    gate.visit(prefix + ".ms.gate", f);
    id_encode.visit(prefix + ".id.encode", f);
    f(prefix + ".id.mix.gain", id_mix_gain);
    f(prefix + ".id.mix.bias", id_mix_bias);
    id_cross.visit(prefix + ".id.cross", f);
    fuse_pair.visit(prefix + ".pr.fuse_pair", f);
    fuse_triple.visit(prefix + ".pr.fuse_triple", f);
    pr_fuse.visit(prefix + ".pr.encode", f);
  }
};

// Multi-head scaled dot-product attention with separate query and key/value
// inputs ([Nq×C], [Nk×C]) -> [Nq×C].
template <typename T>
ad::Tensor<T> multi_head_attention(const ad::Tensor<T>& query, const ad::Tensor<T>& key_value,
                                   const AttentionParams<T>& params);

// LN(MHA(q, kv, kv) + q) followed by LN(MLP(.) + .).
template <typename T>
ad::Tensor<T> transformer_layer(const ad::Tensor<T>& query, const ad::Tensor<T>& key_value,
                                const AttentionParams<T>& params);

// Self-attention encoder: transformer_layer(ps, ps).
template <typename T>
ad::Tensor<T> transformer_encode(const ad::Tensor<T>& ps, const AttentionParams<T>& params);

template <typename T>
struct MsOutput {
  ad::Tensor<T> alpha;  // inter-prototype path
  ad::Tensor<T> beta;   // intra-prototype path
  ad::Tensor<T> inter_gate;  // sigmoid activations [N×1]
  ad::Tensor<T> intra_gate;  // sigmoid activations [1×C]
};

template <typename T>
MsOutput<T> ms_block(const ad::Tensor<T>& ps, const PRDModuleParams<T>& params);

// 0 where a_i >= (min(a) + mean(a)) / 2, -inf elsewhere.
template <typename T>
std::vector<T> self_select(std::span<const T> affinity);

template <typename T>
struct IdOutput {
  ad::Tensor<T> gamma;    // P_γ [N×C]
  ad::Tensor<T> weights;  // softmax(A + S) [N×1]
};

template <typename T>
IdOutput<T> id_block(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq,
                     const PRDModuleParams<T>& params);

template <typename T>
struct PrOutput {
  ad::Tensor<T> support;  // P_s' [N×C]
  ad::Tensor<T> query;    // P_q' [1×C]
};

template <typename T>
PrOutput<T> pr_block(const ad::Tensor<T>& pa, const ad::Tensor<T>& pb, const ad::Tensor<T>& pg,
                     const ad::Tensor<T>& fm_q, const PRDModuleParams<T>& params,
                     const ThresholdParams<T>& threshold, T alpha);

// One full module: MS, ID and PR.
template <typename T>
PrOutput<T> prd_module(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq, const ad::Tensor<T>& fm_q,
                       const PRDModuleParams<T>& params, const ThresholdParams<T>& threshold,
                       T alpha);

// Applies the modules in order; throws "no-modules" for an empty list.
template <typename T>
PrOutput<T> stacked_prd(const ad::Tensor<T>& ps0, const ad::Tensor<T>& pq0,
                        const ad::Tensor<T>& fm_q, std::span<const PRDModuleParams<T>> modules,
                        const ThresholdParams<T>& threshold, T alpha);

}  // namespace pami
