#include "pami/debias.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pami/error.hpp"
#include "pami/init.hpp"

namespace pami {

template <typename T>
AttentionParams<T> AttentionParams<T>::init(int channels, const AttentionConfig& cfg, Rng& rng) {
  if (cfg.heads < 1 || channels % cfg.heads != 0)
    throw Error("bad-shape", "channels " + std::to_string(channels) + " not divisible by " +
                                 std::to_string(cfg.heads) + " heads");
  const int c = channels, ff = cfg.ff_multiplier * channels;
  AttentionParams p;
  p.heads = cfg.heads;
  p.eps = static_cast<T>(cfg.ln_eps);
  p.wq = uniform_param<T>({c, c}, c, rng);
  p.bq = uniform_param<T>({1, c}, c, rng);
  p.wk = uniform_param<T>({c, c}, c, rng);
  p.bk = uniform_param<T>({1, c}, c, rng);
  p.wv = uniform_param<T>({c, c}, c, rng);
  p.bv = uniform_param<T>({1, c}, c, rng);
  p.wo = uniform_param<T>({c, c}, c, rng);
  p.bo = uniform_param<T>({1, c}, c, rng);
  p.w1 = uniform_param<T>({c, ff}, c, rng);
  p.b1 = uniform_param<T>({1, ff}, c, rng);
  p.w2 = uniform_param<T>({ff, c}, ff, rng);
  p.b2 = uniform_param<T>({1, c}, ff, rng);
  p.ln1_gain = constant_param<T>({1, c}, T(1));
  p.ln1_bias = constant_param<T>({1, c}, T(0));
  p.ln2_gain = constant_param<T>({1, c}, T(1));
  p.ln2_bias = constant_param<T>({1, c}, T(0));
  return p;
}

template <typename T>
MlpParams<T> MlpParams<T>::init(int in, int hidden, int out, Rng& rng) {
  MlpParams p;
  p.w1 = uniform_param<T>({in, hidden}, in, rng);
  p.b1 = uniform_param<T>({1, hidden}, in, rng);
  p.w2 = uniform_param<T>({hidden, out}, hidden, rng);
  p.b2 = uniform_param<T>({1, out}, hidden, rng);
  return p;
}

template <typename T>
ad::Tensor<T> MlpParams<T>::operator()(const ad::Tensor<T>& x) const {
  return ad::linear(ad::relu(ad::linear(x, w1, b1)), w2, b2);
}

template <typename T>
GateParams<T> GateParams<T>::init(int hidden, Rng& rng) {
  GateParams p;
  p.inter = MlpParams<T>::init(2, hidden, 1, rng);
  p.intra = MlpParams<T>::init(2, hidden, 1, rng);
  return p;
}

template <typename T>
PRDModuleParams<T> PRDModuleParams<T>::init(int channels, const AttentionConfig& cfg,
                                            int gate_hidden, Rng& rng) {
  PRDModuleParams p;
  p.ms_reconstruct = AttentionParams<T>::init(channels, cfg, rng);
  p.ms_alpha = AttentionParams<T>::init(channels, cfg, rng);
  p.ms_beta = AttentionParams<T>::init(channels, cfg, rng);
  p.gate = GateParams<T>::init(gate_hidden, rng);
  p.id_encode = AttentionParams<T>::init(channels, cfg, rng);
  p.id_mix_gain = constant_param<T>({1, channels}, T(1));
  p.id_mix_bias = constant_param<T>({1, channels}, T(0));
  p.id_cross = AttentionParams<T>::init(channels, cfg, rng);
  p.fuse_pair = MlpParams<T>::init(2 * channels, channels, channels, rng);
  p.fuse_triple = MlpParams<T>::init(3 * channels, channels, channels, rng);
  p.pr_fuse = AttentionParams<T>::init(channels, cfg, rng);
  return p;
}

namespace {

template <typename T>
void require_set(const ad::Tensor<T>& ps, const char* what) {
  if (!ps.defined() || ps.rank() != 2) throw Error("bad-shape", std::string(what) + " must be [N×C]");
  if (ps.dim(0) == 0) throw Error("empty-set", std::string(what) + " has no prototypes");
}

}  // namespace

template <typename T>
ad::Tensor<T> multi_head_attention(const ad::Tensor<T>& query, const ad::Tensor<T>& key_value,
                                   const AttentionParams<T>& params) {
  const int c = query.dim(1);
  if (key_value.dim(1) != c || c % params.heads != 0)
    throw Error("bad-shape", "attention widths " + ad::shape_str(query.shape()) + " / " +
                                 ad::shape_str(key_value.shape()));
  const int dh = c / params.heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const auto q = ad::linear(query, params.wq, params.bq);
  const auto k = ad::linear(key_value, params.wk, params.bk);
  const auto v = ad::linear(key_value, params.wv, params.bv);
  std::vector<ad::Tensor<T>> heads;
  heads.reserve(static_cast<std::size_t>(params.heads));
  for (int h = 0; h < params.heads; ++h) {
    const auto qh = ad::slice_cols(q, h * dh, dh);
    const auto kh = ad::slice_cols(k, h * dh, dh);
    const auto vh = ad::slice_cols(v, h * dh, dh);
    const auto attn = ad::softmax_rows(ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt));
    heads.push_back(ad::matmul(attn, vh));
  }
  const auto merged = params.heads == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::linear(merged, params.wo, params.bo);
}

template <typename T>
ad::Tensor<T> transformer_layer(const ad::Tensor<T>& query, const ad::Tensor<T>& key_value,
                                const AttentionParams<T>& params) {
  require_set(query, "attention query");
  require_set(key_value, "attention keys");
  const auto attended = ad::layer_norm(ad::add(multi_head_attention(query, key_value, params), query),
                                       params.ln1_gain, params.ln1_bias, params.eps);
  const auto ff = ad::linear(ad::relu(ad::linear(attended, params.w1, params.b1)), params.w2, params.b2);
  return ad::layer_norm(ad::add(ff, attended), params.ln2_gain, params.ln2_bias, params.eps);
}

template <typename T>
ad::Tensor<T> transformer_encode(const ad::Tensor<T>& ps, const AttentionParams<T>& params) {
  return transformer_layer(ps, ps, params);
}

template <typename T>
MsOutput<T> ms_block(const ad::Tensor<T>& ps, const PRDModuleParams<T>& params) {
  require_set(ps, "ms_block input");
  const int c = ps.dim(1);
  const auto pr = transformer_encode(ps, params.ms_reconstruct);

  // Inter-prototype: one gate per prototype, broadcast over channels.
  const auto inter_in = ad::concat_cols<T>({ad::mean_cols(pr), ad::max_cols(pr)});
  auto inter_gate = ad::sigmoid(params.gate.inter(inter_in));
  const auto alpha = transformer_encode(ad::mul_colvec(pr, inter_gate), params.ms_alpha);

  // Intra-prototype: one gate per channel, broadcast over prototypes.
  const auto intra_in = ad::concat_cols<T>({ad::transpose(ad::mean_rows(pr)), ad::transpose(ad::max_rows(pr))});
  auto intra_gate = ad::reshape(ad::sigmoid(params.gate.intra(intra_in)), {1, c});
  const auto beta = transformer_encode(ad::mul_rowvec(pr, intra_gate), params.ms_beta);

  return {alpha, beta, std::move(inter_gate), std::move(intra_gate)};
}

template <typename T>
std::vector<T> self_select(std::span<const T> affinity) {
  if (affinity.empty()) throw Error("empty-set", "affinity vector is empty");
  T lo = affinity[0], sum = 0;
  for (T a : affinity) {
    lo = std::min(lo, a);
    sum += a;
  }
  const T xi = (lo + sum / static_cast<T>(affinity.size())) / T(2);
  std::vector<T> out(affinity.size());
  for (std::size_t i = 0; i < affinity.size(); ++i)
    out[i] = affinity[i] >= xi ? T(0) : -std::numeric_limits<T>::infinity();
  // Rounding in the mean can push xi a hair above max(a) when all entries
  // are equal; the largest entry is always kept.
  const auto top = std::max_element(affinity.begin(), affinity.end()) - affinity.begin();
  out[static_cast<std::size_t>(top)] = T(0);
  return out;
}

template <typename T>
IdOutput<T> id_block(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq,
                     const PRDModuleParams<T>& params) {
  require_set(ps, "id_block input");
  const int n = ps.dim(0), c = ps.dim(1);
  if (static_cast<int>(pq.numel()) != c)
    throw Error("bad-shape", "query prototype " + ad::shape_str(pq.shape()) + " vs " +
                                 ad::shape_str(ps.shape()));
  const auto pq_row = ad::reshape(pq, {1, c});
  const auto pr = transformer_encode(ps, params.id_encode);
  const auto affinity = ad::matmul(pr, pq_row, false, true);  // [N×1]
  const auto selection = self_select<T>(affinity.values());
  const auto logits = ad::add(affinity, ad::Tensor<T>({n, 1}, selection));
  auto weights = ad::reshape(ad::softmax_rows(ad::reshape(logits, {1, n})), {n, 1});
  const auto pr_q = ad::matmul(weights, ad::mean_rows(pr));  // [N×C]
  const auto pr_prime = ad::add_rowvec(pr, pq_row);
  const auto mixed = ad::layer_norm(ad::add(pr_q, pr_prime), params.id_mix_gain,
                                    params.id_mix_bias, params.id_cross.eps);
  return {transformer_layer(mixed, pr_prime, params.id_cross), std::move(weights)};
}

template <typename T>
PrOutput<T> pr_block(const ad::Tensor<T>& pa, const ad::Tensor<T>& pb, const ad::Tensor<T>& pg,
                     const ad::Tensor<T>& fm_q, const PRDModuleParams<T>& params,
                     const ThresholdParams<T>& threshold, T alpha) {
  require_set(pa, "pr_block input");
  if (pa.shape() != pb.shape() || pa.shape() != pg.shape())
    throw Error("bad-shape", "pr_block inputs " + ad::shape_str(pa.shape()) + ", " +
                                 ad::shape_str(pb.shape()) + ", " + ad::shape_str(pg.shape()));
  const auto fused_pair = params.fuse_pair(ad::concat_cols<T>({pa, pb}));
  const auto fused_triple = params.fuse_triple(ad::concat_cols<T>({pa, pb, pg}));
  const auto pf = transformer_encode(ad::add(fused_pair, fused_triple), params.pr_fuse);
  auto pq = qpg(fm_q, ad::mean_rows(pf), threshold, alpha).prototype;
  auto ps = ad::add_rowvec(pf, pq);
  return {std::move(ps), std::move(pq)};
}

template <typename T>
PrOutput<T> prd_module(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq, const ad::Tensor<T>& fm_q,
                       const PRDModuleParams<T>& params, const ThresholdParams<T>& threshold,
                       T alpha) {
  const auto ms = ms_block(ps, params);
  const auto id = id_block(ps, pq, params);
  return pr_block(ms.alpha, ms.beta, id.gamma, fm_q, params, threshold, alpha);
}

template <typename T>
PrOutput<T> stacked_prd(const ad::Tensor<T>& ps0, const ad::Tensor<T>& pq0,
                        const ad::Tensor<T>& fm_q, std::span<const PRDModuleParams<T>> modules,
                        const ThresholdParams<T>& threshold, T alpha) {
  if (modules.empty()) throw Error("no-modules", "stacked_prd needs at least one module");
  PrOutput<T> state{ps0, pq0};
  for (const auto& m : modules) state = prd_module(state.support, state.query, fm_q, m, threshold, alpha);
  return state;
}

#define PAMI_DEBIAS(T)                                                                           \
  template struct AttentionParams<T>;                                                            \
  template struct MlpParams<T>;                                                                  \
  template struct GateParams<T>;                                                                 \
  template struct PRDModuleParams<T>;                                                            \
  template ad::Tensor<T> multi_head_attention(const ad::Tensor<T>&, const ad::Tensor<T>&,        \
                                              const AttentionParams<T>&);                        \
  template ad::Tensor<T> transformer_layer(const ad::Tensor<T>&, const ad::Tensor<T>&,           \
                                           const AttentionParams<T>&);                           \
  template ad::Tensor<T> transformer_encode(const ad::Tensor<T>&, const AttentionParams<T>&);    \
  template MsOutput<T> ms_block(const ad::Tensor<T>&, const PRDModuleParams<T>&);                \
  template std::vector<T> self_select(std::span<const T>);                                       \
  template IdOutput<T> id_block(const ad::Tensor<T>&, const ad::Tensor<T>&,                      \
                                const PRDModuleParams<T>&);                                      \
  template PrOutput<T> pr_block(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, \
                                const ad::Tensor<T>&, const PRDModuleParams<T>&,                 \
                                const ThresholdParams<T>&, T);                                   \
  template PrOutput<T> prd_module(const ad::Tensor<T>&, const ad::Tensor<T>&,                    \
                                  const ad::Tensor<T>&, const PRDModuleParams<T>&,               \
                                  const ThresholdParams<T>&, T);                                 \
  template PrOutput<T> stacked_prd(const ad::Tensor<T>&, const ad::Tensor<T>&,                   \
                                   const ad::Tensor<T>&, std::span<const PRDModuleParams<T>>,    \
                                   const ThresholdParams<T>&, T);

PAMI_DEBIAS(float)
PAMI_DEBIAS(double)

}  // namespace pami
