#include "pami/pipeline.hpp"

#include "pami/error.hpp"
#include "pami/init.hpp"

namespace pami {

void ModelConfig::validate() const {
  encoder.validate();
  if (encoder.out_channels() != channels)
    throw Error("bad-shape", "encoder output width must equal channels");
  if (channels < 2 || channels % attention.heads != 0)
    throw Error("bad-shape", "channels must be divisible by the head count");
  if (m_modules < 0) throw Error("invalid-count", "m_modules must be >= 0");
  if (gate_hidden < 1) throw Error("invalid-count", "gate_hidden must be >= 1");
}

template <typename T>
PipelineParams<T> PipelineParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  PipelineParams p;
  p.config = config;
  Rng enc_rng(mix_seed(seed, 1)), thr_rng(mix_seed(seed, 2));
  p.encoder = EncoderParams<T>::init(config.encoder, enc_rng);
  p.threshold = ThresholdParams<T>::init(config.channels, thr_rng);
  const int stored = config.share_prd_weights ? std::min(config.m_modules, 1) : config.m_modules;
  for (int i = 0; i < stored; ++i) {
    Rng rng(mix_seed(seed, 100 + static_cast<std::uint64_t>(i)));
    p.prd.push_back(PRDModuleParams<T>::init(config.channels, config.attention, config.gate_hidden, rng));
  }
  return p;
}

template <typename T>
std::vector<PRDModuleParams<T>> PipelineParams<T>::module_sequence() const {
  if (!config.share_prd_weights) return prd;
  return std::vector<PRDModuleParams<T>>(static_cast<std::size_t>(config.m_modules), prd.front());
}

template <typename T>
std::vector<std::pair<std::string, ad::Tensor<T>>> PipelineParams<T>::named_tensors() {
  std::vector<std::pair<std::string, ad::Tensor<T>>> out;
  visit([&](const std::string& name, ad::Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::size_t PipelineParams<T>::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, ad::Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
void PipelineParams<T>::zero_grad() {
  visit([](const std::string&, ad::Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
template <typename U>
PipelineParams<U> PipelineParams<T>::cast() const {
  // Build a same-shaped target, then copy values by visiting both in the
  // same order.
  PipelineParams<U> out = PipelineParams<U>::init(config, 0);
  auto src = const_cast<PipelineParams*>(this)->named_tensors();
  std::size_t i = 0;
  out.visit([&](const std::string&, ad::Tensor<U>& t) { t = cast_param<U>(src[i++].second); });
  return out;
}

template <typename T>
ForwardResult<T> forward_features(const PipelineParams<T>& params, const ad::Tensor<T>& fm_s,
                                  const ad::Tensor<T>& fm_q, const Mask& support_mask,
                                  const RegionMaskSet& regions, const ForwardConfig& cfg,
                                  const ProbeFn<T>& probe) {
  if (fm_s.rank() != 3 || fm_q.rank() != 3 || fm_s.dim(0) != fm_q.dim(0))
    throw Error("bad-shape", "feature maps " + ad::shape_str(fm_s.shape()) + " / " +
                                 ad::shape_str(fm_q.shape()));
  if (fm_s.dim(0) != params.config.channels)
    throw Error("bad-shape", "feature channels do not match the model width");
  const int height = support_mask.height, width = support_mask.width;
  const T alpha = static_cast<T>(cfg.ap.alpha);

  // Regional branch at mask resolution.
  const auto fs_up = upsample_features(fm_s, height, width);
  const auto regional = regional_prototypes(fs_up, regions);

  // Coarse query prototype branch.
  std::vector<T> fg(support_mask.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = support_mask.data[i] ? T(1) : T(0);
  const auto support_proto = masked_average_pool(fs_up, ad::Tensor<T>({height, width}, std::move(fg)));
  const auto coarse = qpg(fm_q, support_proto, params.threshold, alpha);
  const auto enhanced = enhance_prototypes(regional, coarse.prototype);
  if (probe) {
    probe("regional", regional);
    probe("coarse_query", coarse.prototype);
    probe("enhanced", enhanced);
  }

  ad::Tensor<T> ps = enhanced, pq = coarse.prototype;
  if (params.config.m_modules > 0) {
    const auto modules = params.module_sequence();
    PrOutput<T> state{ps, pq};
    for (std::size_t i = 0; i < modules.size(); ++i) {
      state = prd_module(state.support, state.query, fm_q, modules[i], params.threshold, alpha);
      if (probe) {
        probe("prd." + std::to_string(i) + ".support", state.support);
        probe("prd." + std::to_string(i) + ".query", state.query);
      }
    }
    ps = state.support;
    pq = state.query;
  }

  ForwardResult<T> out;
  out.prediction = assembled_prediction(fm_q, ps, pq, params.threshold, cfg.ap, height, width);
  out.support_prototypes = ps;
  out.query_prototype = pq;
  out.query_features = fm_q;
  return out;
}

template <typename T>
ForwardResult<T> forward_images(const PipelineParams<T>& params, const Image2D& support,
                                const Mask& support_mask, const Image2D& query,
                                const ForwardConfig& cfg, std::uint64_t partition_seed,
                                const ProbeFn<T>& probe) {
  if (!support.same_shape(query) || support.height != support_mask.height ||
      support.width != support_mask.width)
    throw Error("bad-shape", "support, mask and query must share one shape");
  const auto regions = partition_foreground(support_mask, cfg.n_f, partition_seed);
  const auto fm_s = encode(support, params.encoder);
  const auto fm_q = encode(query, params.encoder);
  return forward_features(params, fm_s, fm_q, support_mask, regions, cfg, probe);
}

template struct PipelineParams<float>;
template struct PipelineParams<double>;
template PipelineParams<double> PipelineParams<float>::cast<double>() const;
template PipelineParams<float> PipelineParams<double>::cast<float>() const;
template PipelineParams<float> PipelineParams<float>::cast<float>() const;

#define PAMI_PIPELINE(T)                                                                         \
  template ForwardResult<T> forward_features(const PipelineParams<T>&, const ad::Tensor<T>&,     \
                                             const ad::Tensor<T>&, const Mask&,                  \
                                             const RegionMaskSet&, const ForwardConfig&,         \
                                             const ProbeFn<T>&);                                 \
  template ForwardResult<T> forward_images(const PipelineParams<T>&, const Image2D&, const Mask&, \
                                           const Image2D&, const ForwardConfig&, std::uint64_t,  \
                                           const ProbeFn<T>&);

PAMI_PIPELINE(float)
PAMI_PIPELINE(double)

}  // namespace pami
