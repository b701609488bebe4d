#include "pami/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "pami/error.hpp"
#include "pami/io.hpp"

namespace pami {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw Error("invalid-config", "lr0 must be > 0");
  if (!(decay > 0 && decay <= 1)) throw Error("invalid-config", "decay must be in (0,1]");
  if (iterations < 1 || decay_every < 1 || n_f < 1 || channels < 1 || pseudo_k < 2)
    throw Error("invalid-count", "iteration, decay, region and channel counts must be >= 1");
  if (m_modules < 0) throw Error("invalid-count", "m_modules must be >= 0");
  if (checkpoint_every < 0) throw Error("invalid-count", "checkpoint_every must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw Error("invalid-config", "momentum must be in [0,1)");
  parse_setting(setting);
  forward().ap.validate();
}

ModelConfig TrainConfig::model() const {
  ModelConfig m;
  m.channels = channels;
  m.encoder = EncoderArch::with_channels(channels);
  m.m_modules = m_modules;
  return m;
}

ForwardConfig TrainConfig::forward() const {
  ForwardConfig f;
  f.n_f = n_f;
  f.ap.lambda = lambda;
  f.ap.alpha = alpha;
  return f;
}

SamplerConfig TrainConfig::sampler() const {
  SamplerConfig s;
  s.fold = fold;
  s.setting = parse_setting(setting);
  s.held_out_classes = held_out_classes;
  s.pseudo_k = pseudo_k;
  return s;
}

std::string TrainConfig::to_json() const {
  json j = {{"iterations", iterations}, {"lr0", lr0},
            {"decay", decay},           {"decay_every", decay_every},
            {"momentum", momentum},     {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},   {"n_f", n_f},
            {"m_modules", m_modules},   {"lambda", lambda},
            {"alpha", alpha},           {"channels", channels},
            {"seed", seed},             {"checkpoint_every", checkpoint_every},
            {"fold", fold},             {"setting", setting},
            {"held_out_classes", held_out_classes}, {"pseudo_k", pseudo_k}};
  return j.dump();
}

void TrainConfig::merge_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error("invalid-config", std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("invalid-config", "config must be a JSON object");
  static const std::vector<std::string> known = {
      "iterations", "lr0",      "decay", "decay_every", "momentum", "weight_decay", "clip_norm",
      "n_f",        "m_modules", "lambda", "alpha",     "channels", "seed",         "checkpoint_every",
      "fold",       "setting",  "held_out_classes", "pseudo_k"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error("invalid-config", "unknown config key '" + k + "'");
  try {
    iterations = j.value("iterations", iterations);
    lr0 = j.value("lr0", lr0);
    decay = j.value("decay", decay);
    decay_every = j.value("decay_every", decay_every);
    momentum = j.value("momentum", momentum);
    weight_decay = j.value("weight_decay", weight_decay);
    clip_norm = j.value("clip_norm", clip_norm);
    n_f = j.value("n_f", n_f);
    m_modules = j.value("m_modules", m_modules);
    lambda = j.value("lambda", lambda);
    alpha = j.value("alpha", alpha);
    channels = j.value("channels", channels);
    seed = j.value("seed", seed);
    checkpoint_every = j.value("checkpoint_every", checkpoint_every);
    fold = j.value("fold", fold);
    setting = j.value("setting", setting);
    held_out_classes = j.value("held_out_classes", held_out_classes);
    pseudo_k = j.value("pseudo_k", pseudo_k);
  } catch (const json::exception& e) {
    throw Error("invalid-config", std::string("config value has the wrong type: ") + e.what());
  }
}

double lr_schedule(int iter, const TrainConfig& cfg) {
  if (iter < 0) throw Error("invalid-count", "iteration must be >= 0");
  // Repeated multiplication keeps 1e-3·0.8 and 1e-3·0.8·0.8 exact in binary64.
  double lr = cfg.lr0;
  for (int k = iter / cfg.decay_every; k > 0; --k) lr *= cfg.decay;
  return lr;
}

void sgd_step(std::vector<ad::Tensor<float>>& params, std::vector<std::vector<float>>& velocity, double lr,
              double momentum, double weight_decay, const std::vector<std::string>* names) {
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].grad_mut();
    for (float x : g)
      if (!std::isfinite(x))
        throw Error("nan-grad", "non-finite gradient in " +
                                    (names ? (*names)[i] : "parameter " + std::to_string(i)));
    if (velocity[i].size() != g.size()) velocity[i].assign(g.size(), 0.0f);
  }
  const float m = static_cast<float>(momentum), l = static_cast<float>(lr), wd = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].values_mut();
    const auto g = params[i].grad();
    auto& v = velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = m * v[j] + (g[j] + wd * p[j]);
      p[j] -= l * v[j];
    }
  }
}

double clip_grad_norm(std::vector<ad::Tensor<float>>& params, double max_norm) {
  double sq = 0;
  for (auto& t : params)
    for (float x : t.grad_mut()) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& t : params)
      for (float& x : t.grad_mut()) x *= s;
  }
  return norm;
}

std::string loss_record_json(const LossRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "{\"iter\":%d,\"lr\":%.17g,\"loss\":%.17g}", r.iter, r.lr, r.loss);
  return buf;
}

namespace {

std::uint64_t init_seed(const TrainConfig& cfg) { return mix_seed(cfg.seed, 11); }
std::uint64_t sampler_seed(const TrainConfig& cfg) { return mix_seed(cfg.seed, 12); }
std::uint64_t partition_seed(const TrainConfig& cfg, int iter) {
  return mix_seed(cfg.seed, 0x100000 + static_cast<std::uint64_t>(iter));
}

std::vector<ad::Tensor<float>> param_list(PipelineParams<float>& p, std::vector<std::string>* names = nullptr) {
  std::vector<ad::Tensor<float>> out;
  p.visit([&](const std::string& n, ad::Tensor<float>& t) {
    out.push_back(t);
    if (names) names->push_back(n);
  });
  return out;
}

}  // namespace

Trainer::Trainer(const Dataset& data, TrainConfig cfg)
    : data_(&data),
      cfg_((cfg.validate(), std::move(cfg))),
      params_(PipelineParams<float>::init(cfg_.model(), init_seed(cfg_))),
      sampler_(data, cfg_.sampler(), sampler_seed(cfg_)) {}

LossRecord Trainer::step() {
  const Episode e = sampler_.next();
  const auto res = forward_images(params_, e.support, e.support_mask, e.query, cfg_.forward(),
                                  partition_seed(cfg_, iteration_));
  const auto loss = bce_loss(res.prediction.blended, e.query_mask);
  params_.zero_grad();
  loss.backward();
  std::vector<std::string> names;
  auto list = param_list(params_, &names);
  const double lr = lr_schedule(iteration_, cfg_);
  clip_grad_norm(list, cfg_.clip_norm);
  sgd_step(list, velocity_, lr, cfg_.momentum, cfg_.weight_decay, &names);
  LossRecord rec{iteration_, lr, static_cast<double>(loss.item())};
  ++iteration_;
  return rec;
}

void Trainer::run(const std::function<void(const LossRecord&)>& on_record, const std::filesystem::path& checkpoint_dir) {
  while (iteration_ < cfg_.iterations) {
    const auto rec = step();
    if (on_record) on_record(rec);
    if (!checkpoint_dir.empty() && cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "ckpt_%06d.bin", iteration_);
      save_checkpoint(checkpoint_dir / name);
    }
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Checkpoint c;
  c.iteration = iteration_;
  c.config = cfg_;
  c.sampler_state = const_cast<EpisodeSampler&>(sampler_).rng().state();
  c.episodes_drawn = sampler_.episodes_drawn();
  auto& params = const_cast<PipelineParams<float>&>(params_);
  std::size_t i = 0;
  params.visit([&](const std::string& n, ad::Tensor<float>& t) {
    c.params[n].assign(t.values().begin(), t.values().end());
    c.shapes[n] = t.shape();
    c.velocity[n] = i < velocity_.size() ? velocity_[i] : std::vector<float>(t.numel(), 0.0f);
    ++i;
  });
  write_checkpoint(path, c);
}

Trainer Trainer::resume(const Dataset& data, const std::filesystem::path& path) {
  const Checkpoint c = read_checkpoint(path);
  Trainer t(data, c.config);
  t.iteration_ = c.iteration;
  t.params_ = params_from_checkpoint(c);
  t.velocity_.clear();
  t.params_.visit([&](const std::string& n, ad::Tensor<float>& p) {
    auto it = c.velocity.find(n);
    if (it == c.velocity.end() || it->second.size() != p.numel())
      throw Error("io", "checkpoint velocity for " + n + " is missing or mis-sized");
    t.velocity_.push_back(it->second);
  });
  t.sampler_.rng().set_state(c.sampler_state);
  t.sampler_.set_episodes_drawn(c.episodes_drawn);
  return t;
}

PipelineParams<float> params_from_checkpoint(const Checkpoint& c) {
  auto p = PipelineParams<float>::init(c.config.model(), 0);
  p.visit([&](const std::string& n, ad::Tensor<float>& t) {
    auto it = c.params.find(n);
    if (it == c.params.end()) throw Error("io", "checkpoint lacks parameter " + n);
    if (it->second.size() != t.numel()) throw Error("bad-shape", "checkpoint parameter " + n + " has the wrong size");
    std::copy(it->second.begin(), it->second.end(), t.values_mut().begin());
  });
  return p;
}

// ---- evaluation ------------------------------------------------------------

Mask predict_mask(const PipelineParams<float>& params, const Episode& e, const ForwardConfig& cfg,
                  std::uint64_t partition_seed, Image2D* soft) {
  const auto res = forward_images(params, e.support, e.support_mask, e.query, cfg, partition_seed);
  const auto& blended = res.prediction.blended;
  if (soft) {
    *soft = Image2D(e.query.height, e.query.width);
    std::copy(blended.values().begin(), blended.values().end(), soft->data.begin());
  }
  return binarize(blended.values(), e.query.height, e.query.width, kBinarizeThreshold);
}

FoldScore evaluate_fold(const PipelineParams<float>& params, const Dataset& data, int fold,
                        const std::vector<int>& classes, const ForwardConfig& cfg, std::uint64_t seed,
                        const EvalHooks& hooks) {
  FoldScore out;
  out.fold = fold;
  std::vector<int> ids = classes;
  if (ids.empty())
    for (const auto& c : data.manifest.classes) ids.push_back(c.id);
  for (int k : ids) {
    ClassScore cs;
    cs.class_id = k;
    cs.name = "class_" + std::to_string(k);
    for (const auto& c : data.manifest.classes)
      if (c.id == k) cs.name = c.name;
    const auto episodes = build_eval_episodes(data, fold, k);
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      const auto& e = episodes[i];
      Image2D soft;
      const Mask pred = predict_mask(params, e, cfg, mix_seed(seed, 0x200000 + static_cast<std::uint64_t>(k) * 65536 + i),
                                     hooks.on_episode ? &soft : nullptr);
      const double d = dice_score(pred, e.query_mask);
      cs.episodes.push_back({e.episode_id, e.query_scan, e.query_slice, d});
      if (hooks.on_episode) hooks.on_episode(e, pred, soft, d);
    }
    double sum = 0;
    for (const auto& s : cs.episodes) sum += s.dsc;
    cs.mean_dsc = cs.episodes.empty() ? 0.0 : sum / static_cast<double>(cs.episodes.size());
    out.classes.push_back(std::move(cs));
  }
  double sum = 0;
  for (const auto& c : out.classes) sum += c.mean_dsc;
  out.mean_dsc = out.classes.empty() ? 0.0 : sum / static_cast<double>(out.classes.size());
  return out;
}

std::string fold_score_json(const FoldScore& s) {
  json classes = json::array();
  for (const auto& c : s.classes) {
    json eps = json::array();
    for (const auto& e : c.episodes)
      eps.push_back({{"episode", e.episode_id}, {"query_scan", e.query_scan}, {"slice", e.query_slice}, {"dsc", e.dsc}});
    classes.push_back({{"class_id", c.class_id}, {"name", c.name}, {"mean_dsc", c.mean_dsc}, {"episodes", eps}});
  }
  return json{{"fold", s.fold}, {"mean_dsc", s.mean_dsc}, {"classes", classes}}.dump(2) + "\n";
}

std::string fold_score_csv(const FoldScore& s) {
  std::ostringstream os;
  os << "fold,class_id,class,episodes,mean_dsc\n";
  char buf[64];
  for (const auto& c : s.classes) {
    std::snprintf(buf, sizeof buf, "%.6f", c.mean_dsc);
    os << s.fold << ',' << c.class_id << ',' << c.name << ',' << c.episodes.size() << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.6f", s.mean_dsc);
  os << s.fold << ",mean,mean,," << buf << '\n';
  return os.str();
}

BenchmarkResult run_benchmark(const Dataset& data, const TrainConfig& base, const std::vector<int>& folds,
                              const std::function<void(const std::string&)>& progress) {
  BenchmarkResult out;
  for (int f : folds) {
    BenchmarkFold bf;
    bf.fold = f;
    TrainConfig cfg = base;
    cfg.fold = f;
    const auto classes = cfg.held_out_classes;

    Trainer full(data, cfg);
    bf.untrained_detail = evaluate_fold(full.params(), data, f, classes, cfg.forward(), cfg.seed);
    full.run([&](const LossRecord& r) { bf.loss_log.push_back(r); });
    bf.trained_detail = evaluate_fold(full.params(), data, f, classes, cfg.forward(), cfg.seed);

    TrainConfig abl = cfg;
    abl.m_modules = 0;
    Trainer ablated(data, abl);
    ablated.run([&](const LossRecord& r) { bf.ablated_loss_log.push_back(r); });
    bf.ablated_detail = evaluate_fold(ablated.params(), data, f, classes, abl.forward(), abl.seed);

    bf.trained = bf.trained_detail.mean_dsc;
    bf.untrained = bf.untrained_detail.mean_dsc;
    bf.ablated = bf.ablated_detail.mean_dsc;
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "fold %d: trained %.4f untrained %.4f M=0 %.4f", f, bf.trained, bf.untrained,
                    bf.ablated);
      progress(buf);
    }
    out.folds.push_back(std::move(bf));
  }
  for (const auto& bf : out.folds) {
    out.trained += bf.trained;
    out.untrained += bf.untrained;
    out.ablated += bf.ablated;
  }
  if (!out.folds.empty()) {
    const double n = static_cast<double>(out.folds.size());
    out.trained /= n;
    out.untrained /= n;
    out.ablated /= n;
  }
  return out;
}

}  // namespace pami
