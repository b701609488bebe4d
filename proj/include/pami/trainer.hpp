#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pami/data.hpp"
#include "pami/pipeline.hpp"

namespace pami {

struct TrainConfig {
  int iterations = 2000;
  double lr0 = 1e-3;
  double decay = 0.8;
  int decay_every = 1000;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip_norm = 10.0;  // global gradient norm; <= 0 disables
  int n_f = kDefaultRegionCount;
  int m_modules = kDefaultModuleCount;
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;
  int channels = 64;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int fold = 0;
  int setting = 2;
  std::vector<int> held_out_classes;  // empty: every class
  int pseudo_k = 8;

  void validate() const;
  ModelConfig model() const;
  ForwardConfig forward() const;
  SamplerConfig sampler() const;

  std::string to_json() const;
  // Fields present in the JSON override this config.
  void merge_json(const std::string& text);
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

double lr_schedule(int iter, const TrainConfig& cfg);

// Momentum SGD over parallel lists: v <- momentum·v + g; p <- p - lr·v.
// Throws "nan-grad" before touching anything when a gradient is not finite.
void sgd_step(std::vector<ad::Tensor<float>>& params, std::vector<std::vector<float>>& velocity, double lr,
              double momentum, double weight_decay = 0.0, const std::vector<std::string>* names = nullptr);

// Scales every gradient so the global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(std::vector<ad::Tensor<float>>& params, double max_norm);

struct LossRecord {
  int iter = 0;
  double lr = 0;
  double loss = 0;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};
std::string loss_record_json(const LossRecord& r);

class Trainer {
 public:
  Trainer(const Dataset& data, TrainConfig cfg);

  // Runs one iteration and returns its record.
  LossRecord step();
  // Runs until cfg.iterations, calling on_record after every iteration.
  void run(const std::function<void(const LossRecord&)>& on_record = {},
           const std::filesystem::path& checkpoint_dir = {});

  int iteration() const { return iteration_; }
  const TrainConfig& config() const { return cfg_; }
  PipelineParams<float>& params() { return params_; }
  EpisodeSampler& sampler() { return sampler_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores parameters, optimizer and sampler state; the dataset must be
  // the one used for training.
  static Trainer resume(const Dataset& data, const std::filesystem::path& path);

 private:
  const Dataset* data_;
  TrainConfig cfg_;
  PipelineParams<float> params_;
  std::vector<std::vector<float>> velocity_;
  EpisodeSampler sampler_;
  int iteration_ = 0;
};

// Checkpoint container: magic, header length, JSON header (iteration,
// configs, sampler state, tensor table), then little-endian float32 blobs.
struct Checkpoint {
  int iteration = 0;
  TrainConfig config;
  std::string sampler_state;
  std::uint64_t episodes_drawn = 0;
  std::map<std::string, std::vector<float>> params;
  std::map<std::string, std::vector<float>> velocity;
  std::map<std::string, std::vector<int>> shapes;
};
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Model parameters from a checkpoint.
PipelineParams<float> params_from_checkpoint(const Checkpoint& ckpt);

// ---- evaluation ------------------------------------------------------------

inline constexpr double kBinarizeThreshold = 0.5;

struct EpisodeScore {
  std::string episode_id;
  std::string query_scan;
  int query_slice = 0;
  double dsc = 0;
};

struct ClassScore {
  int class_id = 0;
  std::string name;
  double mean_dsc = 0;
  std::vector<EpisodeScore> episodes;
};

struct FoldScore {
  int fold = 0;
  std::vector<ClassScore> classes;
  double mean_dsc = 0;  // mean over classes
};

struct EvalHooks {
  // Called with every episode and its binarized prediction.
  std::function<void(const Episode&, const Mask& prediction, const Image2D& soft, double dsc)> on_episode;
};

Mask predict_mask(const PipelineParams<float>& params, const Episode& episode, const ForwardConfig& cfg,
                  std::uint64_t partition_seed, Image2D* soft = nullptr);

FoldScore evaluate_fold(const PipelineParams<float>& params, const Dataset& data, int fold,
                        const std::vector<int>& classes, const ForwardConfig& cfg, std::uint64_t seed,
                        const EvalHooks& hooks = {});

std::string fold_score_json(const FoldScore& s);
std::string fold_score_csv(const FoldScore& s);

// Train-and-evaluate comparison over folds: the configured pipeline, the
// same pipeline with untrained parameters, and an M=0 ablation.
struct BenchmarkFold {
  int fold = 0;
  double trained = 0, untrained = 0, ablated = 0;
  std::vector<LossRecord> loss_log, ablated_loss_log;
  FoldScore trained_detail, untrained_detail, ablated_detail;
};

struct BenchmarkResult {
  std::vector<BenchmarkFold> folds;
  double trained = 0, untrained = 0, ablated = 0;  // means over folds
};

BenchmarkResult run_benchmark(const Dataset& data, const TrainConfig& cfg, const std::vector<int>& folds,
                              const std::function<void(const std::string&)>& progress = {});

}  // namespace pami
