#pragma once

#include <cstdint>
#include <string>

#include "rtdp/lamb.hpp"
#include "rtdp/model.hpp"

namespace rtdp {

struct PhaseConfig {
  int64_t max_len = 0;
  int64_t steps = 0;
  int64_t warmup_steps = 0;
  int64_t batch_size = 0;  // effective batch (micro_batch * accumulation)
};

// The full two-phase plan plus optimizer hyperparameters. A phase with
// steps == 0 is skipped, which is how single-phase toy runs are expressed.
struct TrainPlan {
  PhaseConfig phase1{128, 10000, 2000, 67584};
  PhaseConfig phase2{512, 3300, 200, 27648};
  int64_t micro_batch = 8;
  uint64_t seed = 42;
  double lambda_rtd = 50.0;
  double lr_peak = 6e-3;
  double beta1 = 0.878;
  double beta2 = 0.974;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double trust_clip = 10.0;
  int64_t checkpoint_every = 500;
  int64_t prefetch_depth = 4;

  const PhaseConfig& phase(int idx) const { return idx == 0 ? phase1 : phase2; }
  int64_t accumulation(int idx) const { return phase(idx).batch_size / micro_batch; }
  void validate() const;
};

// Sum over phases of batch_size * max_len * steps.
uint64_t token_accounting(const TrainPlan& plan);

struct RunConfig {
  ModelConfig model;
  TrainPlan plan;
  std::string vocab_file;  // optional: load instead of building from corpus
};

// key = value lines, '#' comments; every key must be known.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

}  // namespace rtdp
