#include "rtdp/trainer.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace rtdp {

namespace {

std::string format_metrics(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "step=%" PRId64 " phase=%d l_mlm=%.9g l_rtd=%.9g combined=%.9g lr=%.12g"
                " tokens_seen=%" PRIu64 " wall_ms=%.3f disc_accuracy=%.9g",
                r.step, r.phase, static_cast<double>(r.l_mlm), static_cast<double>(r.l_rtd),
                static_cast<double>(r.combined), r.lr, r.tokens_seen, r.wall_ms,
                r.disc_accuracy);
  return buf;
}

}  // namespace

std::string MetricsRecord::to_line() const { return format_metrics(*this); }

MetricsRecord MetricsRecord::parse_line(const std::string& line) {
  MetricsRecord r;
  double l_mlm = 0, l_rtd = 0, combined = 0;
  const int got = std::sscanf(line.c_str(),
                              "step=%" SCNd64 " phase=%d l_mlm=%lf l_rtd=%lf combined=%lf"
                              " lr=%lf tokens_seen=%" SCNu64 " wall_ms=%lf disc_accuracy=%lf",
                              &r.step, &r.phase, &l_mlm, &l_rtd, &combined, &r.lr,
                              &r.tokens_seen, &r.wall_ms, &r.disc_accuracy);
  if (got != 9) throw error("metrics: cannot parse line: " + line);
  r.l_mlm = static_cast<float>(l_mlm);
  r.l_rtd = static_cast<float>(l_rtd);
  r.combined = static_cast<float>(combined);
  return r;
}

Trainer::Trainer(RunConfig cfg, std::vector<std::vector<int32_t>> docs, std::string out_dir)
    : cfg_(std::move(cfg)),
      docs_(std::move(docs)),
      out_dir_(std::move(out_dir)),
      model_(cfg_.model, cfg_.plan.seed) {
  cfg_.plan.validate();
  std::filesystem::create_directories(out_dir_);
  opt_.init(model_.params());
  opt_cfg_ = LambConfig{static_cast<float>(cfg_.plan.lr_peak), static_cast<float>(cfg_.plan.beta1),
                        static_cast<float>(cfg_.plan.beta2), static_cast<float>(cfg_.plan.eps),
                        static_cast<float>(cfg_.plan.weight_decay),
                        static_cast<float>(cfg_.plan.trust_clip)};
  run_.base_seed = cfg_.plan.seed;
}

std::string Trainer::checkpoint_path(int phase_index, int64_t step) const {
  return out_dir_ + "/ckpt_p" + std::to_string(phase_index + 1) + "_s" + std::to_string(step) +
         ".rtdp";
}

void Trainer::resume_from(const std::string& checkpoint_path) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  if (!ckpt.has_run_state)
    throw config_error("resume: file carries no run state (is it an exported model?)");
  apply_checkpoint(ckpt, model_, &opt_);
  run_ = ckpt.run;
  resumed_ = true;
}

void Trainer::write_checkpoint(const std::string& path) {
  save_checkpoint(path, model_, &opt_, &run_);
}

void Trainer::append_metrics(const MetricsRecord& rec) {
  metrics_.push_back(rec);
  std::ofstream out(out_dir_ + "/metrics.log", std::ios::app);
  if (!out) throw error("cannot append to metrics.log in " + out_dir_);
  out << rec.to_line() << "\n";
}

void Trainer::run_phase(int phase_index, int64_t start_step) {
  const PhaseConfig& phase = cfg_.plan.phase(phase_index);
  const int64_t accumulation = cfg_.plan.accumulation(phase_index);
  const Schedule sched{phase.warmup_steps, phase.steps};
  const uint64_t tokens_per_step =
      static_cast<uint64_t>(phase.batch_size) * static_cast<uint64_t>(phase.max_len);

  PhaseDataConfig data_cfg;
  data_cfg.max_len = phase.max_len;
  data_cfg.micro_batch = cfg_.plan.micro_batch;
  BatchStream stream(&docs_, data_cfg, run_.base_seed, phase_index,
                     start_step > 0 ? run_.data_doc_cursor : 0,
                     start_step > 0 ? run_.data_batch_counter : 0);
  BatchPrefetcher prefetch(std::move(stream),
                           static_cast<size_t>(std::max<int64_t>(1, cfg_.plan.prefetch_depth)));

  std::vector<MaskedBatch> micros(static_cast<size_t>(accumulation));
  for (int64_t step = start_step + 1; step <= phase.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    uint64_t doc_cursor = 0, batch_counter = 0;
    for (int64_t a = 0; a < accumulation; ++a) {
      auto item = prefetch.next();
      micros[static_cast<size_t>(a)] = std::move(item.batch);
      doc_cursor = item.doc_cursor_after;
      batch_counter = item.batch_counter_after;
    }

    model_.params().zero_grad();
    const StepStats stats = accumulate_step<float>(model_, micros, cfg_.plan.lambda_rtd);
    if (!std::isfinite(stats.combined)) {
      write_checkpoint(out_dir_ + "/abort.rtdp");
      throw error("non-finite loss at phase " + std::to_string(phase_index + 1) + " step " +
                  std::to_string(step) + "; state saved to abort.rtdp");
    }
    const double lr = lr_at(step, sched, cfg_.plan.lr_peak);
    lamb_step(model_.params(), opt_, opt_cfg_, static_cast<float>(lr));

    run_.phase_index = phase_index;
    run_.step = step;
    run_.opt_step = opt_.step_count;
    run_.tokens_seen += tokens_per_step;
    run_.data_doc_cursor = doc_cursor;
    run_.data_batch_counter = batch_counter;

    MetricsRecord rec;
    rec.step = step;
    rec.phase = phase_index + 1;
    rec.l_mlm = static_cast<float>(stats.l_mlm);
    rec.l_rtd = static_cast<float>(stats.l_rtd);
    rec.combined = static_cast<float>(stats.combined);
    rec.lr = lr;
    rec.tokens_seen = run_.tokens_seen;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    rec.disc_accuracy = stats.accuracy();
    append_metrics(rec);

    if (step % cfg_.plan.checkpoint_every == 0 || step == phase.steps)
      write_checkpoint(checkpoint_path(phase_index, step));
  }
}

void Trainer::run() {
  int first_phase = 0;
  int64_t first_step = 0;
  if (resumed_) {
    first_phase = run_.phase_index;
    first_step = run_.step;
    if (first_step >= cfg_.plan.phase(first_phase).steps) {
      // resume point sits exactly at a phase boundary
      first_phase += 1;
      first_step = 0;
    }
  }
  for (int phase = first_phase; phase < 2; ++phase) {
    if (cfg_.plan.phase(phase).steps == 0) continue;
    run_phase(phase, phase == first_phase ? first_step : 0);
  }
  write_checkpoint(out_dir_ + "/final.rtdp");
}

}  // namespace rtdp
