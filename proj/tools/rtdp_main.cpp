// Command-line entry point: pretrain / export / verify / account.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "rtdp/checkpoint.hpp"
#include "rtdp/config.hpp"
#include "rtdp/trainer.hpp"
#include "rtdp/verify.hpp"

namespace {

int cmd_account(const std::string& config_path) {
  const rtdp::RunConfig cfg = rtdp::load_config_file(config_path);
  for (int i = 0; i < 2; ++i) {
    const rtdp::PhaseConfig& p = cfg.plan.phase(i);
    const uint64_t tokens = static_cast<uint64_t>(p.batch_size) *
                            static_cast<uint64_t>(p.max_len) * static_cast<uint64_t>(p.steps);
    std::printf("phase%d batch=%" PRId64 " max_len=%" PRId64 " steps=%" PRId64
                " tokens=%" PRIu64 "\n",
                i + 1, p.batch_size, p.max_len, p.steps, tokens);
  }
  std::printf("total_tokens %" PRIu64 "\n", rtdp::token_accounting(cfg.plan));
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& corpus_path,
                 const std::string& out_dir, const std::string& resume_path) {
  const rtdp::RunConfig cfg = rtdp::load_config_file(config_path);
  const auto lines = rtdp::load_corpus_lines(corpus_path);

  rtdp::Vocabulary vocab = cfg.vocab_file.empty()
                               ? rtdp::Vocabulary::build(lines, cfg.model.vocab_size)
                               : rtdp::Vocabulary::load_file(cfg.vocab_file);
  if (vocab.size() > cfg.model.vocab_size)
    throw rtdp::config_error("vocabulary larger than configured vocab_size");
  std::filesystem::create_directories(out_dir);
  vocab.save_file(out_dir + "/vocab.txt");

  rtdp::Trainer trainer(cfg, rtdp::docs_to_unit_ids(lines, vocab), out_dir);
  if (!resume_path.empty()) trainer.resume_from(resume_path);
  trainer.run();
  std::printf("done: %s/final.rtdp after %" PRIu64 " tokens\n", out_dir.c_str(),
              trainer.state().tokens_seen);
  return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out_path) {
  const rtdp::LoadedCheckpoint ckpt = rtdp::load_checkpoint(ckpt_path);
  rtdp::Model model(ckpt.config, /*seed=*/0);
  rtdp::apply_checkpoint(ckpt, model, nullptr);
  rtdp::export_final(out_path, model);
  std::printf("exported discriminator to %s\n", out_path.c_str());
  return 0;
}

int cmd_verify(uint64_t seed) {
  const auto reports = rtdp::run_all_checks(seed);
  int failures = 0;
  for (const auto& r : reports) {
    std::printf("%s\n", r.to_line().c_str());
    failures += r.pass ? 0 : 1;
  }
  std::printf("%zu checks, %d failed\n", reports.size(), failures);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"replaced-token-detection pretraining with disentangled attention"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, out_dir, resume_path, ckpt_path, out_path;
  uint64_t seed = 1234;

  auto* pretrain = app.add_subcommand("pretrain", "run the two-phase pretraining loop");
  pretrain->add_option("--config", config_path, "config file")->required();
  pretrain->add_option("--corpus", corpus_path, "UTF-8 corpus, one document per line")->required();
  pretrain->add_option("--out", out_dir, "output directory")->required();
  pretrain->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* exp = app.add_subcommand("export", "finalize embeddings and write the discriminator");
  exp->add_option("--ckpt", ckpt_path, "training checkpoint")->required();
  exp->add_option("--out", out_path, "output model file")->required();

  auto* verify = app.add_subcommand("verify", "run the verification checks");
  verify->add_option("--seed", seed, "seed for the checks");

  auto* account = app.add_subcommand("account", "print the token budget of a plan");
  account->add_option("--config", config_path, "config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(pretrain)) return cmd_pretrain(config_path, corpus_path, out_dir, resume_path);
    if (app.got_subcommand(exp)) return cmd_export(ckpt_path, out_path);
    if (app.got_subcommand(verify)) return cmd_verify(seed);
    if (app.got_subcommand(account)) return cmd_account(config_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
