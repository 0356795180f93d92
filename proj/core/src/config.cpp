#include "rtdp/config.hpp"

#include <fstream>
#include <sstream>

namespace rtdp {

void TrainPlan::validate() const {
  if (micro_batch < 1) throw config_error("plan: micro_batch must be >= 1");
  int active = 0;
  for (int i = 0; i < 2; ++i) {
    const PhaseConfig& p = phase(i);
    if (p.steps == 0) continue;
    ++active;
    if (p.steps < 0 || p.max_len < 3 || p.batch_size < 1)
      throw config_error("plan: phase " + std::to_string(i + 1) + " has invalid sizes");
    if (p.batch_size % micro_batch != 0)
      throw config_error("plan: phase " + std::to_string(i + 1) + " batch " +
                         std::to_string(p.batch_size) + " not divisible by micro_batch " +
                         std::to_string(micro_batch));
    Schedule{p.warmup_steps, p.steps}.validate();
  }
  if (active == 0) throw config_error("plan: no phase has steps to run");
  if (phase1.steps > 0 && phase2.steps > 0 && phase2.max_len < phase1.max_len)
    throw config_error("plan: phase 2 max_len must be >= phase 1 max_len");
  if (lambda_rtd < 0) throw config_error("plan: lambda_rtd must be >= 0");
  if (lr_peak <= 0 || beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
    throw config_error("plan: optimizer hyperparameters out of range");
  if (checkpoint_every < 1) throw config_error("plan: checkpoint_every must be >= 1");
}

uint64_t token_accounting(const TrainPlan& plan) {
  uint64_t total = 0;
  for (int i = 0; i < 2; ++i) {
    const PhaseConfig& p = plan.phase(i);
    total += static_cast<uint64_t>(p.batch_size) * static_cast<uint64_t>(p.max_len) *
             static_cast<uint64_t>(p.steps);
  }
  return total;
}

namespace {

struct KeyValue {
  std::string key, value;
};

std::vector<KeyValue> parse_lines(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
    KeyValue kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (kv.key.empty() || kv.value.empty())
      throw config_error("config line " + std::to_string(line_no) + ": empty key or value");
    out.push_back(std::move(kv));
  }
  return out;
}

int64_t to_int(const KeyValue& kv) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(kv.value, &pos);
    if (pos != kv.value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw config_error("config key '" + kv.key + "': not an integer: " + kv.value);
  }
}

uint64_t to_uint(const KeyValue& kv) {
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(kv.value, &pos);
    if (pos != kv.value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw config_error("config key '" + kv.key + "': not an unsigned integer: " + kv.value);
  }
}

double to_double(const KeyValue& kv) {
  try {
    size_t pos = 0;
    const double v = std::stod(kv.value, &pos);
    if (pos != kv.value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw config_error("config key '" + kv.key + "': not a number: " + kv.value);
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  for (const KeyValue& kv : parse_lines(text)) {
    const std::string& k = kv.key;
    if (k == "n_layers") cfg.model.n_layers = to_int(kv);
    else if (k == "n_heads") cfg.model.n_heads = to_int(kv);
    else if (k == "hidden") cfg.model.hidden = to_int(kv);
    else if (k == "vocab_size") cfg.model.vocab_size = to_int(kv);
    else if (k == "max_rel_distance") cfg.model.max_rel_distance = to_int(kv);
    else if (k == "generator_hidden") cfg.model.generator_hidden = to_int(kv);
    else if (k == "generator_layers") cfg.model.generator_layers = to_int(kv);
    else if (k == "conv_kernel") cfg.model.conv_kernel = to_int(kv);
    else if (k == "phase1.max_len") cfg.plan.phase1.max_len = to_int(kv);
    else if (k == "phase1.steps") cfg.plan.phase1.steps = to_int(kv);
    else if (k == "phase1.warmup") cfg.plan.phase1.warmup_steps = to_int(kv);
    else if (k == "phase1.batch") cfg.plan.phase1.batch_size = to_int(kv);
    else if (k == "phase2.max_len") cfg.plan.phase2.max_len = to_int(kv);
    else if (k == "phase2.steps") cfg.plan.phase2.steps = to_int(kv);
    else if (k == "phase2.warmup") cfg.plan.phase2.warmup_steps = to_int(kv);
    else if (k == "phase2.batch") cfg.plan.phase2.batch_size = to_int(kv);
    else if (k == "micro_batch") cfg.plan.micro_batch = to_int(kv);
    else if (k == "seed") cfg.plan.seed = to_uint(kv);
    else if (k == "lambda_rtd") cfg.plan.lambda_rtd = to_double(kv);
    else if (k == "lr_peak") cfg.plan.lr_peak = to_double(kv);
    else if (k == "beta1") cfg.plan.beta1 = to_double(kv);
    else if (k == "beta2") cfg.plan.beta2 = to_double(kv);
    else if (k == "eps") cfg.plan.eps = to_double(kv);
    else if (k == "weight_decay") cfg.plan.weight_decay = to_double(kv);
    else if (k == "trust_clip") cfg.plan.trust_clip = to_double(kv);
    else if (k == "checkpoint_every") cfg.plan.checkpoint_every = to_int(kv);
    else if (k == "prefetch_depth") cfg.plan.prefetch_depth = to_int(kv);
    else if (k == "vocab_file") cfg.vocab_file = kv.value;
    else throw config_error("config: unknown key '" + k + "'");
  }
  cfg.model.validate();
  cfg.plan.validate();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace rtdp
