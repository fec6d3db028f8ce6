#include "fedlora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fedlora {

std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char delim) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, delim)) parts.push_back(trim(item));
  return parts;
}

// Key dispatcher shared by file parsing and CLI overrides. Each setter throws
// std::invalid_argument on a bad value.
struct ConfigKeys {
  ExperimentConfig* cfg;
  std::vector<std::string>* errors;

  void set(const std::string& key, const std::string& value) {
    try {
      if (!dispatch(key, value))
        errors->push_back("unknown key: " + key);
    } catch (const std::exception& e) {
      errors->push_back(key + ": " + e.what());
    }
  }

  static int to_int(const std::string& v) {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("not an integer: " + v);
    return r;
  }
  static double to_double(const std::string& v) {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("not a number: " + v);
    return r;
  }
  static bool to_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("not a boolean: " + v);
  }

  bool dispatch(const std::string& key, const std::string& value) {
    auto& c = *cfg;
    if (key == "model.layers") c.model.layers = to_int(value);
    else if (key == "model.d_model") c.model.d_model = to_int(value);
    else if (key == "model.n_heads") c.model.n_heads = to_int(value);
    else if (key == "model.d_ff") c.model.d_ff = to_int(value);
    else if (key == "model.rank") c.model.rank = to_int(value);
    else if (key == "model.lora_alpha") c.model.lora_alpha = to_double(value);
    else if (key == "model.dropout_p") c.model.dropout_p = to_double(value);
    else if (key == "model.n_classes") c.model.n_classes = to_int(value);
    else if (key == "model.seq_len") c.model.seq_len = to_int(value);
    else if (key == "model.vocab") c.model.vocab = to_int(value);
    else if (key == "federation.n_clients") c.federation.n_clients = to_int(value);
    else if (key == "federation.clients_per_round")
      c.federation.clients_per_round = to_int(value);
    else if (key == "federation.rounds") c.federation.rounds = to_int(value);
    else if (key == "federation.local_epochs") c.federation.local_epochs = to_int(value);
    else if (key == "federation.batch_size") c.federation.batch_size = to_int(value);
    else if (key == "federation.max_steps") c.federation.max_steps = to_int(value);
    else if (key == "federation.eval_stride") c.federation.eval_stride = to_int(value);
    else if (key == "federation.lr") c.federation.opt.lr = to_double(value);
    else if (key == "federation.beta1") c.federation.opt.beta1 = to_double(value);
    else if (key == "federation.beta2") c.federation.opt.beta2 = to_double(value);
    else if (key == "federation.eps") c.federation.opt.eps = to_double(value);
    else if (key == "federation.weight_decay")
      c.federation.opt.weight_decay = to_double(value);
    else if (key == "schedule.strategy") c.schedule.strategy = strategy_from_string(value);
    else if (key == "schedule.base_pattern")
      c.schedule.base_pattern = pattern_from_string(value);
    else if (key == "schedule.straggler_pattern")
      c.schedule.straggler_pattern = pattern_from_string(value);
    else if (key == "schedule.T_RGD") c.schedule.t_rgd = to_int(value);
    else if (key == "schedule.T_FIM") c.schedule.t_fim = to_int(value);
    else if (key == "schedule.literal_bernoulli")
      c.schedule.literal_bernoulli = to_bool(value);
    else if (key == "capability.levels") {
      c.capability.levels.clear();
      for (const auto& p : split(value, ',')) c.capability.levels.push_back(to_int(p));
    } else if (key == "capability.ratios") {
      c.capability.ratios.clear();
      for (const auto& p : split(value, ',')) c.capability.ratios.push_back(to_double(p));
    } else if (key == "partition.mode") {
      if (value == "IID") c.partition.mode = PartitionMode::IID;
      else if (value == "LabelSkew") c.partition.mode = PartitionMode::LabelSkew;
      else throw std::invalid_argument("expected IID or LabelSkew");
    } else if (key == "partition.classes_per_client")
      c.partition.classes_per_client = to_int(value);
    else if (key == "partition.dirichlet_alpha")
      c.partition.dirichlet_alpha = to_double(value);
    else if (key == "task.kind") {
      if (value == "TokenSequence") c.task.kind = TaskKind::TokenSequence;
      else if (value == "GaussianVector") c.task.kind = TaskKind::GaussianVector;
      else throw std::invalid_argument("expected TokenSequence or GaussianVector");
    } else if (key == "task.separation") c.task.separation = to_double(value);
    else if (key == "task.n_train") c.task.n_train = to_int(value);
    else if (key == "task.n_test") c.task.n_test = to_int(value);
    else if (key == "proxy.size") c.proxy_size = to_int(value);
    else if (key == "seeds") {
      c.seeds.clear();
      for (const auto& p : split(value, ',')) c.seeds.push_back(std::stoull(p));
    } else if (key == "output_dir") c.output_dir = value;
    else return false;
    return true;
  }
};

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  auto check = [&](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.emplace_back(e.what());
    }
  };
  check([&] { model.validate(); });
  check([&] { federation.validate(); });
  check([&] { schedule.validate(); });
  check([&] { capability.validate(model.layers); });
  check([&] {
    PartitionSpec p = partition;
    p.n_clients = federation.n_clients;
    p.validate(model.n_classes);
  });
  check([&] {
    if (proxy_size < 1) throw std::invalid_argument("proxy.size must be >= 1");
    if (proxy_size >= task.n_test)
      throw std::invalid_argument("proxy.size must be smaller than task.n_test");
  });
  check([&] {
    if (seeds.empty()) throw std::invalid_argument("seeds must be non-empty");
  });
  check([&] {
    if (task.n_train < federation.n_clients)
      throw std::invalid_argument("task.n_train must cover all clients");
  });
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  ConfigKeys keys{&cfg, &errors};
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    keys.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  ConfigKeys keys{&cfg, &errors};
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    std::string tok = overrides[i];
    if (tok.rfind("--", 0) == 0) tok = tok.substr(2);
    auto eq = tok.find('=');
    if (eq != std::string::npos) {
      keys.set(tok.substr(0, eq), tok.substr(eq + 1));
    } else if (i + 1 < overrides.size()) {
      keys.set(tok, overrides[++i]);
    } else {
      errors.push_back("override missing value: " + tok);
    }
  }
  if (!errors.empty()) {
    std::string msg = "override errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream out;
  auto list_i = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  auto list_d = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_g6(v[i]);
    return s;
  };
  auto list_u = [](const std::vector<std::uint64_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  out << "model.layers = " << c.model.layers << '\n'
      << "model.d_model = " << c.model.d_model << '\n'
      << "model.n_heads = " << c.model.n_heads << '\n'
      << "model.d_ff = " << c.model.d_ff << '\n'
      << "model.rank = " << c.model.rank << '\n'
      << "model.lora_alpha = " << format_g6(c.model.lora_alpha) << '\n'
      << "model.dropout_p = " << format_g6(c.model.dropout_p) << '\n'
      << "model.n_classes = " << c.model.n_classes << '\n'
      << "model.seq_len = " << c.model.seq_len << '\n'
      << "model.vocab = " << c.model.vocab << '\n'
      << "federation.n_clients = " << c.federation.n_clients << '\n'
      << "federation.clients_per_round = " << c.federation.clients_per_round << '\n'
      << "federation.rounds = " << c.federation.rounds << '\n'
      << "federation.local_epochs = " << c.federation.local_epochs << '\n'
      << "federation.batch_size = " << c.federation.batch_size << '\n'
      << "federation.max_steps = " << c.federation.max_steps << '\n'
      << "federation.eval_stride = " << c.federation.eval_stride << '\n'
      << "federation.lr = " << format_g6(c.federation.opt.lr) << '\n'
      << "federation.beta1 = " << format_g6(c.federation.opt.beta1) << '\n'
      << "federation.beta2 = " << format_g6(c.federation.opt.beta2) << '\n'
      << "federation.eps = " << format_g6(c.federation.opt.eps) << '\n'
      << "federation.weight_decay = " << format_g6(c.federation.opt.weight_decay) << '\n'
      << "schedule.strategy = " << to_string(c.schedule.strategy) << '\n'
      << "schedule.base_pattern = " << to_string(c.schedule.base_pattern) << '\n'
      << "schedule.straggler_pattern = " << to_string(c.schedule.straggler_pattern) << '\n'
      << "schedule.T_RGD = " << c.schedule.t_rgd << '\n'
      << "schedule.T_FIM = " << c.schedule.t_fim << '\n'
      << "schedule.literal_bernoulli = " << (c.schedule.literal_bernoulli ? "true" : "false")
      << '\n'
      << "capability.levels = " << list_i(c.capability.levels) << '\n'
      << "capability.ratios = " << list_d(c.capability.ratios) << '\n'
      << "partition.mode = "
      << (c.partition.mode == PartitionMode::IID ? "IID" : "LabelSkew") << '\n'
      << "partition.classes_per_client = " << c.partition.classes_per_client << '\n'
      << "partition.dirichlet_alpha = " << format_g6(c.partition.dirichlet_alpha) << '\n'
      << "task.kind = "
      << (c.task.kind == TaskKind::TokenSequence ? "TokenSequence" : "GaussianVector")
      << '\n'
      << "task.separation = " << format_g6(c.task.separation) << '\n'
      << "task.n_train = " << c.task.n_train << '\n'
      << "task.n_test = " << c.task.n_test << '\n'
      << "proxy.size = " << c.proxy_size << '\n'
      << "seeds = " << list_u(c.seeds) << '\n'
      << "output_dir = " << c.output_dir << '\n';
  return out.str();
}

RunResult run_experiment(const ExperimentConfig& cfg_in, Strategy strategy,
                         std::uint64_t seed) {
  RunResult result;
  result.strategy = to_string(strategy);
  result.seed = seed;
  try {
    ExperimentConfig cfg = cfg_in;
    cfg.schedule.strategy = strategy;
    // The synthetic task mirrors the model's input contract.
    cfg.task.n_classes = cfg.model.n_classes;
    cfg.task.vocab = cfg.model.vocab;
    cfg.task.seq_len = cfg.model.seq_len;
    cfg.validate();

    RngStream data_rng(seed, "data");
    auto [train, test] = generate_synthetic(cfg.task, data_rng);

    PartitionSpec pspec = cfg.partition;
    pspec.n_clients = cfg.federation.n_clients;
    RngStream part_rng(seed, "partition");
    std::vector<Dataset> shards = partition(train, pspec, part_rng);

    RngStream proxy_rng(seed, "proxy");
    auto [proxy, eval_set] = extract_proxy(test, cfg.proxy_size, proxy_rng);

    FederationRun run(cfg.model, cfg.federation, cfg.schedule, cfg.capability, seed);
    RngStream init_rng(seed, "init");
    run.initialize(init_rng);
    run.attach_data(std::move(shards), std::move(proxy), std::move(eval_set));
    result.records = run.run_all();

    for (auto it = result.records.rbegin(); it != result.records.rend(); ++it) {
      if (it->evaluated) {
        result.final_accuracy = it->accuracy;
        result.final_loss = it->loss;
        break;
      }
    }
  } catch (const std::exception& e) {
    result.error = e.what();
  }
  return result;
}

const char* kRoundCsvHeader =
    "round,strategy,participants,selected,maps,layer_probs,layer_delta_norms,"
    "head_delta_norm,evaluated,accuracy,loss,backward_cost,comm_cost,warnings";

namespace {

std::string join(const std::vector<std::string>& parts, char delim) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(delim);
    out += parts[i];
  }
  return out;
}

std::string join_g6(const std::vector<double>& v) {
  std::vector<std::string> parts;
  parts.reserve(v.size());
  for (double x : v) parts.push_back(format_g6(x));
  return join(parts, ';');
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n') c = ' ';
  return s;
}

}  // namespace

std::string round_csv_line(const RoundRecord& rec) {
  std::vector<std::string> sel;
  sel.reserve(rec.selected.size());
  for (int id : rec.selected) sel.push_back(std::to_string(id));
  std::vector<std::string> warn;
  warn.reserve(rec.warnings.size());
  for (const auto& w : rec.warnings) warn.push_back(sanitize(w));

  std::ostringstream out;
  out << rec.round << ',' << rec.strategy << ',' << rec.participants << ','
      << join(sel, ';') << ',' << join(rec.map_bits, ';') << ','
      << join_g6(rec.layer_probs) << ',' << join_g6(rec.layer_delta_norms) << ','
      << format_g6(rec.head_delta_norm) << ',' << (rec.evaluated ? 1 : 0) << ','
      << format_g6(rec.accuracy) << ',' << format_g6(rec.loss) << ','
      << format_g6(rec.backward_cost) << ',' << format_g6(rec.comm_cost) << ','
      << join(warn, ';');
  return out.str();
}

void emit_csv(const std::vector<RoundRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);  // binary: stable newlines
  if (!out) throw std::runtime_error("emit_csv: cannot write " + path.string());
  out << kRoundCsvHeader << '\n';
  for (const auto& rec : records) out << round_csv_line(rec) << '\n';
  if (!out) throw std::runtime_error("emit_csv: write failed for " + path.string());
}

void emit_summary_csv(const std::vector<RunResult>& results,
                      const std::filesystem::path& path) {
  // Group by strategy, preserving first-seen order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunResult*>> by_strategy;
  for (const auto& r : results) {
    if (!by_strategy.count(r.strategy)) order.push_back(r.strategy);
    by_strategy[r.strategy].push_back(&r);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("emit_summary_csv: cannot write " + path.string());
  out << "strategy,n_runs,n_failed,mean_final_accuracy,std_final_accuracy,"
         "mean_final_loss\n";
  for (const auto& name : order) {
    const auto& runs = by_strategy[name];
    std::vector<double> accs, losses;
    int failed = 0;
    for (const RunResult* r : runs) {
      if (!r->ok()) {
        ++failed;
        continue;
      }
      accs.push_back(r->final_accuracy);
      losses.push_back(r->final_loss);
    }
    double mean = 0.0, stdev = 0.0, mloss = 0.0;
    if (!accs.empty()) {
      mean = std::accumulate(accs.begin(), accs.end(), 0.0) / accs.size();
      for (double a : accs) stdev += (a - mean) * (a - mean);
      stdev = std::sqrt(stdev / accs.size());
      mloss = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
    }
    out << name << ',' << runs.size() << ',' << failed << ',' << format_g6(mean) << ','
        << format_g6(stdev) << ',' << format_g6(mloss) << '\n';
  }
}

std::filesystem::path resolve_output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("FEDLORA_OUTPUT_ROOT")) return env;
  return cfg.output_dir;
}

std::vector<RunResult> run_grid(const ExperimentConfig& cfg,
                                const std::vector<Strategy>& strategies,
                                const std::vector<std::uint64_t>& seeds) {
  std::filesystem::path root = resolve_output_root(cfg);
  std::filesystem::create_directories(root);
  std::vector<RunResult> results;
  for (Strategy strat : strategies) {
    for (std::uint64_t seed : seeds) {
      RunResult r = run_experiment(cfg, strat, seed);
      if (r.ok()) {
        std::filesystem::path dir = root / (r.strategy + "_" + std::to_string(seed));
        std::filesystem::create_directories(dir);
        emit_csv(r.records, dir / "rounds.csv");
      }
      results.push_back(std::move(r));
    }
  }
  emit_summary_csv(results, root / "summary.csv");
  return results;
}

}  // namespace fedlora
