#include "dmtd/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dmtd/corpus.hpp"
#include "dmtd/errors.hpp"

namespace dmtd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  Int value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("invalid integer for " + key + ": '" + raw + "'");
  }
  return value;
}

double parse_double(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("invalid number for " + key + ": '" + raw + "'");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("invalid boolean for " + key + ": '" + raw + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& raw) {
  std::filesystem::path p(trim(raw));
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value,
                                  const std::filesystem::path& base)>;

const std::map<std::string, std::map<std::string, Setter>>& setters() {
  static const std::map<std::string, std::map<std::string, Setter>> table = [] {
    std::map<std::string, std::map<std::string, Setter>> t;
    auto& m = t["model"];
    m["vocab_size"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.vocab_size = parse_int<int>(k, v); };
    m["d_model"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.d_model = parse_int<int>(k, v); };
    m["n_heads"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.n_heads = parse_int<int>(k, v); };
    m["d_ff"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.d_ff = parse_int<int>(k, v); };
    m["n_layers"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.n_layers = parse_int<int>(k, v); };
    m["n_encoding"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.n_encoding = parse_int<int>(k, v); };
    m["n_thinking"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.n_thinking = parse_int<int>(k, v); };
    m["n_decoding"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.n_decoding = parse_int<int>(k, v); };
    m["max_seq_len"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.max_seq_len = parse_int<int>(k, v); };
    m["norm_eps"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.norm_eps = parse_double(k, v); };
    m["rope_base"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.rope_base = parse_double(k, v); };
    m["seed"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.model.seed = parse_int<std::uint64_t>(k, v); };

    auto& tr = t["train"];
    tr["batch_size"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.batch_size = parse_int<int>(k, v); };
    tr["seq_len"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.seq_len = parse_int<int>(k, v); };
    tr["steps"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.steps = parse_int<std::int64_t>(k, v); };
    tr["lr"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.lr = parse_double(k, v); };
    tr["beta1"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.beta1 = parse_double(k, v); };
    tr["beta2"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.beta2 = parse_double(k, v); };
    tr["weight_decay"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.weight_decay = parse_double(k, v); };
    tr["warmup_ratio"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.warmup_ratio = parse_double(k, v); };
    tr["schedule"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      const std::string s = trim(v);
      if (s == "constant") c.train.schedule = LrSchedule::Constant;
      else if (s == "cosine") c.train.schedule = LrSchedule::Cosine;
      else throw ConfigError("invalid value for " + k + ": '" + v + "' (constant or cosine)");
    };
    tr["grad_clip"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.grad_clip = parse_double(k, v); };
    tr["seed"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.seed = parse_int<std::uint64_t>(k, v); };
    tr["eval_fraction"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.eval_fraction = parse_double(k, v); };
    tr["log_interval"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.train.log_interval = parse_int<int>(k, v); };
    tr["eval_max_windows"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.eval_max_windows = parse_int<int>(k, v);
    };
    tr["checkpoint_interval"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      c.train.checkpoint_interval = parse_int<int>(k, v);
    };

    auto& cy = t["cycle"];
    cy["tau_train"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.cycle.tau_train = parse_int<int>(k, v); };
    cy["tau_infer"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.cycle.tau_infer = parse_int<int>(k, v); };
    cy["variant"] = [](RunConfig& c, auto&, auto& v, auto&) { c.cycle.variant = parse_variant(trim(v)); };
    cy["mask_anchor"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.cycle.mask_anchor = parse_int<int>(k, v); };
    cy["masked_prefill"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.masked_prefill = parse_bool(k, v); };

    auto& sa = t["sampler"];
    sa["mode"] = [](RunConfig& c, auto& k, auto& v, auto&) {
      const std::string s = trim(v);
      if (s == "greedy") c.sampler.mode = SamplerMode::Greedy;
      else if (s == "temperature") c.sampler.mode = SamplerMode::Temperature;
      else throw ConfigError("invalid value for " + k + ": '" + v + "' (greedy or temperature)");
    };
    sa["temperature"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.sampler.temperature = parse_double(k, v); };
    sa["seed"] = [](RunConfig& c, auto& k, auto& v, auto&) { c.sampler.seed = parse_int<std::uint64_t>(k, v); };

    auto& pa = t["paths"];
    pa["corpus"] = [](RunConfig& c, auto&, auto& v, auto& base) {
      c.paths.corpus.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) c.paths.corpus.push_back(resolve(base, item));
      }
    };
    pa["checkpoint"] = [](RunConfig& c, auto&, auto& v, auto& base) { c.paths.checkpoint = resolve(base, v); };
    pa["report_dir"] = [](RunConfig& c, auto&, auto& v, auto& base) { c.paths.report_dir = resolve(base, v); };
    pa["log"] = [](RunConfig& c, auto&, auto& v, auto& base) { c.paths.log = resolve(base, v); };
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  cycle.validate(&model);
  sampler.validate();
  if (model.vocab_size != kByteVocabSize) {
    throw ConfigError("model.vocab_size must be " + std::to_string(kByteVocabSize) + " for the byte vocabulary");
  }
  if (train.seq_len > model.max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");
}

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig config;
  const auto& table = setters();
  for (const auto& [section, body] : tree) {
    auto sec = table.find(section);
    if (sec == table.end()) {
      if (body.empty()) throw ConfigError("top-level key outside any section: '" + section + "'");
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      auto setter = sec->second.find(key);
      const std::string qualified = section + "." + key;
      if (setter == sec->second.end()) throw ConfigError("unknown config key " + qualified);
      setter->second(config, qualified, value.get_value<std::string>(), base_dir);
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), file.parent_path());
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream out;
  out << "[model]\n"
      << "vocab_size = " << c.model.vocab_size << "\n"
      << "d_model = " << c.model.d_model << "\n"
      << "n_heads = " << c.model.n_heads << "\n"
      << "d_ff = " << c.model.d_ff << "\n"
      << "n_layers = " << c.model.n_layers << "\n"
      << "n_encoding = " << c.model.n_encoding << "\n"
      << "n_thinking = " << c.model.n_thinking << "\n"
      << "n_decoding = " << c.model.n_decoding << "\n"
      << "max_seq_len = " << c.model.max_seq_len << "\n"
      << "norm_eps = " << format_double(c.model.norm_eps) << "\n"
      << "rope_base = " << format_double(c.model.rope_base) << "\n"
      << "seed = " << c.model.seed << "\n\n";
  out << "[train]\n"
      << "batch_size = " << c.train.batch_size << "\n"
      << "seq_len = " << c.train.seq_len << "\n"
      << "steps = " << c.train.steps << "\n"
      << "lr = " << format_double(c.train.lr) << "\n"
      << "beta1 = " << format_double(c.train.beta1) << "\n"
      << "beta2 = " << format_double(c.train.beta2) << "\n"
      << "weight_decay = " << format_double(c.train.weight_decay) << "\n"
      << "warmup_ratio = " << format_double(c.train.warmup_ratio) << "\n"
      << "schedule = " << (c.train.schedule == LrSchedule::Cosine ? "cosine" : "constant") << "\n"
      << "grad_clip = " << format_double(c.train.grad_clip) << "\n"
      << "seed = " << c.train.seed << "\n"
      << "eval_fraction = " << format_double(c.train.eval_fraction) << "\n"
      << "log_interval = " << c.train.log_interval << "\n"
      << "eval_max_windows = " << c.train.eval_max_windows << "\n"
      << "checkpoint_interval = " << c.train.checkpoint_interval << "\n\n";
  out << "[cycle]\n"
      << "tau_train = " << c.cycle.tau_train << "\n"
      << "tau_infer = " << c.cycle.tau_infer << "\n"
      << "variant = " << variant_name(c.cycle.variant) << "\n"
      << "mask_anchor = " << c.cycle.mask_anchor << "\n"
      << "masked_prefill = " << (c.masked_prefill ? "true" : "false") << "\n\n";
  out << "[sampler]\n"
      << "mode = " << (c.sampler.mode == SamplerMode::Greedy ? "greedy" : "temperature") << "\n"
      << "temperature = " << format_double(c.sampler.temperature) << "\n"
      << "seed = " << c.sampler.seed << "\n\n";
  out << "[paths]\n";
  out << "corpus = ";
  for (std::size_t i = 0; i < c.paths.corpus.size(); ++i) out << (i ? ", " : "") << c.paths.corpus[i].string();
  out << "\n"
      << "checkpoint = " << c.paths.checkpoint.string() << "\n"
      << "report_dir = " << c.paths.report_dir.string() << "\n"
      << "log = " << c.paths.log.string() << "\n";
  return out.str();
}

}  // namespace dmtd
