#include "dupl/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dupl/error.hpp"

namespace dupl {

void AblationFlags::disable(const std::string& list) {
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "ds") dual_student = false;
    else if (item == "dis") l_dis = false;
    else if (item == "dta") dta = false;
    else if (item == "anf") anf = false;
    else if (item == "reg") l_reg = false;
    else if (item == "all") *this = {false, false, false, false, false};
    else throw ConfigError("unknown ablation '" + item + "' (expected ds,dis,dta,anf,reg,all)");
  }
  if (!dual_student) l_dis = false;
}

std::string AblationFlags::to_string() const {
  std::string s;
  auto put = [&s](bool on, const char* name) {
    if (!s.empty()) s += ' ';
    s += std::string(name) + (on ? "+" : "-");
  };
  put(dual_student, "ds");
  put(l_dis, "dis");
  put(dta, "dta");
  put(anf, "anf");
  put(l_reg, "reg");
  return s;
}

void TrainConfig::override_iters(int iters) {
  if (iters < 3) throw ConfigError("--iters must be >= 3");
  const double f = static_cast<double>(iters) / total_iters;
  int wc = static_cast<int>(std::lround(warmup_cls_iters * f));
  int ws = static_cast<int>(std::lround(warmup_seg_iters * f));
  wc = std::clamp(wc, 0, iters - 2);
  ws = std::clamp(ws, wc + 1, iters - 1);
  warmup_cls_iters = wc;
  warmup_seg_iters = ws;
  total_iters = iters;
}

void TrainConfig::validate() const {
  if (height < 16 || width < 16 || num_classes < 2 || num_classes > 8) {
    throw ConfigError("config: bad image size or class count");
  }
  if (batch_size < 1 || eval_batch < 1) throw ConfigError("config: batch sizes must be >= 1");
  if (!(warmup_cls_iters >= 0 && warmup_cls_iters < warmup_seg_iters &&
        warmup_seg_iters < total_iters)) {
    throw ConfigError("config: need 0 <= warmup_cls_iters < warmup_seg_iters < total_iters");
  }
  if (eval_every < 0 || checkpoint_every < 0) throw ConfigError("config: intervals must be >= 0");
  schedule().validate();
  noise.validate();
  weights.validate();
  if (!(optim.lr > 0 && optim.weight_decay >= 0 && optim.beta1 >= 0 && optim.beta1 < 1 &&
        optim.beta2 >= 0 && optim.beta2 < 1 && optim.eps > 0 && lr_power >= 0)) {
    throw ConfigError("config: bad optimizer settings");
  }
  if (model.num_classes != num_classes) throw ConfigError("config: model class count mismatch");
  model.validate();
  if (height % model.output_stride() || width % model.output_stride()) {
    throw ConfigError("config: image size must be divisible by the output stride");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) {
    return v.substr(1, v.size() - 2);
  }
  return v;
}

int to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  int x = 0;
  try {
    x = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(x)) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<int> to_ints(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, trim(item)));
  if (out.empty()) throw ConfigError("config: " + key + " expects a list of integers");
  return out;
}

std::string ints(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::map<std::string, Field>& fields() {
  using C = TrainConfig;
  using S = const std::string&;
#define INT_FIELD(key, expr) \
  {key, {[](C& c, S k, S v) { expr = to_int(k, v); }, [](const C& c) { return std::to_string(expr); }}}
#define DBL_FIELD(key, expr) \
  {key, {[](C& c, S k, S v) { expr = to_double(k, v); }, [](const C& c) { return num(expr); }}}
#define BOOL_FIELD(key, expr) \
  {key, {[](C& c, S k, S v) { expr = to_bool(k, v); }, [](const C& c) { return std::string(expr ? "true" : "false"); }}}
#define PATH_FIELD(key, expr) \
  {key, {[](C& c, S, S v) { expr = v; }, [](const C& c) { return "\"" + expr.string() + "\""; }}}
#define LIST_FIELD(key, expr) \
  {key, {[](C& c, S k, S v) { expr = to_ints(k, v); }, [](const C& c) { return ints(expr); }}}
  static const std::map<std::string, Field> table{
      PATH_FIELD("data_dir", c.data_dir),
      PATH_FIELD("out_dir", c.out_dir),
      INT_FIELD("height", c.height),
      INT_FIELD("width", c.width),
      INT_FIELD("num_classes", c.num_classes),
      INT_FIELD("batch_size", c.batch_size),
      INT_FIELD("total_iters", c.total_iters),
      INT_FIELD("warmup_cls_iters", c.warmup_cls_iters),
      INT_FIELD("warmup_seg_iters", c.warmup_seg_iters),
      DBL_FIELD("tau_l", c.tau_l),
      DBL_FIELD("tau_h_start", c.tau_h_start),
      DBL_FIELD("tau_h_end", c.tau_h_end),
      DBL_FIELD("gamma", c.noise.gamma),
      DBL_FIELD("eta", c.noise.eta),
      INT_FIELD("min_valid_pixels", c.noise.min_valid_pixels),
      INT_FIELD("max_em_iters", c.noise.max_em_iters),
      DBL_FIELD("em_tol", c.noise.em_tol),
      DBL_FIELD("lambda1", c.weights.lambda1),
      DBL_FIELD("lambda2", c.weights.lambda2),
      DBL_FIELD("lambda3", c.weights.lambda3),
      DBL_FIELD("lr", c.optim.lr),
      DBL_FIELD("lr_power", c.lr_power),
      DBL_FIELD("weight_decay", c.optim.weight_decay),
      DBL_FIELD("beta1", c.optim.beta1),
      DBL_FIELD("beta2", c.optim.beta2),
      DBL_FIELD("adam_eps", c.optim.eps),
      {"seed", {[](C& c, S k, S v) {
                  const int s = to_int(k, v);
                  if (s < 0) throw ConfigError("config: seed must be >= 0");
                  c.seed = static_cast<std::uint64_t>(s);
                },
                [](const C& c) { return std::to_string(c.seed); }}},
      BOOL_FIELD("dual_student", c.flags.dual_student),
      BOOL_FIELD("l_dis", c.flags.l_dis),
      BOOL_FIELD("dta", c.flags.dta),
      BOOL_FIELD("anf", c.flags.anf),
      BOOL_FIELD("l_reg", c.flags.l_reg),
      LIST_FIELD("backbone_channels", c.model.backbone_channels),
      LIST_FIELD("backbone_strides", c.model.backbone_strides),
      INT_FIELD("head_channels", c.model.head_channels),
      INT_FIELD("head_dilation", c.model.head_dilation),
      INT_FIELD("eval_every", c.eval_every),
      INT_FIELD("checkpoint_every", c.checkpoint_every),
      INT_FIELD("eval_batch", c.eval_batch),
      BOOL_FIELD("dump_labels", c.dump_labels),
      {"reg_target", {[](C& c, S k, S v) {
                        if (v == "cam") {
                          c.reg_target = RegTarget::kCam;
                        } else if (v == "seg") {
                          c.reg_target = RegTarget::kSeg;
                        } else {
                          throw ConfigError("config: " + k + " must be \"cam\" or \"seg\"");
                        }
                      },
                      [](const C& c) {
                        return std::string(c.reg_target == RegTarget::kCam ? "\"cam\"" : "\"seg\"");
                      }}},
  };
#undef INT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD
#undef PATH_FIELD
#undef LIST_FIELD
  return table;
}

}  // namespace

TrainConfig parse_config(const std::string& text, TrainConfig config) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;  // TOML table headers are ignored
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    const auto it = fields().find(key);
    if (it == fields().end()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    it->second.set(config, key, value);
  }
  config.model.num_classes = config.num_classes;
  if (!config.flags.dual_student) config.flags.l_dis = false;
  return config;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

}  // namespace dupl
