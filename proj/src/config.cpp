#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "seqcr/trainer.hpp"

namespace seqcr {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got \"" + v + "\"");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}

const char* augment_name(LabeledAugment a) {
  switch (a) {
    case LabeledAugment::None: return "none";
    case LabeledAugment::Weak: return "weak";
    case LabeledAugment::Strong: return "strong";
  }
  return "?";
}

// One entry per key: how to print it and how to set it.
struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string& key, const std::string&)> set;
};

template <typename T>
Field num(T TrainConfig::*m) {
  return {[m](const TrainConfig& c) {
            if constexpr (std::is_same_v<T, double>) return fmt(c.*m);
            else return std::to_string(c.*m);
          },
          [m](TrainConfig& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_same_v<T, double>) {
              c.*m = to_double(k, v);
            } else {
              c.*m = static_cast<T>(to_uint(k, v));
            }
          }};
}

template <typename S, typename T>
Field sub(S TrainConfig::*outer, T S::*m) {
  return {[outer, m](const TrainConfig& c) {
            if constexpr (std::is_same_v<T, std::string>) {
              return (c.*outer).*m;
            } else if constexpr (std::is_same_v<T, double>) {
              return fmt((c.*outer).*m);
            } else {
              return std::to_string((c.*outer).*m);
            }
          },
          [outer, m](TrainConfig& c, const std::string& k, const std::string& v) {
            if constexpr (std::is_same_v<T, std::string>) {
              (c.*outer).*m = v;
            } else if constexpr (std::is_same_v<T, double>) {
              (c.*outer).*m = to_double(k, v);
            } else {
              (c.*outer).*m = static_cast<T>(to_uint(k, v));
            }
          }};
}

Field flag(bool TrainConfig::*m) {
  return {[m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); },
          [m](TrainConfig& c, const std::string& k, const std::string& v) {
            c.*m = to_bool(k, v);
          }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"lambda_ccr", num(&TrainConfig::lambda_ccr)},
      {"lambda_wvcr", num(&TrainConfig::lambda_wvcr)},
      {"lambda_scst", num(&TrainConfig::lambda_scst)},
      {"tau", num(&TrainConfig::tau)},
      {"use_ccr", flag(&TrainConfig::use_ccr)},
      {"use_wvcr", flag(&TrainConfig::use_wvcr)},
      {"use_scst", flag(&TrainConfig::use_scst)},
      {"gumbel_temperature", num(&TrainConfig::gumbel_temperature)},
      {"ema_retention", num(&TrainConfig::ema_retention)},
      {"resync_teacher", flag(&TrainConfig::resync_teacher)},
      {"lr", num(&TrainConfig::lr)},
      {"beta1", num(&TrainConfig::beta1)},
      {"beta2", num(&TrainConfig::beta2)},
      {"adam_epsilon", num(&TrainConfig::adam_epsilon)},
      {"weight_decay", num(&TrainConfig::weight_decay)},
      {"grad_clip", num(&TrainConfig::grad_clip)},
      {"epochs", num(&TrainConfig::epochs)},
      {"warmup_epochs", num(&TrainConfig::warmup_epochs)},
      {"batch_size", num(&TrainConfig::batch_size)},
      {"unlabeled_ratio", num(&TrainConfig::unlabeled_ratio)},
      {"labeled_augment",
       {[](const TrainConfig& c) { return std::string(augment_name(c.labeled_augment)); },
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "none") c.labeled_augment = LabeledAugment::None;
          else if (v == "weak") c.labeled_augment = LabeledAugment::Weak;
          else if (v == "strong") c.labeled_augment = LabeledAugment::Strong;
          else throw ConfigError(k + ": expected none, weak or strong, got \"" + v + "\"");
        }}},
      {"seed", num(&TrainConfig::seed)},
      {"eval_limit", num(&TrainConfig::eval_limit)},
      {"model_image_height", sub(&TrainConfig::model, &ModelConfig::image_height)},
      {"model_image_width", sub(&TrainConfig::model, &ModelConfig::image_width)},
      {"model_filter_height", sub(&TrainConfig::model, &ModelConfig::filter_height)},
      {"model_filter_width", sub(&TrainConfig::model, &ModelConfig::filter_width)},
      {"model_filter_channels", sub(&TrainConfig::model, &ModelConfig::filter_channels)},
      {"model_column_stride", sub(&TrainConfig::model, &ModelConfig::column_stride)},
      {"model_column_window", sub(&TrainConfig::model, &ModelConfig::column_window)},
      {"model_feature_dim", sub(&TrainConfig::model, &ModelConfig::feature_dim)},
      {"model_embed_dim", sub(&TrainConfig::model, &ModelConfig::embed_dim)},
      {"model_hidden_dim", sub(&TrainConfig::model, &ModelConfig::hidden_dim)},
      {"model_attention_dim", sub(&TrainConfig::model, &ModelConfig::attention_dim)},
      {"model_max_len", sub(&TrainConfig::model, &ModelConfig::max_len)},
      {"model_characters", sub(&TrainConfig::model, &ModelConfig::characters)},
      {"data_seed", sub(&TrainConfig::data, &DataConfig::seed)},
      {"data_lexicon_size", sub(&TrainConfig::data, &DataConfig::lexicon_size)},
      {"data_test_lexicon_fraction", sub(&TrainConfig::data, &DataConfig::test_lexicon_fraction)},
      {"data_labeled", sub(&TrainConfig::data, &DataConfig::labeled)},
      {"data_unlabeled", sub(&TrainConfig::data, &DataConfig::unlabeled)},
      {"data_test_per_split", sub(&TrainConfig::data, &DataConfig::test_per_split)},
  };
  return f;
}

}  // namespace

LossWeights TrainConfig::weights() const {
  LossWeights w;
  w.ccr = use_ccr ? lambda_ccr : 0.0;
  w.wvcr = use_wvcr ? lambda_wvcr : 0.0;
  w.scst = use_scst ? lambda_scst : 0.0;
  return w;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(lambda_ccr >= 0 && lambda_wvcr >= 0 && lambda_scst >= 0, "loss weights must be >= 0");
  require(tau >= 0 && tau < 1, "tau must lie in [0, 1)");
  require(gumbel_temperature > 0, "gumbel_temperature must be > 0");
  require(ema_retention >= 0 && ema_retention < 1, "ema_retention must lie in [0, 1)");
  require(lr >= 0, "lr must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
  require(adam_epsilon > 0, "adam_epsilon must be > 0");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(grad_clip > 0, "grad_clip must be > 0");
  require(batch_size > 0, "batch_size must be > 0");
  require(unlabeled_ratio > 0, "unlabeled_ratio must be > 0");
  require(data.labeled > 0, "data_labeled must be > 0");
  require(data.unlabeled > 0 || !unsupervised(), "unlabeled losses need data_unlabeled > 0");
  require(data.height == model.image_height && data.width == model.image_width,
          "data and model image sizes differ");
  try {
    model.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
  return out;
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig c;
  std::map<std::string, const Field*> by_key;
  for (const auto& [key, field] : fields()) by_key[key] = &field;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key \"" + key + "\"");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key \"" + key + "\"");
    }
    try {
      it->second->set(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  c.data.height = c.model.image_height;
  c.data.width = c.model.image_width;
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::uint64_t TrainConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void TrainConfig::apply_ablation(std::string_view name) {
  if (name == "sup" || name == "none") {
    use_ccr = use_wvcr = use_scst = false;
  } else if (name == "ccr") {
    use_ccr = true;
    use_wvcr = use_scst = false;
  } else if (name == "+wvcr") {
    use_ccr = use_wvcr = true;
    use_scst = false;
  } else if (name == "+wscr" || name == "full") {
    use_ccr = use_wvcr = use_scst = true;
  } else {
    throw ConfigError("unknown ablation \"" + std::string(name) +
                      "\" (expected sup, ccr, +wvcr, +wscr or full)");
  }
}

}  // namespace seqcr
