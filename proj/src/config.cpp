#include "sesim/config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>

#include "json.hpp"

namespace sesim {

namespace {

using json = nlohmann::ordered_json;

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

std::pair<double, double> range_from(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 2)
    throw std::invalid_argument("config: " + where + " must be a [lo, hi] pair");
  return {v[0].get<double>(), v[1].get<double>()};
}

SampleMode mode_from(const std::string& s) {
  if (s == "patch_random") return SampleMode::patch_random;
  if (s == "patch_grid") return SampleMode::patch_grid;
  if (s == "global") return SampleMode::global;
  if (s == "scattered_random") return SampleMode::scattered_random;
  throw std::invalid_argument("config: unknown sampling mode '" + s + "'");
}

const char* mode_name(SampleMode m) {
  switch (m) {
    case SampleMode::patch_random: return "patch_random";
    case SampleMode::patch_grid: return "patch_grid";
    case SampleMode::global: return "global";
    case SampleMode::scattered_random: return "scattered_random";
  }
  return "patch_random";
}

MapMetric metric_from(const std::string& s) {
  if (s == "cos") return MapMetric::cos;
  if (s == "l1") return MapMetric::l1;
  throw std::invalid_argument("config: unknown metric '" + s + "'");
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config: top level must be an object");

  RunConfig cfg;
  check_keys(doc, "the top level",
             {"seed", "taps", "sampling", "loss", "augment", "optimizer", "weights",
              "train", "stylize", "synth", "images", "query"});

  if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
  if (doc.contains("taps")) cfg.sesim.taps = doc["taps"].get<std::vector<std::string>>();

  if (doc.contains("sampling")) {
    const auto& s = doc["sampling"];
    check_keys(s, "sampling", {"n_s", "patch_side", "mode"});
    if (s.contains("n_s")) cfg.sesim.n_s = s["n_s"].get<int>();
    if (s.contains("patch_side")) cfg.sesim.patch_side = s["patch_side"].get<int>();
    if (s.contains("mode")) cfg.sesim.mode = mode_from(s["mode"].get<std::string>());
  }

  if (doc.contains("loss")) {
    const auto& l = doc["loss"];
    check_keys(l, "loss",
               {"metric", "normalize_features", "lambda", "tau", "negatives",
                "internal_neg_fraction"});
    if (l.contains("metric")) cfg.sesim.metric = metric_from(l["metric"].get<std::string>());
    if (l.contains("normalize_features"))
      cfg.sesim.normalize_features = l["normalize_features"].get<bool>();
    if (l.contains("lambda")) cfg.sesim.lambda = l["lambda"].get<double>();
    if (l.contains("tau")) cfg.sesim.tau = l["tau"].get<double>();
    if (l.contains("negatives")) cfg.sesim.negatives = l["negatives"].get<int>();
    if (l.contains("internal_neg_fraction"))
      cfg.sesim.internal_neg_fraction = l["internal_neg_fraction"].get<double>();
  }

  if (doc.contains("augment")) {
    const auto& a = doc["augment"];
    check_keys(a, "augment", {"gain", "bias", "grayscale_probability", "gamma", "noise_sigma"});
    if (a.contains("gain"))
      std::tie(cfg.augment.gain_lo, cfg.augment.gain_hi) = range_from(a["gain"], "augment.gain");
    if (a.contains("bias"))
      std::tie(cfg.augment.bias_lo, cfg.augment.bias_hi) = range_from(a["bias"], "augment.bias");
    if (a.contains("grayscale_probability"))
      cfg.augment.grayscale_probability = a["grayscale_probability"].get<double>();
    if (a.contains("gamma"))
      std::tie(cfg.augment.gamma_lo, cfg.augment.gamma_hi) =
          range_from(a["gamma"], "augment.gamma");
    if (a.contains("noise_sigma")) cfg.augment.noise_sigma = a["noise_sigma"].get<double>();
  }

  if (doc.contains("optimizer")) {
    const auto& o = doc["optimizer"];
    check_keys(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
    if (o.contains("lr")) cfg.adam.lr = o["lr"].get<double>();
    if (o.contains("beta1")) cfg.adam.beta1 = o["beta1"].get<double>();
    if (o.contains("beta2")) cfg.adam.beta2 = o["beta2"].get<double>();
    if (o.contains("eps")) cfg.adam.eps = o["eps"].get<double>();
  }

  if (doc.contains("weights")) {
    const auto& w = doc["weights"];
    check_keys(w, "weights", {"extractor", "selection", "init_seed"});
    if (w.contains("extractor")) cfg.extractor_weights = w["extractor"].get<std::string>();
    if (w.contains("selection")) cfg.selection_weights = w["selection"].get<std::string>();
    if (w.contains("init_seed")) cfg.init_seed = w["init_seed"].get<std::uint64_t>();
  }

  if (doc.contains("train")) {
    const auto& t = doc["train"];
    check_keys(t, "train", {"steps", "log_every"});
    if (t.contains("steps")) cfg.train_steps = t["steps"].get<long>();
    if (t.contains("log_every")) cfg.log_every = t["log_every"].get<long>();
  }

  if (doc.contains("stylize")) {
    const auto& s = doc["stylize"];
    check_keys(s, "stylize", {"steps", "lr"});
    if (s.contains("steps")) cfg.stylize_steps = s["steps"].get<long>();
    if (s.contains("lr")) cfg.stylize_lr = s["lr"].get<double>();
  }

  if (doc.contains("synth")) {
    const auto& s = doc["synth"];
    check_keys(s, "synth",
               {"height", "width", "count", "shapes", "stripe_freq", "noise_octaves"});
    if (s.contains("height")) cfg.synth.height = s["height"].get<int>();
    if (s.contains("width")) cfg.synth.width = s["width"].get<int>();
    if (s.contains("count")) cfg.synth.count = s["count"].get<int>();
    if (s.contains("shapes")) {
      const auto [lo, hi] = range_from(s["shapes"], "synth.shapes");
      cfg.synth.shapes_min = static_cast<int>(lo);
      cfg.synth.shapes_max = static_cast<int>(hi);
    }
    if (s.contains("stripe_freq"))
      std::tie(cfg.synth.stripe_freq_lo, cfg.synth.stripe_freq_hi) =
          range_from(s["stripe_freq"], "synth.stripe_freq");
    if (s.contains("noise_octaves")) cfg.synth.noise_octaves = s["noise_octaves"].get<int>();
  }

  if (doc.contains("images")) {
    const auto& i = doc["images"];
    check_keys(i, "images", {"x", "y", "content", "style"});
    if (i.contains("x")) cfg.image_x = i["x"].get<std::string>();
    if (i.contains("y")) cfg.image_y = i["y"].get<std::string>();
    if (i.contains("content")) cfg.image_content = i["content"].get<std::string>();
    if (i.contains("style")) cfg.image_style = i["style"].get<std::string>();
  }

  if (doc.contains("query")) {
    const auto& q = doc["query"];
    if (!q.is_array() || q.size() != 2)
      throw std::invalid_argument("config: query must be a [row, col] pair");
    cfg.query = {q[0].get<int>(), q[1].get<int>()};
  }

  cfg.sesim.validate();
  cfg.augment.validate();
  cfg.synth.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

std::string config_json(const RunConfig& cfg) {
  json doc;
  doc["seed"] = cfg.seed;
  doc["taps"] = cfg.sesim.taps;
  doc["sampling"] = {{"n_s", cfg.sesim.n_s},
                     {"patch_side", cfg.sesim.patch_side},
                     {"mode", mode_name(cfg.sesim.mode)}};
  doc["loss"] = {{"metric", cfg.sesim.metric == MapMetric::cos ? "cos" : "l1"},
                 {"normalize_features", cfg.sesim.normalize_features},
                 {"lambda", cfg.sesim.lambda},
                 {"tau", cfg.sesim.tau},
                 {"negatives", cfg.sesim.negatives},
                 {"internal_neg_fraction", cfg.sesim.internal_neg_fraction}};
  doc["augment"] = {{"gain", {cfg.augment.gain_lo, cfg.augment.gain_hi}},
                    {"bias", {cfg.augment.bias_lo, cfg.augment.bias_hi}},
                    {"grayscale_probability", cfg.augment.grayscale_probability},
                    {"gamma", {cfg.augment.gamma_lo, cfg.augment.gamma_hi}},
                    {"noise_sigma", cfg.augment.noise_sigma}};
  doc["optimizer"] = {{"lr", cfg.adam.lr},
                      {"beta1", cfg.adam.beta1},
                      {"beta2", cfg.adam.beta2},
                      {"eps", cfg.adam.eps}};
  doc["weights"] = {{"extractor", cfg.extractor_weights},
                    {"selection", cfg.selection_weights},
                    {"init_seed", cfg.init_seed}};
  doc["train"] = {{"steps", cfg.train_steps}, {"log_every", cfg.log_every}};
  doc["stylize"] = {{"steps", cfg.stylize_steps}, {"lr", cfg.stylize_lr}};
  doc["synth"] = {{"height", cfg.synth.height},
                  {"width", cfg.synth.width},
                  {"count", cfg.synth.count},
                  {"shapes", {cfg.synth.shapes_min, cfg.synth.shapes_max}},
                  {"stripe_freq", {cfg.synth.stripe_freq_lo, cfg.synth.stripe_freq_hi}},
                  {"noise_octaves", cfg.synth.noise_octaves}};
  doc["images"] = {{"x", cfg.image_x},
                   {"y", cfg.image_y},
                   {"content", cfg.image_content},
                   {"style", cfg.image_style}};
  doc["query"] = {cfg.query.row, cfg.query.col};
  return doc.dump(2) + "\n";
}

}  // namespace sesim
