#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "sesim/config.hpp"
#include "sesim/csv.hpp"
#include "sesim/extractor.hpp"
#include "sesim/gradcheck.hpp"
#include "sesim/harness.hpp"
#include "sesim/image_io.hpp"
#include "sesim/lsesim.hpp"
#include "sesim/synth.hpp"
#include "sesim/weights_io.hpp"

namespace fs = std::filesystem;
using namespace sesim;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--out", c.out_dir, "output directory");
}

// Loads the config, applies the seed override, prepares the output directory,
// and writes the resolved-config echo.
RunConfig setup(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.sesim.seed = cfg.seed;
  cfg.augment.seed = cfg.seed;
  cfg.synth.seed = cfg.seed;
  fs::create_directories(c.out_dir);
  std::ofstream echo(fs::path(c.out_dir) / "config.json", std::ios::binary);
  if (!echo) throw std::runtime_error("cannot write config echo in '" + c.out_dir + "'");
  echo << config_json(cfg);
  return cfg;
}

struct Net {
  ArchSpec arch;
  ExtractorWeights<float> trunk;
  std::optional<SelectionLayers<float>> selection;
};

Net build_net(const RunConfig& cfg) {
  Net net;
  if (!cfg.extractor_weights.empty()) {
    net.arch = load_extractor_arch(cfg.extractor_weights);
    net.trunk = load_extractor_weights(cfg.extractor_weights, net.arch);
  } else {
    net.arch = default_arch();
    net.trunk = init_random<float>(net.arch, cfg.init_seed);
  }
  if (!cfg.selection_weights.empty())
    net.selection = load_selection_layers(cfg.selection_weights);
  return net;
}

std::string require_path(const std::string& path, const std::string& what) {
  if (path.empty())
    throw std::invalid_argument("config: '" + what + "' must name an input image");
  return path;
}

int cmd_selfsim(const Common& c) {
  const RunConfig cfg = setup(c);
  const Net net = build_net(cfg);
  const auto image = load_image(require_path(cfg.image_x, "images.x"));

  const auto heat = selfsim_heatmap(image, cfg.query, cfg.sesim, net.trunk, net.arch,
                                    net.selection ? &*net.selection : nullptr);
  save_heatmap(heat, (fs::path(c.out_dir) / "selfsim.png").string());

  // raw correlations at tap resolution, before upsampling
  const std::string tap = cfg.sesim.taps.front();
  const auto feat =
      net.selection
          ? apply_selection(extract(image, net.trunk, net.arch), *net.selection).tap(tap).feat
          : extract(image, net.trunk, net.arch).tap(tap).feat;
  const int stride = net.arch.tap_stride(tap);
  SampleSet set;
  set.mode = SampleMode::global;
  set.rows = static_cast<int>(feat.height());
  set.cols = static_cast<int>(feat.width());
  set.queries = {{cfg.query.row / stride, cfg.query.col / stride}};
  const auto maps = corr_maps(feat, set, cfg.sesim.normalize_features, tap);

  CsvWriter csv((fs::path(c.out_dir) / "selfsim_grid.csv").string());
  csv.row({"row", "col", "value"});
  for (int r = 0; r < set.rows; ++r)
    for (int col = 0; col < set.cols; ++col)
      csv.row({csv_number(r), csv_number(col),
               csv_number(static_cast<double>(maps.maps(0, r * set.cols + col)))});
  return 0;
}

int cmd_error_map(const Common& c) {
  const RunConfig cfg = setup(c);
  const Net net = build_net(cfg);
  const auto x = load_image(require_path(cfg.image_x, "images.x"));
  const auto y = load_image(require_path(cfg.image_y, "images.y"));

  const auto res = error_map(x, y, cfg.sesim, net.trunk, net.arch,
                             net.selection ? &*net.selection : nullptr);
  save_heatmap(res.heatmap, (fs::path(c.out_dir) / "error_map.png").string());

  CsvWriter csv((fs::path(c.out_dir) / "error_grid.csv").string());
  csv.row({"row", "col", "value"});
  const Index g = res.grid.values.rows();
  for (Index i = 0; i < g * g; ++i) {
    const auto& q = res.grid.queries[static_cast<std::size_t>(i)];
    csv.row({csv_number(q.row), csv_number(q.col),
             csv_number(static_cast<double>(res.grid.values(i / g, i % g)))});
  }
  return 0;
}

int cmd_train_structure(const Common& c) {
  const RunConfig cfg = setup(c);
  const Net net = build_net(cfg);

  const auto corpus = synth_dataset<float>(cfg.synth);
  std::vector<Tensor<float>> images = corpus.a;
  images.insert(images.end(), corpus.b.begin(), corpus.b.end());

  TrainConfig tc;
  tc.steps = cfg.train_steps;
  tc.log_every = cfg.log_every;
  tc.adam = cfg.adam;
  tc.sesim = cfg.sesim;
  tc.augment = cfg.augment;
  tc.seed = cfg.seed;
  const auto result = train_structure_net(images, net.trunk, net.arch, tc);

  CsvWriter csv((fs::path(c.out_dir) / "train_log.csv").string());
  csv.row({"step", "loss", "retrieval_rate"});
  for (const auto& row : result.log)
    csv.row({csv_number(row.step), csv_number(row.loss), csv_number(row.retrieval_rate)});

  save_selection_layers(result.selection,
                        (fs::path(c.out_dir) / "selection.json").string());
  return 0;
}

int cmd_stylize(const Common& c) {
  const RunConfig cfg = setup(c);
  const Net net = build_net(cfg);
  const auto content = load_image(require_path(cfg.image_content, "images.content"));
  const auto style = load_image(require_path(cfg.image_style, "images.style"));

  AdamParams adam = cfg.adam;
  adam.lr = cfg.stylize_lr;
  const auto res =
      stylize(content, style, cfg.sesim, cfg.stylize_steps, net.trunk, net.arch, adam);

  save_image(res.image, (fs::path(c.out_dir) / "final.png").string());
  save_image(res.best_image, (fs::path(c.out_dir) / "best.png").string());
  CsvWriter csv((fs::path(c.out_dir) / "trace.csv").string());
  csv.row({"step", "total", "content", "style"});
  for (const auto& row : res.trace)
    csv.row({csv_number(row.step), csv_number(row.total), csv_number(row.content),
             csv_number(row.style)});
  return 0;
}

int cmd_synth(const Common& c) {
  const RunConfig cfg = setup(c);
  const auto corpus = synth_dataset<float>(cfg.synth);

  char name[64];
  CsvWriter pairs((fs::path(c.out_dir) / "pairs.csv").string());
  pairs.row({"item", "a_file", "b_file", "shuffled_b_file"});
  CsvWriter stats((fs::path(c.out_dir) / "stats.csv").string());
  stats.row({"item", "high_freq_fraction_a", "high_freq_fraction_b"});

  for (std::size_t i = 0; i < corpus.a.size(); ++i) {
    std::snprintf(name, sizeof name, "a_%03zu.png", i);
    const std::string a_file = name;
    save_image(corpus.a[i], (fs::path(c.out_dir) / a_file).string());
    std::snprintf(name, sizeof name, "b_%03zu.png", i);
    const std::string b_file = name;
    save_image(corpus.b[i], (fs::path(c.out_dir) / b_file).string());
    std::snprintf(name, sizeof name, "b_%03zu.png", corpus.shuffled[i]);
    pairs.row({csv_number(static_cast<long>(i)), a_file, b_file, name});
    stats.row({csv_number(static_cast<long>(i)),
               csv_number(high_freq_fraction(corpus.a[i])),
               csv_number(high_freq_fraction(corpus.b[i]))});
  }
  return 0;
}

int cmd_gradcheck(const Common& c) {
  const RunConfig cfg = setup(c);
  const auto report = gradcheck_suite(cfg.seed);

  CsvWriter csv((fs::path(c.out_dir) / "gradcheck.csv").string());
  csv.row({"kernel", "max_rel_err", "tolerance", "pass"});
  for (const auto& e : report.checks)
    csv.row({e.name, csv_number(e.max_rel_err), csv_number(e.tolerance),
             e.pass ? "1" : "0"});

  for (const auto& e : report.checks)
    std::cout << (e.pass ? "pass " : "FAIL ") << e.name << "  max_rel_err="
              << csv_number(e.max_rel_err) << "\n";
  if (!report.all_pass) {
    std::cerr << "gradcheck: one or more kernels exceeded tolerance\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatially-correlative structure losses: maps, training, demos"};
  app.require_subcommand(1);

  Common c_selfsim, c_error, c_train, c_stylize, c_synth, c_grad;
  auto* s1 = app.add_subcommand("selfsim", "self-similarity heatmap for one query point");
  add_common(s1, c_selfsim);
  auto* s2 = app.add_subcommand("error-map", "structure-error grid between two images");
  add_common(s2, c_error);
  auto* s3 = app.add_subcommand("train-structure", "train the 1x1 selection layers");
  add_common(s3, c_train);
  auto* s4 = app.add_subcommand("stylize", "structure-preserving pixel optimization");
  add_common(s4, c_stylize);
  auto* s5 = app.add_subcommand("synth", "generate the paired synthetic corpus");
  add_common(s5, c_synth);
  auto* s6 = app.add_subcommand("gradcheck", "finite-difference verification suite");
  add_common(s6, c_grad);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (s1->parsed()) return cmd_selfsim(c_selfsim);
    if (s2->parsed()) return cmd_error_map(c_error);
    if (s3->parsed()) return cmd_train_structure(c_train);
    if (s4->parsed()) return cmd_stylize(c_stylize);
    if (s5->parsed()) return cmd_synth(c_synth);
    if (s6->parsed()) return cmd_gradcheck(c_grad);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
