#pragma once

#include <string>

#include "sesim/adam.hpp"
#include "sesim/lsesim.hpp"
#include "sesim/sesim.hpp"
#include "sesim/synth.hpp"

namespace sesim {

// Everything a CLI run needs, parsed from one JSON document. Every field has
// a default; unknown keys are rejected at every nesting level; the resolved
// config serializes back to canonical JSON (the reproducibility echo).
struct RunConfig {
  std::uint64_t seed = 0;
  SesimConfig sesim;
  AugmentSpec augment;
  AdamParams adam;

  std::string extractor_weights;  // manifest path; empty = seeded random trunk
  std::string selection_weights;  // manifest path; empty = no selection stage
  std::uint64_t init_seed = 1;    // trunk seed when no weights are loaded

  long train_steps = 400;
  long log_every = 10;

  long stylize_steps = 300;
  double stylize_lr = 0.01;

  SynthSpec synth;

  std::string image_x, image_y;            // selfsim / error-map inputs
  std::string image_content, image_style;  // stylize inputs
  Coord query{32, 32};                     // selfsim query, image pixels
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

// Canonical echo: fixed key order, all fields explicit.
std::string config_json(const RunConfig& cfg);

}  // namespace sesim
