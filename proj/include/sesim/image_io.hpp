#pragma once

#include <string>

#include "sesim/tensor.hpp"

namespace sesim {

// 8-bit RGB PNG only. Loading maps each byte v to v/255; saving rounds
// half-up and clamps to [0,1] first.
Tensor<float> load_image(const std::string& path);
void save_image(const Tensor<float>& image, const std::string& path);

// Renders a (1,1,H,W) map in [0,1] through the built-in 256-entry color
// table and writes it as RGB.
void save_heatmap(const Tensor<float>& heat, const std::string& path);

}  // namespace sesim
