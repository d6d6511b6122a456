#pragma once

#include <string>

#include "sesim/extractor.hpp"

namespace sesim {

// On-disk container: a JSON manifest describing dtype ("f32"), byte order
// ("little-endian"), tensor names/shapes in order, and the architecture, plus
// a flat binary file of the tensors' row-major f32 data concatenated in
// manifest order. Roundtrips bit-exactly.
void save_extractor_weights(const ExtractorWeights<float>& weights,
                            const ArchSpec& arch, const std::string& manifest_path);

// Shape-checks against the supplied arch; errors distinguish a missing file,
// a binary length mismatch, and a per-tensor shape mismatch (named).
ExtractorWeights<float> load_extractor_weights(const std::string& manifest_path,
                                               const ArchSpec& arch);

// Architecture recorded in a weight manifest.
ArchSpec load_extractor_arch(const std::string& manifest_path);

void save_selection_layers(const SelectionLayers<float>& sel,
                           const std::string& manifest_path);
SelectionLayers<float> load_selection_layers(const std::string& manifest_path);

}  // namespace sesim
