#include "sesim/weights_io.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace sesim {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string padding_name(Padding p) { return p == Padding::zero ? "zero" : "none"; }

Padding padding_from(const std::string& s) {
  if (s == "zero") return Padding::zero;
  if (s == "none") return Padding::none;
  throw std::runtime_error("weights: unknown padding '" + s + "'");
}

json arch_to_json(const ArchSpec& arch) {
  json a;
  json layers = json::array();
  for (const auto& l : arch.layers) {
    json e;
    switch (l.kind) {
      case LayerKind::conv:
        e["kind"] = "conv";
        e["conv"] = l.conv;
        break;
      case LayerKind::relu:
        e["kind"] = "relu";
        if (!l.tap.empty()) e["tap"] = l.tap;
        break;
      case LayerKind::pool:
        e["kind"] = "pool";
        break;
    }
    layers.push_back(std::move(e));
  }
  a["layers"] = std::move(layers);
  json convs = json::array();
  for (const auto& c : arch.convs)
    convs.push_back({{"in", c.in_ch},
                     {"out", c.out_ch},
                     {"kernel", c.kernel},
                     {"stride", c.stride},
                     {"padding", padding_name(c.padding)}});
  a["convs"] = std::move(convs);
  return a;
}

ArchSpec arch_from_json(const json& a) {
  ArchSpec arch;
  for (const auto& e : a.at("layers")) {
    const std::string kind = e.at("kind").get<std::string>();
    if (kind == "conv") {
      arch.layers.push_back({LayerKind::conv, e.at("conv").get<int>(), ""});
    } else if (kind == "relu") {
      arch.layers.push_back(
          {LayerKind::relu, -1, e.contains("tap") ? e.at("tap").get<std::string>() : ""});
    } else if (kind == "pool") {
      arch.layers.push_back({LayerKind::pool, -1, ""});
    } else {
      throw std::runtime_error("weights: unknown layer kind '" + kind + "'");
    }
  }
  for (const auto& c : a.at("convs"))
    arch.convs.push_back({c.at("in").get<int>(), c.at("out").get<int>(),
                          c.at("kernel").get<int>(), c.at("stride").get<int>(),
                          padding_from(c.at("padding").get<std::string>())});
  arch.validate();
  return arch;
}

struct TensorRecord {
  std::string name;
  std::vector<Index> shape;
  const float* data;
  Index count;
};

void write_container(const std::string& manifest_path, json manifest,
                     const std::vector<TensorRecord>& tensors) {
  const fs::path mpath(manifest_path);
  const fs::path bin_path = fs::path(mpath).replace_extension(".bin");
  manifest["data_file"] = bin_path.filename().string();

  json tlist = json::array();
  for (const auto& t : tensors) tlist.push_back({{"name", t.name}, {"shape", t.shape}});
  manifest["tensors"] = std::move(tlist);

  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("weights: cannot open '" + bin_path.string() + "'");
  for (const auto& t : tensors)
    bin.write(reinterpret_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.count) * 4);
  bin.close();
  if (!bin) throw std::runtime_error("weights: write failed for '" + bin_path.string() + "'");

  std::ofstream mf(mpath, std::ios::binary);
  if (!mf) throw std::runtime_error("weights: cannot open '" + manifest_path + "'");
  mf << manifest.dump(2) << '\n';
}

struct Container {
  json manifest;
  std::vector<float> data;
  std::vector<std::pair<std::string, std::vector<Index>>> tensors;  // in order
  std::vector<Index> offsets;                                       // per tensor
};

Container read_container(const std::string& manifest_path, const std::string& kind) {
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw std::runtime_error("weights: missing manifest '" + manifest_path + "'");
  Container c;
  try {
    mf >> c.manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("weights: manifest '" + manifest_path +
                             "' is not valid JSON: " + e.what());
  }
  if (c.manifest.value("format", "") != "sesim-weights")
    throw std::runtime_error("weights: '" + manifest_path + "' is not a weight manifest");
  if (c.manifest.value("kind", "") != kind)
    throw std::runtime_error("weights: '" + manifest_path + "' holds kind '" +
                             c.manifest.value("kind", "") + "', expected '" + kind + "'");
  if (c.manifest.value("dtype", "") != "f32" ||
      c.manifest.value("byte_order", "") != "little-endian")
    throw std::runtime_error("weights: unsupported dtype/byte order in '" +
                             manifest_path + "'");

  Index total = 0;
  c.offsets.clear();
  for (const auto& t : c.manifest.at("tensors")) {
    std::vector<Index> shape = t.at("shape").get<std::vector<Index>>();
    Index n = 1;
    for (Index d : shape) n *= d;
    c.tensors.emplace_back(t.at("name").get<std::string>(), std::move(shape));
    c.offsets.push_back(total);
    total += n;
  }

  const fs::path bin_path =
      fs::path(manifest_path).parent_path() / c.manifest.at("data_file").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
  if (!bin) throw std::runtime_error("weights: missing data file '" + bin_path.string() + "'");
  const auto bytes = static_cast<Index>(bin.tellg());
  if (bytes != total * 4)
    throw std::runtime_error("weights: binary length mismatch in '" + bin_path.string() +
                             "': manifest declares " + std::to_string(total * 4) +
                             " bytes, file has " + std::to_string(bytes));
  c.data.resize(static_cast<std::size_t>(total));
  bin.seekg(0);
  bin.read(reinterpret_cast<char*>(c.data.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw std::runtime_error("weights: read failed for '" + bin_path.string() + "'");
  return c;
}

void expect_shape(const Container& c, std::size_t idx, const std::string& name,
                  const std::vector<Index>& want) {
  if (idx >= c.tensors.size())
    throw std::runtime_error("weights: manifest is missing tensor '" + name + "'");
  if (c.tensors[idx].first != name)
    throw std::runtime_error("weights: expected tensor '" + name + "', manifest has '" +
                             c.tensors[idx].first + "'");
  if (c.tensors[idx].second != want) {
    std::string got, exp;
    for (Index d : c.tensors[idx].second) got += (got.empty() ? "" : "x") + std::to_string(d);
    for (Index d : want) exp += (exp.empty() ? "" : "x") + std::to_string(d);
    throw std::runtime_error("weights: shape mismatch at '" + name + "': manifest " +
                             got + ", architecture needs " + exp);
  }
}

}  // namespace

void save_extractor_weights(const ExtractorWeights<float>& weights,
                            const ArchSpec& arch, const std::string& manifest_path) {
  arch.validate();
  weights.check_arch(arch);
  json m;
  m["format"] = "sesim-weights";
  m["version"] = 1;
  m["kind"] = "extractor";
  m["dtype"] = "f32";
  m["byte_order"] = "little-endian";
  m["arch"] = arch_to_json(arch);
  if (weights.normalization) {
    m["normalization"] = {{"mean", weights.normalization->mean},
                          {"std", weights.normalization->std}};
  }

  std::vector<TensorRecord> recs;
  for (std::size_t i = 0; i < weights.weight.size(); ++i) {
    const auto& w = weights.weight[i];
    const auto& b = weights.bias[i];
    const std::string base = "conv" + std::to_string(i);
    recs.push_back({base + ".weight",
                    {w.batch(), w.channels(), w.height(), w.width()},
                    w.data(),
                    w.size()});
    recs.push_back({base + ".bias", {b.size()}, b.data(), b.size()});
  }
  write_container(manifest_path, std::move(m), recs);
}

ExtractorWeights<float> load_extractor_weights(const std::string& manifest_path,
                                               const ArchSpec& arch) {
  arch.validate();
  const Container c = read_container(manifest_path, "extractor");

  ExtractorWeights<float> out;
  out.provenance = WeightProvenance::loaded;
  std::size_t idx = 0;
  for (std::size_t i = 0; i < arch.convs.size(); ++i) {
    const auto& spec = arch.convs[i];
    const std::string base = "conv" + std::to_string(i);
    expect_shape(c, idx, base + ".weight",
                 {spec.out_ch, spec.in_ch, spec.kernel, spec.kernel});
    Tensor<float> w(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel);
    std::copy_n(c.data.data() + c.offsets[idx], w.size(), w.data());
    ++idx;
    expect_shape(c, idx, base + ".bias", {spec.out_ch});
    VectorX<float> b(spec.out_ch);
    std::copy_n(c.data.data() + c.offsets[idx], b.size(), b.data());
    ++idx;
    out.weight.push_back(std::move(w));
    out.bias.push_back(std::move(b));
  }
  if (idx != c.tensors.size())
    throw std::runtime_error("weights: manifest lists " + std::to_string(c.tensors.size()) +
                             " tensors, architecture needs " + std::to_string(idx));

  if (c.manifest.contains("normalization")) {
    const auto& nz = c.manifest.at("normalization");
    Normalization n;
    n.mean = nz.at("mean").get<std::vector<double>>();
    n.std = nz.at("std").get<std::vector<double>>();
    if (n.mean.size() != static_cast<std::size_t>(arch.input_channels()) ||
        n.std.size() != n.mean.size())
      throw std::runtime_error("weights: normalization stats have the wrong channel count");
    out.normalization = std::move(n);
  }
  return out;
}

ArchSpec load_extractor_arch(const std::string& manifest_path) {
  const Container c = read_container(manifest_path, "extractor");
  return arch_from_json(c.manifest.at("arch"));
}

void save_selection_layers(const SelectionLayers<float>& sel,
                           const std::string& manifest_path) {
  json m;
  m["format"] = "sesim-weights";
  m["version"] = 1;
  m["kind"] = "selection";
  m["dtype"] = "f32";
  m["byte_order"] = "little-endian";

  std::vector<TensorRecord> recs;
  for (const auto& [name, s] : sel.taps) {
    recs.push_back({name + ".w1",
                    {s.w1.batch(), s.w1.channels(), s.w1.height(), s.w1.width()},
                    s.w1.data(),
                    s.w1.size()});
    recs.push_back({name + ".b1", {s.b1.size()}, s.b1.data(), s.b1.size()});
    recs.push_back({name + ".w2",
                    {s.w2.batch(), s.w2.channels(), s.w2.height(), s.w2.width()},
                    s.w2.data(),
                    s.w2.size()});
    recs.push_back({name + ".b2", {s.b2.size()}, s.b2.data(), s.b2.size()});
  }
  write_container(manifest_path, std::move(m), recs);
}

SelectionLayers<float> load_selection_layers(const std::string& manifest_path) {
  const Container c = read_container(manifest_path, "selection");
  if (c.tensors.size() % 4 != 0)
    throw std::runtime_error("weights: selection manifest must hold 4 tensors per tap");

  SelectionLayers<float> sel;
  for (std::size_t idx = 0; idx < c.tensors.size(); idx += 4) {
    const std::string& first = c.tensors[idx].first;
    const auto dot = first.rfind(".w1");
    if (dot == std::string::npos || dot + 3 != first.size())
      throw std::runtime_error("weights: expected a '<tap>.w1' tensor, got '" + first + "'");
    const std::string tap = first.substr(0, dot);

    auto tensor_at = [&](std::size_t i, const std::string& name) {
      if (c.tensors[i].first != name)
        throw std::runtime_error("weights: expected tensor '" + name + "', manifest has '" +
                                 c.tensors[i].first + "'");
      if (c.tensors[i].second.size() != 4)
        throw std::runtime_error("weights: tensor '" + name + "' must be 4-D");
      const auto& sh = c.tensors[i].second;
      Tensor<float> t(sh[0], sh[1], sh[2], sh[3]);
      std::copy_n(c.data.data() + c.offsets[i], t.size(), t.data());
      return t;
    };
    auto vector_at = [&](std::size_t i, const std::string& name) {
      if (c.tensors[i].first != name)
        throw std::runtime_error("weights: expected tensor '" + name + "', manifest has '" +
                                 c.tensors[i].first + "'");
      if (c.tensors[i].second.size() != 1)
        throw std::runtime_error("weights: tensor '" + name + "' must be 1-D");
      VectorX<float> v(c.tensors[i].second[0]);
      std::copy_n(c.data.data() + c.offsets[i], v.size(), v.data());
      return v;
    };

    typename SelectionLayers<float>::TapSel s;
    s.w1 = tensor_at(idx, tap + ".w1");
    s.b1 = vector_at(idx + 1, tap + ".b1");
    s.w2 = tensor_at(idx + 2, tap + ".w2");
    s.b2 = vector_at(idx + 3, tap + ".b2");
    if (s.w1.height() != 1 || s.w1.width() != 1 || s.w2.height() != 1 || s.w2.width() != 1)
      throw std::runtime_error("weights: selection kernels at '" + tap + "' must be 1x1");
    if (s.b1.size() != s.w1.batch() || s.b2.size() != s.w2.batch() ||
        s.w2.channels() != s.w1.batch())
      throw std::runtime_error("weights: inconsistent selection shapes at '" + tap + "'");
    sel.taps[tap] = std::move(s);
  }
  return sel;
}

}  // namespace sesim
