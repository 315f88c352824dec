#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/model.hpp"

namespace meshnet {

namespace detail {

inline std::uint32_t crc32(const void* data, std::size_t len,
                           std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const std::uint8_t*>(data);
  crc = ~crc;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
  return ~crc;
}

}  // namespace detail

// Weight file: a text header describing the architecture and a blob table, then
// contiguous little-endian float32 sections in declared layer order
// (kernel, bias, then gamma/beta/running_mean/running_var for batch-norm
// layers). Each blob carries its own crc32 so a bad load names the exact
// section. docs/formats.md has the byte-level layout.

inline constexpr int kWeightFormatVersion = 1;

namespace detail {

template <typename T>
void collect_blobs(const Model<T>& m,
                   std::vector<std::pair<std::string, const Tensor<T>*>>& out) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string prefix = "layer" + std::to_string(i + 1) + ".";
    out.emplace_back(prefix + "kernel", &l.kernel);
    out.emplace_back(prefix + "bias", &l.bias);
    if (l.cfg.batch_norm) {
      out.emplace_back(prefix + "bn_gamma", &l.gamma);
      out.emplace_back(prefix + "bn_beta", &l.beta);
      out.emplace_back(prefix + "bn_running_mean", &l.running_mean);
      out.emplace_back(prefix + "bn_running_var", &l.running_var);
    }
  }
}

}  // namespace detail

template <typename T>
void save_model(const Model<T>& model, const std::string& path) {
  std::vector<std::pair<std::string, const Tensor<T>*>> blobs;
  detail::collect_blobs(model, blobs);

  std::ostringstream head;
  head.precision(17);  // spec doubles survive the round trip exactly
  head << "meshnet weights " << kWeightFormatVersion << "\n";
  head << "byte_order little\n";
  const ModelSpec& s = model.spec;
  head << "modalities " << s.modalities << "\n";
  head << "channels " << s.channels << "\n";
  head << "classes " << s.classes << "\n";
  head << "subvolume_side " << s.subvolume_side << "\n";
  head << "bn_placement "
       << (s.bn_placement == BnPlacement::before_activation ? "before" : "after")
       << "\n";
  head << "bn_eps " << s.bn_eps << "\n";
  head << "bn_momentum " << s.bn_momentum << "\n";
  head << "layers " << s.layers.size() << "\n";
  for (const auto& l : s.layers)
    head << "layer " << l.kernel << " " << l.dilation << " " << l.padding << " "
         << (l.batch_norm ? "bn" : "nobn") << " " << (l.relu ? "relu" : "norelu")
         << " " << l.dropout_p << "\n";

  // Convert once so the checksum covers the exact bytes on disk.
  std::vector<std::vector<float>> sections;
  sections.reserve(blobs.size());
  head << "blobs " << blobs.size() << "\n";
  for (const auto& [name, tensor] : blobs) {
    std::vector<float> f(tensor->values.size());
    for (std::size_t i = 0; i < f.size(); ++i)
      f[i] = static_cast<float>(tensor->values[i]);
    const std::uint32_t crc = detail::crc32(f.data(), f.size() * sizeof(float));
    head << "blob " << name << " " << f.size() << " " << crc << "\n";
    sections.push_back(std::move(f));
  }
  head << "data\n";

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  const std::string h = head.str();
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& sec : sections)
    f.write(reinterpret_cast<const char*>(sec.data()),
            static_cast<std::streamsize>(sec.size() * sizeof(float)));
  if (!f) throw IoError(path + ": write failed");
}

template <typename T = float>
Model<T> load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": file not found");

  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty file");
  {
    std::istringstream is(line);
    std::string a, b;
    int version = -1;
    is >> a >> b >> version;
    if (a != "meshnet" || b != "weights")
      throw FormatError(path + ": not a meshnet weight file");
    if (version != kWeightFormatVersion)
      throw FormatError(path + ": unsupported weight format version " +
                        std::to_string(version) + " (expected " +
                        std::to_string(kWeightFormatVersion) + ")");
  }

  ModelSpec spec;
  spec.layers.clear();
  std::vector<std::pair<std::string, std::pair<std::size_t, std::uint32_t>>> table;
  std::size_t n_layers = 0, n_blobs = 0;
  bool saw_data = false;
  while (std::getline(f, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "byte_order") {
      std::string order;
      is >> order;
      if (order != "little")
        throw FormatError(path + ": unsupported byte order '" + order + "'");
    } else if (key == "modalities")
      is >> spec.modalities;
    else if (key == "channels")
      is >> spec.channels;
    else if (key == "classes")
      is >> spec.classes;
    else if (key == "subvolume_side")
      is >> spec.subvolume_side;
    else if (key == "bn_placement") {
      std::string p;
      is >> p;
      spec.bn_placement = (p == "after") ? BnPlacement::after_activation
                                         : BnPlacement::before_activation;
    } else if (key == "bn_eps")
      is >> spec.bn_eps;
    else if (key == "bn_momentum")
      is >> spec.bn_momentum;
    else if (key == "layers")
      is >> n_layers;
    else if (key == "layer") {
      LayerSpec l;
      std::string bn, rl;
      is >> l.kernel >> l.dilation >> l.padding >> bn >> rl >> l.dropout_p;
      l.batch_norm = (bn == "bn");
      l.relu = (rl == "relu");
      spec.layers.push_back(l);
    } else if (key == "blobs")
      is >> n_blobs;
    else if (key == "blob") {
      std::string name;
      std::size_t count = 0;
      std::uint32_t crc = 0;
      is >> name >> count >> crc;
      table.emplace_back(name, std::make_pair(count, crc));
    } else if (key == "data") {
      saw_data = true;
      break;
    } else if (!key.empty())
      throw FormatError(path + ": unknown header key '" + key + "'");
    if (!is && key != "data")
      throw FormatError(path + ": malformed header line '" + line + "'");
  }
  if (!saw_data) throw FormatError(path + ": missing data section");
  if (spec.layers.size() != n_layers)
    throw FormatError(path + ": layer count mismatch in header");
  if (table.size() != n_blobs)
    throw FormatError(path + ": blob count mismatch in header");
  spec.validate();

  // Materialize with the right shapes, then overwrite from the blobs.
  Rng dummy(0);
  Model<T> model = build_meshnet<T>(spec, InitScheme::identity, dummy);
  std::vector<std::pair<std::string, const Tensor<T>*>> blobs;
  detail::collect_blobs(model, blobs);
  if (blobs.size() != table.size())
    throw FormatError(path + ": blob table does not match spec layout");

  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& [name, meta] = table[i];
    const auto& [count, crc] = meta;
    if (name != blobs[i].first || count != blobs[i].second->values.size())
      throw FormatError(path + ": blob section '" + name +
                        "' does not match expected '" + blobs[i].first + "' (" +
                        std::to_string(blobs[i].second->values.size()) +
                        " elements)");
    std::vector<float> buf(count);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(f.gcount()) != count * sizeof(float))
      throw FormatError(path + ": truncated blob section '" + name + "'");
    const std::uint32_t actual = detail::crc32(buf.data(), count * sizeof(float));
    if (actual != crc)
      throw FormatError(path + ": checksum failure in section '" + name + "'");
    auto* dst = const_cast<Tensor<T>*>(blobs[i].second);
    for (std::size_t j = 0; j < count; ++j)
      dst->values[j] = static_cast<T>(buf[j]);
  }
  return model;
}

}  // namespace meshnet
