#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/volume.hpp"

namespace meshnet {

/// Remaps source segmentation label values (e.g. FreeSurfer ids) to the
/// contiguous class indices the network trains on. Loaded from a text
/// file of lines: <source_id> <class_index> <region_name>.
struct LabelMap {
  std::unordered_map<std::int32_t, std::int32_t> to_class;
  std::vector<std::string> names;  // indexed by class

  int num_classes() const { return static_cast<int>(names.size()); }

  static LabelMap load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(path + ": file not found");
    LabelMap map;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream is(line);
      std::int32_t src = 0, cls = 0;
      std::string name;
      if (!(is >> src >> cls >> name))
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": expected '<source_id> <class_index> <region_name>'");
      if (cls < 0)
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": class index must be >= 0");
      if (map.to_class.count(src))
        throw FormatError(path + ":" + std::to_string(lineno) +
                          ": duplicate source id " + std::to_string(src));
      map.to_class[src] = cls;
      if (cls >= static_cast<std::int32_t>(map.names.size()))
        map.names.resize(cls + 1);
      if (map.names[cls].empty()) map.names[cls] = name;
    }
    if (map.to_class.empty()) throw FormatError(path + ": empty label map");
    return map;
  }

  /// Strict mode rejects unmapped source values; lenient mode sends them
  /// to class 0.
  LabelVolume apply(const LabelVolume& src, bool strict = true) const {
    LabelVolume out = src;
    for (auto& v : out.data) {
      auto it = to_class.find(v);
      if (it == to_class.end()) {
        if (strict)
          throw FormatError("label map: unmapped source label " +
                            std::to_string(v));
        v = 0;
      } else {
        v = it->second;
      }
    }
    return out;
  }
};

}  // namespace meshnet
