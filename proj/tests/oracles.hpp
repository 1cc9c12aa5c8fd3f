#pragma once

#include <string>
#include <vector>

#include "deepimp/model.hpp"

namespace testing {

using deepimp::ManifestEntry;
using deepimp::Shape;
using deepimp::StreamGeometry;

// Independent description of the tensor list: stem, then per stage and block
// conv1/bn1/conv2/bn2 and, where channels or stride change, a single-tap
// projection with its own batch norm; then the fusion layer.
inline std::vector<ManifestEntry> expected_manifest(std::size_t stem, std::vector<std::size_t> stages,
                                                    std::size_t blocks, std::size_t outputs) {
  std::vector<ManifestEntry> m;
  auto bn = [&](const std::string& prefix, std::size_t c) {
    m.push_back({prefix + ".gamma", {c}, true});
    m.push_back({prefix + ".beta", {c}, true});
    m.push_back({prefix + ".running_mean", {c}, false});
    m.push_back({prefix + ".running_var", {c}, false});
  };
  for (std::string stream : {"audio", "visual"}) {
    const bool audio = stream == "audio";
    auto kernel = [&](std::size_t out, std::size_t in, std::size_t k2d) {
      return audio ? Shape{out, in, k2d * k2d} : Shape{out, in, k2d, k2d};
    };
    m.push_back({stream + ".stem.w", kernel(stem, audio ? 1 : 3, 7), true});
    bn(stream + ".stem.bn", stem);
    std::size_t in = stem;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::string p = stream + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        const std::size_t out = stages[s];
        m.push_back({p + ".conv1.w", kernel(out, in, 3), true});
        bn(p + ".bn1", out);
        m.push_back({p + ".conv2.w", kernel(out, out, 3), true});
        bn(p + ".bn2", out);
        if (in != out || (s > 0 && b == 0)) {
          m.push_back({p + ".shortcut.w", kernel(out, in, 1), true});
          bn(p + ".shortcut_bn", out);
        }
        in = out;
      }
    }
  }
  m.push_back({"fusion.w", {2 * stages.back(), outputs}, true});
  m.push_back({"fusion.b", {outputs}, true});
  return m;
}

inline std::size_t extent_after(std::size_t l, std::size_t k, std::size_t s, std::size_t p) {
  return (l + 2 * p - k) / s + 1;
}

// Stem, pool, then one stride per later stage (first block of stages 2-4).
inline std::size_t pre_gap_extent(std::size_t l, const StreamGeometry& g, std::size_t stages) {
  l = extent_after(l, g.stem_kernel, g.stem_stride, g.stem_padding);
  l = extent_after(l, g.pool_kernel, g.pool_stride, g.pool_padding);
  for (std::size_t s = 1; s < stages; ++s) l = extent_after(l, g.block_kernel, g.stage_stride, g.block_padding);
  return l;
}

}  // namespace testing
