#pragma once

#include <cstddef>
#include <map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deepedit/tensor.hpp"

namespace deepedit {

/// Per-label runs `[start, length]` over the (z, y, x) linear voxel index.
/// Background is implicit.
struct MaskRLE {
  Shape3D shape;
  std::map<int, std::vector<std::pair<std::size_t, std::size_t>>> runs;

  friend bool operator==(const MaskRLE&, const MaskRLE&) = default;
};

MaskRLE encode_rle(const LabelMap& labels);

/// Throws kFormat on labels outside 1..num_labels, empty or out-of-range
/// runs, unsorted runs, or runs that overlap within or across labels.
LabelMap decode_rle(const MaskRLE& rle, int num_labels);

nlohmann::json to_json(const MaskRLE& rle);
/// `{"shape":[d,h,w],"labels":{"1":[[start,len],...],...}}`; throws kFormat.
MaskRLE mask_rle_from_json(const nlohmann::json& j);

}  // namespace deepedit
