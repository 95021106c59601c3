#include "deepedit/rle.hpp"

#include <string>

#include "deepedit/error.hpp"

namespace deepedit {

using nlohmann::json;

MaskRLE encode_rle(const LabelMap& labels) {
  MaskRLE rle;
  rle.shape = labels.shape();
  const auto d = labels.data();
  std::size_t i = 0;
  while (i < d.size()) {
    const std::uint8_t v = d[i];
    std::size_t j = i + 1;
    while (j < d.size() && d[j] == v) ++j;
    if (v != 0) rle.runs[v].emplace_back(i, j - i);
    i = j;
  }
  return rle;
}

LabelMap decode_rle(const MaskRLE& rle, int num_labels) {
  LabelMap out(rle.shape, num_labels);
  auto d = out.data();
  for (const auto& [label, runs] : rle.runs) {
    if (label < 1 || label > num_labels) {
      throw Error(ErrorKind::kFormat, "rle: label " + std::to_string(label) + " outside 1.." +
                                          std::to_string(num_labels));
    }
    std::size_t prev_end = 0;
    for (const auto& [start, len] : runs) {
      const std::string where = "rle: label " + std::to_string(label) + " run [" + std::to_string(start) + ", " +
                                std::to_string(len) + "]";
      if (len == 0) throw Error(ErrorKind::kFormat, where + " is empty");
      if (start < prev_end) throw Error(ErrorKind::kFormat, where + " is unsorted or overlaps the previous run");
      if (start > d.size() || len > d.size() - start) throw Error(ErrorKind::kFormat, where + " is out of bounds");
      for (std::size_t i = start; i < start + len; ++i) {
        if (d[i] != 0) throw Error(ErrorKind::kFormat, where + " overlaps label " + std::to_string(d[i]));
        d[i] = static_cast<std::uint8_t>(label);
      }
      prev_end = start + len;
    }
  }
  return out;
}

json to_json(const MaskRLE& rle) {
  json labels = json::object();
  for (const auto& [label, runs] : rle.runs) {
    json arr = json::array();
    for (const auto& [start, len] : runs) arr.push_back({start, len});
    labels[std::to_string(label)] = std::move(arr);
  }
  return {{"shape", {rle.shape.depth, rle.shape.height, rle.shape.width}}, {"labels", labels}};
}

MaskRLE mask_rle_from_json(const json& j) {
  MaskRLE rle;
  try {
    const auto s = j.at("shape").get<std::vector<std::size_t>>();
    if (s.size() != 3) throw Error(ErrorKind::kFormat, "rle: shape must have 3 entries");
    rle.shape = Shape3D(s[0], s[1], s[2]);
    for (const auto& [key, arr] : j.at("labels").items()) {
      std::size_t used = 0;
      const int label = std::stoi(key, &used);
      if (used != key.size()) throw Error(ErrorKind::kFormat, "rle: label key '" + key + "' is not an integer");
      auto& runs = rle.runs[label];
      for (const auto& r : arr) {
        if (!r.is_array() || r.size() != 2) throw Error(ErrorKind::kFormat, "rle: runs must be [start, len] pairs");
        runs.emplace_back(r[0].get<std::size_t>(), r[1].get<std::size_t>());
      }
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kFormat) throw;
    throw Error(ErrorKind::kFormat, std::string("rle: ") + e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("rle: ") + e.what());
  } catch (const std::logic_error& e) {
    throw Error(ErrorKind::kFormat, std::string("rle: bad label key: ") + e.what());
  }
  return rle;
}

}  // namespace deepedit
