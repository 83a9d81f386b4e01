#pragma once

// Directory-level evaluation: toy_frechet, paired MSE and contour F1 between
// a folder of predictions and a folder of references.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "degrade.hpp"
#include "image_io.hpp"
#include "metrics.hpp"

namespace toddler {

/// Every *.png directly inside `dir`, keyed (and so ordered) by file name.
inline std::map<std::string, ImageGrid> load_png_dir(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::config, "not a directory: " + dir.string());
  std::map<std::string, ImageGrid> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.emplace(e.path().filename().string(), read_png(e.path()));
  require(!out.empty(), ErrorKind::config, "no PNG files in " + dir.string());
  return out;
}

/// Binary 1-channel images are already contours; anything else goes through the edge extractor.
inline ImageGrid contour_of(const ImageGrid& img, double edge_threshold) {
  if (img.channels() == 1 && is_binary(img)) return img;
  return edge_map(img.channels() == 3 ? img : replicate_channels(img, 3), edge_threshold);
}

/// Report fields: toy_frechet needs >= 32 images on each side and mse needs
/// files with matching names; either is null otherwise.
inline nlohmann::json evaluate_dirs(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                                    double edge_threshold = 0.1, int slack = 1) {
  const auto pred = load_png_dir(pred_dir);
  const auto ref = load_png_dir(ref_dir);
  std::vector<ImageGrid> p, r, rc;
  for (const auto& [_, g] : pred) p.push_back(g);
  for (const auto& [_, g] : ref) {
    r.push_back(g);
    rc.push_back(contour_of(g, edge_threshold));
  }
  nlohmann::json rep = {{"pred_dir", pred_dir.string()},
                        {"ref_dir", ref_dir.string()},
                        {"n_pred", p.size()},
                        {"n_ref", r.size()},
                        {"contour_slack", slack},
                        {"edge_threshold", edge_threshold}};
  rep["toy_frechet"] = (p.size() >= kMinFrechetSet && r.size() >= kMinFrechetSet) ? nlohmann::json(toy_frechet(p, r))
                                                                                  : nlohmann::json(nullptr);
  double err = 0;
  std::size_t paired = 0;
  for (const auto& [name, g] : pred)
    if (auto it = ref.find(name); it != ref.end() && it->second.shape() == g.shape()) {
      err += mse(g, it->second);
      ++paired;
    }
  rep["n_paired"] = paired;
  rep["mse"] = paired ? nlohmann::json(err / static_cast<double>(paired)) : nlohmann::json(nullptr);
  double f1 = 0;
  for (const auto& g : p) f1 += nearest_contour_f1(contour_of(g, edge_threshold), rc, slack);
  rep["contour_f1"] = f1 / static_cast<double>(p.size());
  return rep;
}

}  // namespace toddler
