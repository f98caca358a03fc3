#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/image.hpp"

namespace fundus {

// Per-image generation record; the disc bounding box feeds the Grad-CAM
// localization check.
struct FixtureMeta {
  std::string rel_path;  // e.g. train/glaucoma/g_0003.png
  int label = 0;
  double cup_disc_area_ratio = 0.0;
  int disc_x0 = 0, disc_y0 = 0, disc_x1 = 0, disc_y1 = 0;
};

// Procedural fundus-like image: dark circular field, vessel strokes, a
// bright optic disc and a brighter cup inside it. Glaucoma images get a
// cup/disc area ratio in (0.6, 0.8], normal ones in [0.25, 0.4).
ImageU8 draw_fundus(Rng& rng, int size, bool glaucoma, FixtureMeta* meta);

// Writes out_dir/{train,test}/{normal,glaucoma}/ with per_class images each,
// plus fixture_meta.json. Returns all metadata records.
std::vector<FixtureMeta> write_fixture_dataset(const std::string& out_dir, int per_class,
                                               std::uint64_t seed, int size = 224);

nlohmann::json fixture_meta_to_json(const std::vector<FixtureMeta>& metas);
std::vector<FixtureMeta> load_fixture_meta(const std::string& path);

}  // namespace fundus
