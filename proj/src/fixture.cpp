#include "fundus/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fundus/rng.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

namespace fs = std::filesystem;

namespace {

struct Rgb {
  float r, g, b;
};

void blend(ImageU8& img, int y, int x, const Rgb& c, float a) {
  if (y < 0 || y >= img.height || x < 0 || x >= img.width || a <= 0.f) return;
  std::uint8_t* px = img.pixel(y, x);
  px[0] = static_cast<std::uint8_t>(std::lround(px[0] * (1.f - a) + c.r * a));
  px[1] = static_cast<std::uint8_t>(std::lround(px[1] * (1.f - a) + c.g * a));
  px[2] = static_cast<std::uint8_t>(std::lround(px[2] * (1.f - a) + c.b * a));
}

// soft-edged filled ellipse
void fill_ellipse(ImageU8& img, float cy, float cx, float ry, float rx, const Rgb& color,
                  float alpha = 1.f) {
  const int y0 = std::max(0, static_cast<int>(cy - ry - 2));
  const int y1 = std::min(img.height - 1, static_cast<int>(cy + ry + 2));
  const int x0 = std::max(0, static_cast<int>(cx - rx - 2));
  const int x1 = std::min(img.width - 1, static_cast<int>(cx + rx + 2));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const float dy = (static_cast<float>(y) - cy) / ry;
      const float dx = (static_cast<float>(x) - cx) / rx;
      const float d = dy * dy + dx * dx;
      if (d <= 1.f) {
        const float edge = std::min(1.f, (1.f - d) * ry);  // soften the rim
        blend(img, y, x, color, alpha * std::min(1.f, edge));
      }
    }
  }
}

void draw_vessel(ImageU8& img, Rng& rng, float cy, float cx, float field_r, const Rgb& color) {
  // quadratic curve from the disc outwards
  const float ang = static_cast<float>(rng.uniform(0.0, 6.2831853));
  const float bend = static_cast<float>(rng.uniform(-0.8, 0.8));
  const float len = static_cast<float>(rng.uniform(0.5, 0.95)) * field_r;
  const float width = static_cast<float>(rng.uniform(1.0, 2.5));
  const int steps = 160;
  for (int s = 0; s <= steps; ++s) {
    const float t = static_cast<float>(s) / steps;
    const float r = t * len;
    const float a = ang + bend * t * t;
    const float y = cy + r * std::sin(a);
    const float x = cx + r * std::cos(a);
    const int iw = static_cast<int>(width);
    for (int oy = -iw; oy <= iw; ++oy) {
      for (int ox = -iw; ox <= iw; ++ox) {
        if (oy * oy + ox * ox <= iw * iw) {
          blend(img, static_cast<int>(y) + oy, static_cast<int>(x) + ox, color, 0.55f);
        }
      }
    }
  }
}

}  // namespace

ImageU8 draw_fundus(Rng& rng, int size, bool glaucoma, FixtureMeta* meta) {
  ImageU8 img;
  img.width = img.height = size;
  img.rgb.assign(static_cast<std::size_t>(size) * size * 3, 0);

  const float c = static_cast<float>(size) / 2.f;
  const float field_r = c * static_cast<float>(rng.uniform(0.92, 0.99));

  // retina field with radial falloff and mild deterministic noise
  const float base_r = static_cast<float>(rng.uniform(115.0, 150.0));
  const float base_g = static_cast<float>(rng.uniform(42.0, 62.0));
  const float base_b = static_cast<float>(rng.uniform(18.0, 32.0));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const float dy = (static_cast<float>(y) - c) / field_r;
      const float dx = (static_cast<float>(x) - c) / field_r;
      const float d = dy * dy + dx * dx;
      if (d <= 1.f) {
        const float fall = 1.f - 0.45f * d;
        const float n = static_cast<float>(rng.uniform(-6.0, 6.0));
        std::uint8_t* px = img.pixel(y, x);
        px[0] = static_cast<std::uint8_t>(std::clamp(base_r * fall + n, 0.f, 255.f));
        px[1] = static_cast<std::uint8_t>(std::clamp(base_g * fall + n * 0.6f, 0.f, 255.f));
        px[2] = static_cast<std::uint8_t>(std::clamp(base_b * fall + n * 0.4f, 0.f, 255.f));
      }
    }
  }

  // disc placement: off-center, fully inside the field
  const float scale = static_cast<float>(size) / 224.f;
  const float disc_r = static_cast<float>(rng.uniform(36.0, 52.0)) * scale;
  const float dcy = c + static_cast<float>(rng.uniform(-0.3, 0.3)) * c;
  const float dcx = c + static_cast<float>(rng.uniform(-0.3, 0.3)) * c;

  const Rgb vessel{96.f, 22.f, 14.f};
  const int n_vessels = 3 + static_cast<int>(rng.uniform_int(4));
  for (int i = 0; i < n_vessels; ++i) draw_vessel(img, rng, dcy, dcx, field_r, vessel);

  // optic disc, then the cup whose relative area encodes the class
  const Rgb disc_color{228.f, 168.f, 92.f};
  const Rgb cup_color{250.f, 236.f, 180.f};
  const float aspect = static_cast<float>(rng.uniform(0.9, 1.1));
  const float disc_ry = disc_r * aspect;
  const float disc_rx = disc_r / aspect;
  fill_ellipse(img, dcy, dcx, disc_ry, disc_rx, disc_color);

  const double area_ratio = glaucoma ? rng.uniform(0.62, 0.80) : rng.uniform(0.25, 0.38);
  const float cup_f = static_cast<float>(std::sqrt(area_ratio));
  const float off_y = static_cast<float>(rng.uniform(-0.08, 0.08)) * disc_ry;
  const float off_x = static_cast<float>(rng.uniform(-0.08, 0.08)) * disc_rx;
  fill_ellipse(img, dcy + off_y, dcx + off_x, disc_ry * cup_f, disc_rx * cup_f, cup_color);

  if (meta) {
    meta->label = glaucoma ? 1 : 0;
    meta->cup_disc_area_ratio = area_ratio;
    meta->disc_y0 = std::max(0, static_cast<int>(dcy - disc_ry) - 1);
    meta->disc_y1 = std::min(size - 1, static_cast<int>(dcy + disc_ry) + 1);
    meta->disc_x0 = std::max(0, static_cast<int>(dcx - disc_rx) - 1);
    meta->disc_x1 = std::min(size - 1, static_cast<int>(dcx + disc_rx) + 1);
  }
  return img;
}

std::vector<FixtureMeta> write_fixture_dataset(const std::string& out_dir, int per_class,
                                               std::uint64_t seed, int size) {
  if (per_class < 1) throw ConfigError("fixture: per_class must be positive");
  std::vector<FixtureMeta> metas;
  for (const char* split : {"train", "test"}) {
    const bool is_test = std::string(split) == "test";
    for (const char* cls : {"normal", "glaucoma"}) {
      const fs::path dir = fs::path(out_dir) / split / cls;
      fs::create_directories(dir);
      const bool glaucoma = std::string(cls) == "glaucoma";
      for (int i = 0; i < per_class; ++i) {
        // file numbering continues across splits so ids stay globally unique;
        // one independent stream per image so ordering never matters
        const int file_idx = i + (is_test ? per_class : 0);
        const std::string rel = std::string(split) + "/" + cls + "/" +
                                (glaucoma ? "g_" : "n_") + std::to_string(file_idx) + ".png";
        Rng rng(mix_seed(seed, rel));
        FixtureMeta meta;
        meta.rel_path = rel;
        ImageU8 img = draw_fundus(rng, size, glaucoma, &meta);
        write_png((fs::path(out_dir) / rel).string(), img);
        metas.push_back(meta);
      }
    }
  }
  std::ofstream out(fs::path(out_dir) / "fixture_meta.json");
  out << fixture_meta_to_json(metas).dump(2) << "\n";
  return metas;
}

nlohmann::json fixture_meta_to_json(const std::vector<FixtureMeta>& metas) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& m : metas) {
    j.push_back({{"path", m.rel_path},
                 {"label", m.label},
                 {"cup_disc_area_ratio", m.cup_disc_area_ratio},
                 {"disc_box", {m.disc_x0, m.disc_y0, m.disc_x1, m.disc_y1}}});
  }
  return j;
}

std::vector<FixtureMeta> load_fixture_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fixture metadata: " + path);
  nlohmann::json j;
  in >> j;
  std::vector<FixtureMeta> metas;
  for (const auto& item : j) {
    FixtureMeta m;
    m.rel_path = item.at("path").get<std::string>();
    m.label = item.at("label").get<int>();
    m.cup_disc_area_ratio = item.at("cup_disc_area_ratio").get<double>();
    const auto& box = item.at("disc_box");
    m.disc_x0 = box.at(0).get<int>();
    m.disc_y0 = box.at(1).get<int>();
    m.disc_x1 = box.at(2).get<int>();
    m.disc_y1 = box.at(3).get<int>();
    metas.push_back(std::move(m));
  }
  return metas;
}

}  // namespace fundus
