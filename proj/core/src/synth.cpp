#include "dilseg/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

#include "dilseg/io.hpp"
#include "dilseg/rng.hpp"

namespace dilseg {
namespace {

using json = nlohmann::json;

struct PixelList {
  std::vector<std::pair<int, int>> px;  // (y, x)
};

// Rasterize a rectangle of half-extents (hy, hx) rotated by `angle` around
// (cy, cx): a pixel belongs if its center maps inside the rectangle.
PixelList raster_rotated_rect(double cy, double cx, double hy, double hx,
                              double angle, int extent) {
  PixelList out;
  const double c = std::cos(angle), s = std::sin(angle);
  const double reach = std::hypot(hy, hx) + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(extent - 1, static_cast<int>(std::ceil(cy + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(extent - 1, static_cast<int>(std::ceil(cx + reach)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double ry = c * dy - s * dx, rx = s * dy + c * dx;
      if (std::abs(ry) <= hy && std::abs(rx) <= hx) out.px.emplace_back(y, x);
    }
  }
  return out;
}

// Largest 8-connected component of a pixel set (thin rotated shapes can
// rasterize into fragments; only the main body is kept).
PixelList largest_component(const PixelList& in) {
  if (in.px.empty()) return in;
  int ymin = in.px[0].first, ymax = ymin, xmin = in.px[0].second, xmax = xmin;
  for (auto [y, x] : in.px) {
    ymin = std::min(ymin, y); ymax = std::max(ymax, y);
    xmin = std::min(xmin, x); xmax = std::max(xmax, x);
  }
  const int h = ymax - ymin + 1, w = xmax - xmin + 1;
  std::vector<int> mark(static_cast<std::size_t>(h) * w, 0);
  for (auto [y, x] : in.px) mark[(y - ymin) * w + (x - xmin)] = -1;
  int best_label = 0;
  std::size_t best_size = 0;
  int label = 0;
  std::vector<std::pair<int, int>> stack;
  for (auto [sy, sx] : in.px) {
    if (mark[(sy - ymin) * w + (sx - xmin)] != -1) continue;
    ++label;
    std::size_t size = 0;
    stack.push_back({sy - ymin, sx - xmin});
    mark[(sy - ymin) * w + (sx - xmin)] = label;
    while (!stack.empty()) {
      auto [y, x] = stack.back();
      stack.pop_back();
      ++size;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (mark[ny * w + nx] != -1) continue;
          mark[ny * w + nx] = label;
          stack.push_back({ny, nx});
        }
      }
    }
    if (size > best_size) { best_size = size; best_label = label; }
  }
  PixelList out;
  out.px.reserve(best_size);
  for (auto [y, x] : in.px) {
    if (mark[(y - ymin) * w + (x - xmin)] == best_label) out.px.emplace_back(y, x);
  }
  return out;
}

bool placement_ok(const PixelList& px, const std::vector<std::int32_t>& ids,
                  int extent, int gap) {
  for (auto [y, x] : px.px) {
    const int y0 = std::max(0, y - gap), y1 = std::min(extent - 1, y + gap);
    const int x0 = std::max(0, x - gap), x1 = std::min(extent - 1, x + gap);
    for (int ny = y0; ny <= y1; ++ny) {
      for (int nx = x0; nx <= x1; ++nx) {
        if (ids[static_cast<std::size_t>(ny) * extent + nx] != 0) return false;
      }
    }
  }
  return true;
}

}  // namespace

Scene generate_scene(const SceneConfig& config) {
  if (config.extent < 96) throw std::invalid_argument("scene extent must be >= 96");
  if (config.size_min < 2) throw std::invalid_argument("object size minimum must be >= 2");
  if (config.size_max < config.size_min || config.count_max < config.count_min ||
      config.count_min < 0 || config.min_gap < 0 || config.noise < 0) {
    throw std::invalid_argument("invalid scene config");
  }

  Rng rng(config.seed);
  const int E = config.extent;
  Scene scene;
  scene.instance_map.assign(static_cast<std::size_t>(E) * E, 0);
  scene.image = Tensor::zeros({3, static_cast<std::size_t>(E), static_cast<std::size_t>(E)});

  // Background: smooth per-channel base in the dark band.
  float bg[3];
  for (auto& c : bg) c = static_cast<float>(rng.uniform(0.05, 0.35));

  const int want = config.count_min == config.count_max
                       ? config.count_min
                       : static_cast<int>(rng.uniform_int(config.count_min, config.count_max));

  std::vector<PixelList> objects;
  std::vector<std::array<float, 3>> colors;
  const int retries_per_object = 200;
  for (int obj = 0; obj < want; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < retries_per_object && !placed; ++attempt) {
      const double hy = rng.uniform_int(config.size_min, config.size_max) / 2.0;
      const double hx = rng.uniform_int(config.size_min, config.size_max) / 2.0;
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      const double cy = rng.uniform(hy + 1, E - hy - 1);
      const double cx = rng.uniform(hx + 1, E - hx - 1);
      const bool ell = rng.uniform() < 0.2;  // 20% L-shaped composites
      PixelList px = raster_rotated_rect(cy, cx, hy, hx, angle, E);
      if (ell) {
        // Second arm sharing a corner, perpendicular extents.
        const double c = std::cos(angle), s = std::sin(angle);
        const double oy = cy + (-s) * hx * 0.5 + c * hy;
        const double ox = cx + c * hx * 0.5 + s * hy;
        PixelList arm = raster_rotated_rect(oy, ox, hx * 0.6 + 1.0, hy * 0.6 + 1.0, angle, E);
        px.px.insert(px.px.end(), arm.px.begin(), arm.px.end());
        std::sort(px.px.begin(), px.px.end());
        px.px.erase(std::unique(px.px.begin(), px.px.end()), px.px.end());
      }
      px = largest_component(px);
      if (px.px.size() < 2) continue;
      if (!placement_ok(px, scene.instance_map, E, config.min_gap)) continue;
      const auto id = static_cast<std::int32_t>(objects.size() + 1);
      for (auto [y, x] : px.px) scene.instance_map[static_cast<std::size_t>(y) * E + x] = id;
      std::array<float, 3> col;
      for (auto& c : col) c = static_cast<float>(rng.uniform(0.55, 0.95));
      objects.push_back(std::move(px));
      colors.push_back(col);
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error(
          "scene placement failed after bounded retries; lower the object density "
          "(fewer/smaller objects or a smaller gap)");
    }
  }
  scene.num_instances = static_cast<int>(objects.size());

  for (int ch = 0; ch < 3; ++ch) {
    float* plane = scene.image.data.data() + static_cast<std::size_t>(ch) * E * E;
    std::fill(plane, plane + static_cast<std::size_t>(E) * E, bg[ch]);
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    for (auto [y, x] : objects[i].px) {
      for (int ch = 0; ch < 3; ++ch) {
        scene.image.at(ch, y, x) = colors[i][ch];
      }
    }
  }
  if (config.noise > 0) {
    for (auto& v : scene.image.data) {
      v = std::clamp(v + static_cast<float>(rng.uniform(-config.noise, config.noise)),
                     0.0f, 1.0f);
    }
  }
  return scene;
}

Scene downsample_scene(const Scene& scene, int factor) {
  if (factor == 1) return scene;
  if (factor != 2 && factor != 3) throw std::invalid_argument("downsample factor must be 1, 2, or 3");
  const int H = scene.height(), W = scene.width();
  const int h = H / factor, w = W / factor;
  if (h == 0 || w == 0) throw std::invalid_argument("scene too small to downsample");

  Scene out;
  out.resolution_scale = scene.resolution_scale * factor;
  out.image = Tensor::zeros({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        float acc = 0.0f;
        for (int by = 0; by < factor; ++by) {
          for (int bx = 0; bx < factor; ++bx) {
            acc += scene.image.at(ch, y * factor + by, x * factor + bx);
          }
        }
        out.image.at(ch, y, x) = acc * inv;
      }
    }
  }

  // Majority vote per block; a tied maximum goes to background.
  std::vector<std::int32_t> voted(static_cast<std::size_t>(h) * w, 0);
  std::vector<std::pair<std::int32_t, int>> counts;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      counts.clear();
      for (int by = 0; by < factor; ++by) {
        for (int bx = 0; bx < factor; ++bx) {
          const std::int32_t id = scene.instance_at(y * factor + by, x * factor + bx);
          auto it = std::find_if(counts.begin(), counts.end(),
                                 [id](const auto& p) { return p.first == id; });
          if (it == counts.end()) counts.push_back({id, 1}); else ++it->second;
        }
      }
      int best = 0;
      std::int32_t best_id = 0;
      bool tied = false;
      for (const auto& [id, n] : counts) {
        if (n > best) { best = n; best_id = id; tied = false; }
        else if (n == best) { tied = true; }
      }
      voted[static_cast<std::size_t>(y) * w + x] = tied ? 0 : best_id;
    }
  }

  // Decimation can split an instance; relabel 8-connected components within
  // same-id regions so each id stays connected and ids stay contiguous.
  out.instance_map.assign(voted.size(), 0);
  std::int32_t next_id = 0;
  std::vector<std::pair<int, int>> stack;
  for (int sy = 0; sy < h; ++sy) {
    for (int sx = 0; sx < w; ++sx) {
      const std::size_t si = static_cast<std::size_t>(sy) * w + sx;
      if (voted[si] == 0 || out.instance_map[si] != 0) continue;
      const std::int32_t orig = voted[si];
      ++next_id;
      out.instance_map[si] = next_id;
      stack.push_back({sy, sx});
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
            if (voted[ni] != orig || out.instance_map[ni] != 0) continue;
            out.instance_map[ni] = next_id;
            stack.push_back({ny, nx});
          }
        }
      }
    }
  }
  out.num_instances = next_id;
  return out;
}

Tensor rotate90(const Tensor& chw, int quarter_turns) {
  if (chw.shape.size() != 3) throw std::invalid_argument("rotate90 expects a CHW tensor");
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return chw;
  const auto C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
  Tensor out = (q == 2) ? Tensor::zeros({C, H, W}) : Tensor::zeros({C, W, H});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const float v = chw.at(c, y, x);
        // counter-clockwise quarter turns
        if (q == 1) out.at(c, W - 1 - x, y) = v;
        else if (q == 2) out.at(c, H - 1 - y, W - 1 - x) = v;
        else out.at(c, x, H - 1 - y) = v;
      }
    }
  }
  return out;
}

PatchSet::PatchSet(std::shared_ptr<const std::vector<Scene>> scenes,
                   std::vector<PatchRef> refs, int patch_extent, int label_extent)
    : scenes_(std::move(scenes)), refs_(std::move(refs)),
      patch_extent_(patch_extent), label_extent_(label_extent) {
  if (!scenes_) throw std::invalid_argument("PatchSet requires backing scenes");
  if (label_extent_ > patch_extent_ || (patch_extent_ - label_extent_) % 2 != 0) {
    throw std::invalid_argument("label window must be a centered crop of the patch");
  }
}

Tensor PatchSet::input(std::size_t i) const {
  const PatchRef& r = refs_.at(i);
  const Scene& s = scenes_->at(r.scene);
  const int P = patch_extent_;
  Tensor patch = Tensor::zeros({3, static_cast<std::size_t>(P), static_cast<std::size_t>(P)});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < P; ++y) {
      const float* src = s.image.data.data() +
          (static_cast<std::size_t>(c) * s.height() + (r.y0 + y)) * s.width() + r.x0;
      std::copy(src, src + P, patch.data.data() + (static_cast<std::size_t>(c) * P + y) * P);
    }
  }
  return rotate90(patch, r.rotation);
}

Tensor PatchSet::label(std::size_t i) const {
  const PatchRef& r = refs_.at(i);
  const Scene& s = scenes_->at(r.scene);
  const int L = label_extent_;
  const int off = (patch_extent_ - L) / 2;
  Tensor fg = Tensor::zeros({1, static_cast<std::size_t>(L), static_cast<std::size_t>(L)});
  for (int y = 0; y < L; ++y) {
    for (int x = 0; x < L; ++x) {
      fg.at(0, y, x) = s.instance_at(r.y0 + off + y, r.x0 + off + x) != 0 ? 1.0f : 0.0f;
    }
  }
  fg = rotate90(fg, r.rotation);
  Tensor out = Tensor::zeros({2, static_cast<std::size_t>(L), static_cast<std::size_t>(L)});
  for (int y = 0; y < L; ++y) {
    for (int x = 0; x < L; ++x) {
      const float f = fg.at(0, y, x);
      out.at(0, y, x) = 1.0f - f;
      out.at(1, y, x) = f;
    }
  }
  return out;
}

std::pair<Tensor, Tensor> PatchSet::gather(const std::vector<std::size_t>& idx) const {
  const auto N = idx.size();
  const auto P = static_cast<std::size_t>(patch_extent_);
  const auto L = static_cast<std::size_t>(label_extent_);
  Tensor xs = Tensor::zeros({N, 3, P, P});
  Tensor ys = Tensor::zeros({N, 2, L, L});
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor xi = input(idx[n]);
    const Tensor yi = label(idx[n]);
    std::copy(xi.data.begin(), xi.data.end(), xs.data.begin() + n * 3 * P * P);
    std::copy(yi.data.begin(), yi.data.end(), ys.data.begin() + n * 2 * L * L);
  }
  return {std::move(xs), std::move(ys)};
}

Tensor PatchSet::input_batch(std::size_t offset, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = offset + i;
  return gather(idx).first;
}

int balance_bin(int fg_pixels, int label_extent) {
  (void)label_extent;
  if (fg_pixels <= 0) return 0;
  if (fg_pixels <= 64) return 1;
  if (fg_pixels <= 128) return 2;
  return 3;
}

PatchSet sample_patches(std::shared_ptr<const std::vector<Scene>> scenes,
                        std::size_t count, std::uint64_t seed,
                        int patch_extent, int label_extent) {
  if (!scenes || scenes->empty()) throw std::invalid_argument("sample_patches: no scenes");
  if (count < 1) throw std::invalid_argument("sample_patches: count must be >= 1");
  for (const Scene& s : *scenes) {
    if (s.height() < patch_extent || s.width() < patch_extent) {
      throw std::invalid_argument("sample_patches: scene smaller than the patch window");
    }
  }
  const int off = (patch_extent - label_extent) / 2;

  // Bin every candidate window by its center-label foreground count, using a
  // per-scene integral image of the binary mask.
  std::array<std::vector<PatchRef>, 4> bins;
  for (int si = 0; si < static_cast<int>(scenes->size()); ++si) {
    const Scene& s = (*scenes)[si];
    const int H = s.height(), W = s.width();
    std::vector<std::int64_t> integ(static_cast<std::size_t>(H + 1) * (W + 1), 0);
    for (int y = 0; y < H; ++y) {
      std::int64_t row = 0;
      for (int x = 0; x < W; ++x) {
        row += s.instance_at(y, x) != 0 ? 1 : 0;
        integ[static_cast<std::size_t>(y + 1) * (W + 1) + (x + 1)] =
            integ[static_cast<std::size_t>(y) * (W + 1) + (x + 1)] + row;
      }
    }
    auto box = [&](int y0, int x0, int y1, int x1) {  // [y0,y1) x [x0,x1)
      return integ[static_cast<std::size_t>(y1) * (W + 1) + x1] -
             integ[static_cast<std::size_t>(y0) * (W + 1) + x1] -
             integ[static_cast<std::size_t>(y1) * (W + 1) + x0] +
             integ[static_cast<std::size_t>(y0) * (W + 1) + x0];
    };
    for (int y0 = 0; y0 + patch_extent <= H; ++y0) {
      for (int x0 = 0; x0 + patch_extent <= W; ++x0) {
        const int fg = static_cast<int>(box(y0 + off, x0 + off,
                                            y0 + off + label_extent, x0 + off + label_extent));
        bins[balance_bin(fg, label_extent)].push_back({si, y0, x0, 0});
      }
    }
  }

  std::vector<int> nonempty;
  for (int b = 0; b < 4; ++b) {
    if (!bins[b].empty()) nonempty.push_back(b);
  }
  Rng rng(seed);
  std::vector<PatchRef> refs;
  refs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int b = nonempty[rng.uniform_int(0, static_cast<std::uint64_t>(nonempty.size()) - 1)];
    PatchRef r = bins[b][rng.uniform_int(0, static_cast<std::uint64_t>(bins[b].size()) - 1)];
    r.rotation = static_cast<int>(rng.uniform_int(0, 3));
    refs.push_back(r);
  }
  return PatchSet(std::move(scenes), std::move(refs), patch_extent, label_extent);
}

namespace {

Tensor instance_tensor(const Scene& s) {
  Tensor t = Tensor::zeros({static_cast<std::size_t>(s.height()),
                            static_cast<std::size_t>(s.width())});
  for (std::size_t i = 0; i < s.instance_map.size(); ++i) {
    t.data[i] = static_cast<float>(s.instance_map[i]);
  }
  return t;
}

json save_split(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                const std::string& split, bool previews) {
  json list = json::array();
  std::filesystem::create_directories(dir / split);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu", i);
    const std::string stem = split + "/" + name;
    const Scene& s = scenes[i];
    write_ntsr(s.image, (dir / (stem + ".image.ntsr")).string());
    write_ntsr(instance_tensor(s), (dir / (stem + ".instances.ntsr")).string());
    if (previews) {
      Tensor gray = Tensor::zeros({static_cast<std::size_t>(s.height()),
                                   static_cast<std::size_t>(s.width())});
      const std::size_t plane = gray.data.size();
      for (std::size_t p = 0; p < plane; ++p) {
        gray.data[p] = (s.image.data[p] + s.image.data[plane + p] +
                        s.image.data[2 * plane + p]) / 3.0f;
      }
      write_pgm(gray, (dir / (stem + ".pgm")).string());
    }
    list.push_back({{"stem", stem},
                    {"num_instances", s.num_instances},
                    {"resolution_scale", s.resolution_scale}});
  }
  return list;
}

std::vector<Scene> load_split(const json& list, const std::filesystem::path& dir) {
  std::vector<Scene> scenes;
  for (const auto& entry : list) {
    const std::string stem = entry.at("stem").get<std::string>();
    Scene s;
    s.image = read_ntsr((dir / (stem + ".image.ntsr")).string());
    if (s.image.shape.size() != 3 || s.image.shape[0] != 3) {
      throw std::runtime_error("dataset scene image is not 3xHxW: " + stem);
    }
    Tensor inst = read_ntsr((dir / (stem + ".instances.ntsr")).string());
    if (inst.shape.size() != 2 || inst.shape[0] != s.image.shape[1] ||
        inst.shape[1] != s.image.shape[2]) {
      throw std::runtime_error("dataset instance map mismatches image extent: " + stem);
    }
    s.instance_map.resize(inst.data.size());
    for (std::size_t i = 0; i < inst.data.size(); ++i) {
      s.instance_map[i] = static_cast<std::int32_t>(std::lround(inst.data[i]));
    }
    s.num_instances = entry.at("num_instances").get<int>();
    s.resolution_scale = entry.at("resolution_scale").get<int>();
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir, bool previews) {
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);
  json manifest;
  manifest["format"] = "dilseg-dataset";
  manifest["version"] = 1;
  if (!ds.config_json.empty()) {
    manifest["config"] = json::parse(ds.config_json, nullptr, /*allow_exceptions=*/false);
    if (manifest["config"].is_discarded()) manifest["config"] = ds.config_json;
  } else {
    manifest["config"] = json::object();
  }
  manifest["train"] = save_split(ds.train, root, "train", previews);
  manifest["test"] = save_split(ds.test, root, "test", previews);
  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  std::ifstream in(root / "manifest.json", std::ios::binary);
  if (!in) throw std::runtime_error("missing manifest.json in " + dir);
  json manifest = json::parse(in);
  if (manifest.value("format", "") != "dilseg-dataset") {
    throw std::runtime_error("not a dataset directory: " + dir);
  }
  Dataset ds;
  ds.config_json = manifest.at("config").dump();
  ds.train = load_split(manifest.at("train"), root);
  ds.test = load_split(manifest.at("test"), root);
  return ds;
}

}  // namespace dilseg
