#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "common.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pp {

// ----------------------------------------------------------------- image I/O

namespace {

// next header token, skipping whitespace and '#' comments
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

Tensor load_netpbm(const std::string& path, bool color) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open image: " + path);
  std::string magic = next_token(in);
  const char* expected = color ? "P6" : "P5";
  if (magic != expected)
    fail(ErrorCode::Io, "BadMagic: expected " + std::string(expected) +
                            ", got '" + magic + "' in " + path);
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    fail(ErrorCode::Io, "corrupt header in " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    fail(ErrorCode::Io, "unsupported dimensions/maxval in " + path);
  int channels = color ? 3 : 1;
  size_t count = static_cast<size_t>(w) * h * channels;
  std::vector<unsigned char> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(count));
  if (static_cast<size_t>(in.gcount()) != count)
    fail(ErrorCode::Io, "TruncatedFile: " + path);
  Tensor t(color ? std::vector<int>{h, w, 3} : std::vector<int>{h, w});
  for (size_t i = 0; i < count; ++i) t[static_cast<int>(i)] = bytes[i] / 255.0;
  return t;
}

unsigned char quantize(double v) {
  double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

void save_netpbm(const std::string& path, const Tensor& img, bool color) {
  if (color && (img.ndim() != 3 || img.dim(2) != 3))
    fail(ErrorCode::InvalidArgument, "save_ppm expects (h, w, 3)");
  if (!color && img.ndim() != 2)
    fail(ErrorCode::InvalidArgument, "save_pgm expects (h, w)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write image: " + path);
  out << (color ? "P6" : "P5") << "\n"
      << img.dim(1) << " " << img.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<size_t>(img.numel()));
  for (int i = 0; i < img.numel(); ++i) bytes[static_cast<size_t>(i)] = quantize(img[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "short write: " + path);
}

}  // namespace

Tensor load_ppm(const std::string& path) { return load_netpbm(path, true); }
void save_ppm(const std::string& path, const Tensor& image) {
  save_netpbm(path, image, true);
}
Tensor load_pgm(const std::string& path) { return load_netpbm(path, false); }
void save_pgm(const std::string& path, const Tensor& gray) {
  save_netpbm(path, gray, false);
}

// ------------------------------------------------------------------ manifest

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  json j;
  j["phylogeny"] = manifest.phylogeny;
  json images = json::array();
  for (const auto& rec : manifest.images) {
    json parts = json::array();
    for (const auto& p : rec.parts)
      parts.push_back({{"name", p.name}, {"x", p.x}, {"y", p.y}});
    images.push_back({{"path", rec.path},
                      {"species", rec.species},
                      {"split", rec.split},
                      {"parts", parts}});
  }
  j["images"] = images;
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open manifest: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::Io, "manifest is not valid JSON: " + path);
  DatasetManifest m;
  try {
    m.phylogeny = j.at("phylogeny").get<std::string>();
    for (const auto& rec : j.at("images")) {
      ImageRecord r;
      r.path = rec.at("path").get<std::string>();
      r.species = rec.at("species").get<std::string>();
      r.split = rec.at("split").get<std::string>();
      for (const auto& p : rec.value("parts", json::array())) {
        PartAnnotation a;
        a.name = p.at("name").get<std::string>();
        a.x = p.at("x").get<int>();
        a.y = p.at("y").get<int>();
        r.parts.push_back(std::move(a));
      }
      if (r.split != "train" && r.split != "val")
        fail(ErrorCode::Mismatch, "unknown split '" + r.split + "' in manifest");
      m.images.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Io, std::string("manifest schema error: ") + e.what());
  }
  return m;
}

std::string node_label(const Phylogeny& tree, int node) {
  const TreeNode& n = tree.node(node);
  if (n.leaf) return n.name;
  return "node" + std::to_string(node);
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < manifest.images.size(); ++i)
    if (manifest.images[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

int Dataset::image_side() const {
  if (images.empty()) fail(ErrorCode::Mismatch, "dataset has no images");
  return images[0].dim(0);
}

Dataset open_dataset(const std::string& manifest_path) {
  Dataset d;
  fs::path mp(manifest_path);
  d.root_dir = mp.parent_path().string();
  if (d.root_dir.empty()) d.root_dir = ".";
  d.manifest = load_manifest(manifest_path);
  d.tree = parse_newick_file((fs::path(d.root_dir) / d.manifest.phylogeny).string());

  d.images.reserve(d.manifest.images.size());
  for (const auto& rec : d.manifest.images) {
    auto leaf = d.tree.find_leaf(rec.species);
    if (!leaf)
      fail(ErrorCode::Mismatch,
           "manifest species '" + rec.species + "' is not a leaf of the tree");
    d.leaf_of_image.push_back(*leaf);
    Tensor img = load_ppm((fs::path(d.root_dir) / rec.path).string());
    for (const auto& p : rec.parts) {
      if (p.x < 0 || p.y < 0 || p.x >= img.dim(1) || p.y >= img.dim(0))
        fail(ErrorCode::Mismatch, "part '" + p.name + "' out of bounds in " + rec.path);
    }
    if (!d.images.empty() && !img.same_shape(d.images[0]))
      fail(ErrorCode::Mismatch, "images have mixed sizes in dataset");
    d.images.push_back(std::move(img));
  }
  if (d.images.empty()) fail(ErrorCode::Mismatch, "dataset has no images");
  return d;
}

// ------------------------------------------------------ synthetic generation

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  double hh = std::fmod(h, 1.0) * 6.0;
  int sector = static_cast<int>(hh) % 6;
  double f = hh - std::floor(hh);
  double p = v * (1.0 - s);
  double q = v * (1.0 - s * f);
  double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// golden-ratio hue stepping keeps colors pairwise well separated
Rgb node_color(int node) {
  return hsv_to_rgb(0.05 + 0.618033988749895 * node, 0.9, 1.0);
}

// glyph coverage mask on an s-by-s stamp, centered
std::vector<unsigned char> glyph_mask(GlyphShape shape, int size) {
  std::vector<unsigned char> mask(static_cast<size_t>(size) * size, 0);
  double half = (size - 1) / 2.0;
  double rad = size / 2.0;
  double thin = std::max(1.0, size / 6.0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double dx = x - half;
      double dy = y - half;
      double rr = std::sqrt(dx * dx + dy * dy);
      bool on = false;
      switch (shape) {
        case GlyphShape::Disc: on = rr <= rad - 0.5; break;
        case GlyphShape::Bar:
          on = std::fabs(dy) <= thin / 2.0 && std::fabs(dx) <= half;
          break;
        case GlyphShape::Cross:
          on = (std::fabs(dx) <= thin / 2.0 && std::fabs(dy) <= half) ||
               (std::fabs(dy) <= thin / 2.0 && std::fabs(dx) <= half);
          break;
        case GlyphShape::Ring:
          on = rr <= rad - 0.5 && rr >= rad - 0.5 - thin;
          break;
      }
      if (on) mask[static_cast<size_t>(y) * size + x] = 1;
    }
  }
  return mask;
}

void stamp_glyph(Tensor& img, const GlyphSpec& g, int cx, int cy) {
  auto mask = glyph_mask(g.shape, g.size_px);
  int half = g.size_px / 2;
  for (int y = 0; y < g.size_px; ++y)
    for (int x = 0; x < g.size_px; ++x) {
      if (!mask[static_cast<size_t>(y) * g.size_px + x]) continue;
      int py = cy - half + y;
      int px = cx - half + x;
      if (py < 0 || px < 0 || py >= img.dim(0) || px >= img.dim(1)) continue;
      img.at(py, px, 0) = g.r;
      img.at(py, px, 1) = g.g;
      img.at(py, px, 2) = g.b;
    }
}

// grid layout: every tree node owns one cell so glyphs never collide
struct SlotLayout {
  int grid;     // cells per side
  int cell_px;

  std::pair<int, int> center(int node) const {  // (cx, cy)
    int row = node / grid;
    int col = node % grid;
    return {col * cell_px + cell_px / 2, row * cell_px + cell_px / 2};
  }
};

SlotLayout slot_layout(int num_nodes, int image_side) {
  int grid = 1;
  while (grid * grid < num_nodes) ++grid;
  return {grid, image_side / grid};
}

}  // namespace

const GlyphSpec* TraitSpec::glyph_for(int node) const {
  for (const auto& g : glyphs)
    if (g.node == node) return &g;
  return nullptr;
}

TraitSpec TraitSpec::defaults_for(const Phylogeny& tree, int skip_node) {
  TraitSpec spec;
  SlotLayout layout = slot_layout(tree.num_nodes(), spec.image_side);
  int size = std::min(11, layout.cell_px - 4);
  int jitter = std::max(1, (layout.cell_px - size) / 2);
  for (int node = 0; node < tree.num_nodes(); ++node) {
    if (node == skip_node) continue;
    GlyphSpec g;
    g.node = node;
    g.shape = static_cast<GlyphShape>(node % 4);
    Rgb c = node_color(node);
    g.r = c.r;
    g.g = c.g;
    g.b = c.b;
    g.size_px = size;
    g.jitter_px = jitter;
    spec.glyphs.push_back(g);
  }
  return spec;
}

void generate_synthetic(const Phylogeny& tree, const TraitSpec& spec,
                        int per_leaf, uint64_t seed,
                        const std::string& out_dir) {
  if (per_leaf < 2)
    fail(ErrorCode::InvalidArgument, "per_leaf must be at least 2");
  SlotLayout layout = slot_layout(tree.num_nodes(), spec.image_side);
  for (const auto& g : spec.glyphs) {
    tree.node(g.node);
    if (g.size_px + 2 * g.jitter_px > layout.cell_px)
      fail(ErrorCode::InvalidArgument,
           "GlyphOverflow: glyph for node " + std::to_string(g.node) +
               " does not fit its cell after jitter");
  }

  fs::create_directories(fs::path(out_dir) / "images");
  {
    std::ofstream tf(fs::path(out_dir) / "tree.nwk");
    if (!tf) fail(ErrorCode::Io, "cannot write tree file in " + out_dir);
    tf << tree.serialize() << "\n";
  }

  DatasetManifest manifest;
  manifest.phylogeny = "tree.nwk";
  int side = spec.image_side;
  int train_count = (per_leaf * 3) / 4;

  for (size_t li = 0; li < tree.leaves().size(); ++li) {
    int leaf = tree.leaves()[li];
    const std::string& species = tree.node(leaf).name;
    // ancestor chain root..parent plus the leaf itself
    std::vector<int> chain;
    for (auto [node, pos] : tree.root_path(leaf)) chain.push_back(node);
    chain.push_back(leaf);

    for (int idx = 0; idx < per_leaf; ++idx) {
      auto rng = make_rng(seed, 0x1000 + li, static_cast<uint64_t>(idx));
      Tensor img({side, side, 3});
      std::normal_distribution<double> noise(0.0, 1.0);
      for (int i = 0; i < img.numel(); ++i)
        img[i] = std::clamp(spec.background + spec.noise_level * noise(rng),
                            0.0, 1.0);

      ImageRecord rec;
      rec.species = species;
      rec.split = idx < train_count ? "train" : "val";
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s_%03d.ppm", species.c_str(), idx);
      rec.path = std::string("images/") + buf;

      for (int node : chain) {
        const GlyphSpec* g = spec.glyph_for(node);
        if (!g) continue;  // planted abstention case
        auto [cx, cy] = layout.center(node);
        std::uniform_int_distribution<int> jit(-g->jitter_px, g->jitter_px);
        int jx = cx + jit(rng);
        int jy = cy + jit(rng);
        stamp_glyph(img, *g, jx, jy);
        rec.parts.push_back({node_label(tree, node), jx, jy});
      }

      save_ppm((fs::path(out_dir) / rec.path).string(), img);
      manifest.images.push_back(std::move(rec));
    }
  }
  save_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
}

std::optional<std::pair<int, int>> find_glyph(const Tensor& image,
                                              const GlyphSpec& glyph,
                                              double tolerance) {
  if (image.ndim() != 3 || image.dim(2) != 3)
    fail(ErrorCode::InvalidArgument, "find_glyph expects (h, w, 3)");
  auto mask = glyph_mask(glyph.shape, glyph.size_px);
  int s = glyph.size_px;
  int half = s / 2;
  for (int cy = half; cy < image.dim(0) - (s - half - 1); ++cy) {
    for (int cx = half; cx < image.dim(1) - (s - half - 1); ++cx) {
      bool ok = true;
      for (int y = 0; y < s && ok; ++y)
        for (int x = 0; x < s && ok; ++x) {
          if (!mask[static_cast<size_t>(y) * s + x]) continue;
          int py = cy - half + y;
          int px = cx - half + x;
          if (std::fabs(image.at(py, px, 0) - glyph.r) > tolerance ||
              std::fabs(image.at(py, px, 1) - glyph.g) > tolerance ||
              std::fabs(image.at(py, px, 2) - glyph.b) > tolerance)
            ok = false;
        }
      if (ok) return std::make_pair(cx, cy);
    }
  }
  return std::nullopt;
}

// -------------------------------------------------------------- augmentation

AugmentOptions AugmentOptions::none() {
  AugmentOptions o;
  o.hflip = false;
  o.max_translate_frac = 0.0;
  o.brightness_min = 1.0;
  o.brightness_max = 1.0;
  o.noise_sigma = 0.0;
  return o;
}

Tensor augment(const Tensor& image, const AugmentOptions& opts,
               std::mt19937_64& rng) {
  if (image.ndim() != 3 || image.dim(2) != 3)
    fail(ErrorCode::InvalidArgument, "augment expects (h, w, 3)");
  int h = image.dim(0), w = image.dim(1);

  bool flip = false;
  if (opts.hflip) flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  int max_shift = static_cast<int>(std::floor(opts.max_translate_frac * w));
  int dx = 0, dy = 0;
  if (max_shift > 0) {
    std::uniform_int_distribution<int> shift(-max_shift, max_shift);
    dx = shift(rng);
    dy = shift(rng);
  }
  double bright = opts.brightness_min;
  if (opts.brightness_max > opts.brightness_min)
    bright = std::uniform_real_distribution<double>(opts.brightness_min,
                                                    opts.brightness_max)(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  // translate by (dx, dy) with zero fill, then optional horizontal flip
  Tensor out({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sy = y - dy;
      int sx = (flip ? (w - 1 - x) : x) - dx;
      double px[3] = {0.0, 0.0, 0.0};
      if (sy >= 0 && sy < h && sx >= 0 && sx < w)
        for (int c = 0; c < 3; ++c) px[c] = image.at(sy, sx, c);
      for (int c = 0; c < 3; ++c) {
        double v = px[c] * bright;
        if (opts.noise_sigma > 0.0) v += opts.noise_sigma * noise(rng);
        out.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  return out;
}

std::pair<Tensor, Tensor> augment_pair(const Tensor& image,
                                       const AugmentOptions& opts,
                                       uint64_t seed) {
  auto rng1 = make_rng(seed, 0xA1);
  auto rng2 = make_rng(seed, 0xA2);
  return {augment(image, opts, rng1), augment(image, opts, rng2)};
}

// ------------------------------------------------------------------- batches

std::vector<Batch> make_batches(const std::vector<int>& indices,
                                const std::vector<int>& leaf_of_image,
                                int batch_size, uint64_t seed,
                                bool stratified) {
  if (batch_size < 1) fail(ErrorCode::InvalidArgument, "batch_size must be >= 1");
  std::vector<int> order;

  if (stratified) {
    std::map<int, std::vector<int>> per_species;
    for (int idx : indices) per_species[leaf_of_image[static_cast<size_t>(idx)]].push_back(idx);
    if (batch_size < static_cast<int>(per_species.size()))
      fail(ErrorCode::InvalidArgument,
           "BatchTooSmall: stratified batches need batch_size >= species count");
    auto rng = make_rng(seed, 0xB0);
    std::vector<std::vector<int>> queues;
    for (auto& [leaf, list] : per_species) {
      std::shuffle(list.begin(), list.end(), rng);
      queues.push_back(std::move(list));
    }
    // round-robin interleave, then chop
    size_t remaining = indices.size();
    size_t cursor = 0;
    std::vector<size_t> heads(queues.size(), 0);
    while (remaining > 0) {
      size_t q = cursor % queues.size();
      cursor++;
      if (heads[q] < queues[q].size()) {
        order.push_back(queues[q][heads[q]++]);
        --remaining;
      } else {
        // this species is exhausted; skip it from the rotation
        bool any = false;
        for (size_t i = 0; i < queues.size(); ++i)
          if (heads[i] < queues[i].size()) any = true;
        if (!any) break;
      }
    }
  } else {
    order = indices;
    auto rng = make_rng(seed, 0xB1);
    std::shuffle(order.begin(), order.end(), rng);
  }

  std::vector<Batch> batches;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch_size)) {
    Batch b;
    size_t end = std::min(order.size(), i + static_cast<size_t>(batch_size));
    b.image_indices.assign(order.begin() + static_cast<long>(i),
                           order.begin() + static_cast<long>(end));
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace pp
