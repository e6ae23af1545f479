#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "../src/common.hpp"
#include "../src/data.hpp"
#include "../src/phylo.hpp"

using namespace pp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("pp_test_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("ppm round trip and error paths") {
  TempDir tmp("ppm");

  Tensor img({5, 7, 3});
  for (int i = 0; i < img.numel(); ++i) img[i] = (i % 256) / 255.0;
  auto p = (tmp.path / "img.ppm").string();
  save_ppm(p, img);
  Tensor back = load_ppm(p);
  REQUIRE(back.shape() == img.shape());
  for (int i = 0; i < img.numel(); ++i)
    CHECK(back[i] == doctest::Approx(img[i]).epsilon(1e-9));
  // second save of the loaded image is byte-identical (8-bit fixed point)
  auto p2 = (tmp.path / "img2.ppm").string();
  save_ppm(p2, back);
  CHECK(file_bytes(p) == file_bytes(p2));

  // all-zero image loads as a zero tensor
  save_ppm((tmp.path / "zero.ppm").string(), Tensor({4, 4, 3}));
  Tensor zero = load_ppm((tmp.path / "zero.ppm").string());
  for (int i = 0; i < zero.numel(); ++i) CHECK(zero[i] == 0.0);

  // ASCII P3 is rejected
  {
    std::ofstream out(tmp.path / "ascii.ppm");
    out << "P3\n2 2\n255\n0 0 0 0 0 0 0 0 0 0 0 0\n";
  }
  CHECK_THROWS_WITH_AS(load_ppm((tmp.path / "ascii.ppm").string()),
                       doctest::Contains("BadMagic"), Error);

  // truncated payload
  {
    std::ofstream out(tmp.path / "trunc.ppm", std::ios::binary);
    out << "P6\n4 4\n255\n";
    out.write("abc", 3);
  }
  CHECK_THROWS_WITH_AS(load_ppm((tmp.path / "trunc.ppm").string()),
                       doctest::Contains("TruncatedFile"), Error);

  // pgm round trip preserves argmax
  Tensor gray({3, 4});
  for (int i = 0; i < gray.numel(); ++i) gray[i] = i / 12.0;
  save_pgm((tmp.path / "g.pgm").string(), gray);
  Tensor gback = load_pgm((tmp.path / "g.pgm").string());
  REQUIRE(gback.shape() == gray.shape());
  CHECK(gback[11] == doctest::Approx(gray.max_abs()).epsilon(0.01));
}

TEST_CASE("synthetic generation plants sound traits") {
  TempDir tmp("gen");
  Phylogeny tree = parse_newick("(((A,B),(C,D)),((E,F),(G,H)));");
  TraitSpec spec = TraitSpec::defaults_for(tree);
  generate_synthetic(tree, spec, 8, 17, tmp.path.string());

  Dataset ds = open_dataset((tmp.path / "manifest.json").string());
  CHECK(ds.images.size() == 64);
  CHECK(ds.tree.num_leaves() == 8);
  CHECK(ds.split_indices("train").size() == 48);
  CHECK(ds.split_indices("val").size() == 16);

  // planted-trait soundness: every internal glyph is found in 100% of
  // descendant images and 0% of contrasting images
  for (int node : ds.tree.internal_nodes()) {
    const GlyphSpec* g = spec.glyph_for(node);
    REQUIRE(g != nullptr);
    std::set<int> desc(ds.tree.descendant_leaves(node).begin(),
                       ds.tree.descendant_leaves(node).end());
    for (size_t i = 0; i < ds.images.size(); ++i) {
      bool expected = desc.count(ds.leaf_of_image[i]) > 0;
      auto found = find_glyph(ds.images[i], *g);
      CHECK(found.has_value() == expected);
      if (found) {
        // detector center agrees with the part annotation
        bool matched = false;
        for (const auto& part : ds.manifest.images[i].parts)
          if (part.name == node_label(ds.tree, node) && part.x == found->first &&
              part.y == found->second)
            matched = true;
        CHECK(matched);
      }
    }
  }
}

TEST_CASE("no-common-at node omits exactly one glyph") {
  TempDir tmp("nocommon");
  Phylogeny tree = parse_newick("(((A,B),(C,D)),((E,F),(G,H)));");
  int skip = 2;  // the (A,B) clade
  TraitSpec spec = TraitSpec::defaults_for(tree, skip);
  CHECK(spec.glyph_for(skip) == nullptr);
  generate_synthetic(tree, spec, 4, 5, tmp.path.string());
  Dataset ds = open_dataset((tmp.path / "manifest.json").string());

  std::string skipped = node_label(ds.tree, skip);
  for (const auto& rec : ds.manifest.images)
    for (const auto& part : rec.parts) CHECK(part.name != skipped);

  // descendants of the skipped node still carry their other ancestors' glyphs
  TraitSpec full = TraitSpec::defaults_for(tree);
  const GlyphSpec* root_glyph = full.glyph_for(tree.root());
  for (size_t i = 0; i < ds.images.size(); ++i)
    CHECK(find_glyph(ds.images[i], *root_glyph).has_value());
}

TEST_CASE("generation is deterministic per seed") {
  Phylogeny tree = parse_newick("((A,B),C);");
  TraitSpec spec = TraitSpec::defaults_for(tree);
  TempDir t1("det1"), t2("det2"), t3("det3");
  generate_synthetic(tree, spec, 4, 99, t1.path.string());
  generate_synthetic(tree, spec, 4, 99, t2.path.string());
  generate_synthetic(tree, spec, 4, 100, t3.path.string());

  bool any_diff = false;
  for (const auto& entry : fs::recursive_directory_iterator(t1.path)) {
    if (!entry.is_regular_file()) continue;
    fs::path rel = fs::relative(entry.path(), t1.path);
    CHECK(file_bytes(entry.path()) == file_bytes(t2.path / rel));
    if (fs::exists(t3.path / rel) &&
        file_bytes(entry.path()) != file_bytes(t3.path / rel))
      any_diff = true;
  }
  CHECK(any_diff);  // different seed actually changes the images
}

TEST_CASE("glyph overflow is rejected") {
  Phylogeny tree = parse_newick("((A,B),C);");
  TraitSpec spec = TraitSpec::defaults_for(tree);
  spec.glyphs[0].size_px = 40;
  spec.glyphs[0].jitter_px = 10;
  TempDir tmp("overflow");
  CHECK_THROWS_WITH_AS(generate_synthetic(tree, spec, 4, 1, tmp.path.string()),
                       doctest::Contains("GlyphOverflow"), Error);
}

TEST_CASE("augmentation basics") {
  std::mt19937_64 seed_rng(3);
  Tensor img({12, 12, 3});
  for (int i = 0; i < img.numel(); ++i)
    img[i] = std::uniform_real_distribution<double>(0, 1)(seed_rng);

  // zero strength: both views equal the input exactly
  auto [a, b] = augment_pair(img, AugmentOptions::none(), 7);
  CHECK(std::memcmp(a.data(), img.data(), sizeof(double) * img.numel()) == 0);
  CHECK(std::memcmp(b.data(), img.data(), sizeof(double) * img.numel()) == 0);

  // outputs stay in [0,1] and same seed reproduces the pair bitwise
  AugmentOptions opts;  // defaults
  auto [x1, x2] = augment_pair(img, opts, 1234);
  auto [y1, y2] = augment_pair(img, opts, 1234);
  CHECK(std::memcmp(x1.data(), y1.data(), sizeof(double) * img.numel()) == 0);
  CHECK(std::memcmp(x2.data(), y2.data(), sizeof(double) * img.numel()) == 0);
  for (int i = 0; i < x1.numel(); ++i) {
    CHECK(x1[i] >= 0.0);
    CHECK(x1[i] <= 1.0);
  }
  // the two draws differ (independent streams)
  CHECK(std::memcmp(x1.data(), x2.data(), sizeof(double) * img.numel()) != 0);
}

TEST_CASE("stratified batching covers every species") {
  // 8 species, 6 images each, batch 16
  std::vector<int> leaf_of_image;
  std::vector<int> indices;
  for (int img = 0; img < 48; ++img) {
    leaf_of_image.push_back(img % 8);
    indices.push_back(img);
  }
  auto batches = make_batches(indices, leaf_of_image, 16, 5, true);
  REQUIRE(batches.size() == 3);
  std::set<int> seen;
  for (const auto& b : batches) {
    REQUIRE(b.image_indices.size() == 16);
    std::map<int, int> counts;
    for (int idx : b.image_indices) {
      counts[leaf_of_image[static_cast<size_t>(idx)]]++;
      CHECK(seen.insert(idx).second);  // no repeats within the epoch
    }
    REQUIRE(counts.size() == 8);
    for (auto& [leaf, c] : counts) CHECK(c == 2);
  }
  CHECK(seen.size() == 48);  // partition of the epoch

  CHECK_THROWS_WITH_AS(make_batches(indices, leaf_of_image, 4, 5, true),
                       doctest::Contains("BatchTooSmall"), Error);

  // non-stratified: partition + no repeats, species may be missing per batch
  auto plain = make_batches(indices, leaf_of_image, 5, 5, false);
  std::set<int> seen2;
  size_t total = 0;
  for (const auto& b : plain) {
    total += b.image_indices.size();
    for (int idx : b.image_indices) CHECK(seen2.insert(idx).second);
  }
  CHECK(total == 48);
}

TEST_CASE("manifest referential integrity") {
  TempDir tmp("badmanifest");
  Phylogeny tree = parse_newick("((A,B),C);");
  TraitSpec spec = TraitSpec::defaults_for(tree);
  generate_synthetic(tree, spec, 4, 3, tmp.path.string());

  // corrupt the species name
  auto manifest_path = (tmp.path / "manifest.json").string();
  DatasetManifest m = load_manifest(manifest_path);
  m.images[0].species = "NotASpecies";
  save_manifest(manifest_path, m);
  CHECK_THROWS_AS(open_dataset(manifest_path), Error);

  // out-of-bounds part
  m = load_manifest(manifest_path);
  m.images[0].species = "A";
  m.images[0].parts[0].x = 9999;
  save_manifest(manifest_path, m);
  CHECK_THROWS_WITH_AS(open_dataset(manifest_path),
                       doctest::Contains("out of bounds"), Error);
}
