#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "phylo.hpp"
#include "tensor.hpp"

namespace pp {

// ---------------------------------------------------------------------------
// Image I/O: binary PPM (P6) / PGM (P5) only, maxval 255, bit-exact round
// trips at 8-bit resolution.
// ---------------------------------------------------------------------------

Tensor load_ppm(const std::string& path);  // (h, w, 3) in [0,1]
void save_ppm(const std::string& path, const Tensor& image);
Tensor load_pgm(const std::string& path);  // (h, w) in [0,1]
void save_pgm(const std::string& path, const Tensor& gray);

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct PartAnnotation {
  std::string name;  // owning tree node: species name for leaves, node<i> else
  int x = 0;         // column
  int y = 0;         // row
};

struct ImageRecord {
  std::string path;  // relative to the manifest directory
  std::string species;
  std::string split;  // "train" | "val"
  std::vector<PartAnnotation> parts;
};

struct DatasetManifest {
  std::string phylogeny;  // relative path to the Newick file
  std::vector<ImageRecord> images;
};

void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path);

/// Manifest + parsed tree + eagerly loaded images, with referential
/// integrity checked (species resolve, files exist, parts in bounds).
struct Dataset {
  std::string root_dir;
  DatasetManifest manifest;
  Phylogeny tree;
  std::vector<Tensor> images;    // aligned with manifest.images
  std::vector<int> leaf_of_image;

  std::vector<int> split_indices(const std::string& split) const;
  int image_side() const;
};

Dataset open_dataset(const std::string& manifest_path);

/// Canonical node label used in part annotations and reports.
std::string node_label(const Phylogeny& tree, int node);

// ---------------------------------------------------------------------------
// Synthetic planted-trait generation
// ---------------------------------------------------------------------------

enum class GlyphShape { Disc, Bar, Cross, Ring };

struct GlyphSpec {
  int node = -1;  // owning tree node index
  GlyphShape shape = GlyphShape::Disc;
  double r = 1.0, g = 0.0, b = 0.0;
  int size_px = 9;
  int jitter_px = 2;
};

/// Per-node glyph assignments over a noise background. Every image of leaf s
/// renders the glyphs of s's ancestor chain plus s's own glyph, each inside a
/// dedicated grid cell so glyphs never overlap and the pixel-space detector
/// below is an exact ground-truth oracle.
struct TraitSpec {
  int image_side = 52;
  double noise_level = 0.05;
  double background = 0.15;
  std::vector<GlyphSpec> glyphs;

  /// Distinct (shape, color) per node; `skip_node` plants an abstention case
  /// by omitting that node's glyph.
  static TraitSpec defaults_for(const Phylogeny& tree, int skip_node = -1);

  const GlyphSpec* glyph_for(int node) const;
};

/// Writes out_dir/tree.nwk, out_dir/images/*.ppm and out_dir/manifest.json.
/// `per_leaf` counts train+val images per species (3:1 split). Deterministic
/// per seed, bitwise.
void generate_synthetic(const Phylogeny& tree, const TraitSpec& spec,
                        int per_leaf, uint64_t seed,
                        const std::string& out_dir);

/// Template-match detector: exact pixel-space search for a glyph. Returns the
/// glyph center if found. Independent of any learned component; used as the
/// dataset-level oracle for planted traits.
std::optional<std::pair<int, int>> find_glyph(const Tensor& image,
                                              const GlyphSpec& glyph,
                                              double tolerance = 0.03);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentOptions {
  bool hflip = true;
  double max_translate_frac = 0.1;
  double brightness_min = 0.8;
  double brightness_max = 1.25;
  double noise_sigma = 0.02;

  static AugmentOptions none();
};

Tensor augment(const Tensor& image, const AugmentOptions& opts,
               std::mt19937_64& rng);
/// Two independent draws from the same seed; outputs clamped to [0,1].
std::pair<Tensor, Tensor> augment_pair(const Tensor& image,
                                       const AugmentOptions& opts,
                                       uint64_t seed);

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Indices into the dataset image list; one epoch = a partition of the split.
struct Batch {
  std::vector<int> image_indices;
};

/// Stratified mode interleaves shuffled per-species queues round-robin so
/// every batch covers every species present (requires batch_size >= species
/// count, else Error{InvalidArgument} "BatchTooSmall"). Non-stratified mode
/// is a plain shuffle.
std::vector<Batch> make_batches(const std::vector<int>& indices,
                                const std::vector<int>& leaf_of_image,
                                int batch_size, uint64_t seed, bool stratified);

}  // namespace pp
