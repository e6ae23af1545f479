#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pp {

/// One node of a rooted phylogeny. Leaves carry a species name; internal
/// nodes only structure. Indices refer into Phylogeny::nodes.
struct TreeNode {
  bool leaf = false;
  int parent = -1;              // -1 for the root
  std::vector<int> children;    // empty iff leaf
  std::string name;             // nonempty iff leaf
  int depth = 0;                // root = 0
};

/// Immutable rooted tree over species leaves. Nodes are stored in preorder
/// (root = 0), which makes node indices stable across parse/serialize and
/// gives leaves their document (left-to-right) order.
class Phylogeny {
 public:
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(int i) const;
  int root() const { return root_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  int num_leaves() const { return static_cast<int>(leaves_.size()); }
  int num_internal() const { return num_nodes() - num_leaves(); }

  /// Leaf node indices in document order.
  const std::vector<int>& leaves() const { return leaves_; }
  /// Internal node indices in preorder.
  const std::vector<int>& internal_nodes() const { return internals_; }

  /// Node index of a species name, or nullopt.
  std::optional<int> find_leaf(const std::string& name) const;

  /// All leaf node indices at or below `node`.
  const std::vector<int>& descendant_leaves(int node) const;

  /// descendant_leaves(node) minus descendant_leaves(child); `child` must be
  /// a direct child of `node`.
  std::vector<int> contrasting_set(int node, int child) const;

  /// (internal node, chosen child position) steps from the root down to the
  /// parent of `leaf`; its length equals the leaf's depth.
  std::vector<std::pair<int, int>> root_path(int leaf) const;

  /// Position of `child` among `node`'s children.
  int child_position(int node, int child) const;

  /// K = beta * (number of children); `node` must be internal.
  int prototype_budget(int node, int beta) const;

  /// Canonical Newick text (names only, stored child order, ';' terminated).
  std::string serialize() const;
  uint64_t hash() const;

  friend Phylogeny parse_newick(const std::string& text);

 private:
  void build_index();

  std::vector<TreeNode> nodes_;
  int root_ = -1;
  std::vector<int> leaves_;
  std::vector<int> internals_;
  std::vector<std::vector<int>> desc_;  // per node: descendant leaf nodes
};

/// Parse a single Newick expression. Branch lengths, internal labels and
/// bracket comments are accepted and discarded; quoted names are supported.
/// Unary chains are collapsed. Throws Error on malformed input, duplicate or
/// empty leaf names, trees with no leaves, or trees that have no internal
/// node left after collapsing.
Phylogeny parse_newick(const std::string& text);

Phylogeny parse_newick_file(const std::string& path);

}  // namespace pp
