#include "phylo.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "common.hpp"

namespace pp {

namespace {

// Intermediate parse tree; converted to the flat preorder layout afterwards.
struct RawNode {
  std::string name;
  std::vector<std::unique_ptr<RawNode>> children;
};

class NewickParser {
 public:
  explicit NewickParser(const std::string& text) : text_(text) {}

  std::unique_ptr<RawNode> parse() {
    skip_filler();
    if (pos_ >= text_.size() || text_[pos_] == ';')
      fail(ErrorCode::Parse, "EmptyTree: no leaves in Newick input");
    auto root = parse_subtree();
    skip_filler();
    if (pos_ >= text_.size() || text_[pos_] != ';')
      fail(ErrorCode::Parse, "missing ';' terminator in Newick input");
    ++pos_;
    skip_filler();
    if (pos_ != text_.size())
      fail(ErrorCode::Parse, "trailing content after ';'");
    return root;
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_filler() {
    while (pos_ < text_.size()) {
      char c = text_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '[') {
        // bracket comment, no nesting in the Newick spec
        size_t end = text_.find(']', pos_);
        if (end == std::string::npos)
          fail(ErrorCode::Parse, "unterminated '[' comment");
        pos_ = end + 1;
      } else {
        break;
      }
    }
  }

  std::unique_ptr<RawNode> parse_subtree() {
    skip_filler();
    if (peek() == '(') return parse_group();
    auto leaf = std::make_unique<RawNode>();
    leaf->name = parse_label();
    if (leaf->name.empty())
      fail(ErrorCode::Parse, "leaf with empty name");
    parse_suffix();
    return leaf;
  }

  std::unique_ptr<RawNode> parse_group() {
    ++pos_;  // '('
    auto node = std::make_unique<RawNode>();
    while (true) {
      node->children.push_back(parse_subtree());
      skip_filler();
      char c = peek();
      if (c == ',') {
        ++pos_;
        continue;
      }
      if (c == ')') {
        ++pos_;
        break;
      }
      fail(ErrorCode::Parse, "UnbalancedParens: expected ',' or ')'");
    }
    // optional internal label, ignored; optional branch length, ignored
    parse_label();
    parse_suffix();
    return node;
  }

  // name, possibly single-quoted ('' escapes a quote)
  std::string parse_label() {
    skip_filler();
    std::string out;
    if (peek() == '\'') {
      ++pos_;
      while (true) {
        if (pos_ >= text_.size())
          fail(ErrorCode::Parse, "unterminated quoted name");
        char c = text_[pos_++];
        if (c == '\'') {
          if (peek() == '\'') {
            out.push_back('\'');
            ++pos_;
          } else {
            break;
          }
        } else {
          out.push_back(c);
        }
      }
      return out;
    }
    while (pos_ < text_.size()) {
      char c = text_[pos_];
      if (c == '(' || c == ')' || c == ',' || c == ';' || c == ':' ||
          c == '[' || std::isspace(static_cast<unsigned char>(c)))
        break;
      out.push_back(c);
      ++pos_;
    }
    return out;
  }

  // ":<branch length>", ignored
  void parse_suffix() {
    skip_filler();
    if (peek() != ':') return;
    ++pos_;
    skip_filler();
    size_t start = pos_;
    while (pos_ < text_.size()) {
      char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' ||
          c == '-' || c == '+' || c == 'e' || c == 'E') {
        ++pos_;
      } else {
        break;
      }
    }
    if (pos_ == start)
      fail(ErrorCode::Parse, "expected branch length after ':'");
  }

  const std::string& text_;
  size_t pos_ = 0;
};

// Splice out unary internal nodes; roots of the form ((...)) collapse too.
std::unique_ptr<RawNode> collapse_unary(std::unique_ptr<RawNode> node) {
  for (auto& child : node->children) child = collapse_unary(std::move(child));
  if (node->children.size() == 1) return std::move(node->children.front());
  return node;
}

}  // namespace

const TreeNode& Phylogeny::node(int i) const {
  if (i < 0 || i >= num_nodes())
    fail(ErrorCode::InvalidArgument, "node index out of range");
  return nodes_[static_cast<size_t>(i)];
}

std::optional<int> Phylogeny::find_leaf(const std::string& name) const {
  for (int leaf : leaves_)
    if (nodes_[static_cast<size_t>(leaf)].name == name) return leaf;
  return std::nullopt;
}

const std::vector<int>& Phylogeny::descendant_leaves(int node_idx) const {
  node(node_idx);
  return desc_[static_cast<size_t>(node_idx)];
}

std::vector<int> Phylogeny::contrasting_set(int node_idx, int child) const {
  int pos = child_position(node_idx, child);
  (void)pos;
  std::vector<int> out;
  const auto& child_desc = desc_[static_cast<size_t>(child)];
  for (int leaf : desc_[static_cast<size_t>(node_idx)]) {
    if (!std::binary_search(child_desc.begin(), child_desc.end(), leaf))
      out.push_back(leaf);
  }
  return out;
}

std::vector<std::pair<int, int>> Phylogeny::root_path(int leaf) const {
  const TreeNode& n = node(leaf);
  if (!n.leaf) fail(ErrorCode::InvalidArgument, "root_path expects a leaf");
  std::vector<std::pair<int, int>> path;
  int cur = leaf;
  while (cur != root_) {
    int parent = nodes_[static_cast<size_t>(cur)].parent;
    path.emplace_back(parent, child_position(parent, cur));
    cur = parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

int Phylogeny::child_position(int node_idx, int child) const {
  const TreeNode& n = node(node_idx);
  for (size_t i = 0; i < n.children.size(); ++i)
    if (n.children[i] == child) return static_cast<int>(i);
  fail(ErrorCode::InvalidArgument, "NotAChild: node is not a child of parent");
}

int Phylogeny::prototype_budget(int node_idx, int beta) const {
  const TreeNode& n = node(node_idx);
  if (n.leaf) fail(ErrorCode::InvalidArgument, "NodeIsLeaf: no prototypes at leaves");
  if (beta < 1) fail(ErrorCode::InvalidArgument, "beta must be >= 1");
  return beta * static_cast<int>(n.children.size());
}

namespace {

bool needs_quoting(const std::string& name) {
  for (char c : name) {
    if (c == '(' || c == ')' || c == ',' || c == ';' || c == ':' ||
        c == '[' || c == ']' || c == '\'' ||
        std::isspace(static_cast<unsigned char>(c)))
      return true;
  }
  return name.empty();
}

void serialize_node(const Phylogeny& t, int idx, std::string& out) {
  const TreeNode& n = t.nodes()[static_cast<size_t>(idx)];
  if (n.leaf) {
    if (!needs_quoting(n.name)) {
      out += n.name;
    } else {
      out.push_back('\'');
      for (char c : n.name) {
        out.push_back(c);
        if (c == '\'') out.push_back('\'');
      }
      out.push_back('\'');
    }
    return;
  }
  out.push_back('(');
  for (size_t i = 0; i < n.children.size(); ++i) {
    if (i) out.push_back(',');
    serialize_node(t, n.children[i], out);
  }
  out.push_back(')');
}

}  // namespace

std::string Phylogeny::serialize() const {
  std::string out;
  serialize_node(*this, root_, out);
  out.push_back(';');
  return out;
}

uint64_t Phylogeny::hash() const { return fnv1a64(serialize()); }

void Phylogeny::build_index() {
  size_t n = nodes_.size();
  desc_.assign(n, {});
  leaves_.clear();
  internals_.clear();
  for (size_t i = 0; i < n; ++i) {
    if (nodes_[i].leaf)
      leaves_.push_back(static_cast<int>(i));
    else
      internals_.push_back(static_cast<int>(i));
  }
  // preorder guarantees children come after parents; fill bottom-up
  for (size_t i = n; i-- > 0;) {
    if (nodes_[i].leaf) {
      desc_[i] = {static_cast<int>(i)};
    } else {
      for (int c : nodes_[i].children) {
        const auto& cd = desc_[static_cast<size_t>(c)];
        desc_[i].insert(desc_[i].end(), cd.begin(), cd.end());
      }
      std::sort(desc_[i].begin(), desc_[i].end());
    }
  }
}

Phylogeny parse_newick(const std::string& text) {
  NewickParser parser(text);
  auto raw = collapse_unary(parser.parse());
  if (raw->children.empty())
    fail(ErrorCode::Parse, "TrivialTree: no internal node after collapsing");

  Phylogeny tree;
  // flatten to preorder
  struct Item {
    const RawNode* raw;
    int parent;
    int depth;
  };
  std::vector<Item> stack{{raw.get(), -1, 0}};
  std::set<std::string> seen;
  while (!stack.empty()) {
    Item it = stack.back();
    stack.pop_back();
    int idx = static_cast<int>(tree.nodes_.size());
    TreeNode flat;
    flat.parent = it.parent;
    flat.depth = it.depth;
    flat.leaf = it.raw->children.empty();
    if (flat.leaf) {
      flat.name = it.raw->name;
      if (flat.name.empty())
        fail(ErrorCode::Parse, "leaf with empty name");
      if (!seen.insert(flat.name).second)
        fail(ErrorCode::Parse, "DuplicateLeafName: " + flat.name);
    }
    if (it.parent >= 0)
      tree.nodes_[static_cast<size_t>(it.parent)].children.push_back(idx);
    tree.nodes_.push_back(std::move(flat));
    // push children in reverse so they pop in document order
    for (size_t i = it.raw->children.size(); i-- > 0;)
      stack.push_back({it.raw->children[i].get(), idx, it.depth + 1});
  }
  tree.root_ = 0;
  tree.build_index();
  return tree;
}

Phylogeny parse_newick_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open tree file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_newick(ss.str());
}

}  // namespace pp
