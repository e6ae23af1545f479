#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <string>

#include "../src/common.hpp"
#include "../src/phylo.hpp"

using namespace pp;

namespace {

// random topology with n_leaves >= 2: repeatedly join two random subtrees
std::string random_newick(std::mt19937_64& rng, int n_leaves) {
  std::vector<std::string> frags;
  for (int i = 0; i < n_leaves; ++i) frags.push_back("L" + std::to_string(i));
  while (frags.size() > 1) {
    std::uniform_int_distribution<size_t> pick(0, frags.size() - 1);
    size_t a = pick(rng);
    size_t b = pick(rng);
    if (a == b) continue;
    std::string joined = "(" + frags[a] + "," + frags[b] + ")";
    frags[std::min(a, b)] = joined;
    frags.erase(frags.begin() + static_cast<long>(std::max(a, b)));
  }
  return frags[0] + ";";
}

}  // namespace

TEST_CASE("parse builds the expected shapes") {
  Phylogeny t = parse_newick("((A,B),C);");
  CHECK(t.num_internal() == 2);
  CHECK(t.num_leaves() == 3);
  int a = *t.find_leaf("A");
  CHECK(t.node(a).depth == 2);
  CHECK(t.node(*t.find_leaf("C")).depth == 1);
  CHECK(t.node(t.root()).depth == 0);
}

TEST_CASE("unary chains collapse") {
  Phylogeny t = parse_newick("(A,(B));");
  CHECK(t.num_internal() == 1);
  CHECK(t.num_leaves() == 2);
  CHECK(t.serialize() == "(A,B);");

  CHECK(parse_newick("((A,B));").serialize() == "(A,B);");
}

TEST_CASE("validation errors") {
  CHECK_THROWS_WITH_AS(parse_newick("((A,B),(A,C));"),
                       doctest::Contains("DuplicateLeafName"), Error);
  CHECK_THROWS_AS(parse_newick("((A,B),C;"), Error);
  CHECK_THROWS_WITH_AS(parse_newick(";"), doctest::Contains("EmptyTree"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_newick("A;"), doctest::Contains("TrivialTree"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_newick("(A);"), doctest::Contains("TrivialTree"),
                       Error);
  CHECK_THROWS_AS(parse_newick("(,A);"), Error);
}

TEST_CASE("branch lengths, labels, comments and quotes are tolerated") {
  Phylogeny t =
      parse_newick("((  'Fish Crow':0.5, B:1e-3 )inner:2.0 [note], C );");
  CHECK(t.num_leaves() == 3);
  CHECK(t.find_leaf("Fish Crow").has_value());
  CHECK(t.serialize() == "(('Fish Crow',B),C);");
}

TEST_CASE("serialization normalizes whitespace and is idempotent") {
  CHECK(parse_newick("(A , B);").serialize() == "(A,B);");
  CHECK(parse_newick("((A,B),C);").serialize() == "((A,B),C);");

  std::mt19937_64 rng(7);
  for (int it = 0; it < 20; ++it) {
    std::string text = random_newick(rng, 2 + static_cast<int>(rng() % 12));
    Phylogeny t1 = parse_newick(text);
    Phylogeny t2 = parse_newick(t1.serialize());
    CHECK(t1.serialize() == t2.serialize());
    CHECK(t1.hash() == t2.hash());
    CHECK(t1.num_leaves() == t2.num_leaves());
  }
}

TEST_CASE("descendant and contrasting sets") {
  Phylogeny t = parse_newick("((A,B),C);");
  int root = t.root();
  int ab = t.node(root).children[0];
  int a = *t.find_leaf("A");
  int b = *t.find_leaf("B");
  int c = *t.find_leaf("C");

  CHECK(t.descendant_leaves(root) == std::vector<int>{a, b, c});
  CHECK(t.descendant_leaves(a) == std::vector<int>{a});
  CHECK(t.descendant_leaves(ab) == std::vector<int>{a, b});

  CHECK(t.contrasting_set(root, ab) == std::vector<int>{c});
  CHECK(t.contrasting_set(root, c) == std::vector<int>{a, b});
  CHECK(t.contrasting_set(ab, a) == std::vector<int>{b});
  CHECK_THROWS_WITH_AS(t.contrasting_set(ab, c), doctest::Contains("NotAChild"),
                       Error);
}

TEST_CASE("root paths") {
  Phylogeny t = parse_newick("((A,B),C);");
  int root = t.root();
  int ab = t.node(root).children[0];

  auto pc = t.root_path(*t.find_leaf("C"));
  REQUIRE(pc.size() == 1);
  CHECK(pc[0] == std::pair<int, int>{root, 1});

  auto pa = t.root_path(*t.find_leaf("A"));
  REQUIRE(pa.size() == 2);
  CHECK(pa[0] == std::pair<int, int>{root, 0});
  CHECK(pa[1] == std::pair<int, int>{ab, 0});

  CHECK_THROWS_AS(t.root_path(99), Error);
  CHECK_THROWS_AS(t.root_path(root), Error);
}

TEST_CASE("prototype budget") {
  Phylogeny t = parse_newick("((A,B),(C,D,E));");
  int root = t.root();
  int cde = t.node(root).children[1];
  CHECK(t.prototype_budget(root, 10) == 20);
  CHECK(t.prototype_budget(cde, 1) == 3);
  CHECK(t.prototype_budget(cde, 10) == 30);
  CHECK_THROWS_WITH_AS(t.prototype_budget(*t.find_leaf("A"), 10),
                       doctest::Contains("NodeIsLeaf"), Error);
}

TEST_CASE("structural invariants hold on random trees") {
  std::mt19937_64 rng(42);
  for (int it = 0; it < 25; ++it) {
    Phylogeny t = parse_newick(random_newick(rng, 2 + static_cast<int>(rng() % 20)));

    for (int n : t.internal_nodes()) {
      const auto& mine = t.descendant_leaves(n);
      std::set<int> merged;
      size_t total = 0;
      for (int c : t.node(n).children) {
        const auto& cd = t.descendant_leaves(c);
        merged.insert(cd.begin(), cd.end());
        total += cd.size();
        CHECK_FALSE(t.contrasting_set(n, c).empty());
      }
      CHECK(merged.size() == total);  // siblings disjoint
      CHECK(std::vector<int>(merged.begin(), merged.end()) == mine);
    }

    // following root_path child positions reaches exactly that leaf
    for (int leaf : t.leaves()) {
      int cur = t.root();
      for (auto [node, pos] : t.root_path(leaf)) {
        CHECK(node == cur);
        cur = t.node(cur).children[static_cast<size_t>(pos)];
      }
      CHECK(cur == leaf);
    }

    // budget totals: sum over internal nodes = beta * total child slots
    int beta = 3;
    int total_budget = 0;
    int child_slots = 0;
    for (int n : t.internal_nodes()) {
      total_budget += t.prototype_budget(n, beta);
      child_slots += static_cast<int>(t.node(n).children.size());
    }
    CHECK(total_budget == beta * child_slots);
  }
}
