#pragma once

#include <algorithm>
#include <limits>
#include <utility>
#include <vector>

#include "pose6d/geometry.hpp"

namespace pose6d {

// Exact nearest-neighbor search over a fixed 3D point set. Median-split tree;
// queries prune subtrees by splitting-plane distance, so results are exact.
class KdTree3 {
 public:
  explicit KdTree3(const std::vector<Vec3>& pts) : pts_(pts) {
    index_.resize(pts.size());
    for (int i = 0; i < int(pts.size()); ++i) index_[i] = i;
    if (!pts.empty()) root_ = build(0, int(pts.size()));
  }

  // Returns (point index, squared distance). Point set must be nonempty.
  std::pair<int, double> nearest(const Vec3& q) const {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    search(root_, q, best, best_d2);
    return {best, best_d2};
  }

 private:
  struct Node {
    int axis = -1;     // -1 marks a leaf
    double split = 0.0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into index_
  };

  static double coord(const Vec3& p, int axis) { return axis == 0 ? p.x : (axis == 1 ? p.y : p.z); }

  int build(int begin, int end) {
    Node n;
    if (end - begin <= 8) {
      n.begin = begin;
      n.end = end;
      nodes_.push_back(n);
      return int(nodes_.size()) - 1;
    }
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (int i = begin; i < end; ++i) {
      const Vec3& p = pts_[index_[i]];
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    Vec3 ext = hi - lo;
    int axis = 0;
    if (ext.y > ext.x) axis = 1;
    if (coord(ext, 2) > coord(ext, axis)) axis = 2;
    int mid = (begin + end) / 2;
    std::nth_element(index_.begin() + begin, index_.begin() + mid, index_.begin() + end,
                     [&](int a, int b) { return coord(pts_[a], axis) < coord(pts_[b], axis); });
    n.axis = axis;
    n.split = coord(pts_[index_[mid]], axis);
    int self = int(nodes_.size());
    nodes_.push_back(n);
    int l = build(begin, mid);
    int r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void search(int node_id, const Vec3& q, int& best, double& best_d2) const {
    const Node& n = nodes_[node_id];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        Vec3 d = pts_[index_[i]] - q;
        double d2 = d.dot(d);
        if (d2 < best_d2) {
          best_d2 = d2;
          best = index_[i];
        }
      }
      return;
    }
    double dq = coord(q, n.axis) - n.split;
    int first = dq < 0.0 ? n.left : n.right;
    int second = dq < 0.0 ? n.right : n.left;
    search(first, q, best, best_d2);
    if (dq * dq < best_d2) search(second, q, best, best_d2);
  }

  const std::vector<Vec3>& pts_;
  std::vector<int> index_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Per-query argmin over `candidates` for each point in `queries`. Brute force
// below the size threshold, KD-tree above it; both paths are exact.
inline std::vector<int> closest_indices(const std::vector<Vec3>& queries,
                                        const std::vector<Vec3>& candidates,
                                        std::size_t kdtree_threshold = 512) {
  std::vector<int> out(queries.size(), -1);
  if (candidates.empty()) return out;
  if (candidates.size() < kdtree_threshold) {
    for (std::size_t i = 0; i < queries.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < candidates.size(); ++j) {
        Vec3 d = candidates[j] - queries[i];
        double d2 = d.dot(d);
        if (d2 < best) {
          best = d2;
          out[i] = int(j);
        }
      }
    }
  } else {
    KdTree3 tree(candidates);
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = tree.nearest(queries[i]).first;
  }
  return out;
}

}  // namespace pose6d
