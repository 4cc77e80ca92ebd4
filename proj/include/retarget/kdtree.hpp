#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <utility>
#include <vector>

#include "retarget/geometry.hpp"

namespace retarget {

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

// Exact k-d tree over a fixed point set. Queries are const and may run
// concurrently once construction has finished. Ties on distance resolve to
// the lowest point index so results match an exhaustive scan exactly.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, int leaf_size = 8)
      : points_(points.begin(), points.end()), leaf_size_(std::max(1, leaf_size)) {
    if (points_.empty()) throw InvalidArgument("KdTree: point set is empty");
    for (const auto& p : points_)
      if (!p.allFinite()) throw InvalidArgument("KdTree: points must be finite");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points_.size() / leaf_size_ + 2);
    build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }
  const std::vector<Vec3>& points() const { return points_; }

  Neighbor nearest(const Vec3& q) const {
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    nearest_rec(0, q, best, best_d2);
    return {best, std::sqrt(best_d2)};
  }

  // k nearest neighbours sorted by (distance, index).
  std::vector<Neighbor> knn(const Vec3& q, std::size_t k) const {
    k = std::min(k, points_.size());
    std::vector<Neighbor> out;
    if (k == 0) return out;
    Heap heap;
    knn_rec(0, q, k, heap);
    out.resize(heap.size());
    for (std::size_t i = heap.size(); i-- > 0;) {
      out[i] = {heap.top().second, std::sqrt(heap.top().first)};
      heap.pop();
    }
    return out;
  }

 private:
  struct Node {
    std::size_t begin = 0, end = 0;
    int left = -1, right = -1;
    int axis = 0;
    double split = 0.0;
  };

  // Max-heap on (squared distance, index); top is the current worst.
  using Entry = std::pair<double, std::size_t>;
  using Heap = std::priority_queue<Entry>;

  int build(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= static_cast<std::size_t>(leaf_size_)) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (!(hi(axis) > lo(axis))) return id;  // all coincident: keep as leaf

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       const double ca = points_[a](axis), cb = points_[b](axis);
                       return ca < cb || (ca == cb && a < b);
                     });
    const double split = points_[order_[mid]](axis);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    Node& n = nodes_[id];
    n.axis = axis;
    n.split = split;
    n.left = left;
    n.right = right;
    return id;
  }

  static bool better(double d2, std::size_t idx, double best_d2, std::size_t best) {
    return d2 < best_d2 || (d2 == best_d2 && idx < best);
  }

  void nearest_rec(int node_id, const Vec3& q, std::size_t& best, double& best_d2) const {
    const Node& n = nodes_[node_id];
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (better(d2, idx, best_d2, best)) {
          best_d2 = d2;
          best = idx;
        }
      }
      return;
    }
    const double diff = q(n.axis) - n.split;
    const int first = diff < 0.0 ? n.left : n.right;
    const int second = diff < 0.0 ? n.right : n.left;
    nearest_rec(first, q, best, best_d2);
    if (diff * diff <= best_d2) nearest_rec(second, q, best, best_d2);
  }

  void knn_rec(int node_id, const Vec3& q, std::size_t k, Heap& heap) const {
    const Node& n = nodes_[node_id];
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (heap.size() < k) {
          heap.emplace(d2, idx);
        } else if (Entry(d2, idx) < heap.top()) {
          heap.pop();
          heap.emplace(d2, idx);
        }
      }
      return;
    }
    const double diff = q(n.axis) - n.split;
    const int first = diff < 0.0 ? n.left : n.right;
    const int second = diff < 0.0 ? n.right : n.left;
    knn_rec(first, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.top().first) knn_rec(second, q, k, heap);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int leaf_size_;
};

}  // namespace retarget
