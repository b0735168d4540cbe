#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "neurocarve/mesh.hpp"

namespace ncarve {

// 3D kd-tree for nearest-neighbor queries, median split, built once per call
// site. Nodes are stored flat; build/query are iterative-free recursion.
class KdTree3 {
public:
    explicit KdTree3(const std::vector<Vec3>& points) : pts_(points) {
        idx_.resize(pts_.size());
        for (size_t i = 0; i < idx_.size(); ++i) idx_[i] = static_cast<int>(i);
        nodes_.reserve(pts_.size());
        root_ = build(0, static_cast<int>(idx_.size()), 0);
    }

    // squared distance to the nearest stored point
    double nearest_sq(const Vec3& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(root_, q, best);
        return best;
    }

private:
    struct Node {
        int point = -1;
        int left = -1, right = -1;
        int axis = 0;
    };

    static double coord(const Vec3& v, int axis) {
        return axis == 0 ? v.x : (axis == 1 ? v.y : v.z);
    }

    int build(int lo, int hi, int axis) {
        if (lo >= hi) return -1;
        const int mid = (lo + hi) / 2;
        std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                         [&](int a, int b) { return coord(pts_[a], axis) < coord(pts_[b], axis); });
        Node n;
        n.point = idx_[mid];
        n.axis = axis;
        const int self = static_cast<int>(nodes_.size());
        nodes_.push_back(n);
        nodes_[self].left = build(lo, mid, (axis + 1) % 3);
        nodes_[self].right = build(mid + 1, hi, (axis + 1) % 3);
        return self;
    }

    void search(int node, const Vec3& q, double& best) const {
        if (node < 0) return;
        const Node& n = nodes_[node];
        const Vec3 d = pts_[n.point] - q;
        best = std::min(best, d.dot(d));
        const double delta = coord(q, n.axis) - coord(pts_[n.point], n.axis);
        const int near = delta < 0 ? n.left : n.right;
        const int far = delta < 0 ? n.right : n.left;
        search(near, q, best);
        if (delta * delta < best) search(far, q, best);
    }

    std::vector<Vec3> pts_;
    std::vector<int> idx_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

}  // namespace ncarve
