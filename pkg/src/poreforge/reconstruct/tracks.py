"""Track building: transitive closure over verified matches."""

from __future__ import annotations

from .matching import MatchGraph


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        while p != x:
            self.parent[x] = p = self.parent[p]
            x = p
            p = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic root: keep the smaller node id
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_tracks(graph: MatchGraph) -> list[list[tuple[int, int]]]:
    """Group verified matches into candidate tracks.

    Each track is a sorted list of (view_id, keypoint_index). Components that
    collect two keypoints from the same view are ambiguous and dropped whole.
    Output order and content are independent of match insertion order.
    """
    uf = _UnionFind()
    for va, ka, vb, kb in graph.inlier_edges():
        uf.union((va, ka), (vb, kb))

    components: dict = {}
    for node in uf.parent:
        components.setdefault(uf.find(node), []).append(node)

    out = []
    for nodes in components.values():
        if len(nodes) < 2:
            continue
        views = [v for v, _ in nodes]
        if len(set(views)) != len(views):
            continue
        out.append(sorted(nodes))
    out.sort()
    return out
