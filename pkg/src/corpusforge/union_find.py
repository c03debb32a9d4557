"""Disjoint-set structure for folding candidate pairs into duplicate clusters."""

from __future__ import annotations

from typing import Hashable, Iterable


class UnionFind:
    """Union by rank with iterative path compression.

    Only ids that appeared in a union are tracked; everything else is
    implicitly a singleton.
    """

    def __init__(self):
        self.parent: dict[Hashable, Hashable] = {}
        self.rank: dict[Hashable, int] = {}

    def find(self, x: Hashable) -> Hashable:
        if x not in self.parent:
            self.parent[x] = x
            self.rank[x] = 0
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: Hashable, b: Hashable) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1

    def components(self) -> dict[Hashable, list[Hashable]]:
        """Connected components as root -> sorted member list."""
        groups: dict[Hashable, list[Hashable]] = {}
        for x in self.parent:
            groups.setdefault(self.find(x), []).append(x)
        for members in groups.values():
            members.sort()
        return groups


def components_from_pairs(pairs: Iterable[tuple[Hashable, Hashable]]) -> dict[Hashable, list[Hashable]]:
    uf = UnionFind()
    for a, b in pairs:
        uf.union(a, b)
    return uf.components()
