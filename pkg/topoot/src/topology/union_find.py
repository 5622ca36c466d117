"""
Union-Find with elder-rule bookkeeping for H0 persistence.
"""


class UnionFind:
    """Disjoint sets whose roots remember the sweep position of their oldest vertex."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        # sweep order at which the component's oldest vertex entered
        self.birth_order = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def make_set(self, x: int, order: int) -> None:
        self.parent[x] = x
        self.rank[x] = 0
        self.birth_order[x] = order

    def union(self, x: int, y: int) -> int:
        """Merge the sets of x and y; returns the root that keeps the older birth."""
        x_root = self.find(x)
        y_root = self.find(y)
        if x_root == y_root:
            return x_root
        elder = min(self.birth_order[x_root], self.birth_order[y_root])
        if self.rank[x_root] < self.rank[y_root]:
            x_root, y_root = y_root, x_root
        self.parent[y_root] = x_root
        if self.rank[x_root] == self.rank[y_root]:
            self.rank[x_root] += 1
        self.birth_order[x_root] = elder
        return x_root

    def is_same(self, x: int, y: int) -> bool:
        return self.find(x) == self.find(y)

    def __repr__(self) -> str:
        return f"UnionFind({self.parent})"
