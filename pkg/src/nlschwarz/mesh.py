"""Structured triangulations, partitions, overlaps and interface classification.

The mesh is a uniform grid of rectangles split along a fixed diagonal into
triangles.  Subdomains are rectangular blocks of cells; overlap is grown one
element layer at a time via the dual (shared-edge) or nodal (shared-node)
element graph, and a one-element ghost ring lets every overlapping-subdomain
node be assembled as an interior node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# boundary tag codes
INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2
LID = 3

TAG_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann", LID: "lid"}
TAG_CODES = {v: k for k, v in TAG_NAMES.items()}


class InvalidGeometryError(ValueError):
    """Raised for degenerate rectangle extents or element counts."""


class PartitionError(ValueError):
    """Raised when the subdomain grid does not divide the element grid."""


@dataclass
class Mesh:
    nodes: np.ndarray        # (n_nodes, 2) coordinates
    elements: np.ndarray     # (n_elements, 3) node indices, CCW
    boundary_tag: np.ndarray  # (n_nodes,) int codes
    pin_node: int | None = None  # node carrying the pressure pin, if any

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def grid_shape(self) -> tuple[int, int]:
        """(nx, ny) cell counts, recovered from the structured coordinates."""
        nx = len(np.unique(self.nodes[:, 0])) - 1
        ny = len(np.unique(self.nodes[:, 1])) - 1
        return nx, ny

    def extents(self) -> tuple[float, float, float, float]:
        x, y = self.nodes[:, 0], self.nodes[:, 1]
        return x.min(), x.max(), y.min(), y.max()


@dataclass
class Decomposition:
    num_subdomains: int
    owner: np.ndarray  # (n_elements,) subdomain index
    overlap_elements: list[np.ndarray] | None = None
    ghost_elements: list[np.ndarray] | None = None
    # node sets per subdomain for the nonoverlapping, overlapping and
    # ghost-extended element sets
    nodes_owned: list[np.ndarray] | None = None
    nodes_overlap: list[np.ndarray] | None = None
    nodes_extended: list[np.ndarray] | None = None
    multiplicity: np.ndarray | None = None  # per node, overlap membership count


@dataclass
class SkeletonEdge:
    start: int               # endpoint vertex node
    end: int                 # endpoint vertex node
    interior: np.ndarray     # interior node run, ordered start -> end
    subdomains: tuple[int, int]


@dataclass
class InterfaceSkeleton:
    interface_nodes: np.ndarray          # Gamma, sorted
    gamma_prime: np.ndarray              # Gamma minus Dirichlet boundary
    vertices: np.ndarray                 # vertex nodes, sorted
    edges: list[SkeletonEdge] = field(default_factory=list)


def build_structured_mesh(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0),
                          problem_kind: str = "ldc") -> Mesh:
    """Uniform triangulation of the rectangle [x0,x1]x[y0,y1].

    Each cell is split along the lower-left-to-upper-right diagonal.  Boundary
    tags follow the problem: for "ldc" the lid is at y=y1 and the remaining
    boundary is Dirichlet with the pressure pinned at (x0,y0); for "beam" the
    short edges x=x0,x1 are Dirichlet and the long edges Neumann; "diffusion"
    uses an all-Dirichlet boundary.
    """
    if nx < 1 or ny < 1:
        raise InvalidGeometryError(f"element counts must be >= 1, got {nx}x{ny}")
    x0, x1, y0, y1 = domain
    if x1 <= x0 or y1 <= y0:
        raise InvalidGeometryError(f"degenerate extents {domain}")
    if problem_kind not in ("ldc", "beam", "diffusion"):
        raise ValueError(f"unknown problem_kind {problem_kind!r}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])  # index = iy*(nx+1)+ix

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    a = (iy * (nx + 1) + ix).ravel()
    b = a + 1
    c = b + (nx + 1)
    d = a + (nx + 1)
    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([a, b, c])
    elements[1::2] = np.column_stack([a, c, d])

    tags = np.full(nodes.shape[0], INTERIOR, dtype=np.int8)
    on_left = np.isclose(nodes[:, 0], x0)
    on_right = np.isclose(nodes[:, 0], x1)
    on_bottom = np.isclose(nodes[:, 1], y0)
    on_top = np.isclose(nodes[:, 1], y1)
    on_boundary = on_left | on_right | on_bottom | on_top
    pin = None
    if problem_kind == "ldc":
        tags[on_boundary] = DIRICHLET
        tags[on_top] = LID
        pin = int(np.flatnonzero(on_left & on_bottom)[0])
    elif problem_kind == "beam":
        tags[on_boundary] = NEUMANN
        tags[on_left | on_right] = DIRICHLET
    else:
        tags[on_boundary] = DIRICHLET
    return Mesh(nodes=nodes, elements=elements, boundary_tag=tags, pin_node=pin)


def partition_structured(mesh: Mesh, px: int, py: int) -> Decomposition:
    """Assign each element to the rectangular block containing its centroid."""
    nx, ny = mesh.grid_shape()
    if nx % px or ny % py:
        raise PartitionError(f"{px}x{py} subdomains do not divide the {nx}x{ny} grid")
    x0, x1, y0, y1 = mesh.extents()
    cent = mesh.nodes[mesh.elements].mean(axis=1)
    bx = np.clip(((cent[:, 0] - x0) / (x1 - x0) * px).astype(np.int64), 0, px - 1)
    by = np.clip(((cent[:, 1] - y0) / (y1 - y0) * py).astype(np.int64), 0, py - 1)
    owner = by * px + bx
    return Decomposition(num_subdomains=px * py, owner=owner)


def _element_edges(elements: np.ndarray) -> np.ndarray:
    """(3*m, 2) sorted node pairs; rows 3*e..3*e+2 are the edges of element e."""
    e = elements
    pairs = np.stack([e[:, [1, 2]], e[:, [2, 0]], e[:, [0, 1]]], axis=1).reshape(-1, 2)
    return np.sort(pairs, axis=1)


def dual_graph(mesh: Mesh) -> sp.csr_matrix:
    """Element adjacency via shared element edges (two common nodes)."""
    m = mesh.n_elements
    edges = _element_edges(mesh.elements)
    elem_of = np.repeat(np.arange(m), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges_s, elem_s = edges[order], elem_of[order]
    same = np.all(edges_s[1:] == edges_s[:-1], axis=1)
    i = elem_s[:-1][same]
    j = elem_s[1:][same]
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    adj = sp.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(m, m))
    adj.data[:] = 1
    return adj


def nodal_graph(mesh: Mesh) -> sp.csr_matrix:
    """Element adjacency via any shared node."""
    m, n = mesh.n_elements, mesh.n_nodes
    rows = np.repeat(np.arange(m), 3)
    inc = sp.csr_matrix((np.ones(3 * m, dtype=np.int8), (rows, mesh.elements.ravel())),
                        shape=(m, n))
    adj = (inc @ inc.T).tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.data[:] = 1
    return adj


def extend_overlap(decomp: Decomposition, graph: sp.csr_matrix, k: int) -> Decomposition:
    """Populate overlap_elements with the k-layer closure of each owner set."""
    if k < 0:
        raise ValueError("overlap layer count must be >= 0")
    m = decomp.owner.shape[0]
    overlap = []
    for i in range(decomp.num_subdomains):
        ind = (decomp.owner == i)
        for _ in range(k):
            ind = ind | (graph @ ind).astype(bool)
        overlap.append(np.flatnonzero(ind))
    decomp.overlap_elements = overlap
    return decomp


def ghost_layer(decomp: Decomposition, graph: sp.csr_matrix,
                elements: np.ndarray | None = None, n_nodes: int | None = None,
                mesh: Mesh | None = None) -> Decomposition:
    """Populate ghost_elements (node-adjacent ring) and the node sets.

    `graph` must be the nodal element graph so that every node of the
    overlapping subdomain becomes interior to the ghost-extended element set.
    """
    if decomp.overlap_elements is None:
        raise ValueError("extend_overlap must run before ghost_layer")
    if mesh is not None:
        elements, n_nodes = mesh.elements, mesh.n_nodes
    m = decomp.owner.shape[0]
    ghosts, n_owned, n_over, n_ext = [], [], [], []
    mult = np.zeros(n_nodes, dtype=np.int64)
    for i in range(decomp.num_subdomains):
        ov = decomp.overlap_elements[i]
        ind = np.zeros(m, dtype=bool)
        ind[ov] = True
        ring = (graph @ ind).astype(bool) & ~ind
        ghosts.append(np.flatnonzero(ring))
        n_owned.append(np.unique(elements[decomp.owner == i]))
        nodes_ov = np.unique(elements[ov])
        n_over.append(nodes_ov)
        n_ext.append(np.unique(elements[ind | ring]))
        mult[nodes_ov] += 1
    decomp.ghost_elements = ghosts
    decomp.nodes_owned = n_owned
    decomp.nodes_overlap = n_over
    decomp.nodes_extended = n_ext
    decomp.multiplicity = mult
    return decomp


def node_subdomain_counts(mesh: Mesh, decomp: Decomposition) -> sp.csr_matrix:
    """(n_nodes, N) incidence of nodes with nonoverlapping subdomain closures."""
    rows = mesh.elements.ravel()
    cols = np.repeat(decomp.owner, 3)
    inc = sp.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)),
                        shape=(mesh.n_nodes, decomp.num_subdomains))
    inc.data[:] = 1
    # duplicate entries were summed; rebuild as 0/1
    inc = (inc > 0).astype(np.int8)
    return inc


def interface_skeleton(decomp: Decomposition, mesh: Mesh) -> InterfaceSkeleton:
    """Classify the interface into vertices and ordered edge runs.

    Vertices are nodes adjacent to three or more subdomains, plus interface
    nodes on the physical boundary (where an edge run terminates).  Edge runs
    connect vertices through nodes shared by exactly two subdomains, walking
    along interface mesh edges.
    """
    inc = node_subdomain_counts(mesh, decomp)
    counts = np.asarray(inc.sum(axis=1)).ravel()
    gamma_mask = counts >= 2
    gamma = np.flatnonzero(gamma_mask)
    if gamma.size == 0:
        empty = np.array([], dtype=np.int64)
        return InterfaceSkeleton(empty, empty, empty, [])

    on_boundary = mesh.boundary_tag != INTERIOR
    dirichlet = (mesh.boundary_tag == DIRICHLET) | (mesh.boundary_tag == LID)
    gamma_prime = gamma[~dirichlet[gamma]]
    vertex_mask = gamma_mask & ((counts >= 3) | on_boundary)
    vertices = np.flatnonzero(vertex_mask)

    # interface mesh edges: both adjacent elements exist and have distinct owners
    edges = _element_edges(mesh.elements)
    elem_of = np.repeat(np.arange(mesh.n_elements), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges_s, elem_s = edges[order], elem_of[order]
    same = np.all(edges_s[1:] == edges_s[:-1], axis=1)
    o1 = decomp.owner[elem_s[:-1][same]]
    o2 = decomp.owner[elem_s[1:][same]]
    iface = o1 != o2
    seg_nodes = edges_s[:-1][same][iface]
    seg_pair = np.sort(np.column_stack([o1[iface], o2[iface]]), axis=1)

    nbr: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for (a, b), (p, q) in zip(seg_nodes, seg_pair):
        nbr.setdefault(int(a), []).append((int(b), (int(p), int(q))))
        nbr.setdefault(int(b), []).append((int(a), (int(p), int(q))))

    consumed: set[tuple[int, int]] = set()
    runs: list[SkeletonEdge] = []
    for v in vertices:
        for w, pair in nbr.get(int(v), []):
            key = (min(int(v), w), max(int(v), w))
            if key in consumed:
                continue
            consumed.add(key)
            interior = []
            prev, cur = int(v), w
            while not vertex_mask[cur]:
                interior.append(cur)
                nxt = [(x, pr) for x, pr in nbr[cur] if x != prev]
                if len(nxt) != 1:
                    raise RuntimeError(f"non-manifold interface at node {cur}")
                step_key = (min(cur, nxt[0][0]), max(cur, nxt[0][0]))
                consumed.add(step_key)
                prev, cur = cur, nxt[0][0]
            runs.append(SkeletonEdge(start=int(v), end=int(cur),
                                     interior=np.array(interior, dtype=np.int64),
                                     subdomains=pair))
    return InterfaceSkeleton(interface_nodes=gamma, gamma_prime=gamma_prime,
                             vertices=vertices, edges=runs)


def save_mesh(mesh: Mesh, path) -> None:
    """Plain-text export: count header, node lines `x y tag`, element lines."""
    with open(path, "w") as f:
        f.write(f"{mesh.n_nodes} {mesh.n_elements}\n")
        for i in range(mesh.n_nodes):
            tag = ("corner_pressure_pin" if mesh.pin_node == i
                   else TAG_NAMES[int(mesh.boundary_tag[i])])
            f.write(f"{float(mesh.nodes[i, 0])!r} {float(mesh.nodes[i, 1])!r} {tag}\n")
        for tri in mesh.elements:
            f.write(f"{tri[0]} {tri[1]} {tri[2]}\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        n, m = map(int, f.readline().split())
        nodes = np.empty((n, 2))
        tags = np.empty(n, dtype=np.int8)
        pin = None
        for i in range(n):
            x, y, tag = f.readline().split()
            nodes[i] = (float(x), float(y))
            if tag == "corner_pressure_pin":
                tags[i] = DIRICHLET
                pin = i
            else:
                tags[i] = TAG_CODES[tag]
        elements = np.array([f.readline().split() for _ in range(m)], dtype=np.int64)
    return Mesh(nodes=nodes, elements=elements, boundary_tag=tags, pin_node=pin)
