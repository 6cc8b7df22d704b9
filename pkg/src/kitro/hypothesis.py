"""Per-chain binary trees over bone-direction solutions.

Every bone along a kinematic chain has two candidate child positions
(toward/away), and the parent's choice fixes the depth the next bone builds
on, so a chain of D bones spans a binary tree with 2^d nodes at depth d.
Edges are weighted by how well the hypothetical updated joint rotation agrees
with the initial prediction; the selected pose is the root-to-leaf path with
the largest weight product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, cast_ray
from .depth_solver import solve_child_batch
from .rotation import (best_rotation_multi, rotation_cosine, swing_between,
                       swing_between_batch, update_joint_rotation)
from .skeleton import BodyState, SkeletonModel, absolute_rotations, rest_joints

log = logging.getLogger(__name__)

MAX_CHAIN_DEPTH = 8
_MIN_BLEND_NORM = 1e-9


@dataclass
class ChainSpec:
    """One kinematic chain of the plan: ordered bones plus its gating rule.

    `gate` is None for chains rooted at the (fixed) tree root; otherwise
    (parent_chain_id, depth) locates the node of the parent chain's tree that
    supplies this chain's root position.
    """

    chain_id: str
    bones: list[tuple[int, int]]
    root_joint: int
    gate: tuple[str, int] | None = None


@dataclass
class HypothesisTree:
    """Binary tree of candidate child states for one chain.

    Per-depth arrays are indexed by node: the children of node n at depth d
    are nodes 2n (toward) and 2n+1 (away) at depth d+1. Scoring fills
    cos_sims/weights/rel_rots.
    """

    chain_id: str
    bones: list[tuple[int, int]]
    root_pos: np.ndarray
    root_depth: float
    positions: list[np.ndarray] = field(default_factory=list)
    depths: list[np.ndarray] = field(default_factory=list)
    parent_depths: list[np.ndarray] = field(default_factory=list)
    valid: list[np.ndarray] = field(default_factory=list)
    rectified: list[np.ndarray] = field(default_factory=list)
    discriminants: list[np.ndarray] = field(default_factory=list)
    cos_sims: list[np.ndarray] | None = None
    weights: list[np.ndarray] | None = None
    rel_rots: list[np.ndarray] | None = None

    @property
    def depth(self) -> int:
        return len(self.bones)

    @property
    def scored(self) -> bool:
        return self.weights is not None

    def node_count(self) -> int:
        return sum(p.shape[0] for p in self.positions)

    def rectified_count(self) -> int:
        return int(sum(r.sum() for r in self.rectified))

    def parent_position(self, d: int, node: int) -> np.ndarray:
        """Position feeding node `node` at depth index d (0-based)."""
        return self.root_pos if d == 0 else self.positions[d - 1][node >> 1]


@dataclass
class PathSelection:
    """A chosen root-to-leaf path: per-bone branch bits and certainties."""

    chain_id: str
    phi: dict[int, int]
    lambdas: dict[int, float]
    product: float
    node_path: list[int]


def build_tree(chain: list[tuple[int, int]], root_pos, keypoints2d,
               bone_lengths, intr: CameraIntrinsics,
               max_depth: int = MAX_CHAIN_DEPTH) -> HypothesisTree:
    """Solve every node of the chain's binary tree, parent-conditioned.

    `chain` lists (parent, child) joint pairs root-outward; `bone_lengths`
    aligns with it. Nodes whose parent is invalid (non-positive depth) are
    carried along as invalid copies so the arrays stay dense.
    """
    if len(chain) > max_depth:
        raise ValueError(
            f"chain of {len(chain)} bones exceeds the maximum depth {max_depth}")
    for (_, c1), (p2, _) in zip(chain, chain[1:]):
        if c1 != p2:
            raise ValueError("chain bones must be contiguous root-outward")
    root_pos = np.asarray(root_pos, dtype=float)
    if root_pos[2] <= 0.0:
        raise ValueError("chain root must be in front of the camera")
    keypoints2d = np.asarray(keypoints2d, dtype=float)

    tree = HypothesisTree(
        chain_id="", bones=list(chain), root_pos=root_pos.copy(),
        root_depth=float(np.linalg.norm(root_pos)))
    parent_pos = root_pos[None, :]
    parent_depth = np.array([tree.root_depth])
    parent_valid = np.array([True])
    for (p, c), blen in zip(chain, bone_lengths):
        ray = cast_ray(intr, keypoints2d[c])
        n = parent_pos.shape[0]
        positions = np.empty((2 * n, 3))
        depths = np.empty(2 * n)
        disc = np.zeros(n)
        rect = np.zeros(n, dtype=bool)
        valid = np.zeros(2 * n, dtype=bool)
        ok = parent_valid & (parent_depth > 0.0)
        if blen <= 0.0:
            raise ValueError(f"bone ({p},{c}) has non-positive length {blen}")
        if np.any(ok):
            pos_ok, dep_ok, disc_ok, rect_ok, valid_ok = solve_child_batch(
                parent_pos[ok], parent_depth[ok], ray, float(blen))
            idx = np.flatnonzero(ok)
            for k in (0, 1):
                positions[2 * idx + k] = pos_ok[:, k]
                depths[2 * idx + k] = dep_ok[:, k]
                valid[2 * idx + k] = valid_ok[:, k]
            disc[idx] = disc_ok
            rect[idx] = rect_ok
        bad = np.flatnonzero(~ok)
        for k in (0, 1):
            positions[2 * bad + k] = parent_pos[bad]
            depths[2 * bad + k] = parent_depth[bad]
        tree.positions.append(positions)
        tree.depths.append(depths)
        tree.parent_depths.append(np.repeat(parent_depth, 2))
        tree.valid.append(valid)
        tree.rectified.append(np.repeat(rect, 2))
        tree.discriminants.append(np.repeat(disc, 2))
        parent_pos = positions
        parent_depth = depths
        parent_valid = valid
    return tree


def _pairwise_weights(cos_sims: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Sibling softmax; an invalid branch gets 0 and its valid sibling 1."""
    cs = cos_sims.reshape(-1, 2)
    ok = valid.reshape(-1, 2)
    w = np.zeros_like(cs)
    both = ok[:, 0] & ok[:, 1]
    if np.any(both):
        e = np.exp(cs[both])
        w[both] = e / e.sum(axis=1, keepdims=True)
    only0 = ok[:, 0] & ~ok[:, 1]
    only1 = ~ok[:, 0] & ok[:, 1]
    w[only0, 0] = 1.0
    w[only1, 1] = 1.0
    return w.reshape(-1)


def score_edges(tree: HypothesisTree, state: BodyState,
                skeleton: SkeletonModel) -> HypothesisTree:
    """Weight every edge against the initial prediction.

    For each node, the joint rotation of the bone's parent is hypothetically
    rewritten (full step) along the node's path; the geodesic cosine between
    that rotation and the frozen initial rotation, mapped to [0, 1], is
    softmaxed across siblings.
    """
    ktree = skeleton.tree
    rest = rest_joints(skeleton, state.beta)
    theta = state.theta
    theta_ref = state.theta_ref
    first_parent = tree.bones[0][0]
    above = ktree.parent_of(first_parent)
    if above is None:
        ctx = np.eye(3)[None, :, :]
    else:
        ctx = absolute_rotations(theta, ktree)[above][None, :, :]

    tree.cos_sims = []
    tree.weights = []
    tree.rel_rots = []
    for d, (p, c) in enumerate(tree.bones):
        n_nodes = tree.positions[d].shape[0]
        a = np.repeat(ctx, 2, axis=0)  # context per node, siblings share
        b = a @ theta[p]
        t_r = rest[c] - rest[p]
        b_cur = b @ t_r
        parent_pos = tree.root_pos[None, :] if d == 0 else tree.positions[d - 1]
        v = tree.positions[d] - np.repeat(parent_pos, 2, axis=0)
        ok = tree.valid[d]
        r_sw = np.tile(np.eye(3), (n_nodes, 1, 1))
        if np.any(ok):
            r_sw[ok] = swing_between_batch(b_cur[ok], v[ok])
        rel = np.einsum("nba,nbc,ncd->nad", a, r_sw, b)  # A^T R_sw B
        tr = np.einsum("nab,nab->n", rel, theta_ref[p][None, :, :])
        cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
        cs = np.where(ok, (cos + 1.0) / 2.0, 0.0)
        tree.cos_sims.append(cs)
        tree.weights.append(_pairwise_weights(cs, ok))
        tree.rel_rots.append(rel)
        ctx = np.where(ok[:, None, None], r_sw @ b, b)
    return tree


def select_path(tree: HypothesisTree) -> PathSelection:
    """Exhaustive argmax over root-to-leaf products of node similarities.

    Depth-first product accumulation over the raw similarity scores (the
    softmax inputs): ranking by the unnormalized likelihood product keeps the
    per-node evidence additive along the path, where the sibling-normalized
    weights would flatten confident nodes and ambiguous nodes alike. The
    reported product is the chosen path's edge-weight product. Ties break
    toward branch 0 (toward) at the shallowest differing bone.
    """
    if not tree.scored:
        raise ValueError("tree must be scored before path selection")
    sims = tree.cos_sims
    depth = tree.depth
    best_score = -1.0
    best_path: list[int] = []

    def dfs(d: int, node: int, score: float, path: list[int]) -> None:
        nonlocal best_score, best_path
        if d == depth:
            if score > best_score:
                best_score = score
                best_path = path.copy()
            return
        for k in (0, 1):
            child = 2 * node + k
            path.append(k)
            dfs(d + 1, child, score * sims[d][child], path)
            path.pop()

    dfs(0, 0, 1.0, [])
    return _selection_from_bits(tree, best_path)


def greedy_select(tree: HypothesisTree) -> PathSelection:
    """Pick each bone's branch by its local weight alone, parent-conditioned."""
    if not tree.scored:
        raise ValueError("tree must be scored before path selection")
    bits: list[int] = []
    node = 0
    for d in range(tree.depth):
        w0 = tree.weights[d][2 * node]
        w1 = tree.weights[d][2 * node + 1]
        k = 0 if w0 >= w1 else 1
        node = 2 * node + k
        bits.append(k)
    return _selection_from_bits(tree, bits)


def _selection_from_bits(tree: HypothesisTree, bits: list[int]) -> PathSelection:
    phi: dict[int, int] = {}
    lambdas: dict[int, float] = {}
    node_path: list[int] = []
    node = 0
    product = 1.0
    for d, (_, c) in enumerate(tree.bones):
        node = 2 * node + bits[d]
        phi[c] = bits[d]
        lambdas[c] = float(tree.weights[d][node])
        product *= lambdas[c]
        node_path.append(node)
    return PathSelection(chain_id=tree.chain_id, phi=phi, lambdas=lambdas,
                         product=product, node_path=node_path)


def selected_position(tree: HypothesisTree, selection: PathSelection,
                      depth: int) -> np.ndarray:
    """Node position at 1-based depth along the selected path."""
    return tree.positions[depth - 1][selection.node_path[depth - 1]]


def chosen_vectors(tree: HypothesisTree, selection: PathSelection) -> dict:
    """Per child joint: (selected bone vector, certainty lambda)."""
    out = {}
    for d, (_, c) in enumerate(tree.bones):
        node = selection.node_path[d]
        v = tree.positions[d][node] - tree.parent_position(d, node)
        out[c] = (v, selection.lambdas[c])
    return out


def apply_pose_update(state: BodyState, skeleton: SkeletonModel,
                      selections: dict, trees: dict,
                      lambda_override: float | None = None) -> np.ndarray:
    """Rewrite joint rotations toward the selected bone directions.

    Traverses root-outward; each single-child parent takes the minimal swing
    from its current bone direction to the lambda-blended target, while
    multi-child parents (pelvis, upper spine) align all child bones at once
    via SVD. Blending mixes the raw selected vector with the current bone
    vector (both bone-length sized) before normalizing for the swing. Returns
    the updated (J, 3, 3) rotations; the input state is not modified.
    """
    ktree = skeleton.tree
    rest = rest_joints(skeleton, state.beta)
    child_map: dict[int, tuple[np.ndarray, float]] = {}
    for chain_id, sel in selections.items():
        for c, (v, lam) in chosen_vectors(trees[chain_id], sel).items():
            if lambda_override is not None:
                lam = lambda_override
            child_map[c] = (v, lam)

    work = state.copy()
    abs_rots = np.empty_like(work.theta)
    order = sorted(range(ktree.num_joints), key=lambda j: len(ktree.chain_of(j)))
    for p in order:
        parent = ktree.parent_of(p)
        a = np.eye(3) if parent is None else abs_rots[parent]
        b_abs = a @ work.theta[p]
        kids = [c for c in ktree.children_of(p) if c in child_map]
        if not kids:
            abs_rots[p] = b_abs
            continue
        b_list = [b_abs @ (rest[c] - rest[p]) for c in kids]
        b_new = []
        degenerate = False
        for c, b in zip(kids, b_list):
            v, lam = child_map[c]
            blended = lam * v + (1.0 - lam) * b
            if np.linalg.norm(blended) < _MIN_BLEND_NORM:
                degenerate = True
                break
            b_new.append(blended)
        if degenerate:
            log.warning("joint %d: blended bone direction collapsed, skipping update", p)
            abs_rots[p] = b_abs
            continue
        if len(kids) == 1:
            r_sw = swing_between(b_list[0], b_new[0], resolve_antiparallel=True)
        else:
            r_sw = best_rotation_multi(b_list, b_new)
        work.theta[p] = update_joint_rotation(work, ktree, p, r_sw, abs_rots)
        abs_rots[p] = a @ work.theta[p]
    return work.theta


def chain_plan(skeleton: SkeletonModel) -> list[ChainSpec]:
    """Decompose the tree into chains with branch gating.

    At every multi-child joint the smallest-index child continues the current
    chain; the remaining children root new chains there. Chains rooted at a
    branch joint are gated on the chain that contains it (their root position
    comes from that chain's selected hypothesis); chains rooted at the tree
    root need no gate because the root position is fixed each iteration.
    """
    tree = skeleton.tree
    specs: list[ChainSpec] = []
    containing: dict[int, tuple[str, int]] = {}  # joint -> (chain_id, depth)
    pending: list[tuple[int, int]] = [(0, tree.children_of(0)[0])]
    spawned: list[tuple[int, int]] = [(0, c) for c in tree.children_of(0)[1:]]

    def walk(root: int, first_child: int) -> ChainSpec:
        bones = [(root, first_child)]
        while True:
            kids = tree.children_of(bones[-1][1])
            if not kids:
                break
            j = bones[-1][1]
            bones.append((j, kids[0]))
            for extra in kids[1:]:
                spawned.append((j, extra))
        leaf = bones[-1][1]
        name = _chain_name(skeleton, leaf)
        gate = None if root == 0 else containing.get(root)
        if root != 0 and gate is None:
            raise ValueError(f"chain rooted at joint {root} has no gating chain")
        spec = ChainSpec(chain_id=name, bones=bones, root_joint=root, gate=gate)
        for d, (_, c) in enumerate(bones, start=1):
            containing[c] = (name, d)
        return spec

    while pending or spawned:
        root, child = pending.pop(0) if pending else spawned.pop(0)
        specs.append(walk(root, child))
    return specs


_CANONICAL_CHAIN_NAMES = {10: "leg_l", 11: "leg_r", 15: "torso",
                          22: "arm_l", 23: "arm_r"}


def _chain_name(skeleton: SkeletonModel, leaf: int) -> str:
    if skeleton.num_joints == 24 and leaf in _CANONICAL_CHAIN_NAMES:
        return _CANONICAL_CHAIN_NAMES[leaf]
    return f"chain_{leaf}"


def tree_debug_dict(tree: HypothesisTree, selection: PathSelection | None) -> dict:
    """JSON-ready snapshot of one tree's weights and the selected path."""
    out = {
        "chain": tree.chain_id,
        "bones": [list(b) for b in tree.bones],
        "weights": [w.tolist() for w in (tree.weights or [])],
        "cos_sims": [c.tolist() for c in (tree.cos_sims or [])],
        "rectified": [r.tolist() for r in tree.rectified],
        "valid": [v.tolist() for v in tree.valid],
    }
    if selection is not None:
        out["phi"] = {str(k): v for k, v in selection.phi.items()}
        out["lambdas"] = {str(k): v for k, v in selection.lambdas.items()}
        out["product"] = selection.product
    return out
