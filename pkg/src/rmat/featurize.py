"""Atom, bond, and pair-relation featurization.

Turns molecule graphs into the numeric inputs of the attention stack:
a 36-column atom feature matrix, a per-pair relation tensor (topological
neighborhood one-hot + bond features + distance embedding), adjacency
and distance matrices, and a 12-component physicochemical descriptor
vector used as a pretraining regression target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from . import molio

ATOM_FEATURE_DIM = 36
BOND_FEATURE_DIM = 7
NEIGHBOR_CODES = 6

ENCODINGS = ("radial_envelope", "radial_plain", "gaussian_schnet")

_GAUSSIAN_GAMMA = 10.0  # 1/Angstrom^2
_GAUSSIAN_SPAN = 30.0  # Angstrom

# atom feature column layout
_COL_ELEMENT = 0  # 12 columns: B N C O F P S Cl Br I Dummy Other
_COL_DEGREE = 12  # 6 columns: 0..5 bonded heavy neighbors (clamped)
_COL_HCOUNT = 18  # 5 columns: 0..4 attached hydrogens (clamped)
_COL_CHARGE = 23  # 11 columns: formal charge -5..+5
_COL_RING = 34
_COL_AROMATIC = 35

_ELEMENT_INDEX = {sym: i for i, sym in enumerate(molio.ELEMENTS)}
_ELEMENT_INDEX[molio.DUMMY] = 10
_ELEMENT_INDEX[molio.OTHER] = 11


@dataclass
class DistanceConfig:
    cutoff: float = 20.0  # Angstrom
    n_emb: int = 32
    envelope_p: int = 6
    encoding: str = "radial_envelope"

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.n_emb < 1:
            raise ValueError("n_emb must be at least 1")
        if self.envelope_p < 1:
            raise ValueError("envelope_p must be at least 1")
        if self.encoding not in ENCODINGS:
            raise ValueError(
                f"encoding must be one of {ENCODINGS}, got {self.encoding!r}"
            )


def distance_embedding(d: float, cfg: DistanceConfig | None = None) -> np.ndarray:
    """Embed one interatomic distance into cfg.n_emb channels.

    radial_envelope: sinc-like radial basis e_n(d) = sqrt(2/c) sin(n pi d / c) / d
    times a degree-p polynomial envelope u(d/c) that reaches 0 with p-1
    smooth derivatives at d = c. radial_plain drops the envelope.
    gaussian_schnet: exp(-gamma (d - mu_n)^2) with centers spanning 30 A.

    The d = 0 limit of the radial forms is sqrt(2/c) * n pi / c.
    """
    if cfg is None:
        cfg = DistanceConfig()
    if d < 0:
        raise ValueError(f"negative distance {d}")
    d = float(d)
    c = cfg.cutoff
    n = np.arange(1, cfg.n_emb + 1, dtype=np.float64)
    if cfg.encoding == "gaussian_schnet":
        mu = np.linspace(0.0, _GAUSSIAN_SPAN, cfg.n_emb)
        diff = d - mu
        return np.exp(-_GAUSSIAN_GAMMA * diff * diff)
    scale = math.sqrt(2.0 / c)
    freq = n * math.pi / c
    if d < 1e-9:
        radial = scale * freq
    else:
        radial = scale * np.sin(freq * d) / d
    if cfg.encoding == "radial_plain":
        return radial
    t = d / c
    if t >= 1.0:
        return np.zeros(cfg.n_emb, dtype=np.float64)
    return radial * _envelope(t, cfg.envelope_p)


def _envelope(t: float, p: int) -> float:
    # u(t) = 1 - (p+1)(p+2)/2 t^p + p(p+2) t^(p+1) - p(p+1)/2 t^(p+2)
    a = (p + 1) * (p + 2) / 2.0
    b = p * (p + 2) * 1.0
    cc = p * (p + 1) / 2.0
    tp = 1.0
    for _ in range(p):
        tp = tp * t
    tp1 = tp * t
    tp2 = tp1 * t
    return 1.0 - a * tp + b * tp1 - cc * tp2


def pairwise_distances(mol: molio.Molecule, cfg: DistanceConfig | None = None) -> np.ndarray:
    """(n, n) Euclidean distances; dummy pairs and coordinate-free
    molecules fall back to the cutoff; the diagonal is 0."""
    if cfg is None:
        cfg = DistanceConfig()
    n = mol.n_atoms
    c = cfg.cutoff
    if mol.coords is None:
        dist = np.full((n, n), c, dtype=np.float64)
    else:
        diff = mol.coords[:, None, :] - mol.coords[None, :, :]
        sq = diff * diff
        dist = np.sqrt(sq.sum(axis=-1))
    for i, atom in enumerate(mol.atoms):
        if atom.is_dummy:
            dist[i, :] = c
            dist[:, i] = c
    np.fill_diagonal(dist, 0.0)
    return dist


def adjacency_matrix(mol: molio.Molecule) -> np.ndarray:
    adj = np.zeros((mol.n_atoms, mol.n_atoms), dtype=np.float64)
    for bond in mol.bonds:
        adj[bond.a, bond.b] = 1.0
        adj[bond.b, bond.a] = 1.0
    return adj


@dataclass
class AtomFeatureMatrix:
    n: int
    data: np.ndarray  # (n, 36) float64 of 0/1


def atom_features(mol: molio.Molecule) -> AtomFeatureMatrix:
    """One-hot atom features, 36 columns per atom.

    Layout: element (12) | bonded heavy neighbors 0-5 (6) |
    hydrogens 0-4 (5) | formal charge -5..+5 (11) | in-ring | aromatic.
    """
    n = mol.n_atoms
    data = np.zeros((n, ATOM_FEATURE_DIM), dtype=np.float64)
    degree = [0] * n
    for bond in mol.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
    for i, atom in enumerate(mol.atoms):
        data[i, _COL_ELEMENT + _ELEMENT_INDEX[atom.element]] = 1.0
        data[i, _COL_DEGREE + min(degree[i], 5)] = 1.0
        data[i, _COL_HCOUNT + min(atom.explicit_h_count, 4)] = 1.0
        data[i, _COL_CHARGE + atom.formal_charge + 5] = 1.0
        if atom.in_ring:
            data[i, _COL_RING] = 1.0
        if atom.is_aromatic:
            data[i, _COL_AROMATIC] = 1.0
    return AtomFeatureMatrix(n=n, data=data)


def bond_feature_vector(mol: molio.Molecule, i: int, j: int, _lookup=None) -> np.ndarray:
    """7 bond features for the pair (i, j); zeros when unbonded or i == j.

    Layout: order one-hot (single, aromatic, double, triple) |
    aromatic | conjugated | in-ring.
    """
    out = np.zeros(BOND_FEATURE_DIM, dtype=np.float64)
    if i == j:
        return out
    lookup = _lookup if _lookup is not None else mol.bond_lookup()
    bond = lookup.get(frozenset((i, j)))
    if bond is None:
        return out
    order_slot = {1.0: 0, 1.5: 1, 2.0: 2, 3.0: 3}[bond.order]
    out[order_slot] = 1.0
    if bond.is_aromatic:
        out[4] = 1.0
    if bond.is_conjugated:
        out[5] = 1.0
    if bond.in_ring:
        out[6] = 1.0
    return out


@dataclass
class RelationTensor:
    n: int
    n_emb: int
    data: np.ndarray  # (n, n, 13 + n_emb) float64

    @property
    def width(self) -> int:
        return NEIGHBOR_CODES + BOND_FEATURE_DIM + self.n_emb


def relation_tensor(
    mol: molio.Molecule,
    cfg: DistanceConfig | None = None,
    max_order: int = 4,
) -> RelationTensor:
    """Per-pair relation features b_ij.

    Slots 0-5: topological neighborhood one-hot (self, bonded, one
    between, two between, three-plus/disconnected, dummy). Slots 6-12:
    bond features. Remaining n_emb slots: distance embedding, forced to
    zero for any pair at distance >= cutoff (dummy pairs by definition).
    """
    if cfg is None:
        cfg = DistanceConfig()
    n = mol.n_atoms
    width = NEIGHBOR_CODES + BOND_FEATURE_DIM + cfg.n_emb
    orders = molio.neighborhood_orders(mol, max_order=max_order).entries
    dist = pairwise_distances(mol, cfg)
    lookup = mol.bond_lookup()
    data = np.zeros((n, n, width), dtype=np.float64)
    emb_cache: dict = {}
    for i in range(n):
        for j in range(n):
            data[i, j, orders[i, j]] = 1.0
            if i != j:
                data[i, j, NEIGHBOR_CODES : NEIGHBOR_CODES + BOND_FEATURE_DIM] = (
                    bond_feature_vector(mol, i, j, _lookup=lookup)
                )
            d = dist[i, j]
            if d < cfg.cutoff:
                key = float(d)
                emb = emb_cache.get(key)
                if emb is None:
                    emb = distance_embedding(key, cfg)
                    emb_cache[key] = emb
                data[i, j, NEIGHBOR_CODES + BOND_FEATURE_DIM :] = emb
    return RelationTensor(n=n, n_emb=cfg.n_emb, data=data)


# ---------------------------------------------------------------------------
# Physicochemical descriptors

ATOMIC_MASSES = {
    "H": 1.008,
    "B": 10.811,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "F": 18.998,
    "P": 30.974,
    "S": 32.06,
    "Cl": 35.45,
    "Br": 79.904,
    "I": 126.904,
}

DESCRIPTOR_NAMES = (
    "molecular_weight",
    "heavy_atom_count",
    "ring_count",
    "aromatic_atom_count",
    "nitrogen_count",
    "oxygen_count",
    "halogen_count",
    "hbond_donor_count",
    "hbond_acceptor_count",
    "rotatable_bond_count",
    "bond_order_sum",
    "net_formal_charge",
)

_HALOGENS = ("F", "Cl", "Br", "I")


def descriptor_vector(mol: molio.Molecule) -> np.ndarray:
    """12 cheap whole-molecule descriptors; dummies never count.

    Weight uses standard atomic masses plus 1.008 per attached hydrogen;
    unrecognized (Other) elements contribute zero mass. Ring count is
    the cycle rank of the heavy-atom graph. Donor/acceptor/rotatable
    entries are the usual graph proxies, not a perception algorithm.
    """
    real = [i for i, a in enumerate(mol.atoms) if not a.is_dummy]
    atoms = [mol.atoms[i] for i in real]
    degree = {i: 0 for i in real}
    for bond in mol.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1

    weight = 0.0
    for a in atoms:
        weight += ATOMIC_MASSES.get(a.element, 0.0)
        weight += 1.008 * a.explicit_h_count

    n_components = _component_count(real, mol.bonds)
    ring_count = len(mol.bonds) - len(real) + n_components
    rotatable = sum(
        1
        for b in mol.bonds
        if b.order == 1.0
        and not b.in_ring
        and degree[b.a] >= 2
        and degree[b.b] >= 2
    )
    return np.array(
        [
            weight,
            float(len(real)),
            float(ring_count),
            float(sum(1 for a in atoms if a.is_aromatic)),
            float(sum(1 for a in atoms if a.element == "N")),
            float(sum(1 for a in atoms if a.element == "O")),
            float(sum(1 for a in atoms if a.element in _HALOGENS)),
            float(
                sum(
                    1
                    for a in atoms
                    if a.element in ("N", "O") and a.explicit_h_count >= 1
                )
            ),
            float(sum(1 for a in atoms if a.element in ("N", "O"))),
            float(rotatable),
            float(sum(b.order for b in mol.bonds)),
            float(sum(a.formal_charge for a in atoms)),
        ],
        dtype=np.float64,
    )


def _component_count(nodes, bonds) -> int:
    index = {v: k for k, v in enumerate(nodes)}
    parent = list(range(len(nodes)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for b in bonds:
        ra, rb = find(index[b.a]), find(index[b.b])
        if ra != rb:
            parent[ra] = rb
    return sum(1 for k in range(len(nodes)) if find(k) == k)


# ---------------------------------------------------------------------------
# Bundled per-molecule features

@dataclass
class MoleculeFeatures:
    atom: np.ndarray  # (n, 36)
    relation: np.ndarray  # (n, n, 13 + n_emb)
    adjacency: np.ndarray  # (n, n)
    distances: np.ndarray  # (n, n)
    n_atoms: int  # dummy included
    n_real: int
    elements: list


def featurize_molecule(
    mol: molio.Molecule,
    cfg: DistanceConfig | None = None,
    max_order: int = 4,
) -> MoleculeFeatures:
    """Feature bundle for one molecule (expected to carry its dummy)."""
    if cfg is None:
        cfg = DistanceConfig()
    return MoleculeFeatures(
        atom=atom_features(mol).data,
        relation=relation_tensor(mol, cfg, max_order=max_order).data,
        adjacency=adjacency_matrix(mol),
        distances=pairwise_distances(mol, cfg),
        n_atoms=mol.n_atoms,
        n_real=mol.n_real,
        elements=[a.element for a in mol.atoms],
    )


def prepare_molecule(
    mol: molio.Molecule,
    cfg: DistanceConfig | None = None,
    max_order: int = 4,
) -> MoleculeFeatures:
    """add_dummy_node + featurize_molecule in one step."""
    if cfg is None:
        cfg = DistanceConfig()
    return featurize_molecule(
        molio.add_dummy_node(mol, cfg.cutoff), cfg, max_order=max_order
    )


def write_feature_dump(feats: MoleculeFeatures, fh: IO[str]) -> None:
    """Plain-text dump: header, atom rows, then relation rows (i*n+j).

    Values print as %.17g so float64 round-trips exactly.
    """
    n = feats.n_atoms
    width = feats.relation.shape[-1]
    fh.write(f"atoms={n} atom_features={feats.atom.shape[1]} relation_features={width}\n")
    for i in range(n):
        fh.write(",".join("%.17g" % v for v in feats.atom[i]) + "\n")
    for i in range(n):
        for j in range(n):
            fh.write(",".join("%.17g" % v for v in feats.relation[i, j]) + "\n")


def read_feature_dump(fh: IO[str]):
    """Inverse of write_feature_dump: (atom matrix, relation tensor)."""
    header = fh.readline().strip()
    fields = dict(part.split("=") for part in header.split())
    n = int(fields["atoms"])
    af = int(fields["atom_features"])
    rf = int(fields["relation_features"])
    atom = np.array(
        [[float(v) for v in fh.readline().split(",")] for _ in range(n)],
        dtype=np.float64,
    ).reshape(n, af)
    rel = np.array(
        [[float(v) for v in fh.readline().split(",")] for _ in range(n * n)],
        dtype=np.float64,
    ).reshape(n, n, rf)
    return atom, rel
