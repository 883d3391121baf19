"""Molecule graphs and file formats.

Covers the input side of the pipeline: an in-memory molecular graph
(atoms, bonds, optional 3D coordinates), an SDF V2000 reader/writer, a
SMILES subset parser, topological neighborhood orders, the dummy-node
augmentation, and CSV dataset loading.

Hydrogens are never materialized as graph nodes; each heavy atom carries
an H count, either explicit (bracket atoms, SDF valence filling) or
implied by standard valences.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

ELEMENTS = ("B", "N", "C", "O", "F", "P", "S", "Cl", "Br", "I")
DUMMY = "Dummy"
OTHER = "Other"

CHARGE_MIN = -5
CHARGE_MAX = 5

BOND_ORDERS = (1.0, 1.5, 2.0, 3.0)

# smallest-first standard valences for implicit hydrogen assignment
_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}


class MoleculeError(ValueError):
    """Structural problem in a molecule graph."""


class SmilesError(ValueError):
    """SMILES syntax or semantics problem, with the character offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at position {offset})")
        self.offset = offset


@dataclass
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h_count: int = 0
    is_aromatic: bool = False
    in_ring: bool = False
    symbol: str = ""  # raw input symbol, kept for serialization

    def __post_init__(self):
        if not self.symbol:
            self.symbol = self.element
        if self.element not in ELEMENTS and self.element not in (DUMMY, OTHER):
            # unknown symbols classify as Other, never reject
            self.element = OTHER
        if not CHARGE_MIN <= self.formal_charge <= CHARGE_MAX:
            clamped = max(CHARGE_MIN, min(CHARGE_MAX, self.formal_charge))
            warnings.warn(
                f"formal charge {self.formal_charge} on {self.symbol} clamped to {clamped}",
                stacklevel=2,
            )
            self.formal_charge = clamped
        if self.explicit_h_count < 0:
            raise MoleculeError(f"negative hydrogen count on {self.symbol}")

    @property
    def is_dummy(self) -> bool:
        return self.element == DUMMY


@dataclass
class Bond:
    a: int
    b: int
    order: float
    is_aromatic: bool = False
    is_conjugated: bool = False
    in_ring: bool = False

    def __post_init__(self):
        self.order = float(self.order)
        if self.a == self.b:
            raise MoleculeError(f"self-bond on atom index {self.a}")
        if self.order not in BOND_ORDERS:
            raise MoleculeError(f"unsupported bond order {self.order}")
        if self.order == 1.5:
            self.is_aromatic = True

    @property
    def key(self) -> frozenset:
        return frozenset((self.a, self.b))


@dataclass
class Molecule:
    atoms: list
    bonds: list
    coords: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise MoleculeError(
                    f"bond ({bond.a},{bond.b}) references a missing atom"
                )
            if self.atoms[bond.a].is_dummy or self.atoms[bond.b].is_dummy:
                raise MoleculeError("dummy atoms cannot carry bonds")
            if bond.key in seen:
                raise MoleculeError(f"duplicate bond between {bond.a} and {bond.b}")
            seen.add(bond.key)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (n, 3):
                raise MoleculeError(
                    f"coords shape {self.coords.shape} does not match {n} atoms"
                )
            finite = [
                i for i in range(n) if bool(np.all(np.isfinite(self.coords[i])))
            ]
            for ii, i in enumerate(finite):
                for j in finite[ii + 1 :]:
                    if np.array_equal(self.coords[i], self.coords[j]):
                        raise MoleculeError(
                            f"atoms {i} and {j} share identical coordinates"
                        )

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def has_dummy(self) -> bool:
        return any(a.is_dummy for a in self.atoms)

    @property
    def n_real(self) -> int:
        return sum(1 for a in self.atoms if not a.is_dummy)

    def neighbor_lists(self):
        return _neighbor_lists(self.n_atoms, self.bonds)

    def bond_lookup(self) -> dict:
        return {b.key: b for b in self.bonds}


def _neighbor_lists(n: int, bonds) -> list:
    out = [[] for _ in range(n)]
    for b in bonds:
        out[b.a].append(b.b)
        out[b.b].append(b.a)
    return out


def _reachable_without(n, nbrs, src, dst, skip_a, skip_b) -> bool:
    # BFS from src to dst with the (skip_a, skip_b) edge removed
    seen = [False] * n
    seen[src] = True
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            return True
        for v in nbrs[u]:
            if (u, v) in ((skip_a, skip_b), (skip_b, skip_a)):
                continue
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return False


def annotate_rings(mol: Molecule) -> None:
    """Flag bonds on cycles (non-bridges) and the atoms they touch."""
    nbrs = mol.neighbor_lists()
    for atom in mol.atoms:
        atom.in_ring = False
    for bond in mol.bonds:
        bond.in_ring = _reachable_without(
            mol.n_atoms, nbrs, bond.a, bond.b, bond.a, bond.b
        )
        if bond.in_ring:
            mol.atoms[bond.a].in_ring = True
            mol.atoms[bond.b].in_ring = True


def annotate_conjugation(mol: Molecule) -> None:
    """A bond is conjugated iff both endpoints carry a bond of order > 1."""
    has_multiple = [False] * mol.n_atoms
    for bond in mol.bonds:
        if bond.order > 1.0:
            has_multiple[bond.a] = True
            has_multiple[bond.b] = True
    for bond in mol.bonds:
        bond.is_conjugated = has_multiple[bond.a] and has_multiple[bond.b]


def implicit_h_count(element: str, bond_order_sum: float, charge: int = 0) -> int:
    """Hydrogens needed to fill the smallest standard valence.

    The charge shifts the target valence: +charge for N/O/P/S,
    -|charge| for C, -charge for B. Unknown elements get 0.
    """
    valences = _VALENCES.get(element)
    if valences is None:
        return 0
    if element == "C":
        adjust = -abs(charge)
    elif element == "B":
        adjust = -charge
    else:
        adjust = charge
    need = math.ceil(bond_order_sum - 1e-9)
    for v in valences:
        capacity = v + adjust
        if capacity >= need:
            return capacity - need
    return 0


def assign_implicit_hydrogens(mol: Molecule) -> None:
    order_sum = [0.0] * mol.n_atoms
    for bond in mol.bonds:
        order_sum[bond.a] += bond.order
        order_sum[bond.b] += bond.order
    for i, atom in enumerate(mol.atoms):
        atom.explicit_h_count = implicit_h_count(
            atom.element, order_sum[i], atom.formal_charge
        )


def finalize_molecule(mol: Molecule) -> Molecule:
    annotate_rings(mol)
    annotate_conjugation(mol)
    return mol


# ---------------------------------------------------------------------------
# SMILES subset parser

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = set("BCNOPSFI")
_AROMATIC_ONE = set("bcnops")
_BOND_SYMBOLS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}


def _parse_bracket(text: str, start: int):
    """Parse a [ ... ] atom starting at text[start] == '['.

    Returns (Atom, is_aromatic, end_index_past_bracket).
    """
    end = text.find("]", start)
    if end < 0:
        raise SmilesError("unclosed bracket atom", start)
    body = text[start + 1 : end]
    pos = 0

    def err(msg, rel=None):
        raise SmilesError(msg, start + 1 + (pos if rel is None else rel))

    if not body:
        err("empty bracket atom")
    aromatic = False
    if body[pos] in _AROMATIC_ONE:
        symbol = body[pos].upper()
        aromatic = True
        pos += 1
    elif body[pos].isupper():
        symbol = body[pos]
        pos += 1
        if pos < len(body) and body[pos].islower():
            symbol += body[pos]
            pos += 1
    else:
        err(f"bad element symbol {body[pos]!r}")
    h_count = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        h_count = int(digits) if digits else 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        first = body[pos]
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        if digits:
            charge = sign * int(digits)
        else:
            charge = sign
            while pos < len(body) and body[pos] == first:
                charge += sign
                pos += 1
    if pos != len(body):
        err(f"unsupported bracket content {body[pos:]!r}")
    atom = Atom(
        element=symbol,
        formal_charge=charge,
        explicit_h_count=h_count,
        is_aromatic=aromatic,
        symbol=symbol,
    )
    return atom, aromatic, end + 1


def parse_smiles(text: str) -> Molecule:
    """Parse one SMILES string (organic subset + bracket atoms).

    Supported: B C N O P S F Cl Br I, aromatic b c n o s p, bonds
    - = # :, branches, ring closures (digit or %nn), bracket atoms with
    H count and charge. Errors carry the character offset.
    """
    if not text or not text.strip():
        raise SmilesError("empty SMILES", 0)
    text = text.strip()
    atoms: list = []
    from_bracket: list = []
    bond_specs: list = []
    prev: int | None = None
    pending: tuple | None = None
    branch_stack: list = []
    ring_open: dict = {}
    i = 0

    def attach(idx: int, aromatic: bool):
        nonlocal prev, pending
        if prev is not None:
            order = pending[0] if pending is not None else None
            both_aromatic = atoms[prev].is_aromatic and aromatic
            bond_specs.append((prev, idx, order, both_aromatic))
        pending = None
        prev = idx

    def close_ring(num: int, offset: int):
        nonlocal pending
        if prev is None:
            raise SmilesError("ring closure before any atom", offset)
        if num in ring_open:
            other, other_order, _ = ring_open.pop(num)
            if other == prev:
                raise SmilesError(f"ring closure {num} bonds an atom to itself", offset)
            order = pending[0] if pending is not None else None
            if order is not None and other_order is not None and order != other_order:
                raise SmilesError(
                    f"conflicting bond orders on ring closure {num}", offset
                )
            order = order if order is not None else other_order
            both_aromatic = atoms[other].is_aromatic and atoms[prev].is_aromatic
            bond_specs.append((other, prev, order, both_aromatic))
        else:
            ring_open[num] = (prev, pending[0] if pending is not None else None, offset)
        pending = None

    while i < len(text):
        ch = text[i]
        if ch == "[":
            atom, aromatic, nxt = _parse_bracket(text, i)
            atoms.append(atom)
            from_bracket.append(True)
            attach(len(atoms) - 1, aromatic)
            i = nxt
        elif text[i : i + 2] in _ORGANIC_TWO:
            atoms.append(Atom(element=text[i : i + 2]))
            from_bracket.append(False)
            attach(len(atoms) - 1, False)
            i += 2
        elif ch in _ORGANIC_ONE:
            atoms.append(Atom(element=ch))
            from_bracket.append(False)
            attach(len(atoms) - 1, False)
            i += 1
        elif ch in _AROMATIC_ONE:
            atoms.append(Atom(element=ch.upper(), is_aromatic=True, symbol=ch.upper()))
            from_bracket.append(False)
            attach(len(atoms) - 1, True)
            i += 1
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesError("two bond symbols in a row", i)
            pending = (_BOND_SYMBOLS[ch], i)
            i += 1
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch before any atom", i)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unmatched ')'", i)
            if pending is not None:
                raise SmilesError("dangling bond before ')'", pending[1])
            prev, _ = branch_stack.pop()
            i += 1
        elif ch.isdigit():
            close_ring(int(ch), i)
            i += 1
        elif ch == "%":
            if i + 2 >= len(text) or not text[i + 1 : i + 3].isdigit():
                raise SmilesError("'%' needs two digits", i)
            close_ring(int(text[i + 1 : i + 3]), i)
            i += 3
        else:
            raise SmilesError(f"unexpected character {ch!r}", i)

    if pending is not None:
        raise SmilesError("dangling bond symbol", pending[1])
    if branch_stack:
        raise SmilesError("unmatched '('", branch_stack[-1][1])
    if ring_open:
        num, (_, _, offset) = next(iter(ring_open.items()))
        raise SmilesError(f"unclosed ring closure {num}", offset)
    if not atoms:
        raise SmilesError("no atoms", 0)

    bonds = []
    seen = set()
    for a, b, order, both_aromatic in bond_specs:
        if frozenset((a, b)) in seen:
            raise SmilesError(f"duplicate bond between atoms {a} and {b}", 0)
        seen.add(frozenset((a, b)))
        if order is None:
            order = 1.5 if both_aromatic else 1.0
        bonds.append(Bond(a, b, order))

    try:
        mol = Molecule(atoms=atoms, bonds=bonds, coords=None, name=text)
    except MoleculeError as exc:
        raise SmilesError(str(exc), 0) from exc

    order_sum = [0.0] * mol.n_atoms
    for bond in mol.bonds:
        order_sum[bond.a] += bond.order
        order_sum[bond.b] += bond.order
    for idx, atom in enumerate(mol.atoms):
        if not from_bracket[idx]:
            atom.explicit_h_count = implicit_h_count(atom.element, order_sum[idx])
    return finalize_molecule(mol)


# ---------------------------------------------------------------------------
# SDF V2000

@dataclass
class SdfRecordError:
    record: int  # 0-based index in the stream
    line: int  # 1-based line number in the stream
    message: str

    def __str__(self):
        return f"record {self.record} (line {self.line}): {self.message}"


class _RecordError(ValueError):
    def __init__(self, message, line):
        super().__init__(message)
        self.line = line


_SDF_BOND_TYPES = {1: 1.0, 2: 2.0, 3: 3.0, 4: 1.5}


def _parse_sdf_record(lines, base_line: int) -> Molecule:
    if len(lines) < 4:
        raise _RecordError("truncated record header", base_line + len(lines))
    name = lines[0].strip()
    counts = lines[3]
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except (ValueError, IndexError):
        parts = counts.split()
        try:
            n_atoms, n_bonds = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            raise _RecordError("malformed counts line", base_line + 4) from None
    if n_atoms <= 0:
        raise _RecordError("record has no atoms", base_line + 4)
    atom_end = 4 + n_atoms
    bond_end = atom_end + n_bonds
    if len(lines) < bond_end:
        raise _RecordError("truncated atom or bond block", base_line + len(lines))

    coords = np.zeros((n_atoms, 3), dtype=np.float64)
    symbols = []
    for k in range(n_atoms):
        line = lines[4 + k]
        parts = line.split()
        if len(parts) < 4:
            raise _RecordError("malformed atom line", base_line + 5 + k)
        try:
            coords[k] = [float(parts[0]), float(parts[1]), float(parts[2])]
        except ValueError:
            raise _RecordError("malformed atom coordinates", base_line + 5 + k) from None
        symbols.append(parts[3])

    bond_rows = []
    for k in range(n_bonds):
        line = lines[atom_end + k]
        try:
            a = int(line[0:3])
            b = int(line[3:6])
            t = int(line[6:9])
        except (ValueError, IndexError):
            parts = line.split()
            try:
                a, b, t = int(parts[0]), int(parts[1]), int(parts[2])
            except (ValueError, IndexError):
                raise _RecordError("malformed bond line", base_line + atom_end + k + 1) from None
        if not (1 <= a <= n_atoms and 1 <= b <= n_atoms):
            raise _RecordError(
                f"bond indices ({a},{b}) out of range", base_line + atom_end + k + 1
            )
        if t not in _SDF_BOND_TYPES:
            raise _RecordError(f"unsupported bond type {t}", base_line + atom_end + k + 1)
        bond_rows.append((a - 1, b - 1, _SDF_BOND_TYPES[t]))

    charges = {}
    for k in range(bond_end, len(lines)):
        line = lines[k]
        if line.startswith("M  END"):
            break
        if line.startswith("M  CHG"):
            parts = line.split()
            try:
                count = int(parts[2])
                pairs = parts[3 : 3 + 2 * count]
                for p in range(count):
                    charges[int(pairs[2 * p]) - 1] = int(pairs[2 * p + 1])
            except (ValueError, IndexError):
                raise _RecordError("malformed M  CHG line", base_line + k + 1) from None

    # the legacy atom-block charge column is ignored; M  CHG wins
    atoms = [
        Atom(element=sym, formal_charge=charges.get(i, 0), symbol=sym)
        for i, sym in enumerate(symbols)
    ]
    try:
        bonds = [Bond(a, b, order) for a, b, order in bond_rows]
        for bond in bonds:
            if bond.order == 1.5:
                atoms[bond.a].is_aromatic = True
                atoms[bond.b].is_aromatic = True
        mol = Molecule(atoms=atoms, bonds=bonds, coords=coords, name=name)
    except MoleculeError as exc:
        raise _RecordError(str(exc), base_line + 1) from exc
    assign_implicit_hydrogens(mol)
    return finalize_molecule(mol)


def parse_sdf(text: str, errors: list | None = None) -> list:
    """Parse an SDF (V2000) stream into molecules.

    Malformed records are skipped; each failure is appended to `errors`
    as an SdfRecordError (or warned about when `errors` is None).
    """
    lines = text.splitlines()
    records = []  # (start_line_0based, [lines])
    current = []
    start = 0
    for idx, line in enumerate(lines):
        if line.startswith("$$$$"):
            records.append((start, current))
            current = []
            start = idx + 1
        else:
            current.append(line)
    if any(l.strip() for l in current):
        records.append((start, current))

    molecules = []
    for rec_idx, (start_line, rec_lines) in enumerate(records):
        if not any(l.strip() for l in rec_lines):
            continue
        try:
            molecules.append(_parse_sdf_record(rec_lines, start_line))
        except _RecordError as exc:
            err = SdfRecordError(record=rec_idx, line=exc.line, message=str(exc))
            if errors is not None:
                errors.append(err)
            else:
                warnings.warn(str(err), stacklevel=2)
    return molecules


_SDF_TYPE_FOR_ORDER = {1.0: 1, 2.0: 2, 3.0: 3, 1.5: 4}


def serialize_sdf(mols) -> str:
    """Write molecules as an SDF V2000 stream.

    Requires coordinates and refuses dummy-augmented molecules; both
    would reparse into something structurally different.
    """
    chunks = []
    for mol in mols:
        if mol.has_dummy:
            raise MoleculeError("cannot serialize a dummy-augmented molecule")
        if mol.coords is None:
            raise MoleculeError("cannot serialize a molecule without coordinates")
        out = [mol.name, "", ""]
        out.append(
            f"{mol.n_atoms:3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000"
        )
        for i, atom in enumerate(mol.atoms):
            x, y, z = mol.coords[i]
            out.append(
                f"{x:10.4f}{y:10.4f}{z:10.4f} {atom.symbol:<3} 0  0  0  0  0  0  0  0  0  0  0  0"
            )
        for bond in mol.bonds:
            t = _SDF_TYPE_FOR_ORDER[bond.order]
            out.append(f"{bond.a + 1:3d}{bond.b + 1:3d}{t:3d}  0")
        charged = [(i + 1, a.formal_charge) for i, a in enumerate(mol.atoms) if a.formal_charge]
        for pos in range(0, len(charged), 8):
            group = charged[pos : pos + 8]
            line = f"M  CHG{len(group):3d}"
            for idx, chg in group:
                line += f"{idx:4d}{chg:4d}"
            out.append(line)
        out.append("M  END")
        out.append("$$$$")
        chunks.append("\n".join(out))
    return "\n".join(chunks) + ("\n" if chunks else "")


# ---------------------------------------------------------------------------
# Topological neighborhood orders

# code semantics: 0 self, 1 bonded, 2 one atom between, 3 two atoms
# between, 4 three-plus between or disconnected, 5 dummy involvement
ORDER_SELF = 0
ORDER_DUMMY = 5


@dataclass
class OrderMatrix:
    n: int
    entries: np.ndarray  # (n, n) int64


def neighborhood_orders(mol: Molecule, max_order: int = 4) -> OrderMatrix:
    """All-pairs topological order codes via BFS, bucketed at max_order.

    Pairs at graph distance > max_order (or disconnected) take the
    max_order bucket; any pair involving a dummy takes code 5.
    """
    if not 1 <= max_order <= 4:
        raise ValueError(f"max_order must be in 1..4, got {max_order}")
    n = mol.n_atoms
    nbrs = mol.neighbor_lists()
    entries = np.full((n, n), max_order, dtype=np.int64)
    for src in range(n):
        dist = [-1] * n
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if dist[u] >= max_order:
                continue
            for v in nbrs[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        for dst in range(n):
            if dist[dst] >= 0:
                entries[src, dst] = min(dist[dst], max_order)
    dummy_idx = [i for i, a in enumerate(mol.atoms) if a.is_dummy]
    for i in dummy_idx:
        entries[i, :] = ORDER_DUMMY
        entries[:, i] = ORDER_DUMMY
    np.fill_diagonal(entries, ORDER_SELF)
    return OrderMatrix(n=n, entries=entries)


def add_dummy_node(mol: Molecule, cutoff_c: float = 20.0) -> Molecule:
    """Return a copy with one unbonded dummy atom appended.

    The dummy has no coordinates; featurize treats its distance to every
    real atom as the configured cutoff (cutoff_c is validated here but
    the value consumed downstream is DistanceConfig.cutoff).
    """
    if cutoff_c <= 0:
        raise ValueError("cutoff_c must be positive")
    if mol.has_dummy:
        raise MoleculeError("molecule already has a dummy atom")
    atoms = [
        Atom(
            element=a.element,
            formal_charge=a.formal_charge,
            explicit_h_count=a.explicit_h_count,
            is_aromatic=a.is_aromatic,
            in_ring=a.in_ring,
            symbol=a.symbol,
        )
        for a in mol.atoms
    ]
    atoms.append(Atom(element=DUMMY))
    bonds = [
        Bond(b.a, b.b, b.order, b.is_aromatic, b.is_conjugated, b.in_ring)
        for b in mol.bonds
    ]
    coords = None
    if mol.coords is not None:
        coords = np.vstack([mol.coords, np.full((1, 3), np.nan)])
    return Molecule(atoms=atoms, bonds=bonds, coords=coords, name=mol.name)


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class Dataset:
    molecules: list
    labels: np.ndarray  # (n, k) float64, NaN marks a missing value
    label_names: list

    def __len__(self):
        return len(self.molecules)


class DatasetError(ValueError):
    pass


def read_dataset_csv(path: str) -> Dataset:
    """Load a dataset CSV: a `smiles` or `sdf_path` column plus labels.

    sdf_path entries resolve relative to the CSV location and use the
    first record of each file. Empty label cells become NaN.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: empty CSV")
        fields = list(reader.fieldnames)
        if "smiles" in fields:
            source_col = "smiles"
        elif "sdf_path" in fields:
            source_col = "sdf_path"
        else:
            raise DatasetError(f"{path}: need a 'smiles' or 'sdf_path' column")
        label_names = [f for f in fields if f != source_col]
        molecules = []
        rows = []
        base = os.path.dirname(os.path.abspath(path))
        for line_no, row in enumerate(reader, start=2):
            src = (row[source_col] or "").strip()
            if not src:
                raise DatasetError(f"{path}:{line_no}: empty {source_col}")
            if source_col == "smiles":
                try:
                    molecules.append(parse_smiles(src))
                except SmilesError as exc:
                    raise DatasetError(f"{path}:{line_no}: {exc}") from exc
            else:
                sdf_file = src if os.path.isabs(src) else os.path.join(base, src)
                try:
                    with open(sdf_file, "r", encoding="utf-8") as sfh:
                        errs: list = []
                        mols = parse_sdf(sfh.read(), errors=errs)
                except OSError as exc:
                    raise DatasetError(f"{path}:{line_no}: {exc}") from exc
                if not mols:
                    raise DatasetError(
                        f"{path}:{line_no}: no parseable record in {src}"
                        + (f" ({errs[0]})" if errs else "")
                    )
                molecules.append(mols[0])
            values = []
            for name in label_names:
                cell = (row.get(name) or "").strip()
                if not cell:
                    values.append(np.nan)
                else:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise DatasetError(
                            f"{path}:{line_no}: non-numeric label {cell!r}"
                        ) from None
            rows.append(values)
    labels = np.asarray(rows, dtype=np.float64).reshape(len(molecules), len(label_names))
    return Dataset(molecules=molecules, labels=labels, label_names=label_names)
