import io
import math

import numpy as np
import pytest

from rmat import featurize, molio
from rmat.featurize import (
    ATOM_FEATURE_DIM,
    BOND_FEATURE_DIM,
    NEIGHBOR_CODES,
    DistanceConfig,
    atom_features,
    bond_feature_vector,
    descriptor_vector,
    distance_embedding,
    featurize_molecule,
    pairwise_distances,
    read_feature_dump,
    relation_tensor,
    write_feature_dump,
)


def mol_from_source(source):
    if source["kind"] == "smiles":
        mol = molio.parse_smiles(source["text"])
    else:
        mol = molio.parse_sdf(source["text"])[0]
    return molio.add_dummy_node(mol)


# ---------------------------------------------------------------------------
# golden comparisons: every fixture block must match the independently
# generated values

@pytest.mark.parametrize(
    "name",
    ["co2_smiles", "co2_sdf", "ethanol_smiles", "ethanol_sdf", "benzene_smiles", "benzene_sdf"],
)
def test_golden_fixture_exact(golden, name):
    fx = golden["fixtures"][name]
    mol = mol_from_source(fx["source"])
    assert mol.n_real == fx["n_real"]
    got_elements = ["*" if a.is_dummy else a.element for a in mol.atoms]
    assert got_elements == fx["elements"]
    real = mol.atoms[: mol.n_real]
    assert [a.explicit_h_count for a in real] == fx["implicit_h"]
    assert [a.formal_charge for a in real] == fx["formal_charge"]
    assert [a.is_aromatic for a in real] == fx["aromatic"]
    assert [a.in_ring for a in real] == fx["in_ring"]

    feats = featurize_molecule(mol)
    assert np.array_equal(feats.atom, np.asarray(fx["atom_rows"]))
    assert np.array_equal(
        molio.neighborhood_orders(mol).entries, np.asarray(fx["orders"])
    )
    assert np.array_equal(feats.adjacency, np.asarray(fx["adjacency"]))
    assert np.array_equal(feats.distances, np.asarray(fx["distances"]))
    assert np.array_equal(feats.relation, np.asarray(fx["relation"]))
    assert np.array_equal(descriptor_vector(mol), np.asarray(fx["descriptors"]))


def test_golden_embeddings(golden):
    for encoding, block in golden["embeddings"].items():
        cfg = DistanceConfig(encoding=encoding)
        for d, expected in zip(block["d"], block["values"]):
            got = distance_embedding(float(d), cfg)
            want = np.asarray(expected)
            if encoding == "gaussian_schnet":
                # np.exp and math.exp differ in the last ulp on some inputs
                np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-300)
            else:
                assert np.array_equal(got, want), (encoding, d)


def test_golden_envelope_worked_value(golden):
    ex = golden["extras"]["envelope_worked_value"]
    emb = distance_embedding(ex["d"])
    assert emb[ex["channel"]] == ex["value"]


def test_golden_methane_descriptors(golden):
    mol = molio.add_dummy_node(molio.parse_smiles("C"))
    assert np.array_equal(
        descriptor_vector(mol), np.asarray(golden["extras"]["methane_descriptors"])
    )


# ---------------------------------------------------------------------------
# atom feature rows

def test_atom_row_group_structure():
    rng = np.random.default_rng([2026, 41])
    for _ in range(25):
        n = int(rng.integers(2, 8))
        sym = "".join(str(rng.choice(["C", "C", "N", "O"])) for _ in range(n))
        mol = molio.add_dummy_node(molio.parse_smiles(sym))
        rows = atom_features(mol).data
        assert rows.shape == (mol.n_atoms, ATOM_FEATURE_DIM)
        # one-hot groups: element 0:12, degree 12:18, h-count 18:23, charge 23:34
        assert np.array_equal(rows[:, 0:12].sum(axis=1), np.ones(mol.n_atoms))
        assert np.array_equal(rows[:, 12:18].sum(axis=1), np.ones(mol.n_atoms))
        assert np.array_equal(rows[:, 18:23].sum(axis=1), np.ones(mol.n_atoms))
        assert np.array_equal(rows[:, 23:34].sum(axis=1), np.ones(mol.n_atoms))
        assert set(np.unique(rows)) <= {0.0, 1.0}


def test_atom_row_known_positions(golden):
    # CO2 carbon: element C, degree 2, 0 hydrogens, neutral
    fx = golden["fixtures"]["co2_smiles"]
    row = np.asarray(fx["atom_rows"])[0]
    assert set(np.flatnonzero(row)) == {2, 14, 18, 28}
    # benzene carbon adds ring + aromatic flags
    fb = golden["fixtures"]["benzene_smiles"]
    row = np.asarray(fb["atom_rows"])[0]
    assert set(np.flatnonzero(row)) == {2, 14, 19, 28, 34, 35}
    # dummy row: element *, degree 0, 0 h, neutral
    row = np.asarray(fx["atom_rows"])[-1]
    assert set(np.flatnonzero(row)) == {10, 12, 18, 28}


def test_dummy_row_constant_across_molecules():
    a = atom_features(molio.add_dummy_node(molio.parse_smiles("C"))).data[-1]
    b = atom_features(molio.add_dummy_node(molio.parse_smiles("c1ccccc1"))).data[-1]
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# bond features

def test_bond_feature_values():
    benzene = molio.parse_smiles("c1ccccc1")
    assert bond_feature_vector(benzene, 0, 1).tolist() == [0, 1, 0, 0, 1, 1, 1]
    co2 = molio.parse_smiles("C(=O)=O")
    assert bond_feature_vector(co2, 0, 1).tolist() == [0, 0, 1, 0, 0, 1, 0]
    assert bond_feature_vector(co2, 1, 2).tolist() == [0.0] * BOND_FEATURE_DIM
    assert bond_feature_vector(co2, 1, 1).tolist() == [0.0] * BOND_FEATURE_DIM


def test_bond_feature_symmetric():
    mol = molio.parse_smiles("CC(=O)O")
    for i in range(mol.n_atoms):
        for j in range(mol.n_atoms):
            assert np.array_equal(
                bond_feature_vector(mol, i, j), bond_feature_vector(mol, j, i)
            )


# ---------------------------------------------------------------------------
# relation tensor structure

def test_relation_symmetry_exact():
    rng = np.random.default_rng([2026, 42])
    for _ in range(10):
        n = int(rng.integers(2, 7))
        sym = "".join(str(rng.choice(["C", "N", "O"])) for _ in range(n))
        mol = molio.add_dummy_node(molio.parse_smiles(sym))
        rel = relation_tensor(mol).data
        assert np.array_equal(rel, np.swapaxes(rel, 0, 1))


def test_relation_slot_rules(golden):
    fx = golden["fixtures"]["co2_sdf"]
    mol = mol_from_source(fx["source"])
    rel = relation_tensor(mol).data
    n = mol.n_atoms
    # neighborhood one-hot occupies exactly one slot per pair
    assert np.array_equal(rel[:, :, :NEIGHBOR_CODES].sum(axis=2), np.ones((n, n)))
    # dummy pairs: code 5, no bond features, no distance embedding
    assert rel[0, n - 1, 5] == 1.0
    assert np.all(rel[0, n - 1, NEIGHBOR_CODES:] == 0.0)
    assert np.all(rel[n - 1, 0, NEIGHBOR_CODES:] == 0.0)
    # diagonal: self code 0, zero bond block, embedding of d=0
    assert rel[0, 0, 0] == 1.0
    assert np.all(rel[0, 0, NEIGHBOR_CODES : NEIGHBOR_CODES + BOND_FEATURE_DIM] == 0.0)
    assert np.array_equal(
        rel[0, 0, NEIGHBOR_CODES + BOND_FEATURE_DIM :], distance_embedding(0.0)
    )


def test_relation_distance_slots_zero_at_cutoff():
    cfg = DistanceConfig(cutoff=2.0, n_emb=8)
    text = "\n".join(
        [
            "far",
            "",
            "",
            "  2  1  0  0  0  0  0  0  0  0999 V2000",
            "    0.0000    0.0000    0.0000 C   0  0",
            "    5.0000    0.0000    0.0000 C   0  0",
            "  1  2  1  0",
            "M  END",
            "$$$$",
        ]
    ) + "\n"
    mol = molio.add_dummy_node(molio.parse_sdf(text)[0])
    rel = relation_tensor(mol, cfg).data
    start = NEIGHBOR_CODES + BOND_FEATURE_DIM
    # bonded pair past the cutoff keeps bond features, loses the embedding
    assert rel[0, 1, 1] == 1.0
    assert rel[0, 1, NEIGHBOR_CODES] == 1.0
    assert np.all(rel[0, 1, start:] == 0.0)


# ---------------------------------------------------------------------------
# distance embeddings

def test_embedding_boundaries():
    # enveloped form is exactly zero at and past the cutoff
    cfg = DistanceConfig(encoding="radial_envelope")
    assert np.all(distance_embedding(cfg.cutoff, cfg) == 0.0)
    assert np.all(distance_embedding(cfg.cutoff + 3.0, cfg) == 0.0)
    for encoding in featurize.ENCODINGS:
        c = DistanceConfig(encoding=encoding)
        assert np.all(np.isfinite(distance_embedding(c.cutoff, c)))
        with pytest.raises(ValueError):
            distance_embedding(-1.0, c)


def test_envelope_endpoint_values():
    # u(0) = 1 and u(1) = 0 exactly
    assert featurize._envelope(0.0, 6) == 1.0
    assert featurize._envelope(1.0, 6) == 0.0
    for p in (2, 3, 6, 9):
        assert featurize._envelope(0.0, p) == 1.0
        assert featurize._envelope(1.0, p) == 0.0


def test_radial_worked_value():
    # channel 0 at d = 10 with cutoff 20: sqrt(0.1) * sin(pi/2) / 10 * u(0.5)
    cfg = DistanceConfig()
    val = distance_embedding(10.0, cfg)[0]
    base = math.sqrt(2.0 / cfg.cutoff) * math.sin(math.pi / 20.0 * 10.0) / 10.0
    assert val == base * featurize._envelope(0.5, cfg.envelope_p)


def test_plain_vs_envelope_relationship():
    cfg_env = DistanceConfig(encoding="radial_envelope")
    cfg_plain = DistanceConfig(encoding="radial_plain")
    rng = np.random.default_rng([2026, 43])
    for _ in range(20):
        d = float(rng.uniform(0.1, 19.5))
        e = distance_embedding(d, cfg_env)
        p = distance_embedding(d, cfg_plain)
        u = featurize._envelope(d / cfg_env.cutoff, cfg_env.envelope_p)
        np.testing.assert_allclose(e, p * u, rtol=1e-15, atol=0.0)


def test_near_zero_distance_limit():
    cfg = DistanceConfig()
    emb = distance_embedding(0.0, cfg)
    scale = math.sqrt(2.0 / cfg.cutoff)
    # sin(f d)/d -> f as d -> 0
    for k in range(cfg.n_emb):
        assert emb[k] == scale * (float(k + 1) * math.pi / cfg.cutoff)


def test_gaussian_properties():
    cfg = DistanceConfig(encoding="gaussian_schnet", n_emb=16)
    emb = distance_embedding(0.0, cfg)
    assert emb[0] == 1.0  # center at 0
    assert np.all(emb >= 0.0)
    assert np.all(emb <= 1.0)
    # a distance sitting exactly on a center peaks that channel
    step = 30.0 / (cfg.n_emb - 1)
    at_center = distance_embedding(step * 3, cfg)
    assert at_center.argmax() == 3


def test_distance_config_validation():
    with pytest.raises(ValueError):
        DistanceConfig(cutoff=0.0)
    with pytest.raises(ValueError):
        DistanceConfig(n_emb=0)
    with pytest.raises(ValueError):
        DistanceConfig(envelope_p=0)
    with pytest.raises(ValueError):
        DistanceConfig(encoding="fourier")


# ---------------------------------------------------------------------------
# descriptors

def test_descriptor_vector_co2(golden):
    mol = molio.add_dummy_node(molio.parse_smiles("C(=O)=O"))
    vec = descriptor_vector(mol)
    assert vec.tolist() == golden["fixtures"]["co2_smiles"]["descriptors"]
    names = featurize.DESCRIPTOR_NAMES
    assert vec[names.index("molecular_weight")] == pytest.approx(44.009)
    assert vec[names.index("heavy_atom_count")] == 3
    assert vec[names.index("oxygen_count")] == 2
    assert vec[names.index("hbond_acceptor_count")] == 2
    assert vec[names.index("bond_order_sum")] == 4


def test_descriptor_ring_count_union():
    # naphthalene-like fused pair: bonds - atoms + components
    mol = molio.parse_smiles("c1ccc2ccccc2c1")
    vec = descriptor_vector(mol)
    assert vec[featurize.DESCRIPTOR_NAMES.index("ring_count")] == 2


def test_descriptors_ignore_dummy():
    plain = descriptor_vector(molio.parse_smiles("CCO"))
    dummy = descriptor_vector(molio.add_dummy_node(molio.parse_smiles("CCO")))
    assert np.array_equal(plain, dummy)


# ---------------------------------------------------------------------------
# dump round trip

def test_feature_dump_round_trip():
    mol = molio.add_dummy_node(molio.parse_smiles("CC(=O)O"))
    feats = featurize_molecule(mol)
    buf = io.StringIO()
    write_feature_dump(feats, buf)
    buf.seek(0)
    atom, rel = read_feature_dump(buf)
    assert np.array_equal(atom, feats.atom)
    assert np.array_equal(rel, feats.relation)


def test_feature_dump_header():
    mol = molio.add_dummy_node(molio.parse_smiles("C(=O)=O"))
    buf = io.StringIO()
    write_feature_dump(featurize_molecule(mol), buf)
    assert "atoms=4" in buf.getvalue().splitlines()[0]
