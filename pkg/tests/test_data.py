import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crhash.assignment import build_cost_matrix
from crhash.data import (
    Dataset,
    SynthSpec,
    dataset_from_bytes,
    dataset_to_bytes,
    embeddings_from_bytes,
    embeddings_to_bytes,
    generate_synthetic,
    import_csv,
    read_dataset,
    read_embeddings,
    write_dataset,
    write_embeddings,
)
from crhash.errors import ConfigError, DataFormatError
from crhash.evaluation import class_prototypes
from crhash.hamming import pack_signs, sample_codebook_unique


def small_dataset():
    x = np.array([[1.0, -2.5], [0.5, 4.0]], dtype=np.float32)
    y = np.array([[True, False, True], [False, True, False]])
    return Dataset(x, y)


# ---------------------------------------------------------------------------
# Dataset


def test_dataset_validation():
    with pytest.raises(DataFormatError, match="no label"):
        Dataset(np.zeros((2, 2)), np.zeros((2, 3), bool))
    with pytest.raises(DataFormatError, match="align"):
        Dataset(np.zeros((2, 2)), np.eye(3, dtype=bool))
    with pytest.raises(DataFormatError, match="multi-label"):
        Dataset(np.zeros((2, 2)), np.array([[1, 1], [1, 0]], bool), single_label=True)
    with pytest.raises(DataFormatError, match="non-finite"):
        Dataset(np.array([[np.nan, 0.0]]), np.ones((1, 1), bool))


# ---------------------------------------------------------------------------
# CRHF


def test_crhf_hand_layout():
    blob = dataset_to_bytes(small_dataset())
    expected = (b"CRHF" + struct.pack("<IQIIB", 1, 2, 2, 3, 0)
                + struct.pack("<ff", 1.0, -2.5) + bytes([0b101])
                + struct.pack("<ff", 0.5, 4.0) + bytes([0b010]))
    assert blob == expected
    ds = dataset_from_bytes(expected)
    np.testing.assert_array_equal(ds.features, small_dataset().features)
    np.testing.assert_array_equal(ds.labels, small_dataset().labels)


def test_crhf_round_trip_bytes(tmp_path):
    res = generate_synthetic(SynthSpec(C=11, per_class=5, rho=0.3))
    path = tmp_path / "d.crhf"
    write_dataset(res.dataset, path)
    back = read_dataset(path)
    assert back == res.dataset
    assert dataset_to_bytes(back) == path.read_bytes()


@settings(max_examples=40)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_crhf_round_trip_property(n, d, c, seed):
    rng = np.random.default_rng(seed)
    y = rng.random((n, c)) < 0.3
    y[np.arange(n), rng.integers(0, c, n)] = True
    ds = Dataset(rng.normal(size=(n, d)).astype(np.float32), y)
    assert dataset_from_bytes(dataset_to_bytes(ds)) == ds


def test_crhf_truncated_names_lengths():
    blob = dataset_to_bytes(small_dataset())
    with pytest.raises(DataFormatError, match=f"expected {len(blob)} bytes, got {len(blob) - 3}"):
        dataset_from_bytes(blob[:-3])
    with pytest.raises(DataFormatError, match="expected 25 bytes"):
        dataset_from_bytes(blob[:10])


def test_crhf_bad_magic_and_version():
    blob = dataset_to_bytes(small_dataset())
    with pytest.raises(DataFormatError) as exc:
        dataset_from_bytes(b"CRHX" + blob[4:])
    assert exc.value.offset == 0
    with pytest.raises(DataFormatError) as exc:
        dataset_from_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])
    assert exc.value.offset == 4


def test_crhf_label_out_of_range_has_offset():
    blob = bytearray(dataset_to_bytes(small_dataset()))
    rec = 4 * 2 + 1
    blob[25 + rec + 8] |= 0b1000  # class 3 >= C=3 in record 1
    with pytest.raises(DataFormatError, match="record 1") as exc:
        dataset_from_bytes(bytes(blob))
    assert exc.value.offset == 25 + rec + 8


def test_crhf_rejects_unlabeled_and_flag_violations():
    blob = bytearray(dataset_to_bytes(small_dataset()))
    empty = bytearray(blob)
    empty[25 + 8] = 0
    with pytest.raises(DataFormatError, match="no label"):
        dataset_from_bytes(bytes(empty))
    flagged = bytearray(blob)
    flagged[24] = 1
    with pytest.raises(DataFormatError, match="multi-label"):
        dataset_from_bytes(bytes(flagged))


# ---------------------------------------------------------------------------
# CRHE


def test_crhe_round_trip(tmp_path):
    emb = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
    path = tmp_path / "e.crhe"
    write_embeddings(emb, path)
    np.testing.assert_array_equal(read_embeddings(path, 7), emb)
    assert embeddings_to_bytes(read_embeddings(path)) == path.read_bytes()
    assert path.read_bytes()[:4] == b"CRHE"


def test_crhe_count_mismatch_and_truncation():
    blob = embeddings_to_bytes(np.ones((4, 2), np.float32))
    with pytest.raises(DataFormatError, match="4 records"):
        embeddings_from_bytes(blob, expected_n=5)
    with pytest.raises(DataFormatError, match="expected"):
        embeddings_from_bytes(blob[:-1])


def test_embeddings_of_features_give_feature_prototypes():
    res = generate_synthetic(SynthSpec(per_class=10, rho=0.2, seed=3))
    emb = embeddings_from_bytes(embeddings_to_bytes(res.dataset.features), res.dataset.N)
    np.testing.assert_array_equal(class_prototypes(emb, res.dataset.labels),
                                  class_prototypes(res.dataset.features, res.dataset.labels))


# ---------------------------------------------------------------------------
# CSV import


def test_import_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,labels\n1.5,2,0\n-1,0.25,1;3\n")
    ds = import_csv(path)
    assert (ds.N, ds.D, ds.C) == (2, 2, 4)
    np.testing.assert_array_equal(ds.labels, [[1, 0, 0, 0], [0, 1, 0, 1]])
    assert not ds.single_label
    assert import_csv(path, num_classes=6).C == 6
    with pytest.raises(DataFormatError):
        import_csv(path, num_classes=3)


def test_import_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,0\n1,x,0\n")
    with pytest.raises(DataFormatError, match="line 2"):
        import_csv(bad)
    bad.write_text("1,2,\n")
    with pytest.raises(DataFormatError, match="no label"):
        import_csv(bad)
    bad.write_text("1,2,0\n1,0\n")
    with pytest.raises(DataFormatError, match="features"):
        import_csv(bad)


# ---------------------------------------------------------------------------
# synthetic generator


def test_default_spec_sizes():
    res = generate_synthetic(SynthSpec())
    assert (res.dataset.N, res.dataset.C, res.dataset.D) == (1600, 16, 32)
    assert res.dataset.single_label
    assert res.queries is None
    assert res.superclass.tolist() == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4


def test_fixed_seed_is_byte_identical():
    a = generate_synthetic(SynthSpec(seed=5, rho=0.2, queries_per_class=3))
    b = generate_synthetic(SynthSpec(seed=5, rho=0.2, queries_per_class=3))
    assert dataset_to_bytes(a.dataset) == dataset_to_bytes(b.dataset)
    assert dataset_to_bytes(a.queries) == dataset_to_bytes(b.queries)
    assert dataset_to_bytes(a.dataset) != dataset_to_bytes(generate_synthetic(SynthSpec(seed=6)).dataset)


def test_queries_do_not_change_training_data():
    a = generate_synthetic(SynthSpec(seed=2))
    b = generate_synthetic(SynthSpec(seed=2, queries_per_class=4))
    assert a.dataset == b.dataset
    assert b.queries.N == 64


def test_zero_noise_samples_equal_prototype():
    res = generate_synthetic(SynthSpec(sigma_noise=0.0, per_class=5))
    cls = res.dataset.labels.argmax(axis=1)
    np.testing.assert_array_equal(res.dataset.features, res.prototypes[cls].astype(np.float32))


def test_simref_is_valid_similarity_matrix():
    s = generate_synthetic(SynthSpec(seed=1)).simref
    np.testing.assert_array_equal(s, s.T)
    np.testing.assert_array_equal(np.diag(s), 1)
    assert np.abs(s).max() <= 1


def test_superclass_block_structure():
    within, between = [], []
    for seed in range(20):
        res = generate_synthetic(SynthSpec(seed=seed, per_class=2))
        same = res.superclass[:, None] == res.superclass[None, :]
        off = ~np.eye(16, dtype=bool)
        within.append(res.simref[same & off].mean())
        between.append(res.simref[~same].mean())
    assert np.mean(within) > np.mean(between) + 0.5
    assert all(w > b for w, b in zip(within, between))


def test_multilabel_extras_stay_in_superclass():
    res = generate_synthetic(SynthSpec(rho=0.5, seed=4))
    y = res.dataset.labels
    assert (y.sum(axis=1) <= 2).all() and (y.sum(axis=1) == 2).any()
    for row in y[y.sum(axis=1) == 2]:
        a, b = np.flatnonzero(row)
        assert res.superclass[a] == res.superclass[b]
    frac = (y.sum(axis=1) == 2).mean()
    assert 0.4 < frac < 0.6


def test_spec_validation():
    for kw in ({"G": 0}, {"G": 17}, {"rho": 1.0}, {"sigma_class": -1.0}, {"per_class": 0}):
        with pytest.raises(ConfigError):
            SynthSpec(**kw)
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"colour": 1})
    assert SynthSpec.from_dict(SynthSpec(C=8).to_dict()) == SynthSpec(C=8)


def test_single_label_synthetic_costs_reduce_to_unweighted():
    res = generate_synthetic(SynthSpec(per_class=6, D=8))
    rng = np.random.default_rng(0)
    signs = rng.choice([-1, 1], (res.dataset.N, 6))
    cand = sample_codebook_unique(6, 20, seed=0).signs()
    cost = build_cost_matrix(pack_signs(signs), res.dataset.labels, pack_signs(cand), code_bits=6)
    cls = res.dataset.labels.argmax(axis=1)
    sq = 4 * (signs[:, None, :] != cand[None, :, :]).sum(axis=2)
    for c in range(16):
        mean = sq[cls == c].sum(axis=0)
        for j in range(20):
            assert cost.entry(c, j) * 6 == mean[j]
