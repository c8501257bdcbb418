import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlypred import data as D
from earlypred.data import Dataset, FeatureSequence, SynthSpec


def _small(**kw):
    base = dict(n_classes=4, n_segments=6, d_raw=5, n_train=24, n_test=12, seed=3)
    base.update(kw)
    return SynthSpec(**base)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def test_degenerate_spec_nearest_prototype_is_perfect():
    spec = SynthSpec(ambiguity=0.0, sigma=0.0, onset=(1, 1), seed=11)
    _, test = D.synthesize(spec)
    shared, traj = D._prototypes(spec, np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(5)[0]))
    w = 1.0 / spec.ramp  # blend weight of the class motion at the onset segment
    proto = (1 - w) * shared + w * traj[:, 0, :]
    first = test.raw()[:, 0, :]  # segment 1
    dist = ((first[:, None, :] - proto[None]) ** 2).sum(-1)
    assert (dist.argmin(axis=1) == test.labels()).mean() == 1.0


def test_onset_at_last_segment_hides_the_label():
    # alpha=1 and onset=K: every prefix before segment K carries no label information
    spec = SynthSpec(ambiguity=1.0, onset=(10, 10), n_train=0, n_test=800, seed=5)
    _, test = D.synthesize(spec)
    raw, labels = test.raw(), test.labels()
    ref = raw[labels == 0, :9].mean(axis=0)
    for c in range(1, spec.n_classes):
        # class-conditional prefix means agree up to sampling noise
        diff = np.abs(raw[labels == c, :9].mean(axis=0) - ref).max()
        assert diff < 0.25
    # a nearest-class-mean rule fitted on half the prefixes is at chance on the other half
    half = len(test) // 2
    means = np.stack([raw[:half][labels[:half] == c, :9].reshape(-1, 9 * spec.d_raw).mean(0)
                      for c in range(spec.n_classes)])
    x = raw[half:, :9].reshape(-1, 9 * spec.d_raw)
    acc = (((x[:, None] - means[None]) ** 2).sum(-1).argmin(1) == labels[half:]).mean()
    se = np.sqrt(1 / 8 * 7 / 8 / (len(test) - half))
    assert abs(acc - 1 / 8) <= 3 * se


def test_synthesis_is_byte_deterministic(tmp_path):
    spec = SynthSpec(n_classes=8, n_segments=10, d_raw=32, sigma=0.1, seed=7)
    for i in range(2):
        tr, te = D.synthesize(spec)
        D.save_dataset(tmp_path / f"tr{i}", tr)
        D.save_dataset(tmp_path / f"te{i}", te)
    assert (tmp_path / "tr0").read_bytes() == (tmp_path / "tr1").read_bytes()
    assert (tmp_path / "te0").read_bytes() == (tmp_path / "te1").read_bytes()


def test_different_seeds_differ():
    a, _ = D.synthesize(_small(seed=1))
    b, _ = D.synthesize(_small(seed=2))
    assert not np.array_equal(a.raw(), b.raw())


def test_modalities_are_paired_noisy_views():
    spec = _small()
    ta, _ = D.synthesize(spec, "a")
    tb, _ = D.synthesize(spec, "b")
    assert np.array_equal(ta.ids(), tb.ids()) and np.array_equal(ta.labels(), tb.labels())
    diff = ta.raw() - tb.raw()
    # difference of two independent N(0, sigma^2) draws
    assert abs(diff.std() - spec.sigma * np.sqrt(2)) < 0.05
    assert {s.modality for s in tb} == {"b"}


def test_shapes_labels_and_ids():
    spec = _small()
    tr, te = D.synthesize(spec)
    assert len(tr) == 24 and len(te) == 12
    assert tr.raw().shape == (24, 6, 5)
    assert set(np.bincount(tr.labels())) == {6}
    assert set(tr.ids()).isdisjoint(te.ids())


@pytest.mark.parametrize("kw", [dict(ambiguity=1.5), dict(sigma=-0.1), dict(onset=(0, 2)), dict(onset=(3, 7)),
                                dict(n_classes=1), dict(ramp=0), dict(signature=-1.0)])
def test_invalid_spec_rejected(kw):
    with pytest.raises(ValueError):
        _small(**kw)


def test_pre_onset_segments_are_class_free():
    spec = _small(sigma=0.0, onset=(3, 3), n_train=40)
    tr, _ = D.synthesize(spec)
    raw = tr.raw()
    # with no noise and no offset the opening is identical across all classes
    assert np.allclose(raw[:, :2], raw[0, :2])
    assert not np.allclose(raw[:, 2], raw[0, 2])


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


def test_expand_views_ten_n():
    tr, _ = D.synthesize(SynthSpec(n_train=3, n_test=0))
    assert len(D.expand_views(tr)) == 30


def test_expand_views_single_segment():
    seq = FeatureSequence(0, 1, np.arange(4.0).reshape(1, 4))
    (v,) = D.expand_views([seq])
    assert v.k == 1 and v.ratio == 1.0 and np.array_equal(v.segments, seq.segments)


def test_expand_views_prefix_oracle():
    tr, _ = D.synthesize(_small())
    views = D.expand_views(tr)
    K = tr.n_segments
    for n, s in enumerate(tr):
        for k in range(1, K + 1):
            v = views[n * K + k - 1]
            assert v.source_id == s.id and v.label == s.label and v.k == k
            assert np.array_equal(v.segments, s.segments[:k])


def test_expand_views_heterogeneous_k():
    a = FeatureSequence(0, 0, np.zeros((3, 2)))
    b = FeatureSequence(1, 0, np.zeros((4, 2)))
    with pytest.raises(D.DatasetError):
        D.expand_views([a, b])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 12), st.integers(1, 12))
def test_expand_views_count_and_ratios(N, K):
    seqs = [FeatureSequence(i, 0, np.zeros((K, 2))) for i in range(N)]
    views = D.expand_views(seqs)
    assert len(views) == N * K
    for n in range(N):
        ratios = [v.exact_ratio for v in views[n * K:(n + 1) * K]]
        assert ratios == [Fraction(k, K) for k in range(1, K + 1)]
        assert all(r * K == v.k for r, v in zip(ratios, views[n * K:(n + 1) * K]))
        assert all(a < b for a, b in zip(ratios, ratios[1:]))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_empty_roundtrip(tmp_path):
    ds = Dataset([], 3, 4, 2, seed=None)
    D.save_dataset(tmp_path / "e", ds)
    assert D.load_dataset(tmp_path / "e") == ds


def test_roundtrip_100(tmp_path):
    tr, _ = D.synthesize(SynthSpec(n_train=100, n_test=0, seed=9))
    D.save_dataset(tmp_path / "d", tr)
    back = D.load_dataset(tmp_path / "d")
    assert back == tr
    assert back.raw().tobytes() == tr.raw().tobytes()


def test_header_echoes_spec(tmp_path):
    tr, _ = D.synthesize(SynthSpec(n_classes=8, n_segments=10, n_train=200, seed=4))
    D.save_dataset(tmp_path / "d", tr)
    magic, version, C, K, d_raw, count, seed, _ = struct.unpack("<8sIIIIQQI", (tmp_path / "d").read_bytes()[:44])
    assert (magic, version, C, K, d_raw, count, seed) == (D.DATA_MAGIC, D.DATA_VERSION, 8, 10, 32, 200, 4)
    assert D.read_header(tmp_path / "d")["count"] == 200


def test_corrupted_byte_is_checksum_error(tmp_path):
    tr, _ = D.synthesize(_small())
    p = tmp_path / "d"
    D.save_dataset(p, tr)
    blob = bytearray(p.read_bytes())
    blob[-7] ^= 0x40
    p.write_bytes(bytes(blob))
    with pytest.raises(D.DatasetChecksumError):
        D.load_dataset(p)


def test_truncated_file(tmp_path):
    tr, _ = D.synthesize(_small())
    p = tmp_path / "d"
    D.save_dataset(p, tr)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(D.DatasetTruncatedError):
        D.load_dataset(p)
    p.write_bytes(b"EAPDA")
    with pytest.raises(D.DatasetTruncatedError):
        D.load_dataset(p)


def test_version_mismatch(tmp_path):
    tr, _ = D.synthesize(_small())
    p = tmp_path / "d"
    D.save_dataset(p, tr)
    blob = bytearray(p.read_bytes())
    blob[8:12] = struct.pack("<I", 99)
    p.write_bytes(bytes(blob))
    with pytest.raises(D.DatasetVersionError):
        D.load_dataset(p)


def test_error_classes_are_distinct():
    kinds = {D.DatasetVersionError, D.DatasetTruncatedError, D.DatasetChecksumError}
    assert len(kinds) == 3 and all(issubclass(k, D.DatasetError) for k in kinds)


def test_text_export(tmp_path):
    tr, _ = D.synthesize(_small(n_train=3))
    D.export_text(tmp_path / "t.txt", tr)
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 3
    fields = lines[1].split(",")
    assert int(fields[0]) == tr[1].id and int(fields[1]) == tr[1].label and fields[2] == "a"
    np.testing.assert_array_equal(np.array(fields[3:], dtype=float), tr[1].segments.reshape(-1))


def test_dataset_rejects_bad_shapes():
    with pytest.raises(D.DatasetError):
        Dataset([FeatureSequence(0, 0, np.zeros((3, 2)))], 2, 4, 2)
    with pytest.raises(D.DatasetError):
        Dataset([FeatureSequence(0, 5, np.zeros((4, 2)))], 2, 4, 2)
