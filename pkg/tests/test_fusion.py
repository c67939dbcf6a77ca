import numpy as np
import pytest

from proto_cil.fusion import FusionError, late_fuse, single_predict, softmax
from proto_cil.projector import ScoreMatrix


def sm(rows, classes=("a", "b", "c")):
    return ScoreMatrix(rows=np.asarray(rows, dtype=np.float64), classes=list(classes))


# ---------------------------------------------------------------------------
# softmax

def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(50, 7)) * 100)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p.min() >= 0.0


def test_softmax_shift_invariant():
    z = np.random.default_rng(1).normal(size=(10, 4))
    assert np.allclose(softmax(z), softmax(z + 123.0))


def test_softmax_handles_large_magnitudes():
    p = softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all()
    assert p[0, 0] == pytest.approx(1.0)


def test_softmax_rejects_non_finite():
    with pytest.raises(FusionError):
        softmax(np.array([[np.nan, 0.0]]))


# ---------------------------------------------------------------------------
# late fusion

def test_late_fuse_hand_example():
    # branch 1 confidently says class 0, branch 2 weakly says class 1:
    # the confident branch wins the average
    l1 = sm([[5.0, 0.0, 0.0]])
    l2 = sm([[0.0, 0.4, 0.0]])
    preds = late_fuse(l1, l2)
    assert preds[0].label == "a"
    expected = (softmax(l1.rows) + softmax(l2.rows)) / 2
    assert np.allclose(preds[0].probs, expected[0])
    assert preds[0].probs.sum() == pytest.approx(1.0)


def test_late_fuse_tie_breaks_to_lowest_index():
    l = sm([[1.0, 1.0, 1.0]])
    assert late_fuse(l, l)[0].label == "a"
    assert single_predict(l)[0].label == "a"


def test_late_fuse_symmetric():
    rng = np.random.default_rng(2)
    l1 = sm(rng.normal(size=(200, 5)), classes=list("abcde"))
    l2 = sm(rng.normal(size=(200, 5)), classes=list("abcde"))
    a = late_fuse(l1, l2)
    b = late_fuse(l2, l1)
    assert [p.label for p in a] == [p.label for p in b]
    assert np.allclose(np.stack([p.probs for p in a]), np.stack([p.probs for p in b]))


def test_late_fuse_shift_invariant():
    rng = np.random.default_rng(3)
    l1 = sm(rng.normal(size=(100, 4)), classes=list("abcd"))
    l2 = sm(rng.normal(size=(100, 4)), classes=list("abcd"))
    shifted = sm(l1.rows + 42.0, classes=list("abcd"))
    a = late_fuse(l1, l2)
    b = late_fuse(shifted, l2)
    assert [p.label for p in a] == [p.label for p in b]


def test_late_fuse_uninformative_branch_reduces_to_other():
    rng = np.random.default_rng(4)
    l1 = sm(rng.normal(size=(100, 6)), classes=list("abcdef"))
    flat = sm(np.zeros((100, 6)), classes=list("abcdef"))
    fused = late_fuse(l1, flat)
    solo = [np.argmax(softmax(r)) for r in l1.rows]
    assert [p.label for p in fused] == [l1.classes[j] for j in solo]


def test_late_fuse_property_sweep():
    """Symmetry, shift invariance, and the uninformative-branch reduction on
    10^4 random score pairs."""
    rng = np.random.default_rng(5)
    n, k = 10_000, 5
    classes = list("abcde")
    r1 = rng.normal(size=(n, k)) * rng.uniform(0.1, 10)
    r2 = rng.normal(size=(n, k)) * rng.uniform(0.1, 10)
    shifts = rng.normal(size=(n, 1)) * 50
    ab = late_fuse(sm(r1, classes), sm(r2, classes))
    ba = late_fuse(sm(r2, classes), sm(r1, classes))
    sh = late_fuse(sm(r1 + shifts, classes), sm(r2, classes))
    flat = late_fuse(sm(r1, classes), sm(np.full((n, k), 7.0), classes))
    solo = softmax(r1).argmax(axis=1)
    for i in range(n):
        assert ab[i].label == ba[i].label
        assert ab[i].label == sh[i].label
        assert flat[i].label == classes[solo[i]]


def test_late_fuse_rejects_mismatches():
    l1 = sm(np.zeros((2, 3)))
    with pytest.raises(FusionError, match="registries"):
        late_fuse(l1, sm(np.zeros((2, 3)), classes=("x", "y", "z")))
    with pytest.raises(FusionError, match="shapes"):
        late_fuse(l1, sm(np.zeros((3, 3))))


# ---------------------------------------------------------------------------
# single-branch prediction

def test_single_predict_uses_raw_argmax():
    rng = np.random.default_rng(6)
    rows = rng.normal(size=(50, 3))
    preds = single_predict(sm(rows))
    assert [p.label for p in preds] == [("a", "b", "c")[j] for j in rows.argmax(axis=1)]
    assert np.allclose(np.stack([p.probs for p in preds]), softmax(rows))


def test_single_predict_rejects_non_finite():
    with pytest.raises(FusionError):
        single_predict(sm(np.array([[np.inf, 0.0, 0.0]])))
