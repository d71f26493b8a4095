import math

import numpy as np
import pytest
from scipy import ndimage

from hed.config import ConfigError, NetConfig, TrainConfig, dump_config, from_pairs, load_config, parse_pairs
from hed.data import (
    AnnotatedImage,
    CorpusError,
    augment,
    consensus,
    flip_horizontal,
    largest_rotated_rect,
    load_corpus,
    rotate_crop,
    save_corpus,
    split_corpus,
    synth_corpus,
)
from hed.netpbm import FormatError, parse_pnm, read_pfm, read_pnm, write_pfm, write_pgm, write_ppm


# consensus ------------------------------------------------------------------


def test_consensus_counting_oracle():
    rng = np.random.default_rng(0)
    anns = [(rng.random((9, 11)) < 0.4).astype(np.uint8) for _ in range(4)]
    got = consensus(anns, 3).values
    for y in range(9):
        for x in range(11):
            votes = sum(int(a[y, x]) for a in anns)
            assert got[y, x] == (1 if votes >= 3 else 0)


def test_consensus_examples_and_monotonicity():
    anns = [np.zeros((2, 2), np.uint8) for _ in range(5)]
    for k in range(3):
        anns[k][0, 0] = 1
    assert consensus(anns, 3).values[0, 0] == 1 and consensus(anns, 4).values[0, 0] == 0
    single = (np.random.default_rng(1).random((5, 5)) < 0.5).astype(np.uint8)
    np.testing.assert_array_equal(consensus([single], 1).values, single)
    rng = np.random.default_rng(2)
    stack = [(rng.random((8, 8)) < 0.5).astype(np.uint8) for _ in range(5)]
    prev = consensus(stack, 1).values
    for t in range(2, 6):
        cur = consensus(stack, t).values
        assert np.all(cur <= prev)
        prev = cur
    with pytest.raises(ValueError):
        consensus([np.zeros((2, 2)), np.zeros((2, 3))])


# geometry -------------------------------------------------------------------


def _fits(w, h, wr, hr, theta):
    """Rotated-frame containment: every crop corner lies inside the w x h frame."""
    c, s = math.cos(theta), math.sin(theta)
    for sx in (-0.5, 0.5):
        for sy in (-0.5, 0.5):
            x, y = sx * wr, sy * hr
            if abs(c * x - s * y) > w / 2 + 1e-9 or abs(s * x + c * y) > h / 2 + 1e-9:
                return False
    return True


def _best_area_oracle(w, h, theta, steps=400):
    best = 0.0
    for k in range(1, steps + 1):
        wr = (w + h) * k / steps
        lo, hi = 0.0, w + h
        if not _fits(w, h, wr, 1e-12, theta):
            continue
        for _ in range(60):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if _fits(w, h, wr, mid, theta) else (lo, mid)
        best = max(best, wr * lo)
    return best


@pytest.mark.parametrize("w,h", [(64, 64), (80, 40), (30, 90), (100, 7)])
@pytest.mark.parametrize("deg", [0.0, 10.0, 22.5, 45.0, 67.5, 90.0, 157.5, 200.0])
def test_largest_rotated_rect_contained_and_maximal(w, h, deg):
    theta = math.radians(deg)
    wr, hr = largest_rotated_rect(w, h, theta)
    assert _fits(w, h, wr, hr, theta)
    assert wr * hr >= _best_area_oracle(w, h, theta) * (1 - 5e-3)


def test_rotate_crop_identity_and_quarter_turn():
    rng = np.random.default_rng(3)
    a = rng.random((6, 9))
    np.testing.assert_array_equal(rotate_crop(a, 0.0, 1), a)
    q = rotate_crop(a, 90.0, 0)
    assert q.shape == (9, 6)
    # a quarter turn is an exact permutation of the pixels
    assert sorted(q.ravel()) == sorted(a.ravel())


def test_rotate_crop_rasterized_containment():
    # rasterize the rotated frame into a zero canvas; the centered crop must sit inside it
    for (h, w), deg in [((40, 60), 15.0), ((40, 60), 33.0), ((64, 64), 45.0), ((30, 70), 100.0)]:
        out = rotate_crop(np.ones((h, w)), deg, 1)
        hc, wc = out.shape
        frame = ndimage.rotate(np.ones((h, w)), deg, reshape=True, order=0, cval=0.0) > 0.5
        frame = ndimage.binary_dilation(frame)  # one pixel of rasterization slack
        cy, cx = (frame.shape[0] - 1) / 2, (frame.shape[1] - 1) / 2
        y0, x0 = int(round(cy - (hc - 1) / 2)), int(round(cx - (wc - 1) / 2))
        assert frame[y0 : y0 + hc, x0 : x0 + wc].all()
        wr, hr = largest_rotated_rect(w, h, math.radians(deg))
        assert (hc, wc) == (int(hr + 1e-9), int(wr + 1e-9))


def test_flip_involution():
    a = np.random.default_rng(4).random((3, 5, 7))
    np.testing.assert_array_equal(flip_horizontal(flip_horizontal(a)), a)


# augmentation ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus():
    return synth_corpus(2, size=48, seed=1)


def test_augment_counts(small_corpus):
    item = small_corpus[0]
    assert len(augment(item)) == 32
    assert len(augment(item, scales=(0.5, 1.0, 1.5))) == 96
    assert len(augment(item, angles=4, flips=False, scales=(1.0, 2.0))) == 8


def test_augment_identity(small_corpus):
    item = small_corpus[0]
    (s,) = augment(item, angles=1, flips=False)
    np.testing.assert_array_equal(s.image, item.image)
    np.testing.assert_array_equal(s.labels.values, consensus(item.annotations, 3).values)
    assert s.provenance == (item.id, 0.0, False, 1.0)


def test_augment_labels_binary_and_flip_pairs(small_corpus):
    samples = augment(small_corpus[1], scales=(0.7, 1.0))
    for s in samples:
        assert set(np.unique(s.labels.values)) <= {0, 1}
        assert s.image.shape[1:] == s.labels.shape
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    for a, b in zip(samples[::2], samples[1::2]):
        assert b.provenance[2] and not a.provenance[2]
        np.testing.assert_array_equal(flip_horizontal(b.labels.values), a.labels.values)


def test_augment_skips_small_variants(small_corpus):
    stats = {}
    out = augment(small_corpus[0], angles=2, scales=(0.1, 1.0), min_size=16, stats=stats)
    assert len(out) == 4 and stats["skipped"] == 4
    resized = augment(small_corpus[0], angles=2, flips=False, resize_to=32)
    assert all(s.labels.shape == (32, 32) for s in resized)


# corpus I/O -------------------------------------------------------------------


def test_corpus_roundtrip_and_ordering(tmp_path, small_corpus):
    save_corpus(small_corpus[::-1], tmp_path)
    back = load_corpus(tmp_path)
    assert [a.id for a in back] == sorted(a.id for a in small_corpus)
    assert len(back) == 2 and all(len(a.annotations) == 5 for a in back)
    for a, b in zip(back, sorted(small_corpus, key=lambda x: x.id)):
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-12)
        for x, y in zip(a.annotations, b.annotations):
            np.testing.assert_array_equal(x, y)


def test_corpus_errors(tmp_path, small_corpus):
    assert load_corpus(tmp_path) == []
    save_corpus(small_corpus[:1], tmp_path)
    for p in (tmp_path / "groundtruth" / small_corpus[0].id).iterdir():
        p.unlink()
    with pytest.raises(CorpusError, match=small_corpus[0].id):
        load_corpus(tmp_path)
    with pytest.raises(CorpusError):
        AnnotatedImage(np.zeros((1, 4, 4)), [], "x")
    with pytest.raises(CorpusError, match="shape"):
        AnnotatedImage(np.zeros((1, 4, 4)), [np.zeros((4, 5), np.uint8)], "x")


def test_split_corpus(small_corpus):
    corpus = synth_corpus(6, size=32, seed=2)
    train, held = split_corpus(corpus, 2, seed=0)
    assert len(train) == 4 and len(held) == 2
    assert {a.id for a in train} | {a.id for a in held} == {a.id for a in corpus}
    assert [a.id for a in split_corpus(corpus, 2, seed=0)[1]] == [a.id for a in held]


# synthetic corpus -------------------------------------------------------------


def test_synth_reproducible_and_thin():
    a, b = synth_corpus(4, 64, 0), synth_corpus(4, 64, 0)
    assert len(a) == 4 and synth_corpus(0) == []
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.image.shape == (3, 64, 64)
        for p, q in zip(x.annotations, y.annotations):
            np.testing.assert_array_equal(p, q)
            assert 0 < p.mean() < 0.15


def test_consensus_hugs_true_outlines():
    exact = synth_corpus(1, 64, 5, jitter=0.0)[0]
    noisy = synth_corpus(1, 64, 5, jitter=0.1)[0]
    np.testing.assert_array_equal(exact.image, noisy.image)
    truth = exact.annotations[0].astype(bool)
    cons = consensus(noisy.annotations, 3).values.astype(bool)
    # every consensus pixel lies within one pixel of the true outline
    near = ndimage.binary_dilation(truth, structure=np.ones((3, 3), bool))
    assert np.all(near[cons])
    # and the consensus recovers nearly all of the outline
    assert (cons & truth).sum() >= 0.9 * truth.sum()


# netpbm -------------------------------------------------------------------------


def test_pnm_roundtrips(tmp_path):
    rng = np.random.default_rng(5)
    g = np.round(rng.random((7, 5)) * 255) / 255
    write_pgm(tmp_path / "g.pgm", g)
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), g)
    c = np.round(rng.random((3, 4, 6)) * 255) / 255
    write_ppm(tmp_path / "c.ppm", c)
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), c)
    f = rng.random((5, 8))
    write_pfm(tmp_path / "f.pfm", f)
    np.testing.assert_array_equal(read_pfm(tmp_path / "f.pfm"), f.astype(np.float32))


def test_pnm_header_comments_and_16bit():
    buf = b"P5\n# comment\n2 1\n# another\n65535\n" + np.array([0, 65535], ">u2").tobytes()
    np.testing.assert_array_equal(parse_pnm(buf), [[0.0, 1.0]])


def test_pnm_payload_mismatch_reports_offset():
    buf = b"P5\n4 4\n255\n" + bytes(10)
    with pytest.raises(FormatError, match="byte offset 21"):
        parse_pnm(buf)
    with pytest.raises(FormatError, match="byte offset 0"):
        parse_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError, match="non-integer"):
        parse_pnm(b"P5\nx 1\n255\n\0")


# config -------------------------------------------------------------------------


def test_config_text_roundtrip(tmp_path):
    net = NetConfig(side_taps=(1, 2), loss_weights=(0.5, 2.0), pooling_mode="average")
    tr = TrainConfig(iterations=7, scales=(0.5, 1.0))
    (tmp_path / "n.cfg").write_text(dump_config(net))
    (tmp_path / "t.cfg").write_text(dump_config(tr))
    assert load_config(NetConfig, tmp_path / "n.cfg") == net
    assert load_config(TrainConfig, tmp_path / "t.cfg") == tr
    # later writers win
    assert load_config(TrainConfig, tmp_path / "t.cfg", {"iterations": "9"}).iterations == 9


def test_config_errors():
    with pytest.raises(ConfigError):
        from_pairs(NetConfig, {"bogus": "1"})
    with pytest.raises(ConfigError):
        parse_pairs("no equals sign")
    with pytest.raises(ConfigError):
        NetConfig(side_taps=(2, 1))
    with pytest.raises(ConfigError):
        TrainConfig(iterations=10, lr_drop=11)
    assert parse_pairs("learning-rate = 1e-3  # note\n\n") == {"learning_rate": "1e-3"}
    assert TrainConfig(iterations=10).drop_at == 5
