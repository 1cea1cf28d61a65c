import json

import numpy as np
import pytest

from silo_lab import metrics as M
from silo_lab.degradations import make_op
from silo_lab.metrics import AlignmentError


def test_psnr_identical_is_capped():
    x = np.zeros(256)
    assert M.psnr(x, x) == M.PSNR_CAP == 300.0


def test_psnr_constant_offset():
    x = np.zeros(256)
    assert M.psnr(x, x + 0.1) == pytest.approx(10 * np.log10(4 / 0.01))
    assert M.psnr(x, x + 0.1) == pytest.approx(26.0206, abs=1e-4)


def test_psnr_symmetric_and_sign_flip(rng):
    x, y = rng.uniform(-1, 1, (2, 256))
    assert M.psnr(x, y) == M.psnr(y, x)
    assert M.psnr(x, y) == pytest.approx(M.psnr(-x, -y))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        M.psnr(np.zeros(4), np.zeros(5))


def test_cpsnr_inpaint_ignores_masked_pixels():
    op = make_op("inpaint")
    x = np.zeros(256)
    x_hat = np.where(op.mask == 0, 0.7, 0.0)
    assert M.cpsnr(x, x_hat, op) == M.PSNR_CAP
    assert M.psnr(x, x_hat) < 30


def test_cpsnr_inpaint_outside_error():
    op = make_op("inpaint")
    x = np.zeros(256)
    signs = np.where(np.arange(256) % 2, 1.0, -1.0)
    x_hat = 0.05 * signs * op.mask
    # 192 observed pixels off by 0.05, 64 masked pixels exact
    assert M.cpsnr(x, x_hat, op) == pytest.approx(10 * np.log10(4 / (0.0025 * 0.75)))


def test_cpsnr_at_least_psnr_for_contractive_ops(dataset, rng):
    x = dataset.test[:20]
    x_hat = np.clip(x + rng.normal(0, 0.1, x.shape), -1, 1)
    for kind in ("blur", "sr2", "inpaint"):
        op = make_op(kind)
        for a, b in zip(x, x_hat):
            assert M.cpsnr(a, b, op) >= M.psnr(a, b) - 1e-9


def test_frechet_identical_sets_zero(rng):
    a = rng.normal(size=(500, 4))
    d, fallback = M.frechet_distance(a, a)
    assert d == pytest.approx(0.0, abs=1e-8)
    assert not fallback


def test_frechet_mean_shift(rng):
    a = rng.normal(size=(400, 3))
    shift = np.array([1.0, -2.0, 0.5])
    d, _ = M.frechet_distance(a, a + shift)
    assert d == pytest.approx(shift @ shift, rel=1e-8)


def test_frechet_one_dim_clusters():
    a = np.array([-1.0, 1.0] * 50)
    d, _ = M.frechet_distance(a, a + 10.0)
    assert d == pytest.approx(100.0)


def test_frechet_gaussian_closed_form():
    # N(0, 1) vs N(0, 4) in 1-D: (1 - 2)^2 = 1
    a = np.array([-1.0, 1.0])
    d, _ = M.frechet_distance(a, 2 * a)
    assert d == pytest.approx(1.0)


def test_frechet_symmetric(rng):
    a = rng.normal(size=(300, 5))
    b = rng.normal(size=(200, 5)) * 1.5 + 0.3
    assert M.frechet_distance(a, b)[0] == pytest.approx(M.frechet_distance(b, a)[0], rel=1e-7)


def test_symmetric_trace_matches_direct(rng):
    a = rng.normal(size=(50, 4))
    b = rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4))
    ca, cb = np.cov(a.T, bias=True), np.cov(b.T, bias=True)
    from scipy.linalg import sqrtm

    assert M._sym_sqrt_trace(ca, cb) == pytest.approx(np.trace(sqrtm(ca @ cb)).real, rel=1e-8)


def test_frechet_degenerate_features_stay_finite():
    a = np.zeros((10, 3))
    a[:, 0] = np.arange(10)
    b = np.zeros((10, 3))
    d, _ = M.frechet_distance(a, b)
    assert np.isfinite(d) and d > 0


def test_frechet_empty():
    with pytest.raises(ValueError):
        M.frechet_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_evaluate_run_and_alignment(dataset, codec, tmp_path):
    op = make_op("blur")
    ref = dataset.test[:10]
    rep = M.evaluate_run(ref, ref, op, codec, method="oracle", times=[0.1] * 10)
    assert rep.n == 10 and all(p == M.PSNR_CAP for p in rep.psnr)
    assert rep.frechet_proxy == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(AlignmentError):
        M.evaluate_run(ref[:9], ref, op, codec)
    with pytest.raises(AlignmentError):
        M.evaluate_run(ref, ref, op, codec, recon_ids=range(10), ref_ids=range(1, 11))
    path = tmp_path / "r.jsonl"
    rep.write_jsonl(path)
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    assert len(lines) == 11 and lines[-1]["summary"]["method"] == "oracle"
    table = M.render_table([rep])
    assert "oracle" in table and "not FID" in table
