"""One check per acceptance criterion; each prints a PASS/FAIL line in the terminal summary."""
import json
import time

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from conftest import VERDICTS
from helpers import fd_gradient_errors, naive_gap_loss
from test_attention import embeddings, reference_transformer
from test_pose import outlier_problem

from cloudreg.attention import AttentionStack, transformer_forward
from cloudreg.cli import main
from cloudreg.datagen import PairSpec, make_pair, synth_shapes
from cloudreg.geometry import RigidTransform, knn_all, radius_neighbors, rotation_angle_error
from cloudreg.matching import GroundTruthMatches, gap_loss, sinkhorn
from cloudreg.model import PipelineConfig, RegistrationNet, prepare_pair
from cloudreg.normals import angle_embedding, estimate_normals, pairwise_normal_angles
from cloudreg.pose import RansacConfig, kabsch, ransac_register


def verdict(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})"
    VERDICTS.append((n, line))
    print(line)
    assert ok, line


def test_01_neighbor_search():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for trial in range(100):
        n = int(rng.integers(2, 513))
        # coarse grid coordinates create exact distance ties
        pts = rng.integers(-4, 5, size=(n, 3)) * 0.25 if trial % 2 else rng.normal(size=(n, 3))
        k = int(rng.integers(1, n))
        d2 = [[float(np.sum((pts[i] - pts[j]) ** 2)) for j in range(n)] for i in range(min(n, 8))]
        table = knn_all(pts, k)
        for i in range(min(n, 8)):
            brute = [j for _, j in sorted((d2[i][j], j) for j in range(n) if j != i)][:k]
            mismatches += table[i].tolist() != brute
            r = float(rng.uniform(0.1, 2.0))
            brute_r = [j for dd, j in sorted((d2[i][j], j) for j in range(n)) if dd <= r * r][:32]
            mismatches += radius_neighbors(pts, i, r, 32) != brute_r
    elapsed = time.perf_counter() - t0
    verdict(1, "knn / radius search equal brute force", mismatches == 0 and elapsed < 10,
            f"{mismatches} mismatches over 100 instances, {elapsed:.1f} s")


def test_02_normals():
    t0 = time.perf_counter()
    plane = synth_shapes("plane", 400, 1).points
    nf = estimate_normals(plane, 0.3, 128)
    z_err = float(np.abs(np.abs(nf.vectors[:, 2]) - 1).max())
    sums = np.array([sum(nf.vectors[i] @ (plane[i] - plane[j]) for j in range(400)
                         if np.sum((plane[i] - plane[j]) ** 2) <= 0.09) for i in range(400)])
    sign_ok = float(np.mean(sums >= -1e-12))
    sphere = synth_shapes("sphere", 2000, 2).points
    ns = estimate_normals(sphere, 0.3, 128).vectors
    radial = float(np.degrees(np.arccos(np.clip(np.sum(ns * sphere, 1), -1, 1))).max())
    elapsed = time.perf_counter() - t0
    ok = z_err < 1e-6 and sign_ok == 1.0 and radial < 5 and elapsed < 5
    verdict(2, "plane and sphere normals", ok,
            f"plane |z| err {z_err:.1e}, sign rule on {100 * sign_ok:.0f}% of points, "
            f"sphere max {radial:.2f} deg, {elapsed:.1f} s")


def test_03_rigid_invariance():
    pts = synth_shapes("composite", 300, 4).points
    base = estimate_normals(pts, 0.3, 128)
    a0 = pairwise_normal_angles(base.vectors)
    worst = 0.0
    excluded = 0
    rng = np.random.default_rng(0)
    for k in range(50):
        T = RigidTransform(Rotation.random(random_state=k).as_matrix(), rng.normal(size=3))
        moved = estimate_normals(T.apply(pts), 0.3, 128)
        ok = base.reliable & moved.reliable
        excluded = max(excluded, int((~ok).sum()))
        a1 = pairwise_normal_angles(moved.vectors)
        idx = np.ix_(ok, ok)
        worst = max(worst, float(np.abs(a1[idx] - a0[idx]).max()))
        e0 = angle_embedding(a0[idx][:20, :20], 96)
        e1 = angle_embedding(a1[idx][:20, :20], 96)
        worst = max(worst, float(np.abs(e1 - e0).max()))
    verdict(3, "normal angles and embeddings rigid invariant", worst < 1e-5,
            f"max deviation {worst:.1e} over 50 transforms, at most {excluded} of 300 points without a defined sign")


def test_04_attention_reduction():
    # default initialization, with nonzero biases so the bias paths are exercised
    torch.manual_seed(0)
    stack = AttentionStack(96, 6, 4).double()
    with torch.no_grad():
        for name, p in stack.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.05 * torch.randn_like(p))
        for s in stack.self_layers:
            s.W_R.zero_()
    torch.manual_seed(1)
    fx, fy = torch.randn(16, 96, dtype=torch.float64), torch.randn(24, 96, dtype=torch.float64)
    ex, _, _ = embeddings(16, 10, d=96)
    ey, _, _ = embeddings(24, 11, d=96)
    with torch.no_grad():
        hx, hy = transformer_forward(fx, fy, ex, ey, stack)
        rx, ry = reference_transformer(fx, fy, stack)
    err = max(float((hx - rx).abs().max()), float((hy - ry).abs().max()))
    verdict(4, "attention with zero bias equals reference attention", err < 1e-10, f"max abs diff {err:.1e}")


def test_05_sinkhorn():
    torch.manual_seed(0)
    marg = shift = 0.0
    for _ in range(50):
        C = torch.randn(16, 24, dtype=torch.float64) * 3
        P = sinkhorn(C, 1.0, 100)
        marg = max(marg, float((P[:16].sum(1) - 1).abs().max()), float((P[:, :24].sum(0) - 1).abs().max()))
        c = float(torch.randn(()) * 10)
        shift = max(shift, float((sinkhorn(C + c, 1.0 + c, 100) - P).abs().max()))
    verdict(5, "Sinkhorn marginals and shift invariance", marg < 1e-5 and shift < 1e-6,
            f"marginal err {marg:.1e}, shift err {shift:.1e}")


def test_06_gap_loss():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        m, n = 8, 10
        k = int(rng.integers(0, 9))
        pairs = np.stack([rng.choice(m, k, replace=False), rng.choice(n, k, replace=False)], 1)
        gt = GroundTruthMatches.from_pairs(pairs, m, n)
        P = torch.as_tensor(rng.uniform(1e-3, 1.0, size=(m + 1, n + 1)))
        worst = max(worst, abs(gap_loss(P, gt, 0.5).item() - naive_gap_loss(P.tolist(), gt, 0.5)))
    gt = GroundTruthMatches.from_pairs([[i, i] for i in range(8)], 8, 10)
    P = torch.full((9, 11), 1e-12, dtype=torch.float64)
    P[torch.arange(8), torch.arange(8)] = 1.0
    P[8, 8:10] = 1.0
    floor_err = abs(gap_loss(P, gt).item() - 18 * np.log(1.5))
    verdict(6, "gap loss equals naive evaluation; perfect floor", worst < 1e-10 and floor_err < 1e-6,
            f"max diff {worst:.1e}, floor err {floor_err:.1e}")


def test_07_gradients():
    t0 = time.perf_counter()
    cfg = PipelineConfig(normal_radius=0.6)
    torch.manual_seed(0)
    net = RegistrationNet(cfg).double()
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.01 * torch.randn_like(p))
    pair = make_pair(synth_shapes("composite", 16, 1), PairSpec(n_points=16, seed=1))
    errors = fd_gradient_errors(net, prepare_pair(pair.X, pair.Y, pair.gt, cfg))
    elapsed = time.perf_counter() - t0
    n_total = len(list(net.parameters()))
    passed = sum(e < 1e-3 for e in errors.values())
    verdict(7, "full-pipeline finite-difference gradients", passed == n_total and elapsed < 300,
            f"{passed}/{n_total} tensors, worst rel err {max(errors.values()):.1e}, {elapsed:.0f} s")


def test_08_pose():
    rng = np.random.default_rng(0)
    r_err = t_err = 0.0
    for k in range(100):
        T = RigidTransform(Rotation.random(random_state=k).as_matrix(), rng.uniform(-1, 1, 3))
        src = rng.normal(size=(20, 3))
        est = kabsch(src, T.apply(src))
        r_err = max(r_err, rotation_angle_error(est.rotation, T.rotation))
        t_err = max(t_err, float(np.abs(est.translation - T.translation).max()))
    ok = 0
    for seed in range(100):
        X, Y, T, corr = outlier_problem(seed, noise=0.002)
        res = ransac_register(corr, X, Y, RansacConfig(seed=seed))
        ok += (rotation_angle_error(res.transform.rotation, T.rotation) < 0.5
               and np.linalg.norm(res.transform.translation - T.translation) < 0.005)
    verdict(8, "Kabsch exact recovery; RANSAC under 50% outliers",
            r_err < 1e-8 and t_err < 1e-10 and ok >= 99,
            f"kabsch {r_err:.1e} deg / {t_err:.1e} m, RANSAC {ok}/100 trials")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    assert main(["gen", "--preset", "toy", "--seed", "0", "--out", str(base / "train")]) == 0
    assert main(["gen", "--preset", "toy", "--seed", "1", "--count", "50", "--out", str(base / "test")]) == 0
    assert main(["train", "--preset", "toy", "--seed", "0", "--manifest", str(base / "train" / "manifest.jsonl"),
                 "--out", str(base / "run")]) == 0
    return base, time.perf_counter() - t0


def evaluate(base, name, *extra):
    report = base / f"{name}.json"
    code = main(["eval", "--manifest", str(base / "test" / "manifest.jsonl"),
                 "--checkpoint", str(base / "run" / "last.params"), "--report", str(report), *extra])
    assert code == 0
    return json.loads(report.read_text())


def test_09_end_to_end(trained):
    base, elapsed = trained
    log = [json.loads(line) for line in (base / "run" / "train.log").read_text().splitlines()]
    rec = evaluate(base, "ransac")
    ok = rec["F1"] > 90 and rec["MAE_R_deg"] < 2 and rec["MAE_t_m"] < 0.01
    verdict(9, "desk-scale training and registration", ok,
            f"val F1 {log[-1]['f1']:.2f}%, test F1 {rec['F1']:.2f}%, MAE(R) {rec['MAE_R_deg']:.4g} deg, "
            f"MAE(t) {rec['MAE_t_m']:.3g} m, {len(log) - 1} epochs, {elapsed / 60:.1f} min")


def test_10_ablation_directions(trained):
    base, _ = trained
    full = evaluate(base, "full")
    no_normals = evaluate(base, "no_normals", "--ablate", "no-normals")
    ransac = evaluate(base, "ransac_out", "--outliers", "0.2", "--estimator", "ransac")
    svd = evaluate(base, "svd_out", "--outliers", "0.2", "--estimator", "svd")
    ok = no_normals["F1"] < full["F1"] and ransac["RMSE_R_deg"] <= svd["RMSE_R_deg"]
    verdict(10, "ablation directions", ok,
            f"F1 {full['F1']:.2f}% -> {no_normals['F1']:.2f}% without normals; with 20% outliers "
            f"RMSE(R) RANSAC {ransac['RMSE_R_deg']:.4g} vs SVD {svd['RMSE_R_deg']:.4g} deg")


def test_11_reproducibility(tmp_path):
    outputs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["gen", "--preset", "toy", "--count", "10", "--seed", "5", "--out", str(d / "data")]) == 0
        assert main(["train", "--preset", "toy", "--seed", "5", "--epochs", "2",
                     "--manifest", str(d / "data" / "manifest.jsonl"), "--out", str(d / "run")]) == 0
        assert main(["eval", "--manifest", str(d / "data" / "manifest.jsonl"), "--checkpoint",
                     str(d / "run" / "last.params"), "--seed", "5", "--report", str(d / "eval.json")]) == 0
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append({p.relative_to(d): p.read_bytes() for p in files})
    same = outputs[0] == outputs[1]
    verdict(11, "bitwise reproducible data, checkpoints and logs", same,
            f"{len(outputs[0])} files compared")
