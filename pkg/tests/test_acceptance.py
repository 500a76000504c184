"""Exit criteria, one test per criterion, each printing a PASS/FAIL line."""

import hashlib
import json
import time

import numpy as np
import pytest

from cctransfer import cli, hog, jigsaw, kmeans, nnet, permset, transfer
from cctransfer.dataio import RawImage
from cctransfer.kmeans import Codebook, KMeansConfig
from cctransfer.nnet import NetSpec
from cctransfer.rng import Rng
from cctransfer.transfer import BlobSpec, Dataset, PipelineConfig

from conftest import ACCEPTANCE_LINES
from test_hog import oracle_cell_hist
from test_kmeans import brute_assign

SEEDS = range(5)
REFERENCE_MEAN_HAMMING = 0.86


def verdict(num, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"command failed: {argv}"


# ---------------------------------------------------------------- 1

def test_criterion_01_permutation_set(tmp_path, capsys):
    rows = []
    for seed in SEEDS:
        out = tmp_path / f"p{seed}.txt"
        t0 = time.perf_counter()
        run("permset", "generate", "--tiles", 9, "--size", 701, "--min-hamming", 3, "--seed", seed, "--out", out)
        run("permset", "verify", out, "--json", tmp_path / f"v{seed}.json")
        dt = time.perf_counter() - t0
        rep = json.loads((tmp_path / f"v{seed}.json").read_text())
        rows.append((seed, rep["size"], rep["min_hamming_observed"], rep["mean_normalized_hamming"], dt))
    ok = all(size == 701 and mn >= 3 and dt < 10 for _, size, mn, _, dt in rows)
    means = [m for *_, m, _ in rows]
    verdict(1, ok, f"5 seeds, size=701, min Hamming={min(r[2] for r in rows)}, "
                   f"max time {max(r[4] for r in rows):.2f}s; mean normalized Hamming "
                   f"{min(means):.3f}-{max(means):.3f} (diagnostic, reference {REFERENCE_MEAN_HAMMING})")


# ---------------------------------------------------------------- 2

def test_criterion_02_unique_solution():
    ps = permset.generate(9, 701, 3, seed=0)
    rng = Rng(2024)
    violations = 0
    for _ in range(1000):
        hidden = rng.sample(9, 2)
        violations += permset.ambiguous_pairs(ps.perms, hidden)
    verdict(2, violations == 0, f"1000 random 2-position masks, {violations} ambiguous pairs")


# ---------------------------------------------------------------- 3

def test_criterion_03_augmentation_stats():
    imgs = [RawImage.from_array(np.random.default_rng(i).integers(0, 256, (256, 256, 3), dtype=np.uint8))
            for i in range(6)]
    ps = permset.generate(9, 701, 3, seed=0)
    t0 = time.perf_counter()
    gray, counts, n = 0, [0, 0, 0], 10_000
    for s in jigsaw.iter_samples(imgs, ps, jigsaw.PuzzleConfig(), n, seed=31):
        gray += s.is_gray
        counts[s.n_occluders] += 1
    dt = time.perf_counter() - t0
    g = gray / n
    freq = [c / n for c in counts]
    ok = 0.68 <= g <= 0.72 and all(0.313 <= f <= 0.353 for f in freq) and dt < 60
    verdict(3, ok, f"gray fraction {g:.4f}, occluder freqs {[round(f, 4) for f in freq]}, {dt:.1f}s")


# ---------------------------------------------------------------- 4

def test_criterion_04_kmeans():
    monotone = True
    for i in range(100):
        r = np.random.default_rng(i)
        n, d, k = int(r.integers(10, 120)), int(r.integers(1, 8)), int(r.integers(1, 8))
        cb = kmeans.lloyd_fit(r.normal(size=(n, d)), KMeansConfig(k=k, tol=0.0, seed=i), Rng(i))
        h = cb.inertia_history
        monotone &= all(b <= a for a, b in zip(h, h[1:]))

    exact = True
    for i in range(20):
        r = np.random.default_rng(1000 + i)
        n, d, k = int(r.integers(1, 201)), int(r.integers(1, 9)), int(r.integers(1, 6))
        X, C = r.normal(size=(n, d)), r.normal(size=(k, d))
        exact &= np.array_equal(kmeans.assign(X, Codebook(C, 0.0, 0, True, ())).labels, brute_assign(X, C))
        if n >= k:
            cb = kmeans.lloyd_fit(X, KMeansConfig(k=k, seed=i), Rng(i))
            exact &= np.array_equal(kmeans.assign(X, cb).labels, brute_assign(X, cb.centers))

    cb = kmeans.lloyd_fit(np.array([[0.0], [1.0], [10.0], [11.0]]), KMeansConfig(k=2), Rng(0))
    optimum = cb.inertia == 1.0

    X = np.random.default_rng(7).normal(size=(5000, 16))
    cfg = KMeansConfig(k=20, seed=3)
    a = kmeans.lloyd_fit(X, cfg, Rng(3), threads=1)
    b = kmeans.lloyd_fit(X, cfg, Rng(3), threads=8)
    same = (a.centers.tobytes() == b.centers.tobytes() and a.inertia == b.inertia
            and kmeans.assign(X, a, 1).labels.tobytes() == kmeans.assign(X, a, 8).labels.tobytes())
    verdict(4, monotone and exact and optimum and same,
            f"(a) monotone on 100 instances: {monotone}; (b) exact brute-force assign: {exact}; "
            f"(c) inertia {cb.inertia}; (d) 1 vs 8 threads bit-identical: {same}")


# ---------------------------------------------------------------- 5

def random_net(i):
    r = np.random.default_rng(i)
    head = "softmax_ce" if i % 2 == 0 else "l2"
    n_out = int(r.integers(2, 5))
    if i % 4 < 2:
        spec = NetSpec.mlp(int(r.integers(2, 7)), (int(r.integers(2, 8)),), n_out, head)
    else:
        c, s = int(r.integers(1, 3)), int(r.integers(5, 8))
        spec = NetSpec((c, s, s), (
            {"type": "conv2d", "out_ch": int(r.integers(1, 4)), "kernel": 3, "stride": int(r.integers(1, 3))},
            {"type": "relu"}, {"type": "flatten"},
            {"type": "dense", "out": int(r.integers(2, 6))}, {"type": "relu"},
            {"type": "dense", "out": n_out}), head)
    params = nnet.init_params(spec, i)
    for b in params.biases:
        if b is not None:
            b[:] = r.normal(scale=0.5, size=b.shape)
    batch = int(r.integers(2, 6))
    X = r.normal(size=(batch, spec.input_dim))
    y = r.integers(0, n_out, batch) if head == "softmax_ce" else r.normal(size=(batch, n_out))
    return spec, params, X, y


def test_criterion_05_gradcheck():
    t0 = time.perf_counter()
    errs, kinds, heads = [], set(), set()
    for i in range(20):
        spec, params, X, y = random_net(i)
        errs.append(nnet.gradcheck(spec, params, X, y, h=1e-5))
        kinds |= {layer["type"] for layer in spec.layers}
        heads.add(spec.head)
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and kinds == {"dense", "relu", "conv2d", "flatten"} and len(heads) == 2 and dt < 30
    verdict(5, ok, f"20 nets, layers {sorted(kinds)}, heads {sorted(heads)}, "
                   f"max relative error {max(errs):.2e}, {dt:.1f}s")


# ------------------------------------------------------------ 6 and 7

@pytest.fixture(scope="module")
def blob_runs(tmp_path_factory):
    """cluster_transfer and random_control reports via the CLI, one blob set per seed."""
    root = tmp_path_factory.mktemp("blobs")
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        run("transfer", "synth-blobs", "--classes", 10, "--per-class", 200, "--dim", 16, "--sep", 10,
            "--seed", seed, "--out-prefix", root / f"b{seed}")
        for mode in ("cluster_transfer", "random_control"):
            cfg = root / f"cfg{seed}.json"
            cfg.write_text(json.dumps({"cluster_dataset": f"b{seed}.manifest.json", "k": 10}))
            rep = root / f"{mode}{seed}.json"
            run("transfer", "run", "--config", cfg, "--mode", mode, "--seed", seed, "--out", rep)
            out[mode, seed] = json.loads(rep.read_text())
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_criterion_06_end_to_end(blob_runs):
    rows = [blob_runs["cluster_transfer", s] for s in SEEDS]
    nmis = [r["nmi_vs_truth"] for r in rows]
    gaps = [abs(r["student_probe_acc"] - r["supervised_probe_acc"]) for r in rows]
    ok = min(nmis) >= 0.95 and max(gaps) <= 0.05 and blob_runs["elapsed"] < 300
    verdict(6, ok, f"5 seeds, min NMI {min(nmis):.3f}, max |probe - supervised| {100 * max(gaps):.1f} pts, "
                   f"probe {[round(r['student_probe_acc'], 3) for r in rows]}, "
                   f"{blob_runs['elapsed']:.0f}s for both modes")


def test_criterion_07_random_control(blob_runs):
    ctrl = [blob_runs["random_control", s] for s in SEEDS]
    main = [blob_runs["cluster_transfer", s] for s in SEEDS]
    gaps = [abs(c["student_probe_acc"] - c["untrained_probe_acc"]) for c in ctrl]
    leads = [m["student_probe_acc"] - c["student_probe_acc"] for m, c in zip(main, ctrl)]
    ok = max(gaps) <= 0.05 and min(leads) >= 0.20
    verdict(7, ok, f"max |control - untrained| {100 * max(gaps):.1f} pts, "
                   f"min lead of cluster_transfer {100 * min(leads):.1f} pts")


# ---------------------------------------------------------------- 8

def test_criterion_08_k_sweep(tmp_path, capsys):
    run("transfer", "synth-blobs", "--classes", 5, "--per-class", 400, "--dim", 16, "--sep", 10,
        "--seed", 0, "--out-prefix", tmp_path / "five")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"cluster_dataset": "five.manifest.json", "baselines": False}))
    capsys.readouterr()
    run("transfer", "sweep-k", "--config", cfg, "--seed", 0, "--k-list", "5,10,20,50", "--out", tmp_path / "k.json")
    table = capsys.readouterr().out
    accs = [r["student_probe_acc"] for r in json.loads((tmp_path / "k.json").read_text())["reports"]]
    spread = max(accs) - min(accs)
    header = table.splitlines()[0].split()
    ok = spread < 0.03 and header == ["#clusters", "5", "10", "20", "50"]
    print(table)
    verdict(8, ok, f"probe accuracy {[round(100 * a, 1) for a in accs]} across k=5,10,20,50, "
                   f"spread {100 * spread:.1f} pts; table header {header}")


# ---------------------------------------------------------------- 9

def test_criterion_09_cross_domain():
    drops = []
    for seed in SEEDS:
        a = Dataset.from_blobs(BlobSpec(), seed, name=f"A{seed}")
        b = Dataset.from_blobs(BlobSpec(), seed + 100, name=f"B{seed}")
        cfg = PipelineConfig(b, b, k=10, seed=seed, baselines=False)
        same, cross = transfer.sweep_domain(cfg, [(b, b), (a, b)])
        drops.append(same.student_probe_acc - cross.student_probe_acc)
    verdict(9, max(drops) <= 0.05, f"probe drop cluster-on-A vs cluster-on-B, pseudo-labels on B: "
                                   f"max {100 * max(drops):.1f} pts over 5 seeds")


# ---------------------------------------------------------------- 10

def test_criterion_10_hog_oracle():
    cfg = hog.HogConfig()
    worst = 0.0
    for i in range(100):
        patch = np.random.default_rng(i).integers(0, 256, (8, 8)).astype(float)
        got = hog.cell_histograms(patch, cfg)[0, 0]
        worst = max(worst, float(np.max(np.abs(got - oracle_cell_hist(patch, cfg)))))
    const = hog.hog_array(np.full((64, 64), 42.0), cfg).vector
    ok = worst <= 1e-12 and np.all(const == 0)
    verdict(10, ok, f"100 patches, max |hist - oracle| {worst:.1e}; constant image all-zero: {bool(np.all(const == 0))}")


# ---------------------------------------------------------------- 11

def artifacts(root):
    root.mkdir()
    run("permset", "generate", "--size", 701, "--seed", 3, "--out", root / "p.txt")
    imgs = root / "imgs"
    imgs.mkdir()
    from cctransfer.dataio import write_image_pnm
    for i in range(3):
        arr = np.random.default_rng(i).integers(0, 256, (240, 240, 3), dtype=np.uint8)
        write_image_pnm(RawImage.from_array(arr), imgs / f"{i}.ppm")
    (root / "imgs.json").write_text(json.dumps({"images_dir": "imgs"}))
    run("jigsaw", "gen", "--manifest", root / "imgs.json", "--permset", root / "p.txt", "--count", 20,
        "--seed", 3, "--out", root / "s.jpp")
    run("hog", "vocab", "--manifest", root / "imgs.json", "--k", 8, "--seed", 3, "--out", root / "v.cbk")
    run("hog", "encode", "--manifest", root / "imgs.json", "--vocab", root / "v.cbk", "--out", root / "h.fve")
    run("transfer", "synth-blobs", "--seed", 3, "--out-prefix", root / "b")
    run("cluster", "fit", "--features", root / "b.features.fve", "--k", 10, "--seed", 3, "--out", root / "c.cbk")
    run("cluster", "assign", "--features", root / "b.features.fve", "--codebook", root / "c.cbk",
        "--out", root / "l.lbl")
    (root / "cfg.json").write_text(json.dumps({"cluster_dataset": "b.manifest.json", "k": 10}))
    run("transfer", "run", "--config", root / "cfg.json", "--seed", 3, "--out", root / "r.json")
    (root / "spec.json").write_text(json.dumps(NetSpec.mlp(64, (16,), 10).to_dict()))
    run("net", "train", "--spec", root / "spec.json", "--features", root / "b.inputs.fve",
        "--labels", root / "l.lbl", "--seed", 3, "--out", root / "n.npk")
    return {p.relative_to(root).as_posix(): sha(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(tmp_path):
    first = artifacts(tmp_path / "one")
    second = artifacts(tmp_path / "two")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = first.keys() == second.keys() and not differing
    verdict(11, ok, f"{len(first)} artifact files hashed twice, {len(differing)} differ {differing}")
