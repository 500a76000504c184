"""Command-line entry point: ``cctransfer <group> <command> [flags]``.

Errors print a single ``error: <kind>: <detail>`` line on stderr and exit
with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, hog, jigsaw, kmeans, nnet, permset, transfer
from .rng import Rng

FMT = argparse.ArgumentDefaultsHelpFormatter


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _threads(args) -> int:
    return args.threads if args.threads else kmeans.default_threads()


def _features(path, l2: bool = False) -> np.ndarray:
    X = dataio.read_features(path).data
    return kmeans.l2_normalize(X) if l2 else X


# ------------------------------------------------------------------ data

def cmd_data_pool(args):
    fm = dataio.read_feature_map(args.input)
    dataio.write_features(dataio.adaptive_max_pool(fm, args.out_h, args.out_w), args.out)


def cmd_data_convert(args):
    src, dst = Path(args.input), Path(args.out)
    if src.suffix == ".npy":
        arr = np.load(src)
    elif src.suffix in (".csv", ".txt"):
        arr = np.loadtxt(src, delimiter=",", ndmin=2)
    else:
        arr = dataio.read_features(src).data
    if dst.suffix == ".npy":
        np.save(dst, np.asarray(arr, dtype=np.float64))
    elif dst.suffix in (".csv", ".txt"):
        np.savetxt(dst, arr, delimiter=",", fmt="%.9g")
    else:
        dataio.write_features(dataio.FeatureMatrix(arr), dst)


# --------------------------------------------------------------- cluster

def cmd_cluster_fit(args):
    X = _features(args.features, args.l2_normalize)
    cfg = kmeans.KMeansConfig(k=args.k, max_iters=args.max_iters, tol=args.tol, seed=args.seed,
                              n_init=args.n_init)
    cb = kmeans.lloyd_fit(X, cfg, Rng(args.seed), threads=_threads(args))
    kmeans.write_codebook(cb, args.out)
    if args.report:
        _write_json({"k": cb.k, "n_dims": cb.n_dims, "inertia": cb.inertia, "n_iters_run": cb.n_iters_run,
                     "converged": cb.converged, "inertia_history": list(cb.inertia_history)}, args.report)


def cmd_cluster_assign(args):
    X = _features(args.features, args.l2_normalize)
    cb = kmeans.read_codebook(args.codebook)
    dataio.write_labels(kmeans.assign(X, cb, threads=_threads(args)), args.out)


def cmd_cluster_nearest(args):
    X = _features(args.features, args.l2_normalize)
    cb = kmeans.read_codebook(args.codebook)
    hits = kmeans.nearest_to_center(X, cb, args.cluster, args.m)
    _write_json({"cluster": args.cluster, "nearest": [{"sample": i, "sq_distance": d} for i, d in hits]},
                args.out)


# --------------------------------------------------------------- permset

def cmd_permset_generate(args):
    ps = permset.generate(args.tiles, args.size, args.min_hamming, args.seed)
    permset.save(ps, args.out)


def cmd_permset_verify(args):
    report = permset.verify(permset.load(args.file))
    print(report)
    if args.json:
        _write_json(report.as_dict(), args.json)
    if args.expect_min is not None and report.min_hamming_observed < args.expect_min:
        raise ValueError(f"min Hamming {report.min_hamming_observed} below required {args.expect_min}")


# ---------------------------------------------------------------- jigsaw

def cmd_jigsaw_gen(args):
    m = dataio.load_manifest(args.manifest)
    if not m["images_dir"]:
        raise ValueError(f"{args.manifest}: manifest has no images_dir")
    images = jigsaw.load_images(m["images_dir"])
    ps = permset.load(args.permset)
    cfg = jigsaw.PuzzleConfig(grid=args.grid, crop_size=args.crop, tile_size=args.tile,
                              max_occluders=args.max_occ, grayscale_prob=args.gray_prob, seed=args.seed)
    stats = {"count": 0, "gray": 0, "occluders": [0] * (cfg.max_occluders + 1)}

    def tally(it):
        for s in it:
            stats["count"] += 1
            stats["gray"] += int(s.is_gray)
            stats["occluders"][s.n_occluders] += 1
            yield s

    jigsaw.emit_shard(tally(jigsaw.iter_samples(images, ps, cfg, args.count, args.seed)), args.out,
                      grid=cfg.grid, tile_size=cfg.tile_size, channels=images[0].channels)
    if args.stats:
        _write_json(stats, args.stats)


# ------------------------------------------------------------------- hog

def _hog_blocks(manifest, cfg):
    m = dataio.load_manifest(manifest)
    if not m["images_dir"]:
        raise ValueError(f"{manifest}: manifest has no images_dir")
    return [hog.hog_descriptor(dataio.read_image_pnm(p), cfg).block_vectors
            for p in dataio.list_images(m["images_dir"])]


def cmd_hog_vocab(args):
    cfg = hog.HogConfig(cell_size=args.cell_size, n_bins=args.bins)
    vocab = hog.build_vocab(_hog_blocks(args.manifest, cfg), k=args.k, seed=args.seed,
                            max_iters=args.max_iters, threads=_threads(args))
    kmeans.write_codebook(vocab, args.out)


def cmd_hog_encode(args):
    cfg = hog.HogConfig(cell_size=args.cell_size, n_bins=args.bins)
    vocab = kmeans.read_codebook(args.vocab)
    dataio.write_features(hog.bow_encode(_hog_blocks(args.manifest, cfg), vocab), args.out)


# ------------------------------------------------------------------- net

def _spec(path) -> nnet.NetSpec:
    return nnet.NetSpec.from_dict(nnet.load_json(path))


def cmd_net_train(args):
    spec = _spec(args.spec)
    tc = nnet.TrainConfig.from_dict(nnet.load_json(args.train_config)) if args.train_config else nnet.TrainConfig()
    tc = nnet.TrainConfig(**{**tc.to_dict(), "seed": args.seed})
    X = dataio.read_features(args.features).data
    if spec.head == "softmax_ce":
        y = dataio.read_labels(args.labels).labels
    else:
        y = dataio.read_features(args.targets).data
    params, history = nnet.train(spec, tc, X, y)
    nnet.save_params(spec, params, args.out)
    if args.history:
        _write_json(history, args.history)


def cmd_net_eval(args):
    spec = _spec(args.spec)
    params = nnet.load_params(args.params)
    X = dataio.read_features(args.features).data
    y = dataio.read_labels(args.labels).labels
    _write_json({"accuracy": nnet.evaluate(spec, params, X, y), "n_samples": int(len(y))}, args.out)


def cmd_net_gradcheck(args):
    spec = _spec(args.spec)
    rng = np.random.default_rng(args.seed)
    params = nnet.init_params(spec, args.seed)
    for b in params.biases:
        if b is not None:
            b[:] = rng.normal(scale=0.5, size=b.shape)
    X = rng.normal(size=(args.batch, spec.input_dim))
    if spec.head == "softmax_ce":
        y = rng.integers(0, spec.n_outputs, size=args.batch)
    else:
        y = rng.normal(size=(args.batch, spec.n_outputs))
    err = nnet.gradcheck(spec, params, X, y, h=args.h)
    _write_json({"max_relative_error": err, "h": args.h, "pass": err < args.tol}, None)
    if err >= args.tol:
        raise ValueError(f"gradient check failed: {err:.3e} >= {args.tol:.1e}")


# -------------------------------------------------------------- transfer

def _pipeline_config(args, **overrides) -> transfer.PipelineConfig:
    path = Path(args.config)
    d = json.loads(path.read_text())
    d["seed"] = args.seed
    d.setdefault("train", {})["seed"] = args.seed
    d["threads"] = _threads(args)
    for key in ("mode", "k"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    d.update(overrides)
    return transfer.config_from_dict(d, base_dir=path.parent)


def cmd_transfer_run(args):
    report = transfer.run_pipeline(_pipeline_config(args))
    Path(args.out).write_text(report.to_json(timings=args.timings))


def cmd_transfer_sweep_k(args):
    ks = [int(v) for v in args.k_list.split(",") if v.strip()]
    reports = transfer.sweep_k(_pipeline_config(args), ks)
    table = transfer.k_table(reports) if reports else "(no k values)"
    print(table)
    _write_json({"table": table, "reports": [r.to_dict(args.timings) for r in reports]}, args.out)


def cmd_transfer_sweep_domain(args):
    cfg = _pipeline_config(args)
    pairs = []
    for spec in args.pairs:
        a, _, b = spec.partition(":")
        if not b:
            raise ValueError(f"pair {spec!r} must look like CLUSTER_MANIFEST:PSEUDO_MANIFEST")
        pairs.append((transfer.Dataset.from_manifest(a), transfer.Dataset.from_manifest(b)))
    reports = transfer.sweep_domain(cfg, pairs)
    table = transfer.domain_table(reports) if reports else "(no pairs)"
    print(table)
    _write_json({"table": table, "reports": [r.to_dict(args.timings) for r in reports]}, args.out)


def cmd_transfer_synth_blobs(args):
    spec = transfer.BlobSpec(classes=args.classes, per_class=args.per_class, dim=args.dim, sep=args.sep,
                             noise_dims=args.noise_dims, noise_std=args.noise_std)
    manifest = transfer.write_blobs(spec, args.seed, args.out_prefix)
    print(manifest)


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cctransfer", formatter_class=FMT,
                                description="Cluster-based knowledge transfer toolkit.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $CT_THREADS or CPU count); never changes results")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    groups = p.add_subparsers(dest="group", required=True, metavar="GROUP")

    def group(name, help_):
        g = groups.add_parser(name, help=help_, formatter_class=FMT)
        return g.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(sub, name, fn, help_):
        c = sub.add_parser(name, help=help_, formatter_class=FMT)
        c.set_defaults(func=fn)
        return c

    data = group("data", "feature files and pooling")
    c = cmd(data, "pool", cmd_data_pool, "adaptive max-pool a FMP1 feature map to a FVE1 matrix")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out-h", type=int, default=5)
    c.add_argument("--out-w", type=int, default=5)
    c.add_argument("--out", required=True)
    c = cmd(data, "convert", cmd_data_convert, "convert between .npy, .csv and FVE1 by file extension")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)

    cl = group("cluster", "k-means")
    c = cmd(cl, "fit", cmd_cluster_fit, "fit a codebook")
    c.add_argument("--features", required=True)
    c.add_argument("--k", type=int, default=2000)
    c.add_argument("--max-iters", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--n-init", type=int, default=1)
    c.add_argument("--l2-normalize", action="store_true")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", default=None, help="optional JSON fit report")
    c = cmd(cl, "assign", cmd_cluster_assign, "pseudo-label features with a codebook")
    c.add_argument("--features", required=True)
    c.add_argument("--codebook", required=True)
    c.add_argument("--l2-normalize", action="store_true")
    c.add_argument("--out", required=True)
    c = cmd(cl, "nearest", cmd_cluster_nearest, "samples closest to one center")
    c.add_argument("--features", required=True)
    c.add_argument("--codebook", required=True)
    c.add_argument("--cluster", type=int, required=True)
    c.add_argument("--m", type=int, default=11)
    c.add_argument("--l2-normalize", action="store_true")
    c.add_argument("--out", default=None)

    pm = group("permset", "permutation sets")
    c = cmd(pm, "generate", cmd_permset_generate, "greedy Hamming-constrained permutation set")
    c.add_argument("--tiles", type=int, default=9)
    c.add_argument("--size", type=int, default=701)
    c.add_argument("--min-hamming", type=int, default=3)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c = cmd(pm, "verify", cmd_permset_verify, "exhaustive pairwise check")
    c.add_argument("file")
    c.add_argument("--expect-min", type=int, default=None)
    c.add_argument("--json", default=None)

    jg = group("jigsaw", "occluded jigsaw samples")
    c = cmd(jg, "gen", cmd_jigsaw_gen, "generate a JPP1 shard")
    c.add_argument("--manifest", required=True)
    c.add_argument("--permset", required=True)
    c.add_argument("--count", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--grid", type=int, default=3)
    c.add_argument("--crop", type=int, default=225)
    c.add_argument("--tile", type=int, default=64)
    c.add_argument("--max-occ", type=int, default=2)
    c.add_argument("--gray-prob", type=float, default=0.7)
    c.add_argument("--stats", default=None, help="optional JSON with gray/occluder counts")

    hg = group("hog", "HOG bag of words")
    for name, fn, help_ in (("vocab", cmd_hog_vocab, "k-means vocabulary over HOG block vectors"),
                            ("encode", cmd_hog_encode, "per-image visual-word histograms")):
        c = cmd(hg, name, fn, help_)
        c.add_argument("--manifest", required=True)
        c.add_argument("--cell-size", type=int, default=8)
        c.add_argument("--bins", type=int, default=9)
        c.add_argument("--out", required=True)
        if name == "vocab":
            c.add_argument("--k", type=int, default=64)
            c.add_argument("--max-iters", type=int, default=100)
            c.add_argument("--seed", type=int, required=True)
        else:
            c.add_argument("--vocab", required=True)

    nt = group("net", "small networks")
    c = cmd(nt, "train", cmd_net_train, "train a network")
    c.add_argument("--spec", required=True, help="NetSpec JSON")
    c.add_argument("--train-config", default=None, help="TrainConfig JSON")
    c.add_argument("--features", required=True)
    c.add_argument("--labels", default=None, help="LBL1 targets (softmax_ce head)")
    c.add_argument("--targets", default=None, help="FVE1 targets (l2 head)")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--history", default=None)
    c = cmd(nt, "eval", cmd_net_eval, "classification accuracy")
    c.add_argument("--spec", required=True)
    c.add_argument("--params", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--labels", required=True)
    c.add_argument("--out", default=None)
    c = cmd(nt, "gradcheck", cmd_net_gradcheck, "finite-difference gradient check on a random net")
    c.add_argument("--spec", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--batch", type=int, default=8)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-6)

    tr = group("transfer", "knowledge-transfer pipeline")
    for name, fn, help_ in (("run", cmd_transfer_run, "one pipeline run"),
                            ("sweep-k", cmd_transfer_sweep_k, "cluster-count sweep"),
                            ("sweep-domain", cmd_transfer_sweep_domain, "cluster/pseudo-label domain sweep")):
        c = cmd(tr, name, fn, help_)
        c.add_argument("--config", required=True, help="PipelineConfig JSON")
        c.add_argument("--seed", type=int, required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--timings", action="store_true", help="include wall-clock times in the report")
        if name == "run":
            c.add_argument("--mode", choices=transfer.MODES, default=None)
            c.add_argument("--k", type=int, default=None)
        elif name == "sweep-k":
            c.add_argument("--k-list", default="5,10,20,50")
        else:
            c.add_argument("--pairs", nargs="+", required=True, help="CLUSTER_MANIFEST:PSEUDO_MANIFEST ...")
    c = cmd(tr, "synth-blobs", cmd_transfer_synth_blobs, "synthetic blob dataset + manifest")
    c.add_argument("--classes", type=int, default=10)
    c.add_argument("--per-class", type=int, default=200)
    c.add_argument("--dim", type=int, default=16)
    c.add_argument("--sep", type=float, default=10.0)
    c.add_argument("--noise-dims", type=int, default=48)
    c.add_argument("--noise-std", type=float, default=3.0)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out-prefix", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line report is the contract
        detail = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {detail}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
