"""Command-line front end: train, infer, sample, eval, export-latent.

Exit codes: 0 success, 1 training diverged, 2 usage or data error.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dgd import autodiff as ad
from dgd.checkpoint import ModelBundle, load_checkpoint, save_checkpoint
from dgd.data import SplitSpec, load_dense_csv, load_mtx, split
from dgd.errors import DGDError, DataError, TrainingDivergedError
from dgd.gmm import component_posteriors, gmm_sample
from dgd.metrics import evaluate, format_report, write_report_csv
from dgd.training import TrainConfig, Trainer, hard_cluster, infer_representations

log = logging.getLogger("dgd")

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2
SPLITS = ("train", "val", "test")
HISTORY_COLUMNS = ("epoch", "total_loss", "recon_loss", "gmm_loss")


class UsageError(DGDError):
    pass


# ---------------------------------------------------------------- helpers

def _csv_floats(text):
    return tuple(float(v) for v in text.split(","))


def _csv_ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _resolve_checkpoint(path):
    """Accept either a checkpoint directory or a run directory holding one."""
    path = Path(path)
    if (path / "checkpoint" / "manifest.json").exists():
        return path / "checkpoint", path
    return path, path.parent


def load_dataset(run):
    """Dataset from the data fields of a run configuration dict."""
    if run["profile"] == "counts":
        if not run.get("mtx"):
            raise UsageError("the counts profile needs --mtx")
        return load_mtx(run["mtx"], run.get("genes"), run.get("labels"),
                        run.get("orientation", "auto"))
    if not run.get("csv"):
        raise UsageError("the binary profile needs --csv")
    return load_dense_csv(run["csv"], run.get("rescale_255", False), run.get("labels"))


def _align_features(dataset, bundle):
    """Apply the model's feature mask so new data lines up with its outputs."""
    if bundle.profile != dataset.profile:
        raise UsageError(f"data profile {dataset.profile!r} does not match model "
                         f"profile {bundle.profile!r}")
    if bundle.profile == "counts" and bundle.feature_mask is not None:
        if dataset.n_genes != bundle.feature_mask.size:
            raise DataError(f"data has {dataset.n_genes} genes, model expects "
                            f"{bundle.feature_mask.size}")
        dataset = dataset.with_mask(bundle.feature_mask)
    if dataset.n_features != bundle.decoder.n_out:
        raise DataError(f"data has {dataset.n_features} features, model expects "
                        f"{bundle.decoder.n_out}")
    return dataset


def _feature_names(bundle, n):
    names = bundle.config.get("feature_names")
    if names and len(names) == n:
        return list(names)
    return [f"f_{j + 1}" for j in range(n)]


# ---------------------------------------------------------------- train

TRAIN_FLAGS = {
    # flag dest -> TrainConfig field
    "epochs": "epochs", "batch_size": "batch_size", "latent_dim": "latent_dim",
    "hidden": "hidden", "activation": "hidden_activation", "lr_decoder": "lr_decoder",
    "lr_representation": "lr_representation", "lr_gmm": "lr_gmm", "betas": "betas",
    "weight_decay": "weight_decay", "scale": "scale", "sharpness": "sharpness",
    "alpha": "dirichlet_alpha", "sigma_init": "sigma_init",
    "logvar_prior_sd": "logvar_prior_sd", "prior_weight": "prior_weight",
    "lr_milestone": "lr_milestone", "lr_milestone_factor": "lr_milestone_factor",
}


def build_run_config(args):
    """Merge an optional saved config.json with explicit flags."""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            run = json.load(fh)
    else:
        run = {"profile": args.profile or "counts", "train": {}}
    for key in ("mtx", "genes", "labels", "csv", "orientation", "rmse_space", "n_starts",
                "k"):
        val = getattr(args, key)
        if val is not None:
            run[key] = val
    if args.profile:
        run["profile"] = args.profile
    if args.rescale_255:
        run["rescale_255"] = True
    if args.seed is not None:
        run["seed"] = args.seed
    if args.split is not None:
        run["split"] = list(args.split)
    if args.supervised:
        run["supervised"] = True
    run.setdefault("orientation", "auto")
    run.setdefault("rmse_space", "normalized")
    run.setdefault("n_starts", 1)
    run.setdefault("seed", 0)
    run.setdefault("split", [0.8, 0.1, 0.1])
    run.setdefault("supervised", False)
    run.setdefault("rescale_255", False)
    overrides = dict(run.get("train", {}))
    for dest, name in TRAIN_FLAGS.items():
        val = getattr(args, dest)
        if val is not None:
            overrides[name] = list(val) if isinstance(val, tuple) else val
    run["train"] = overrides
    return run


def _train_config(run, dataset):
    k = run.get("k")
    if k is None or k == "auto":
        if dataset.labels is None:
            if k == "auto":
                raise UsageError("--k auto needs --labels")
            raise UsageError("--k is required when no labels are given")
        n_components = len(dataset.label_names)
    else:
        n_components = int(k)
    params = dict(run["train"])
    params.update(profile=run["profile"], n_components=n_components, seed=run["seed"],
                  supervised=run["supervised"])
    if run["profile"] == "binary":
        return TrainConfig.binary_defaults(**params)
    return TrainConfig.counts_defaults(**params)


def cmd_train(args):
    run = build_run_config(args)
    out = Path(args.out)
    dataset = load_dataset(run)
    cfg = _train_config(run, dataset)
    if cfg.supervised and dataset.labels is None:
        raise UsageError("--supervised needs --labels")
    run["train"] = {k: v for k, v in cfg.to_dict().items()
                    if k not in ("profile", "n_components", "seed", "supervised")}
    run["n_components"] = cfg.n_components
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")

    rng = np.random.default_rng(cfg.seed)
    parts = split(dataset.n_samples, SplitSpec(*run["split"]), rng)
    with open(out / "split.json", "w", encoding="utf-8") as fh:
        json.dump(dict(zip(SPLITS, (p.tolist() for p in parts))), fh)
        fh.write("\n")
    if parts[0].size == 0:
        raise DataError("training split is empty")
    train_ds = dataset.subset(parts[0])

    trainer = Trainer(train_ds, cfg, rng)
    t0 = time.perf_counter()
    timing = []

    def progress(rec):
        timing.append((rec["epoch"], rec["wall_time_s"]))
        if not args.quiet and (rec["epoch"] + 1) % max(1, cfg.epochs // 20) == 0:
            print(f"epoch {rec['epoch'] + 1}/{cfg.epochs} loss {rec['total_loss']:.4f}",
                  file=sys.stderr)

    try:
        trainer.fit(callback=progress)
    finally:
        _write_rows(out / "history.csv", HISTORY_COLUMNS,
                    ([r[c] for c in HISTORY_COLUMNS] for r in trainer.history))
        _write_rows(out / "timing.csv", ("epoch", "wall_time_s"), timing)
    seconds = time.perf_counter() - t0

    bundle = _bundle(trainer, train_ds, dataset, cfg)
    save_checkpoint(bundle, out / "checkpoint")
    row = evaluate(bundle, train_ds, trainer.reps.values, split_name="train",
                   rmse_space=run["rmse_space"], seconds=seconds)
    write_report_csv([row], out / "report_train.csv")
    if not args.quiet:
        print(format_report([row]), end="")
    return EXIT_OK


def _bundle(trainer, train_ds, dataset, cfg):
    mask = getattr(train_ds, "gene_mask", None)
    names = getattr(dataset, "gene_names", None)
    if names is not None and mask is not None:
        names = [n for n, keep in zip(names, mask) if keep]
    config = cfg.to_dict()
    config["feature_names"] = names
    return ModelBundle(profile=cfg.profile, decoder=trainer.decoder, gmm=trainer.gmm,
                       head=trainer.head, representations=trainer.reps.values.copy(),
                       feature_mask=mask, label_names=dataset.label_names, config=config)


# ---------------------------------------------------------------- infer

def _infer(bundle, dataset, args, rng):
    lr = args.lr if args.lr is not None else bundle.config.get("lr_representation", 1e-2)
    betas = tuple(bundle.config.get("betas", (0.5, 0.7)))
    reps = infer_representations(bundle.decoder, bundle.gmm, dataset, bundle.head,
                                 init=args.init, epochs=args.epochs,
                                 batch_size=args.batch_size, lr=lr, betas=betas,
                                 n_starts=args.n_starts, rng=rng)
    return reps.values


def cmd_infer(args):
    ckpt, _ = _resolve_checkpoint(args.checkpoint)
    bundle = load_checkpoint(ckpt, expect_profile=args.profile)
    run = {"profile": bundle.profile, "mtx": args.mtx, "genes": args.genes,
           "labels": args.labels, "csv": args.csv, "rescale_255": args.rescale_255,
           "orientation": args.orientation or "auto"}
    dataset = _align_features(load_dataset(run), bundle)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    Z = _infer(bundle, dataset, args, rng)
    post = component_posteriors(bundle.gmm, Z)
    clusters = hard_cluster(bundle.gmm, Z)
    m = Z.shape[1]
    header = ["sample_id", *(f"z_{d + 1}" for d in range(m)), "hard_cluster", "max_posterior"]
    rows = ([i, *Z[i], int(clusters[i]), post[i].max()] for i in range(Z.shape[0]))
    _write_rows(args.out, header, rows)
    return EXIT_OK


# ---------------------------------------------------------------- sample

def cmd_sample(args):
    ckpt, _ = _resolve_checkpoint(args.checkpoint)
    bundle = load_checkpoint(ckpt)
    K = bundle.gmm.n_components
    if args.component is not None and not 0 <= args.component < K:
        raise UsageError(f"--component must be in [0, {K}), got {args.component}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    z, comp = gmm_sample(bundle.gmm, args.n, rng, args.component, return_components=True)
    with ad.no_grad():
        decoded = bundle.decoder(z).values
    m = z.shape[1]
    header = ["component", *(f"z_{d + 1}" for d in range(m)),
              *_feature_names(bundle, decoded.shape[1])]
    _write_rows(args.out, header, ([int(comp[i]), *z[i], *decoded[i]] for i in range(args.n)))
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    run_dir = Path(args.run)
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        run = json.load(fh)
    with open(run_dir / "split.json", encoding="utf-8") as fh:
        parts = json.load(fh)
    bundle = load_checkpoint(run_dir / "checkpoint", expect_profile=run["profile"])
    rows = np.asarray(parts[args.split], dtype=np.int64)
    if rows.size == 0:
        raise DataError(f"split {args.split!r} is empty")
    dataset = load_dataset(run).subset(rows)
    dataset = _align_features(dataset, bundle)
    t0 = time.perf_counter()
    if args.split == "train":
        Z = bundle.representations
    else:
        rng = np.random.default_rng(run["seed"])
        Z = _infer(bundle, dataset, args, rng)
    row = evaluate(bundle, dataset, Z, split_name=args.split, rmse_space=run["rmse_space"],
                   seconds=time.perf_counter() - t0)
    out = args.out or run_dir / f"report_{args.split}.csv"
    write_report_csv([row], out)
    if not args.quiet:
        print(format_report([row]), end="")
    return EXIT_OK


# ---------------------------------------------------------------- export

def cmd_export_latent(args):
    ckpt, run_dir = _resolve_checkpoint(args.checkpoint)
    bundle = load_checkpoint(ckpt)
    Z = bundle.representations
    if Z is None:
        raise DataError("checkpoint holds no training representations")
    ids = np.arange(Z.shape[0])
    split_file = run_dir / "split.json"
    if split_file.exists():
        with open(split_file, encoding="utf-8") as fh:
            train_ids = json.load(fh)["train"]
        if len(train_ids) == Z.shape[0]:
            ids = np.asarray(train_ids)
    means = bundle.gmm.means.values
    m = Z.shape[1]
    header = ["kind", "sample_id", *(f"z_{d + 1}" for d in range(m)), "component"]
    clusters = hard_cluster(bundle.gmm, Z)
    rows = [["representation", int(ids[i]), *Z[i], int(clusters[i])] for i in range(Z.shape[0])]
    rows += [["mean", "", *means[k], k] for k in range(means.shape[0])]
    _write_rows(args.out, header, rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_data_args(p):
    p.add_argument("--mtx", help="Matrix Market count file")
    p.add_argument("--genes", help="gene names, one per line")
    p.add_argument("--labels", help="sample labels, one per line")
    p.add_argument("--csv", help="dense CSV for the binary profile")
    p.add_argument("--rescale-255", action="store_true", help="divide CSV values by 255")
    p.add_argument("--orientation", choices=("auto", "samples-rows", "samples-cols"))


def _add_infer_args(p, epochs=10, batch_size=32):
    p.add_argument("--init", choices=("component-means", "zeros"), default="component-means")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--lr", type=float, help="default: the model's representation lr")
    p.add_argument("--n-starts", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="dgd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model")
    _add_data_args(p)
    p.add_argument("--profile", choices=("counts", "binary"))
    p.add_argument("--config", help="rerun from a saved config.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", help="component count or 'auto' (number of distinct labels)")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", type=_csv_floats, help="train,val,test fractions")
    p.add_argument("--supervised", action="store_true")
    p.add_argument("--rmse-space", choices=("normalized", "raw"))
    p.add_argument("--n-starts", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden", type=_csv_ints, help="hidden layer widths, e.g. 100,100,100")
    p.add_argument("--activation", choices=("relu", "sigmoid", "softplus"))
    p.add_argument("--lr-decoder", type=float)
    p.add_argument("--lr-representation", type=float)
    p.add_argument("--lr-gmm", type=float)
    p.add_argument("--betas", type=_csv_floats)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--scale", type=float, help="softball radius")
    p.add_argument("--sharpness", type=float)
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--sigma-init", type=float)
    p.add_argument("--logvar-prior-sd", type=float)
    p.add_argument("--prior-weight", type=float, help="default batch_size / N")
    p.add_argument("--lr-milestone", type=int)
    p.add_argument("--lr-milestone-factor", type=float)
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="fit representations for new samples")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--profile", choices=("counts", "binary"))
    _add_infer_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sample", help="draw latent points and decode them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--component", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metrics report for one split of a training run")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--split", choices=SPLITS, default="test")
    _add_infer_args(p)
    p.add_argument("--out")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latent", help="training representations and mixture means")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latent)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DGD_THREADS", "1")
    try:
        threads = max(1, int(threads))
    except ValueError:
        print(f"dgd: error: DGD_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except TrainingDivergedError as exc:
        print(f"dgd: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DGDError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"dgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
