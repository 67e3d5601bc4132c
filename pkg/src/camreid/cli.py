"""Command-line driver for the three training stages.

Every command works inside a run directory ``<runs_root>/<name>`` laid out as
``config/ logs/ checkpoints/ metrics/`` (plus ``data/`` for the synthetic benchmark).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .data import Dataset, SynthConfig, load_manifest, make_benchmark, save_dataset
from .evaluate import append_results, retrieval_grid
from .exceptions import CamReIDError, StageDependencyError
from .utils import logger

STAGES = ("pretrain", "stage2", "cmfc")
PRODUCER = {"pretrain": "pretrain", "stage2": "transfer", "cmfc": "finetune-cmfc"}


class Run:
    """Paths and shared helpers for one run directory."""

    def __init__(self, cfg: TrainConfig, run_dir=None):
        self.cfg = cfg
        self.root = Path(run_dir) if run_dir else Path(cfg.run.runs_root) / cfg.run.name
        for sub in ("config", "logs", "checkpoints", "metrics"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    @property
    def data_root(self) -> Path:
        return Path(self.cfg.data.root) if self.cfg.data.root else self.root / "data"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.safetensors"

    def require(self, name: str, stage: str) -> Path:
        p = self.checkpoint(name)
        if not p.exists():
            raise StageDependencyError(f"missing {p}; run the '{stage}' stage first")
        return p

    def split(self, name: str):
        d = self.data_root / name
        if not (d / "manifest.csv").exists():
            raise StageDependencyError(f"missing dataset split {d}; run 'make-data' first")
        return load_manifest(d)

    def snapshot(self, command: str):
        self.cfg.save(self.root / "config" / f"{command}.cfg")

    def log_path(self, command: str) -> Path:
        return self.root / "logs" / f"{command}.jsonl"


def synth_config(cfg: TrainConfig) -> SynthConfig:
    d = cfg.data
    return SynthConfig(
        num_identities=d.num_identities, num_test_identities=d.num_test_identities,
        num_cameras_source=d.num_cameras_source, num_cameras_target=d.num_cameras_target,
        images_per_id_per_camera=d.images_per_id_per_camera, height=d.height, width=d.width,
        seed=cfg.run.seed, min_color_distance=d.min_color_distance, pose_jitter=d.pose_jitter,
        pixel_noise=d.pixel_noise, target_hue=d.target_hue, target_gamma=tuple(d.target_gamma),
        background_jitter=d.background_jitter, illumination_jitter=d.illumination_jitter)


def reid_estimator(cfg: TrainConfig, seed: int):
    from .reid import ReIDModel

    p, w = cfg.pretrain, cfg.loss
    return ReIDModel(widths=tuple(p.widths), pooling=p.pooling, classifier_pooling=p.classifier_pooling,
                     epochs=p.epochs, P=p.P, K=p.K, lr=p.lr, weight_decay=p.weight_decay,
                     milestones=tuple(p.milestones), margin=w.margin_pretrain, epsilon=w.epsilon,
                     lambda_t=w.lambda_t, augment=tuple(p.augment), random_state=seed)


def gan_estimator(cfg: TrainConfig, seed: int, log_path=None, checkpoint_dir=None):
    from .camstyle import CamStyleGAN

    g, w = cfg.gan, cfg.loss
    return CamStyleGAN(g_base=g.g_base, d_base=g.d_base, n_res=g.n_res, d_layers=g.d_layers,
                       residual=g.residual, batch_size=g.batch_size, n_critic=g.n_critic, iters=g.iters,
                       g_lr=g.g_lr, d_lr=g.d_lr, beta1=g.beta1, beta2=g.beta2, lambda_cls=w.lambda_cls,
                       lambda_rec=w.lambda_rec, lambda_idt=w.lambda_idt, lambda_pid=w.lambda_pid,
                       non_saturating=g.non_saturating, normalize_pid=g.normalize_pid, random_state=seed,
                       log_path=log_path, checkpoint_every=g.checkpoint_every, checkpoint_dir=checkpoint_dir)


def cmfc_estimator(cfg: TrainConfig, seed: int, log_path=None, checkpoint_dir=None):
    from .cmfc import CollaborativeClustering

    c, w = cfg.cmfc, cfg.loss
    return CollaborativeClustering(
        epochs=c.epochs, P=c.P, K=c.K, lr=c.lr, weight_decay=c.weight_decay, margin=w.margin_finetune,
        epsilon=w.epsilon, lambda_g=w.lambda_g, lambda_up=w.lambda_up, lambda_lower=w.lambda_lower,
        lambda_erase=w.lambda_erase, erase_area=tuple(c.erase_area), eps_percentile=c.eps_percentile,
        min_pts=c.min_pts, normalize_features=c.normalize_features,
        pooling=None if c.pooling == "inherit" else c.pooling, branches=c.branches,
        collaborative=c.collaborative, share_rng=c.share_rng, augment=tuple(c.augment),
        eval_model=c.eval_model, random_state=seed, log_path=log_path,
        checkpoint_every=c.checkpoint_every, checkpoint_dir=checkpoint_dir)


def mix_datasets(transferred: Dataset, source: Dataset) -> Dataset:
    """Transferred set plus the source set repeated to the same size (1:1 mix)."""
    reps = max(1, len(transferred) // max(1, len(source)))
    samples = list(transferred.samples) + [s for _ in range(reps) for s in source.samples]
    return Dataset(samples=samples, num_identities=transferred.num_identities,
                   num_cameras=max(transferred.num_cameras, source.num_cameras), domain_tag="mixed")


def _write_history(path: Path, history):
    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(run: Run, args):
    if run.cfg.data.root:
        logger.info("data.root is set (%s); nothing to generate", run.cfg.data.root)
        return
    bench = make_benchmark(synth_config(run.cfg))
    for name, ds in bench.splits().items():
        save_dataset(ds, run.data_root / name)
        logger.info("wrote %s: %d images", name, len(ds))


def cmd_pretrain(run: Run, args):
    model = reid_estimator(run.cfg, run.seed).fit(run.split("source_train"))
    _write_history(run.log_path("pretrain"), model.history_)
    model.save(run.checkpoint("pretrain"))


def cmd_train_gan(run: Run, args):
    source = run.split("source_train")
    target = run.split("target_train").unlabeled()
    gan = gan_estimator(run.cfg, run.seed, run.log_path("train-gan"), run.root / "checkpoints")
    gan.fit(source, target)
    gan.save(run.checkpoint("gan"))


def cmd_transfer(run: Run, args):
    """Translate the source set into every target camera style, then finetune the baseline on it."""
    from .camstyle import CamStyleGAN
    from .reid import ReIDModel

    gan = CamStyleGAN.load(run.require("gan", "train-gan"))
    model = ReIDModel.load(run.require("pretrain", "pretrain"))
    source = run.split("source_train")
    transferred = gan.transform(source)
    if args.save_images:
        save_dataset(transferred, run.data_root / "transferred")
    t = run.cfg.transfer
    if t.mix_source:
        transferred = mix_datasets(transferred, source)
    model.set_params(warm_start=True, epochs=t.epochs, milestones=tuple(t.milestones), lr=t.lr,
                     random_state=run.seed)
    model.fit(transferred)
    _write_history(run.log_path("transfer"), model.history_)
    model.save(run.checkpoint("stage2"))


def cmd_finetune_cmfc(run: Run, args):
    if args.from_baseline:
        init = run.require("pretrain", "pretrain")
    else:
        init = run.checkpoint("stage2")
        if not init.exists():
            raise StageDependencyError(
                f"missing {init}: finetune-cmfc needs the Stage II checkpoint from 'transfer' "
                "(or pass --from-baseline)")
    est = cmfc_estimator(run.cfg, run.seed, run.log_path("finetune-cmfc"), run.root / "checkpoints")
    est.fit(run.split("target_train").unlabeled(), init=init)
    est.save(run.checkpoint("cmfc"), run.cfg.cmfc.eval_model if run.cfg.cmfc.eval_model in ("A", "B") else "A")


def _load_stage(run: Run, stage: str):
    from .reid import ReIDModel

    return ReIDModel.load(run.require(stage, PRODUCER[stage]))


def cmd_eval(run: Run, args):
    from .evaluate import cmc_map, pairwise_euclidean

    domain = args.domain or run.cfg.eval.domain
    model = _load_stage(run, args.stage)
    query, gallery = run.split(f"{domain}_query"), run.split(f"{domain}_gallery")
    dist = pairwise_euclidean(model.transform(query), model.transform(gallery))
    report = cmc_map(dist, query.identities, query.cameras, gallery.identities, gallery.cameras,
                     max_rank=run.cfg.eval.max_rank)
    out = run.root / "metrics" / f"{args.stage}_{domain}.txt"
    out.write_text(report.to_text(), encoding="utf-8")
    append_results(run.root / "metrics" / "results.tsv",
                   {"run": run.cfg.run.name, "seed": run.seed, "stage": args.stage, "domain": domain,
                    **{k: getattr(report, k) for k in ("mAP", "rank1", "rank5", "rank10")}})
    print(report.to_text(), end="")


def cmd_retrieval_grid(run: Run, args):
    from .evaluate import pairwise_euclidean

    domain = args.domain or run.cfg.eval.domain
    model = _load_stage(run, args.stage)
    q, g = run.split(f"{domain}_query"), run.split(f"{domain}_gallery")
    dist = pairwise_euclidean(model.transform(q), model.transform(g))
    out = run.root / "metrics" / f"grid_{args.stage}_{domain}.png"
    retrieval_grid(q.images, q.identities, q.cameras, g.images, g.identities, g.cameras, dist,
                   run.cfg.eval.grid_k, out, max_queries=run.cfg.eval.grid_queries)
    print(out)


def cmd_run_all(run: Run, args):
    ns = argparse.Namespace(save_images=False, from_baseline=False, domain=None)
    for name, fn in (("make-data", cmd_make_data), ("pretrain", cmd_pretrain)):
        _run_one(run, name, fn, ns)
    _run_one(run, "eval", cmd_eval, argparse.Namespace(stage="pretrain", domain=None))
    for name, fn in (("train-gan", cmd_train_gan), ("transfer", cmd_transfer)):
        _run_one(run, name, fn, ns)
    _run_one(run, "eval", cmd_eval, argparse.Namespace(stage="stage2", domain=None))
    _run_one(run, "finetune-cmfc", cmd_finetune_cmfc, ns)
    _run_one(run, "eval", cmd_eval, argparse.Namespace(stage="cmfc", domain=None))


COMMANDS = {
    "make-data": cmd_make_data, "pretrain": cmd_pretrain, "train-gan": cmd_train_gan,
    "transfer": cmd_transfer, "finetune-cmfc": cmd_finetune_cmfc, "eval": cmd_eval,
    "retrieval-grid": cmd_retrieval_grid, "run-all": cmd_run_all,
}


def _run_one(run: Run, name: str, fn, args):
    run.snapshot(name)
    handler = logging.FileHandler(run.root / "logs" / f"{name}.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    try:
        logger.info("%s: run dir %s, seed %d", name, run.root, run.seed)
        fn(run, args)
    finally:
        logger.removeHandler(handler)
        handler.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camreid", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat section.key=value config file")
    parser.add_argument("--seed", type=int, help="overrides run.seed")
    parser.add_argument("--run-dir", help="run directory (default <run.runs_root>/<run.name>)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra config override, repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-data", "pretrain", "train-gan", "run-all"):
        sub.add_parser(name)
    p = sub.add_parser("transfer")
    p.add_argument("--save-images", action="store_true", help="also write the transferred set to disk")
    p = sub.add_parser("finetune-cmfc")
    p.add_argument("--from-baseline", action="store_true", help="start from the pretrain checkpoint")
    for name in ("eval", "retrieval-grid"):
        p = sub.add_parser(name)
        p.add_argument("--stage", choices=STAGES, default="cmfc")
        p.add_argument("--domain", choices=("source", "target"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logger.setLevel(logging.INFO)
    try:
        overrides = []
        for item in args.set:
            if "=" not in item:
                raise CamReIDError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.append(tuple(item.split("=", 1)))
        if args.seed is not None:
            overrides.append(("run.seed", str(args.seed)))
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.run_dir)
        if args.command == "run-all":
            cmd_run_all(run, args)
        else:
            _run_one(run, args.command, COMMANDS[args.command], args)
    except CamReIDError as e:
        print(f"camreid {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
