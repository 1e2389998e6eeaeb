"""Command-line entry point: ``esdd {synth,train,score,eer,fuse,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as tn
from .config import ConfigError, RunConfig
from .features import Corpus, FeatureFormatError, ManifestError
from .mhfa import CheckpointError, MhfaConfig, init_params, load_checkpoint, mhfa_forward, nll_loss
from .scoring import FusionSpec, ScoreError, compute_eer, fuse_scores, read_scores, score_dataset, write_scores
from .seeding import stream
from .synth import synthesize_dataset
from .trainer import ConfigurationError, fit

log = logging.getLogger("esdd")

GRADCHECK_TOL = 1e-4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--workdir", help="output directory")

    p = argparse.ArgumentParser(prog="esdd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic layered-feature dataset")

    t = sub.add_parser("train", parents=[common], help="train an MHFA back-end")
    t.add_argument("--manifest")

    s = sub.add_parser("score", parents=[common], help="score one split with a checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="eval_unseen")
    s.add_argument("--out")

    e = sub.add_parser("eer", help="print the EER of a score file")
    e.add_argument("scores")
    e.add_argument("--per-generator", action="store_true")

    f = sub.add_parser("fuse", parents=[common], help="fuse score files")
    f.add_argument("scores", nargs="+")
    f.add_argument("--weights", type=float, nargs="+")
    f.add_argument("--normalize", choices=["none", "zscore"])
    f.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    return p


def _split_overrides(parser, extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            parser.error(f"unrecognized arguments: {tok}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                parser.error(f"override {tok} needs a value")
            key, val = tok[2:], extra[i + 1]
            i += 2
        pairs.append((key, val))
    return pairs


def _run_config(args, overrides) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workdir", None):
        cfg.workdir = args.workdir
    for key, val in overrides:
        cfg.override(key, val)
    return cfg


def _archive(cfg: RunConfig, name: str) -> None:
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    (wd / name).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _manifest_path(cfg: RunConfig, flag: str | None) -> Path:
    path = Path(flag or cfg.manifest or Path(cfg.workdir) / "data" / "manifest.jsonl")
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    return path


def cmd_synth(cfg: RunConfig, args) -> None:
    scfg = cfg.synth_config()
    out = Path(cfg.workdir) / "data"
    corpus = synthesize_dataset(scfg, out)
    _archive(cfg, "synth_config.json")
    print(f"wrote {len(corpus)} utterances to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    corpus = Corpus.from_manifest(_manifest_path(cfg, args.manifest))
    first = corpus.stack(corpus.entries[0])
    mcfg = cfg.model_section().build(first.L, first.D)
    tcfg = cfg.train_config()
    out = Path(cfg.workdir) / "model"
    _archive(cfg, "train_config.json")
    result = fit(mcfg, corpus, tcfg, workdir=out)
    best = "n/a" if result.best_dev_eer is None else f"{result.best_dev_eer:.6f}"
    print(f"trained {result.total_steps} steps; best dev EER {best}; checkpoints in {out}")


def cmd_score(cfg: RunConfig, args) -> None:
    corpus = Corpus.from_manifest(_manifest_path(cfg, args.manifest))
    ckpt = Path(args.checkpoint or cfg.checkpoint or Path(cfg.workdir) / "model" / "best.ckpt")
    params, mcfg, _ = load_checkpoint(ckpt)
    entries = corpus.split(args.split)
    if not entries:
        raise ScoreError(f"split {args.split!r} is empty")
    records = score_dataset(params, mcfg, corpus, entries, cfg.train_config().crop_frames)
    out = Path(args.out or Path(cfg.workdir) / "scores" / f"{args.split}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(records, out)
    print(f"wrote {len(records)} scores to {out}")


def cmd_eer(args) -> None:
    records = read_scores(args.scores)
    eer, _ = compute_eer(records)
    print(f"EER {eer:.6f}")
    if args.per_generator:
        for gen in sorted({r.generator_id for r in records if r.label == "spoof"}):
            subset = [r for r in records if r.label == "bonafide" or r.generator_id == gen]
            print(f"  {gen} {compute_eer(subset)[0]:.6f}")


def cmd_fuse(cfg: RunConfig, args) -> None:
    section = cfg.fusion_section()
    spec = FusionSpec(
        systems=list(args.scores),
        weights=list(args.weights or section.weights),
        normalize=args.normalize or section.normalize,
    )
    fused = fuse_scores(spec, [read_scores(p) for p in spec.systems])
    write_scores(fused, args.out)
    print(f"wrote {len(fused)} fused scores to {args.out}")


def gradcheck_model(seed: int, eps: float = 1e-5, fault: tuple[int, float] | None = None):
    """Check every MHFA parameter (adapter on, DSU off) on a small random batch."""
    rng = stream(seed, "gradcheck")
    cfg = MhfaConfig(L=3, D=8, H=4, D_cmp=6, E=5, adapter_enabled=True)
    params = init_params(cfg, rng, dtype=np.float64)
    # Move off the symmetric start so every parameter has a generic gradient.
    params = params.replace(
        w_k=rng.normal(size=cfg.L), w_v=rng.normal(size=cfg.L), b_v=rng.normal(size=cfg.D_cmp) * 0.1,
        b_fc=rng.normal(size=cfg.E) * 0.1, b_cls=rng.normal(size=2) * 0.1,
        gamma=1 + 0.1 * rng.normal(size=(cfg.L, cfg.D)), beta=0.1 * rng.normal(size=(cfg.L, cfg.D)),
    )
    x = rng.uniform(-2, 2, size=(2, cfg.L, 5, cfg.D))
    labels = np.array([0, 1])
    names = [k for k, _ in params.items()]

    def loss_fn(tensors):
        out = mhfa_forward(x, dict(zip(names, tensors)), cfg, mode="eval")
        return nll_loss(out.logits, labels)

    return tn.grad_check(loss_fn, [v for _, v in params.items()], eps=eps, fault=fault), names


def cmd_gradcheck(args) -> int:
    result, names = gradcheck_model(args.seed, args.eps)
    print(f"max relative error {result.max_rel_error:.3e} over {result.n_checked} entries "
          f"(worst: {names[result.worst_param]}[{result.worst_index}])")
    if not result.ok:
        print(f"error: {result.failure}", file=sys.stderr)
        return 1
    if result.max_rel_error > GRADCHECK_TOL:
        print(f"error: gradient check exceeds {GRADCHECK_TOL:g}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _split_overrides(parser, extra)
    try:
        if args.command == "eer":
            cmd_eer(args)
            return 0
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = _run_config(args, overrides)
        {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "fuse": cmd_fuse}[args.command](cfg, args)
        return 0
    except (
        ConfigError, ConfigurationError, FeatureFormatError, ManifestError, CheckpointError,
        ScoreError, tn.ShapeError, FileNotFoundError, OSError, ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
