"""Command-line surface: corpus creation, pre-training, adversarial training,
generation, and evaluation.

Every command writes a manifest (resolved configuration, seed, input digests,
tool version, timestamp) before any long computation starts; re-running with
the manifest's seed and inputs reproduces the primary outputs byte for byte.

Exit codes: 0 success, 1 computation failure, 2 usage/input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import metrics as metrics_mod
from . import rng as rng_mod
from . import trainer as trainer_mod
from .checkpoint import is_checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetFormatError
from .pretrain import pretrain as run_pretrain


class UsageError(Exception):
    """Bad inputs or flags: exit code 2."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dataset_digests(root: Path) -> dict[str, str]:
    out = {}
    for name in ("vocab.json", "patients.jsonl", "patients.jsonl.gz"):
        p = root / name
        if p.exists():
            out[str(p)] = _sha256(p)
    return out


def write_manifest(path: Path, command: str, seed: int, config: dict,
                   inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def _load_dataset_or_usage(path: str) -> data_mod.EHRDataset:
    try:
        return data_mod.load_dataset(path)
    except DatasetFormatError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    if args.canonical:
        spec = data_mod.canonical_toy_spec()
    else:
        if args.spec is None:
            raise UsageError("make-toy: provide a process spec file or --canonical")
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise UsageError(f"make-toy: spec file not found: {spec_path}")
        try:
            spec = data_mod.ToyProcessSpec.from_json(spec_path.read_text(encoding="utf-8"))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"make-toy: invalid process spec: {exc}") from None

    seed = spec.seed if args.seed is None else args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {} if args.canonical else {args.spec: _sha256(Path(args.spec))}
    write_manifest(out / "manifest.json", "make-toy", seed,
                   {"patients": args.patients, "canonical": args.canonical}, inputs)

    freqs, weights = data_mod.oracle_frequencies(spec)
    ds = data_mod.generate_toy_corpus(spec, args.patients, seed=seed)
    data_mod.save_dataset(ds, out)
    (out / "oracle.json").write_text(json.dumps({
        "visit_frequencies": freqs.tolist(),
        "state_weights": weights.tolist(),
    }, indent=2), encoding="utf-8")
    (out / "process_spec.json").write_text(spec.to_json(), encoding="utf-8")
    print(f"wrote {len(ds)} patients over {ds.num_diseases} diseases to {out}")
    return 0


def cmd_pretrain(args) -> int:
    if args.epochs < 1:
        raise UsageError("pretrain: must run at least 1 epoch to produce a frozen checkpoint")
    ds = _load_dataset_or_usage(args.data_dir)
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = out.parent / (out.name + ".manifest.json")
    write_manifest(manifest_path, "pretrain", args.seed,
                   {"epochs": args.epochs, "lr": args.lr, "batch": args.batch,
                    "hidden": args.hidden},
                   _dataset_digests(Path(args.data_dir)))

    result = run_pretrain(ds, epochs=args.epochs, lr=args.lr, hidden=args.hidden,
                          batch_size=args.batch, seed=args.seed)
    save_checkpoint(out, {name: node.value for name, node
                          in result.state.named_params().items()})
    loss_csv = out.parent / (out.stem + ".loss.csv")
    with open(loss_csv, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(result.epoch_losses, start=1):
            fh.write(f"{i},{loss}\n")
    print(f"pre-trained {args.epochs} epochs; "
          f"loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f}; "
          f"checkpoint at {out}")
    return 0


def _train_config_from_args(args) -> trainer_mod.TrainConfig:
    return trainer_mod.TrainConfig(
        iterations=args.iterations, batch_size=args.batch, g_lr=args.g_lr,
        d_lr=args.d_lr, decay=args.decay, decay_every=args.decay_every,
        n_critic=args.n_critic, gp_lambda=args.lambda_gp, beta1=args.beta1,
        beta2=args.beta2, hidden=args.hidden, seed=args.seed,
        hidden_critique=not args.no_hidden_critic, condition=not args.no_condition,
        target_dist=args.target_dist)


def cmd_train(args) -> int:
    ds = _load_dataset_or_usage(args.data_dir)
    ckpt_path = Path(args.pretrain_checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"train: pre-train checkpoint not found: {ckpt_path}")
    tensors = load_checkpoint(ckpt_path)
    pre = trainer_mod.pretrain_from_checkpoint(tensors)
    if pre.num_diseases != ds.num_diseases:
        raise UsageError(f"train: checkpoint has {pre.num_diseases} diseases but the "
                         f"dataset vocabulary has {ds.num_diseases}")
    if pre.hidden_size != args.hidden:
        raise UsageError(f"train: checkpoint hidden size {pre.hidden_size} does not "
                         f"match --hidden {args.hidden}")

    cfg = _train_config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _dataset_digests(Path(args.data_dir))
    inputs[str(ckpt_path)] = _sha256(ckpt_path)
    write_manifest(out / "manifest.json", "train", args.seed, cfg.as_dict(), inputs)

    gen, critic, history = trainer_mod.train(ds, cfg, pre, checkpoint_dir=out)
    final = trainer_mod.checkpoint_tensors(gen, critic, pre)
    final["meta.condition"] = np.array(1.0 if cfg.condition else 0.0)
    final["meta.hidden_critique"] = np.array(1.0 if cfg.hidden_critique else 0.0)
    save_checkpoint(out / "checkpoint_final.mtgn", final)
    history.save_csv(out / "history.csv")
    print(f"trained {cfg.iterations} iterations; final checkpoint and history in {out}")
    return 0


def _generator_with_meta(ckpt: Path):
    tensors = load_checkpoint(ckpt)
    gen = trainer_mod.generator_from_checkpoint(tensors)
    condition = bool(tensors.get("meta.condition", np.array(1.0)).item())
    return gen, condition


def cmd_generate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"generate: checkpoint not found: {ckpt}")
    real = _load_dataset_or_usage(args.data_dir)
    gen, condition = _generator_with_meta(ckpt)
    if gen.num_diseases != real.num_diseases:
        raise UsageError(f"generate: checkpoint decodes {gen.num_diseases} diseases but "
                         f"the vocabulary has {real.num_diseases}")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _dataset_digests(Path(args.data_dir))
    inputs[str(ckpt)] = _sha256(ckpt)
    write_manifest(out / "manifest.json", "generate", args.seed,
                   {"patients": args.patients, "condition": condition}, inputs)

    records = metrics_mod.synthesize(
        gen, args.patients, real.supported_diseases(), data_mod.length_histogram(real),
        rng_mod.stream(args.seed, "generate"), condition=condition)
    synthetic = data_mod.EHRDataset(vocabulary=list(real.vocabulary), records=records)
    data_mod.save_dataset(synthetic, out)
    print(f"generated {len(records)} patients to {out}")
    return 0


def cmd_evaluate(args) -> int:
    real = _load_dataset_or_usage(args.real_dir)
    source = Path(args.synthetic)
    out = Path(args.out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = _dataset_digests(Path(args.real_dir))

    if is_checkpoint(source):
        inputs[str(source)] = _sha256(source)
        write_manifest(out.parent / (out.name + ".manifest.json"), "evaluate",
                       args.seed, {"rn_cap": args.rn_cap, "source": "checkpoint"}, inputs)
        gen, condition = _generator_with_meta(source)
        if gen.num_diseases != real.num_diseases:
            raise UsageError(f"evaluate: checkpoint decodes {gen.num_diseases} diseases "
                             f"but the vocabulary has {real.num_diseases}")
        report = metrics_mod.evaluate(gen, real, rng_mod.stream(args.seed, "evaluate"),
                                      rn_cap=args.rn_cap, condition=condition)
    elif source.is_dir():
        synthetic = _load_dataset_or_usage(source)
        if synthetic.vocabulary != real.vocabulary:
            raise UsageError("evaluate: vocabulary mismatch between real and synthetic datasets")
        inputs.update(_dataset_digests(source))
        write_manifest(out.parent / (out.name + ".manifest.json"), "evaluate",
                       args.seed, {"rn_cap": args.rn_cap, "source": "dataset"}, inputs)
        rn = metrics_mod.prefix_coverage_count(real, synthetic)
        report = metrics_mod.evaluate_datasets(real, synthetic, rn)
    else:
        raise UsageError(f"evaluate: {source} is neither a dataset directory nor a checkpoint")

    out.write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visitgan",
        description="Conditional Wasserstein GAN for multi-label visit sequences")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic long-tail toy corpus")
    p.add_argument("spec", nargs="?", help="process spec JSON file")
    p.add_argument("out_dir")
    p.add_argument("--canonical", action="store_true",
                   help="use the built-in desk-scale spec (d=30, K=4, T_max=5)")
    p.add_argument("--patients", type=int, default=2000)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("pretrain", help="pre-train the temporal-feature GRU")
    p.add_argument("data_dir")
    p.add_argument("out_checkpoint")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("data_dir")
    p.add_argument("pretrain_checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--iterations", type=int, default=300_000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--g-lr", type=float, default=1e-4)
    p.add_argument("--d-lr", type=float, default=1e-5)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--decay-every", type=int, default=100_000)
    p.add_argument("--n-critic", type=int, default=1)
    p.add_argument("--lambda-gp", type=float, default=10.0)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.9)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-hidden-critic", action="store_true",
                   help="score visits alone, without temporal features")
    p.add_argument("--no-condition", action="store_true",
                   help="disable the smooth conditional matrix")
    p.add_argument("--target-dist", choices=["uniform", "empirical"], default="uniform")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample synthetic patients from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data_dir", help="real dataset supplying vocabulary and lengths")
    p.add_argument("out_dir")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a synthetic dataset or checkpoint against real data")
    p.add_argument("real_dir")
    p.add_argument("synthetic", help="synthetic dataset directory or trained checkpoint")
    p.add_argument("out_report")
    p.add_argument("--rn-cap", type=int, default=metrics_mod.RN_CAP_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level CLI boundary
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
