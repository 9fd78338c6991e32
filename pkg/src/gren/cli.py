"""``gren`` command line: gen-data, hash, train, eval, gradcheck.

Every run is driven by one JSON config file (see ``RunConfig``); the file's
bytes are copied unchanged into each output directory. Exit codes: 0 on
success, 1 for usage or config errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from gren import diffcore as dc
from gren import evalkit, model, phash, synthgen, trainer
from gren.objective import ObjectiveConfig, total_objective
from gren.synthgen import SceneSpec

log = logging.getLogger("gren")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4
# Central-difference step per loss component. L and Q sum to ~1e3, so at
# 1e-5 their roundoff swamps small gradient entries; the regularisers are
# small but sharply curved (normalised embeddings) and need the narrow step.
# Wide steps are only sound with relu gates frozen; the raw check uses 1e-5.
GRADCHECK_STEPS = {"L": 1e-3, "D_intra": 1e-5, "D_inter": 1e-5, "Q": 1e-3}
GRADCHECK_RAW_STEP = 1e-5

Ablation = Literal["baseline", "intra", "inter", "both"]
# (intra weight, inter weight) per ablation arm
ABLATIONS: dict[str, tuple[float, float]] = {
    "baseline": (0.0, 0.0),
    "intra": (0.11, 0.0),
    "inter": (0.0, 0.15),
    "both": (0.11, 0.15),
}
COSINE_ABLATIONS: dict[str, tuple[float, float]] = {
    "baseline": (0.0, 0.0),
    "intra": (0.15, 0.0),
    "inter": (0.0, 0.15),
    "both": (0.15, 0.15),
}
_LAMBDAS = ("lambda1", "lambda2", "lambda3", "lambda4")


class UsageError(Exception):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
    train_size: int = Field(600, gt=0)
    eval_size: int = Field(200, gt=0)
    eval_annotated_fraction: float = Field(1.0, ge=0.0, le=1.0)
    train_manifest: str | None = None
    eval_manifest: str | None = None


class OptimConfig(_Section):
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 9
    decay_every: int = 4
    decay_factor: float = 0.1
    batch_size: int = 4
    upsample: bool = False
    grad_clip: float | None = 100.0


class EvalConfig(_Section):
    thresholds: list[float] = [0.5, 0.7]
    grid_threshold: float = Field(0.5, gt=0.0, lt=1.0)


class RunConfig(_Section):
    seed: int = 0
    ablation: Ablation | None = None
    scene: SceneSpec = SceneSpec()
    data: DataConfig = DataConfig()
    train: OptimConfig = OptimConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="before")
    @classmethod
    def _ablation_excludes_lambdas(cls, raw):
        if isinstance(raw, dict) and raw.get("ablation") is not None:
            explicit = [k for k in _LAMBDAS if k in (raw.get("objective") or {})]
            if explicit:
                raise ValueError(f"ablation and explicit {', '.join(explicit)} are mutually exclusive")
        return raw

    def resolved_objective(self) -> ObjectiveConfig:
        if self.ablation is None:
            return self.objective
        if self.objective.edge_mode == "hash":
            intra, inter = ABLATIONS[self.ablation]
            return dataclasses.replace(self.objective, lambda1=intra, lambda2=inter)
        intra, inter = COSINE_ABLATIONS[self.ablation]
        return dataclasses.replace(self.objective, lambda4=intra, lambda3=inter)

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            seed=self.seed, objective=self.resolved_objective(), **self.train.model_dump()
        )

    def eval_scene(self) -> SceneSpec:
        return dataclasses.replace(self.scene, annotated_fraction=self.data.eval_annotated_fraction)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{where}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)


def load_config(path: str | None, overrides: dict | None = None) -> tuple[RunConfig, bytes | None]:
    """Parse a config file (or defaults) and apply command-line overrides."""
    raw_bytes = None
    doc: dict = {}
    if path is not None:
        try:
            raw_bytes = Path(path).read_bytes()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            doc = json.loads(raw_bytes)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        doc["seed"] = overrides["seed"]
    if overrides.get("ablation") is not None:
        doc["ablation"] = overrides["ablation"]
    if overrides.get("edge_mode") is not None:
        doc["objective"] = {**(doc.get("objective") or {}), "edge_mode": overrides["edge_mode"]}
    try:
        return RunConfig.model_validate(doc), raw_bytes
    except ValidationError as exc:
        raise UsageError(_format_validation(exc)) from exc


def _prepare_out(out: str, raw_config: bytes | None, config: RunConfig) -> Path:
    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if raw_config is not None:
            (out_dir / "config.json").write_bytes(raw_config)
        resolved = config.model_dump(mode="json")
        resolved["objective"] = dataclasses.asdict(config.resolved_objective())
        (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out_dir}: {exc.strerror}") from exc
    return out_dir


def train_samples(config: RunConfig) -> list[synthgen.Sample]:
    if config.data.train_manifest:
        return synthgen.load_dataset(config.data.train_manifest)
    return [synthgen.generate_sample(synthgen.sample_seed(config.seed, i), config.scene)
            for i in range(config.data.train_size)]


def eval_samples(config: RunConfig) -> list[synthgen.Sample]:
    if config.data.eval_manifest:
        return synthgen.load_dataset(config.data.eval_manifest)
    start, scene = config.data.train_size, config.eval_scene()
    return [synthgen.generate_sample(synthgen.sample_seed(config.seed, start + i), scene)
            for i in range(config.data.eval_size)]


# ------------------------------------------------------------------ commands


def cmd_gen_data(config: RunConfig, out: str, raw_config: bytes | None = None) -> Path:
    """Write ``train/`` and ``eval/`` splits; returns the training manifest path."""
    out_dir = _prepare_out(out, raw_config, config)
    train = synthgen.generate_dataset(config.scene, config.data.train_size, config.seed, out_dir / "train")
    synthgen.generate_dataset(
        config.eval_scene(), config.data.eval_size, config.seed, out_dir / "eval",
        first_index=config.data.train_size,
    )
    return train.path


def cmd_hash(image_path: str, mask_path: str | None = None) -> str:
    image = synthgen.read_pgm(image_path).astype(np.float64) / 255.0
    if mask_path is None:
        return phash.to_hex(phash.phash64(image))
    mask = synthgen.read_pgm(mask_path) > 0
    if mask.shape != image.shape:
        raise ValueError(f"mask {mask_path} has shape {mask.shape}, image has {image.shape}")
    return phash.to_hex(phash.region_hash(image, mask))


def cmd_train(config: RunConfig, out: str, raw_config: bytes | None = None) -> tuple[Path, Path]:
    """Train from scratch; returns the last checkpoint and the JSON-lines log."""
    out_dir = _prepare_out(out, raw_config, config)
    samples = train_samples(config)
    tc = config.train_config()
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as fh:
        def on_step(record: dict) -> None:
            fh.write(json.dumps(record) + "\n")

        state, _ = trainer.train(samples, tc, checkpoint_dir=out_dir / "checkpoints", on_step=on_step)
    return out_dir / "checkpoints" / f"epoch_{state.epoch:02d}.json", log_path


def cmd_eval(
    checkpoint: str,
    samples: Sequence[synthgen.Sample],
    thresholds: Sequence[float],
    grid_threshold: float = 0.5,
    out: str | None = None,
) -> evalkit.MetricsReport:
    state, tc = trainer.load_checkpoint(checkpoint)
    report = evalkit.evaluate(
        state.params, samples, thresholds, grid_threshold,
        upsample=tc.upsample if tc is not None else False,
        metadata={"checkpoint": str(checkpoint)},
    )
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
        (out_dir / "report.csv").write_text(report.to_csv())
    return report


def gradcheck_batch(seed: int = 0, spec: SceneSpec | None = None) -> synthgen.Batch:
    """Two scenes that exercise grid BCE, positive MIL and negative MIL terms."""
    spec = spec or SceneSpec(annotated_fraction=0.5)
    annotated = unannotated_positive = None
    i = 0
    while annotated is None or unannotated_positive is None:
        s = synthgen.generate_sample(synthgen.sample_seed(seed, i), spec)
        if annotated is None and s.annotated.any():
            annotated = s
        elif unannotated_positive is None and (s.labels * (1 - s.annotated)).any() and not s.annotated.any():
            unannotated_positive = s
        i += 1
        if i > 1000:
            raise RuntimeError("could not assemble a gradcheck batch from this scene spec")
    samples = [annotated, unannotated_positive]
    return synthgen.Batch(samples, [synthgen.region_hashes(s) for s in samples])


def cmd_gradcheck(
    config: RunConfig,
    edge_modes: Sequence[str] = ("hash", "cosine"),
    max_coords: int = 24,
    step: float | dict[str, float] | None = None,
    freeze_gates: bool = True,
) -> dict[str, dict[str, float]]:
    """Per-mode, per-component max relative gradient error on a 2-sample batch.

    By default relu gating is frozen at the evaluation point (see
    ``diffcore.frozen_relu_gates``); ``freeze_gates=False`` reports the raw
    difference quotients, which also pick up units crossing zero.
    """
    if step is None:
        step = GRADCHECK_STEPS if freeze_gates else GRADCHECK_RAW_STEP
    batch = gradcheck_batch(config.seed)
    params = model.init_params(config.seed, num_classes=2)
    tensors = list(params.values())
    results = {}
    for mode in edge_modes:
        objective = dataclasses.replace(config.resolved_objective(), edge_mode=mode)
        # cosine edges are constants of the objective; freeze them at the evaluation point
        edges = total_objective(batch, params, objective).edges

        def components():
            b = total_objective(batch, params, objective, edges=edges)
            return {"L": b.L, "D_intra": b.D_intra, "D_inter": b.D_inter, "Q": b.Q}

        results[mode] = dc.grad_check_many(
            components, tensors, step=step, max_coords=max_coords, seed=config.seed, freeze_gates=freeze_gates
        )
    return results


# ---------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--ablation", choices=sorted(ABLATIONS))
    common.add_argument("--edge-mode", choices=["hash", "cosine"])

    p = _Parser(prog="gren", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)

    h = sub.add_parser("hash", help="print the 64-bit perceptual hash of a PGM image")
    h.add_argument("image")
    h.add_argument("--mask", help="PGM mask; nonzero pixels select the region")

    t = sub.add_parser("train", parents=[common], help="train and checkpoint every epoch")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common], help="localisation accuracy and AUC")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", help="evaluation manifest (default: the config's eval split)")
    e.add_argument("--thresholds", type=float, nargs="+")
    e.add_argument("--out")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the objective")
    c.add_argument("--max-coords", type=int, default=24, help="coordinates sampled per parameter tensor")
    c.add_argument("--step", type=float, help="one finite-difference step for every component "
                   "(default: per-component steps, see GRADCHECK_STEPS)")
    c.add_argument("--raw", action="store_true", help="also report errors without frozen relu gates")
    return p


def _run(args) -> int:
    if args.command == "hash":
        print(cmd_hash(args.image, args.mask))
        return EXIT_OK

    config, raw = load_config(args.config, {"seed": args.seed, "ablation": args.ablation,
                                            "edge_mode": args.edge_mode})
    if args.command == "gen-data":
        print(cmd_gen_data(config, args.out, raw))
    elif args.command == "train":
        ckpt, log_path = cmd_train(config, args.out, raw)
        print(ckpt)
        print(log_path)
    elif args.command == "eval":
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
        samples = synthgen.load_dataset(args.manifest) if args.manifest else eval_samples(config)
        thresholds = args.thresholds or config.eval.thresholds
        report = cmd_eval(args.checkpoint, samples, thresholds, config.eval.grid_threshold, args.out)
        print(report.table())
    elif args.command == "gradcheck":
        modes = [args.edge_mode] if args.edge_mode else ["hash", "cosine"]
        start = time.perf_counter()
        results = cmd_gradcheck(config, modes, args.max_coords, step=args.step)
        worst = 0.0
        for mode, errs in results.items():
            print(f"[{mode}] " + " ".join(f"{k}={v:.3e}" for k, v in errs.items()))
            worst = max(worst, *errs.values())
        if args.raw:
            for mode, errs in cmd_gradcheck(config, modes, args.max_coords, freeze_gates=False).items():
                print(f"[{mode}, raw] " + " ".join(f"{k}={v:.3e}" for k, v in errs.items()))
        verdict = "PASS" if worst < GRADCHECK_TOLERANCE else "FAIL"
        print(f"max relative error {worst:.3e} ({verdict}, tolerance {GRADCHECK_TOLERANCE:g}, "
              f"{time.perf_counter() - start:.1f}s)")
        return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_RUNTIME
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except UsageError as exc:
        print(f"gren: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"gren: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
