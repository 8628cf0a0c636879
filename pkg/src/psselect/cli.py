"""psselect command line: synth, classical, train, predict, eval, gradcheck.

Every command writes its outputs plus ``manifest.json`` (command, config,
inputs, output checksums, seed, version, wall-clock seconds) into ``--out``.

Exit codes: 0 success, 2 config/usage error, 3 empty result, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from psselect import __version__
from psselect.stack import FormatError, read_mask, read_stack, write_mask, write_pgm, write_stack

log = logging.getLogger("psselect")

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


class NumericalFailure(Exception):
    """Non-finite results or failed checks; maps to exit code 4."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Collects provenance for one command and writes it atomically."""

    def __init__(self, command: str, out_dir: Path, seed, threads: int):
        self.command = command
        self.out_dir = out_dir
        self.seed = seed
        self.threads = threads
        self.config: dict = {}
        self.inputs: list = []
        self.outputs: list = []
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def output(self, path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def write(self, exit_code: int) -> Path:
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": [str(p) for p in self.inputs],
            "outputs": {p.name: sha256(p) for p in self.outputs if p.exists()},
            "seed": self.seed,
            "threads": self.threads,
            "tool_version": __version__,
            "duration_s": time.perf_counter() - self._t0,
            "exit_code": exit_code,
            **self.extra,
        }
        path = self.out_dir / MANIFEST
        write_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _read_stack(path):
    try:
        return read_stack(path)
    except (OSError, FormatError) as exc:
        raise ConfigError(f"cannot read stack {path}: {exc}") from None


def _read_mask(path):
    try:
        return read_mask(path)
    except (OSError, FormatError) as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from None


# ----------------------------------------------------------------------------
# commands

def cmd_synth(args, man: RunManifest) -> int:
    from psselect.synth import SceneConfig, generate

    doc = _load_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = SceneConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene config: {exc}") from None
    man.config = cfg.to_dict()
    man.seed = cfg.seed
    if args.config:
        man.inputs.append(args.config)
    stack, truth = generate(cfg)
    write_stack(stack, man.output(man.out_dir / "stack.ifg"))
    write_mask(truth.ps_mask, man.output(man.out_dir / "truth.psm"))
    npz = truth.save(man.output(man.out_dir / "truth.json"), cfg)
    man.output(npz)
    log.info("synth: %dx%d, %d ifgs, %d PS", cfg.width, cfg.height, cfg.n_ifgs, truth.ps_mask.count)
    return EXIT_OK


def cmd_classical(args, man: RunManifest) -> int:
    from psselect.classical import ClassicalConfig, iterate_classical, write_candidates_csv

    stack = _read_stack(args.stack)
    man.inputs.append(args.stack)
    doc = _load_json(args.config)
    try:
        cfg = ClassicalConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid classical config: {exc}") from None
    man.config = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    res = iterate_classical(stack, cfg, workers=man.threads)
    write_mask(res.mask, man.output(man.out_dir / "mask.psm"))
    write_candidates_csv(res, man.output(man.out_dir / "candidates.csv"))
    man.extra.update(n_candidates=len(res.candidates), n_ps=res.mask.count,
                     n_iterations=res.n_iterations, rms_change=res.rms_change)
    if len(res.candidates) == 0:
        log.warning("classical: no candidates below D_A threshold %.3g", cfg.d_a_threshold)
        return EXIT_EMPTY
    if not np.all(np.isfinite(res.gamma)):
        raise NumericalFailure("non-finite temporal coherence")
    log.info("classical: %d candidates, %d PS", len(res.candidates), res.mask.count)
    return EXIT_OK


def _parse_ints(text):
    try:
        return tuple(int(v) for v in text.split(",")) if text else None
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_floats(text):
    try:
        return tuple(float(v) for v in text.split(",")) if text else None
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_train(args, man: RunManifest) -> int:
    from psselect.networks import NetworkSpec, build_network, save_checkpoint
    from psselect.trainer import TrainConfig, make_dataset, train

    ds_dir = Path(args.dataset)
    stack_path = ds_dir / "stack.ifg"
    label_path = Path(args.labels) if args.labels else ds_dir / "truth.psm"
    if not stack_path.is_file() or not label_path.is_file():
        raise ConfigError(f"dataset needs {stack_path} and {label_path}")
    stack = _read_stack(stack_path)
    labels = _read_mask(label_path)
    man.inputs += [stack_path, label_path]
    doc = _load_json(args.config)
    overrides = {
        "epochs": args.epochs, "lr": args.lr, "patience": args.patience,
        "batch_size": args.batch_size, "val_fraction": args.val_fraction,
        "class_weights": _parse_floats(args.class_weights),
        "seed": args.seed,
    }
    try:
        tcfg = TrainConfig.for_kind(args.kind, **{**doc.get("train", {}), **{k: v for k, v in overrides.items() if v is not None}})
        spec_doc = {"kind": args.kind, "input_patch": args.patch_size, "n_timesteps": stack.n_ifgs,
                    **doc.get("network", {})}
        if args.filters:
            spec_doc["filter_plan"] = _parse_ints(args.filters)
        spec = NetworkSpec.from_dict(spec_doc)
        dataset = make_dataset(stack, labels, spec.input_patch)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training setup: {exc}") from None
    man.seed = tcfg.seed
    man.config = {"train": tcfg.to_dict(), "network": spec.to_dict()}
    net = build_network(spec, seed=tcfg.seed)
    try:
        _, hist = train(net, dataset, tcfg, log=log.info)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not np.all(np.isfinite(hist.val_loss)):
        raise NumericalFailure("non-finite validation loss")
    save_checkpoint(net, man.output(man.out_dir / "model.psnet"),
                    hyperparameters=tcfg.to_dict(), seed=tcfg.seed)
    hist.write_csv(man.output(man.out_dir / "history.csv"))
    man.extra.update(best_epoch=hist.best_epoch, stopped_epoch=hist.stopped_epoch,
                     best_val_loss=hist.best_val_loss, best_val_f1=hist.best_f1)
    return EXIT_OK


def cmd_predict(args, man: RunManifest) -> int:
    from psselect.networks import load_checkpoint, predict_full

    try:
        net, meta = load_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    stack = _read_stack(args.stack)
    man.inputs += [args.checkpoint, args.stack]
    man.config = {"network": net.spec.to_dict(), "patch_size": args.patch_size or net.spec.input_patch}
    try:
        prob, mask = predict_full(net, stack, args.patch_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not np.all(np.isfinite(prob)):
        raise NumericalFailure("non-finite probabilities")
    write_pgm(prob, man.output(man.out_dir / "prob.pgm"))
    write_mask(mask, man.output(man.out_dir / "mask.psm"))
    man.extra.update(n_ps=mask.count)
    return EXIT_OK


def cmd_eval(args, man: RunManifest) -> int:
    from psselect.quality import StipConfig, compare_masks
    from psselect.synth import SceneTruth

    stack = _read_stack(args.stack)
    masks = [_read_mask(p) for p in args.masks]
    man.inputs += [args.stack, *args.masks]
    truth = _read_mask(args.truth) if args.truth else None
    landcover = None
    if args.landcover:
        try:
            landcover = SceneTruth.load(args.landcover).landcover
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read landcover from {args.landcover}: {exc}") from None
        man.inputs.append(args.landcover)
    if truth is not None:
        man.inputs.append(args.truth)
    doc = _load_json(args.config)
    try:
        stip = StipConfig(**{k: tuple(v) if k == "window" else v for k, v in doc.get("stip", {}).items()})
        names = args.names.split(",") if args.names else [Path(p).stem for p in args.masks]
        if len(names) != len(masks):
            raise ValueError("--names must list one name per mask")
        rep = compare_masks(masks, landcover=landcover, truth=truth, names=names,
                            stack=stack, stip_cfg=stip)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    man.config = {"stip": {"window": list(stip.window), "similarity_threshold": stip.similarity_threshold,
                           "reliable_count": stip.reliable_count}, "names": rep.names}
    for p in rep.write(man.out_dir):
        man.output(p)
    return EXIT_OK


def cmd_gradcheck(args, man: RunManifest) -> int:
    from psselect import gradsuite

    results = gradsuite.run_suite()
    path = man.output(man.out_dir / "gradcheck.csv")
    with open(path, "w") as fh:
        fh.write("case,max_rel_error,n_checked,passed\n")
        for r in results:
            fh.write(f"{r.name},{r.max_rel_error:.3e},{r.n_checked},{int(r.passed)}\n")
    failed = [r.name for r in results if not r.passed]
    man.config = {"tolerance": gradsuite.TOLERANCE, "h": 1e-6}
    man.extra.update(failed=failed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} {r.max_rel_error:.3e}")
    if failed:
        raise NumericalFailure(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="psselect",
        description="Persistent scatterer selection: synthetic scenes, classical selection, CNN/ConvLSTM segmenters.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--seed", type=int, default=None,
                   help="seed for scene generation, network init, shuffling and dropout "
                        "(synth: overrides the config seed; train: defaults to 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for the pixel inversion; BLAS stays single-threaded "
                        "and results do not depend on this value")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic stack with truth",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       description="Scene defaults: 256x256, 10 ifgs, 5%% PS, landcover-weighted PS density.")
    s.add_argument("--config", help="SceneConfig JSON (unknown keys rejected; {} uses defaults)")

    c = sub.add_parser("classical", help="amplitude-dispersion + coherence PS selection",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       description="Defaults: D_A < 0.4, filter radius 10 px, dh grid +-20 m step 0.1 m, "
                                   "gamma >= 0.75, at most 10 iterations, stop when RMS gamma change < 1e-3.")
    c.add_argument("stack", help="IFGSTACK1 file")
    c.add_argument("--config", help="ClassicalConfig JSON")

    t = sub.add_parser("train", help="train cnn_iss or clstm_iss on a synth output directory",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       description="Per-kind defaults: cnn_iss 400 epochs lr 0.01; clstm_iss 300 epochs lr 0.001. "
                                   "Patience 20 (val loss must drop by > 1e-6), class weights PS 200 : non-PS 1, "
                                   "batch 8, validation fraction 0.2, best-epoch weights restored.")
    t.add_argument("dataset", help="directory with stack.ifg and truth.psm")
    t.add_argument("--kind", choices=("cnn_iss", "clstm_iss"), default="clstm_iss")
    t.add_argument("--config", help='JSON with optional "train" and "network" objects')
    t.add_argument("--labels", help="label mask; <dataset>/truth.psm when omitted")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--class-weights", help="PS,nonPS weights, e.g. 200,1")
    t.add_argument("--patch-size", type=int, default=100)
    t.add_argument("--filters", help="filter plan, e.g. 16,16,32,64")

    r = sub.add_parser("predict", help="probability map and mask from a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       description="Mask rule: probability >= 0.5 is PS.")
    r.add_argument("checkpoint", help="PSNET1 file")
    r.add_argument("stack", help="IFGSTACK1 file")
    r.add_argument("--patch-size", type=int, default=None, help="defaults to the training patch size")

    e = sub.add_parser("eval", help="compare masks: overlaps, landcover shares, STIP reliability",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       description="STIP defaults: 5 x 25 window, coherence >= 0.8, reliable when count > 35.")
    e.add_argument("stack", help="IFGSTACK1 file")
    e.add_argument("masks", nargs="+", help="PSMASK1 files")
    e.add_argument("--truth", help="PSMASK1 truth mask")
    e.add_argument("--landcover", help="truth.json / truth.npz from synth")
    e.add_argument("--names", help="comma-separated mask names (default: file stems)")
    e.add_argument("--config", help='JSON with an optional "stip" object')

    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op",
                   description="Central differences, h = 1e-6, pass when relative error <= 1e-5.")
    return p


COMMANDS = {
    "synth": cmd_synth, "classical": cmd_classical, "train": cmd_train,
    "predict": cmd_predict, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("psselect: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(args.command, out, args.seed, args.threads)
    try:
        # BLAS summation order depends on its thread count, so BLAS is pinned to one
        # thread and --threads only sizes the order-independent worker pools
        with threadpool_limits(limits=1):
            code = COMMANDS[args.command](args, man)
    except ConfigError as exc:
        print(f"psselect {args.command}: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"psselect {args.command}: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    man.write(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
