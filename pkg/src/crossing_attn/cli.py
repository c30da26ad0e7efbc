"""Command-line entry point: ``crossing-attn <command> --seed N --config file.json --out dir``.

Exit status: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os

# Cap BLAS pools before numpy is imported anywhere.
_cap = os.environ.get("CROSSING_ATTN_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse  # noqa: E402
import copy  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from crossing_attn import checkpoint  # noqa: E402
from crossing_attn import dataset as D  # noqa: E402
from crossing_attn import experiments as X  # noqa: E402
from crossing_attn.flow import FlowParams, compute_flow, flow_to_color, write_flo  # noqa: E402
from crossing_attn.fpv import FNet, FNetConfig, FNetTrainParams, train_fnet  # noqa: E402
from crossing_attn.fusion import MaskTable  # noqa: E402
from crossing_attn.imageio import ImageFormatError, read_gray, write_pnm  # noqa: E402
from crossing_attn.metrics import REPORT_FILES, EvalReport, ReportExistsError, evaluate, export_report  # noqa: E402
from crossing_attn.tensor import NumericError  # noqa: E402
from crossing_attn.tnet import TOY_CONFIG, TNet, TNetConfig, TrainParams, train_tnet  # noqa: E402

log = logging.getLogger("crossing_attn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _scene_data(per_class=120, test_per_class=20):
    return {"source": "synthetic", "per_class": per_class, "test_per_class": test_per_class, "params": {},
            "path": None}


def _sequence_data(per_class=40, test_per_class=20):
    return {"source": "synthetic", "per_class": per_class, "test_per_class": test_per_class, "params": {},
            "path": None, "L1": 0.0, "L2": 5.0}


def _tnet_defaults():
    return json.loads(TOY_CONFIG.to_json())


DEFAULTS = {
    "synth-gen": {"scenes": _scene_data(), "sequences": {"per_class": 0, "test_per_class": 0, "params": {}}},
    "train-tpv": {"model": _tnet_defaults(), "train": asdict(TrainParams()), "data": _scene_data()},
    "eval-tpv": {"data": _scene_data()},
    "train-fpv": {"model": FNetConfig().to_dict(), "train": asdict(FNetTrainParams()), "data": _sequence_data()},
    "eval-fpv": {"data": _sequence_data()},
    "fuse-eval": {"data": _scene_data(), "fpv": {"mode": "calibrated", "accuracy": 0.95, "sequence": {}},
                  "threshold": MaskTable().threshold},
    "flow": {"flow": asdict(FlowParams()), "size": [48, 64], "shift": [2, 1]},
    "gradcheck": {"seeds": 20, "checks": None, "tolerance": 1e-4},
}
DEFAULTS["fuse-eval"]["data"]["per_class"] = 0
DEFAULTS["eval-tpv"]["data"]["per_class"] = 0
DEFAULTS["eval-fpv"]["data"]["per_class"] = 0


def merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("params", "sequence"):
            out[key] = merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data helpers


def load_scenes(data: dict, seed: int, size) -> X.SceneSplit:
    if data["source"] == "synthetic":
        params = D.params_from_dict(D.SceneParams, {**data["params"], "size": list(size)})
        return X.synthetic_scenes(data["per_class"], data["test_per_class"], seed, params)
    if data["source"] == "dir":
        return X.read_scene_dir(data["path"], tuple(size))
    raise UsageError(f"unknown scene data source {data['source']!r}")


def load_sequences(data: dict, seed: int, model_cfg: FNetConfig, need_train: bool = True):
    if data["source"] == "synthetic":
        params = D.params_from_dict(D.SequenceParams, {**data["params"], "size": list(model_cfg.frame_size)})
        train = X.synthetic_sequences(data["per_class"], seed, params, stream=0) if need_train else []
        test = X.synthetic_sequences(data["test_per_class"], seed, params, stream=1)
        return train, test
    if data["source"] == "manifest":
        if not data.get("path"):
            raise UsageError("manifest data source needs data.path")
        return X.manifest_sequences(data["path"], model_cfg.frame_size, data["L1"], data["L2"])
    raise UsageError(f"unknown sequence data source {data['source']!r}")


def load_tnet(directory: Path) -> TNet:
    cfg_path, ckpt = directory / "tnet.json", directory / "tnet.cxt"
    for p in (cfg_path, ckpt):
        if not p.exists():
            raise D.DataError(f"T-Net checkpoint file not found: {p}")
    model = TNet(TNetConfig.from_json(cfg_path), dtype=np.float32)
    model.load_state_dict(checkpoint.load(ckpt))
    return model


def load_fnet(directory: Path) -> FNet:
    cfg_path, ckpt = directory / "fnet.json", directory / "fnet.cxt"
    for p in (cfg_path, ckpt):
        if not p.exists():
            raise D.DataError(f"F-Net checkpoint file not found: {p}")
    model = FNet(FNetConfig.from_json(cfg_path), dtype=np.float32)
    model.load_state_dict(checkpoint.load(ckpt))
    return model


def save_model(model, cfg_json: str, out: Path, stem: str) -> None:
    (out / f"{stem}.json").write_text(cfg_json + "\n")
    checkpoint.save(out / f"{stem}.cxt", {k: np.asarray(v, dtype=np.float64) for k, v in model.state_dict().items()})


def manual_report(confusion, command, cfg, seed, extra) -> EvalReport:
    c = np.asarray(confusion, dtype=np.int64)
    n = int(c.sum())
    rows = c.sum(axis=1)
    return EvalReport(
        top1=float(np.trace(c) / n) if n else 0.0,
        confusion=c.tolist(),
        per_class_recall=[float(c[i, i] / rows[i]) if rows[i] else None for i in range(len(c))],
        n_samples=n, config_digest=digest(cfg), seed=seed, command=command, extra=extra,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(cfg, seed, out: Path, args) -> EvalReport:
    sc = cfg["scenes"]
    params = D.params_from_dict(D.SceneParams, sc["params"])
    split = X.synthetic_scenes(sc["per_class"], sc["test_per_class"], seed, params)
    rows = []
    for name, xs, ys in (("train", split.x_train, split.y_train), ("test", split.x_test, split.y_test)):
        for i, (img, lab) in enumerate(zip(xs, ys)):
            rel = Path("scenes") / name / f"{int(lab)}_{i:05d}.ppm"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_pnm(out / rel, img)
            rows.append((rel.as_posix(), int(lab), name))
    with open(out / X.SCENE_INDEX, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(X.SCENE_INDEX_HEADER)
        w.writerows(rows)

    sq = cfg["sequences"]
    n_seq = 0
    if sq["per_class"] or sq["test_per_class"]:
        sparams = D.params_from_dict(D.SequenceParams, sq["params"])
        entries = []
        for split_name, n, stream in (("train", sq["per_class"], 0), ("test", sq["test_per_class"], 1)):
            for seq in X.synthetic_sequences(n, seed, sparams, stream):
                sid = f"{split_name}-{seq.sequence_id}"
                paths = []
                for t, frame in enumerate(seq.frames):
                    p = out / "sequences" / sid / f"{t:03d}.ppm"
                    p.parent.mkdir(parents=True, exist_ok=True)
                    write_pnm(p, frame)
                    paths.append(p)
                entries.append(D.ManifestEntry(sid, paths, seq.pose_track, seq.motion_label,
                                               seq.intersection_label, split_name))
        D.write_manifest(out / "manifest.csv", entries)
        n_seq = len(entries)
    counts = np.bincount(np.concatenate([split.y_train, split.y_test]), minlength=8)[1:]
    return manual_report(np.diag(counts), "synth-gen", cfg, seed,
                         {"scenes_train": int(len(split.y_train)), "scenes_test": int(len(split.y_test)),
                          "sequences": n_seq, "note": "diagonal holds the generated class histogram"})


def cmd_train_tpv(cfg, seed, out: Path, args) -> EvalReport:
    mcfg = TNetConfig.from_dict({**cfg["model"], "seed": seed})
    tp = TrainParams(**{**cfg["train"], "seed": seed})
    data = load_scenes(cfg["data"], seed, mcfg.input_size)
    model = TNet(mcfg, dtype=np.float32)
    history = train_tnet(model, data.x_train, data.y_train, tp)
    save_model(model, mcfg.to_json(), out, "tnet")
    probs = model.predict_proba(data.x_test)
    return evaluate(probs, data.y_test, config_digest=digest(cfg), seed=seed, command="train-tpv",
                    extra={"train_loss": [h.loss for h in history], "train_top1": [h.top1 for h in history],
                           "model_digest": mcfg.digest()})


def _require_dir(path, flag) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise D.DataError(f"{flag} directory not found: {p}")
    return p


def cmd_eval_tpv(cfg, seed, out: Path, args) -> EvalReport:
    model = load_tnet(_require_dir(args.checkpoint, "--checkpoint"))
    data = load_scenes(cfg["data"], seed, model.config.input_size)
    probs = model.predict_proba(data.x_test)
    return evaluate(probs, data.y_test, config_digest=digest(cfg), seed=seed, command="eval-tpv",
                    extra={"model_digest": model.config.digest()})


def _motion_report(model: FNet, test, cfg, seed, command, extra) -> EvalReport:
    enc = X.encode_motion_set(test, model.config)
    probs = model.predict_proba(enc.coded)
    mirror = X.mirror_consistency(model, enc)
    return evaluate(probs, enc.labels, config_digest=digest(cfg), seed=seed, command=command,
                    extra={**extra, "mirror_consistency": mirror, "model_digest": model.config.digest()})


def cmd_train_fpv(cfg, seed, out: Path, args) -> EvalReport:
    mcfg = FNetConfig.from_dict({**cfg["model"], "seed": seed})
    tp = FNetTrainParams(**{**cfg["train"], "seed": seed})
    train, test = load_sequences(cfg["data"], seed, mcfg)
    enc = X.encode_motion_set(train, mcfg)
    model = FNet(mcfg, dtype=np.float32)
    history = train_fnet(model, enc.coded, enc.labels, tp, coded_mirror=enc.coded_mirror)
    (out / "fnet.json").write_text(json.dumps(mcfg.to_dict(), indent=2) + "\n")
    checkpoint.save(out / "fnet.cxt", {k: np.asarray(v, dtype=np.float64) for k, v in model.state_dict().items()})
    return _motion_report(model, test, cfg, seed, "train-fpv",
                          {"train_loss": [h["loss"] for h in history], "train_top1": [h["top1"] for h in history]})


def cmd_eval_fpv(cfg, seed, out: Path, args) -> EvalReport:
    model = load_fnet(_require_dir(args.checkpoint, "--checkpoint"))
    _, test = load_sequences(cfg["data"], seed, model.config, need_train=False)
    return _motion_report(model, test, cfg, seed, "eval-fpv", {})


def cmd_fuse_eval(cfg, seed, out: Path, args) -> EvalReport:
    tnet = load_tnet(_require_dir(args.tpv, "--tpv"))
    threshold = args.threshold if args.threshold is not None else cfg["threshold"]
    table = replace(MaskTable(), threshold=float(threshold))
    data = load_scenes(cfg["data"], seed, tnet.config.input_size)
    tpv = tnet.predict_proba(data.x_test)
    fcfg = cfg["fpv"]
    mode = fcfg["mode"]
    if mode in ("calibrated", "perfect"):
        acc = 1.0 if mode == "perfect" else float(fcfg["accuracy"])
        motions, motion_pdvs = X.simulate_motions(data.y_test, acc, seed, table)
    elif mode == "model":
        fnet = load_fnet(_require_dir(args.fpv, "--fpv"))
        rng = np.random.default_rng([seed, 37])
        sparams = D.params_from_dict(D.SequenceParams, {**fcfg["sequence"], "size": list(fnet.config.frame_size)})
        motions, motion_pdvs = [], []
        for i, lab in enumerate(data.y_test):
            m = int(rng.choice(X.allowed_motions(int(lab), table)))
            seq = D.generate_sequence(m, seed * 1_000_003 + 500_000 + i, replace(sparams, intersection_label=int(lab)))
            motions.append(m)
            enc = X.encode_motion_set([seq], fnet.config)
            motion_pdvs.append(fnet.predict_proba(enc.coded)[0])
        motions = np.asarray(motions)
    else:
        raise UsageError(f"unknown fpv mode {mode!r}")
    outcome = X.fuse_all(tpv, motion_pdvs, data.y_test, table)
    motion_pred = np.array([int(np.argmax(getattr(p, "p", p))) + 1 for p in motion_pdvs])
    tpv_top1 = float(np.trace(outcome.tpv_confusion) / outcome.tpv_confusion.sum())
    return evaluate(outcome.fused, data.y_test, config_digest=digest(cfg), seed=seed, command="fuse-eval",
                    extra={"tpv_top1": tpv_top1, "tpv_confusion": outcome.tpv_confusion.tolist(),
                           "tpv_lr_confusions": X.FusionOutcome.lr_confusions(outcome.tpv_confusion),
                           "fused_lr_confusions": X.FusionOutcome.lr_confusions(outcome.fused_confusion),
                           "fpv_top1": float(np.mean(motion_pred == motions)),
                           "applied_t": outcome.applied_t, "fallbacks": outcome.fallbacks,
                           "threshold": table.threshold, "model_digest": tnet.config.digest()})


def cmd_flow(cfg, seed, out: Path, args) -> EvalReport:
    params = FlowParams(**cfg["flow"])
    truth = None
    if args.frames:
        a, b = (read_gray(p) for p in args.frames)
    else:
        from crossing_attn.render import ValueNoise
        h, w = cfg["size"]
        du, dv = (int(v) for v in cfg["shift"])
        noise = ValueNoise(np.random.default_rng([seed, 3]), size=16)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        a = noise(xx / 3.0, yy / 3.0)
        b = noise((xx - du) / 3.0, (yy - dv) / 3.0)
        truth = (du, dv)
    flow = compute_flow(a, b, params)
    write_flo(out / "flow.flo", flow)
    write_pnm(out / "flow.ppm", flow_to_color(flow))
    extra = {"max_abs_flow": float(np.abs(flow).max()), "mean_u": float(flow[..., 0].mean()),
             "mean_v": float(flow[..., 1].mean())}
    if truth is None:
        return manual_report(np.zeros((2, 2), dtype=int), "flow", cfg, seed, extra)
    m = 2 * params.block
    epe = np.hypot(flow[..., 0] - truth[0], flow[..., 1] - truth[1])[m:-m, m:-m]
    good = int(np.sum(epe <= 0.5))
    extra.update(interior_epe=float(epe.mean()), truth=list(truth),
                 note="rows: interior pixels; columns: endpoint error <= 0.5 px / above")
    return manual_report([[good, int(epe.size - good)], [0, 0]], "flow", cfg, seed, extra)


def cmd_gradcheck(cfg, seed, out: Path, args) -> EvalReport:
    from crossing_attn.gradcheck import run_suite
    results = run_suite(seeds=int(cfg["seeds"]), base_seed=seed, names=cfg["checks"], tol=float(cfg["tolerance"]))
    passed = sum(r.passed for r in results)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.rel_error)
    report = manual_report([[passed, len(results) - passed], [0, 0]], "gradcheck", cfg, seed,
                           {"max_rel_error": worst, "passed": sorted({r.name for r in results if r.passed}),
                            "failed": sorted({r.name for r in results if not r.passed}),
                            "note": "rows: checks; columns: within tolerance / not"})
    if passed != len(results):
        export_report(report, out)
        raise NumericError(f"{len(results) - passed} gradient checks exceeded tolerance")
    return report


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "generate the synthetic scene (and optional sequence) corpus"),
    "train-tpv": (cmd_train_tpv, "train the T-Net on intersection scenes"),
    "train-fpv": (cmd_train_fpv, "train the F-Net on ego-motion sequences"),
    "eval-tpv": (cmd_eval_tpv, "evaluate a trained T-Net"),
    "eval-fpv": (cmd_eval_fpv, "evaluate a trained F-Net"),
    "fuse-eval": (cmd_fuse_eval, "evaluate T-Net + F-Net + mask fusion"),
    "flow": (cmd_flow, "compute and colour-code flow for a frame pair"),
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient suite"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossing-attn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=Path, default=None, help="JSON file overriding the defaults")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace an existing report in --out")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval-tpv", "eval-fpv"):
            p.add_argument("--checkpoint", type=Path, help="directory written by the matching train command")
        if name == "fuse-eval":
            p.add_argument("--tpv", type=Path, help="directory written by train-tpv")
            p.add_argument("--fpv", type=Path, help="directory written by train-fpv (fpv.mode = model)")
            p.add_argument("--threshold", type=float, default=None, help="override the T-mask confidence threshold")
        if name == "flow":
            p.add_argument("--frames", type=Path, nargs=2, metavar=("A", "B"), help="PGM/PPM frame pair")
    return parser


def load_config(command: str, path: Path | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if path is None:
        return cfg
    if not path.exists():
        raise D.DataError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return merge(cfg, user, str(path))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.command, args.config)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.overwrite:
            for name in REPORT_FILES:
                (out / name).unlink(missing_ok=True)
        elif any((out / name).exists() for name in REPORT_FILES):
            raise ReportExistsError(f"{out} already holds a report; use --overwrite or another --out")
        report = fn(cfg, args.seed, out, args)
        export_report(report, out)
        print(f"{args.command}: top1 {report.top1:.4f} over {report.n_samples} -> {out}")
        return EXIT_OK
    except (UsageError, ReportExistsError, TypeError, KeyError) as exc:
        print(f"crossing-attn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, FileNotFoundError, ImageFormatError, checkpoint.CheckpointError) as exc:
        print(f"crossing-attn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"crossing-attn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"crossing-attn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
