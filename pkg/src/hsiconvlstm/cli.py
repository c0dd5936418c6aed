"""``hsiconvlstm`` command line: preprocess, split, train, evaluate, predict-map, gradcheck, synth.

Every file is written atomically. Failures print one JSON object on stderr,
for example ``{"error": "ConfigError", "field": "train.epochs", "message": ...}``,
and exit nonzero. ``HSICONVLSTM_THREADS`` and ``HSICONVLSTM_DETERMINISTIC``
override the thread count and deterministic flag; nothing else is read
from the environment.
"""

import argparse
import json
import os
import sys

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import data, metrics
from .gradcheck import model_gradcheck
from .models import Model, atomic_write, build, load_checkpoint, save_checkpoint
from .optim import AdamState, TrainSchedule, train

EXIT_FAILURE = 1
EXIT_USAGE = 2
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class GradcheckFailed(Exception):
    def __init__(self, message, layer, error):
        super().__init__(message)
        self.layer = layer
        self.error = error


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_flag(value):
    return value.strip().lower() in ("1", "true", "yes", "on")


def runtime_settings(threads=None, deterministic=None, cfg=None, environ=None):
    """Resolve ``(threads, deterministic)``: command line, then environment, then config."""
    env = os.environ if environ is None else environ
    if deterministic is None and "HSICONVLSTM_DETERMINISTIC" in env:
        deterministic = _env_flag(env["HSICONVLSTM_DETERMINISTIC"])
    if deterministic is None:
        deterministic = bool(cfg and cfg.get("deterministic"))
    if threads is None and env.get("HSICONVLSTM_THREADS"):
        try:
            threads = int(env["HSICONVLSTM_THREADS"])
        except ValueError:
            raise UsageError("HSICONVLSTM_THREADS must be an integer") from None
    if threads is None and cfg:
        threads = cfg.get("threads")
    if deterministic:
        # single-threaded BLAS keeps reduction order fixed
        threads = 1
    if threads is not None and threads < 1:
        raise UsageError("thread count must be >= 1")
    return threads, deterministic


# data plumbing


def load_source(data_cfg):
    """``(cube, labels)`` from a config ``data`` block."""
    if "synth" in data_cfg:
        return data.synth_cube(**data_cfg["synth"])
    cube = data.load_cube(data_cfg["cube"])
    return cube, data.load_labels(data_cfg["labels"], cube)


def fitted_preprocessing(cube, cfg, manifest=None):
    """Fit scaling and PCA; on training pixels only when ``pca_fit`` is ``"train"``."""
    mask = None
    if cfg.get("pca_fit", "all") == "train":
        mask = np.zeros((cube.height, cube.width), dtype=bool)
        for coords in manifest.train.values():
            for r, c in coords:
                mask[r, c] = True
    return data.fit_preprocessing(cube, cfg["components"], normalize_first=cfg["normalize"], mask=mask)


def split_for(cfg, labels, repetition=0):
    sp = cfg["split"]
    if sp.get("manifest"):
        return data.load_manifest(sp["manifest"])
    return data.stratified_split(labels, sp["fraction"], sp["per_class"], seed=sp["seed"] + repetition)


def _manifest_patches(cube, manifest, split, s):
    rows = [(cls, r, c) for cls, coords in sorted(getattr(manifest, split).items()) for r, c in coords]
    if not rows:
        return np.zeros((0, s, s, cube.bands)), np.zeros(0, dtype=np.int64)
    arr = np.asarray(rows, dtype=np.int64)
    return data.windows(cube, arr[:, 1:], s), arr[:, 0]


def _evaluate(model, cube, manifest):
    patches, truth = _manifest_patches(cube, manifest, "test", model.spec.window)
    if len(truth) == 0:
        raise ValueError("manifest has no test pixels")
    pred = model.predict(patches)
    cm = metrics.confusion(pred, truth, num_classes=model.spec.num_classes)
    return metrics.report(cm)


def _trace_line(run, rec, deterministic):
    line = f"run={run} epoch={rec['epoch']} loss={rec['loss']:.6f} train_acc={rec['accuracy']:.4f}"
    if "train_oa" in rec:
        line += f" train_oa={rec['train_oa']:.4f}"
    if not deterministic:
        line += f" wall_time={rec['wall_time']:.3f}"
    return line


def _json_bytes(obj):
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def run_training(cfg, out_dir, log=print):
    """Train ``cfg['repetitions']`` models and evaluate each on its test split.

    Writes ``config.json``, ``metrics.json`` and per-run ``run-XX/`` folders
    holding the checkpoint, manifest and trace. Returns the metrics dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "config.json"), C.dumps(cfg).encode())
    cube, labels = load_source(cfg["data"])
    shared = None if cfg.get("pca_fit", "all") == "train" else fitted_preprocessing(cube, cfg)
    reduced = None if shared is None else shared.apply(cube)
    num_classes = int(labels.labels.max())
    spec = build(cfg["model"], K=cfg["components"], s=cfg["window"], N=num_classes, peephole=cfg["peephole"],
                 dense_activation=cfg["dense_activation"], conv_activation=cfg["conv_activation"])
    spec.learning_rate = cfg["train"]["learning_rate"]
    tcfg = cfg["train"]
    runs = []
    for r in range(cfg["repetitions"]):
        run_dir = os.path.join(out_dir, f"run-{r:02d}")
        os.makedirs(run_dir, exist_ok=True)
        manifest = split_for(cfg, labels, r)
        data.save_manifest(manifest, os.path.join(run_dir, "manifest.txt"))
        prep = shared or fitted_preprocessing(cube, cfg, manifest)
        if shared is None:
            reduced = prep.apply(cube)
        patches, ids = _manifest_patches(reduced, manifest, "train", cfg["window"])
        seed = tcfg["seed"] + r
        model = Model(spec, seed=seed)
        schedule = TrainSchedule(tcfg["epochs"], tcfg["learning_rate"], tcfg["batch_size"], seed)
        lines = []

        def on_epoch(rec, m, run=r):
            stop = False
            if tcfg["target_train_oa"] is not None:
                rec["train_oa"] = float(np.mean(m.predict(patches) == ids))
                stop = rec["train_oa"] >= tcfg["target_train_oa"]
            line = _trace_line(run, rec, cfg["deterministic"])
            lines.append(line)
            log(line)
            return stop

        ckpt, trace = train(model, patches, ids, schedule, callback=on_epoch,
                            state=AdamState(lr=tcfg["learning_rate"]))
        ckpt.meta = {"config": cfg, "repetition": r, "epochs_run": len(trace),
                     "preprocessing": prep.to_dict()}
        save_checkpoint(ckpt, os.path.join(run_dir, "checkpoint.hsck"))
        atomic_write(os.path.join(run_dir, "trace.txt"), ("\n".join(lines) + "\n").encode())
        rep = _evaluate(model, reduced, manifest)
        rep["epochs_run"] = len(trace)
        rep["train_pixels"] = int(len(ids))
        runs.append(rep)
        log(f"run={r} test_oa={rep['oa']:.4f} kappa={rep['kappa']:.4f}")
    result = {"model": cfg["model"], "runs": runs, "summary": metrics.summarize(runs)}
    atomic_write(os.path.join(out_dir, "metrics.json"), _json_bytes(result))
    return result


def _checkpoint_cube(ckpt, cube_path, preprocessed):
    cfg = ckpt.meta.get("config")
    if cube_path is not None:
        cube = data.load_cube(cube_path)
    elif cfg is not None:
        cube = load_source(cfg["data"])[0]
    else:
        raise UsageError("checkpoint carries no data source; pass --cube")
    if preprocessed:
        if cube.bands != ckpt.spec.components:
            raise ValueError(f"preprocessed cube has {cube.bands} bands, model expects {ckpt.spec.components}")
        return cube
    if "preprocessing" in ckpt.meta:
        return data.Preprocessing.from_dict(ckpt.meta["preprocessing"]).apply(cube)
    return data.preprocess(cube, ckpt.spec.components)


# subcommands


def cmd_preprocess(args):
    cube = data.load_cube(args.cube)
    if args.labels:
        data.load_labels(args.labels, cube)
    reduced = data.preprocess(cube, args.k, normalize_first=not args.no_normalize)
    data.save_cube(reduced, args.out)
    return f"wrote {args.out} ({reduced.height}x{reduced.width}x{reduced.bands})"


def cmd_split(args):
    labels = data.load_labels(args.labels)
    m = data.stratified_split(labels, fraction=args.fraction, per_class=args.per_class, seed=args.seed)
    data.save_manifest(m, args.out)
    return f"wrote {args.out} (train {sum(m.counts('train').values())}, test {sum(m.counts('test').values())})"


def cmd_train(args):
    cfg = C.load_config(args.config)
    cfg = C.resolve_paths(cfg, os.path.dirname(os.path.abspath(args.config)))
    threads, det = runtime_settings(args.threads, args.deterministic, cfg)
    cfg["deterministic"], cfg["threads"] = det, threads
    with threadpool_limits(limits=threads):
        result = run_training(cfg, args.out)
    s = result["summary"]
    return f"OA {s['oa']['mean']:.4f} +- {s['oa']['std']:.4f} over {s['runs']} run(s); outputs in {args.out}"


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = Model.from_checkpoint(ckpt)
    manifest = data.load_manifest(args.manifest)
    cube = _checkpoint_cube(ckpt, args.cube, args.preprocessed)
    threads, _ = runtime_settings(args.threads, args.deterministic)
    with threadpool_limits(limits=threads):
        rep = _evaluate(model, cube, manifest)
    atomic_write(args.out, _json_bytes(rep))
    if args.text:
        sys.stdout.write(metrics.text_report(rep, f"{ckpt.spec.name} on {os.path.basename(args.manifest)}"))
    return f"OA {rep['oa']:.4f}; wrote {args.out}"


def cmd_predict_map(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = Model.from_checkpoint(ckpt)
    cube = _checkpoint_cube(ckpt, args.cube, args.preprocessed)
    coords = np.argwhere(np.ones((cube.height, cube.width), dtype=bool))
    pred = np.zeros(len(coords), dtype=np.int64)
    threads, _ = runtime_settings(args.threads, args.deterministic)
    with threadpool_limits(limits=threads):
        for lo in range(0, len(coords), args.batch):
            chunk = coords[lo : lo + args.batch]
            pred[lo : lo + len(chunk)] = model.predict(data.windows(cube, chunk, ckpt.spec.window))
    raster = pred.reshape(cube.height, cube.width)
    if args.labels:
        mask = data.load_labels(args.labels, cube).labels == 0
        raster[mask] = 0
    palette = metrics.default_palette(ckpt.spec.num_classes)
    atomic_write(args.out, metrics.render_map(raster, palette))
    return f"wrote {args.out} ({cube.width}x{cube.height})"


def gradcheck_miniature(name, seed, per_param=6, size=9, K=3, batch=4):
    """Per-parameter relative errors of a freshly initialised model on a small synthetic scene."""
    k = 1 if name in C.SPATIAL_ONLY else K
    cube, labels = data.synth_cube(classes=3, width=size, height=size, bands=2 * K, noise=0.05, seed=seed)
    reduced = data.preprocess(cube, k)
    rng = np.random.default_rng(seed)
    flat = rng.choice(size * size, size=batch, replace=False)
    coords = np.stack([flat // size, flat % size], axis=1)
    pb = data.extract_patches(reduced, labels, coords, size)
    model = Model(build(name, K=k, s=size, N=3), seed=seed)
    return model_gradcheck(model, pb.patches, pb.labels, seed=seed, per_param=per_param)


def cmd_gradcheck(args):
    errors = gradcheck_miniature(args.model, args.seed, per_param=args.per_param)
    for pname, err in errors.items():
        print(f"{pname:<24} {err:.3e}")
    worst = max(errors, key=errors.get)
    if errors[worst] >= GRADCHECK_TOLERANCE:
        layer = worst.split(".")[0]
        raise GradcheckFailed(f"gradient check failed in layer {layer} ({worst})", layer, errors[worst])
    return f"PASS, max rel err < 1e-4 (max {errors[worst]:.2e} at {worst})"


def cmd_synth(args):
    text = args.spec
    if not text.lstrip().startswith("{"):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise C.ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    errs = list(jsonschema.Draft202012Validator(C.SYNTH_SCHEMA).iter_errors(spec))
    if errs:
        raise C.ConfigError(errs[0].message, field=".".join(str(p) for p in errs[0].absolute_path) or None)
    spec = {**C.SYNTH_DEFAULTS, **spec}
    cube, labels = data.synth_cube(**spec)
    os.makedirs(args.out, exist_ok=True)
    data.save_cube(cube, os.path.join(args.out, "cube.hsic"))
    data.save_labels(labels, os.path.join(args.out, "labels.hsil"))
    atomic_write(os.path.join(args.out, "spec.json"), C.dumps(spec).encode())
    return f"wrote cube.hsic, labels.hsil to {args.out}"


def _runtime_flags(p):
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, byte-reproducible outputs")


def make_parser():
    parser = _Parser(prog="hsiconvlstm", description="ConvLSTM hyperspectral image classification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="normalize and PCA-reduce a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels")
    p.add_argument("--k", type=int, required=True, help="principal components to keep")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="stratified train/test manifest")
    p.add_argument("--labels", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--fraction", type=float)
    g.add_argument("--per-class", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _runtime_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="OA/AA/kappa on a manifest's test pixels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cube", help="raw cube (default: the checkpoint's training source)")
    p.add_argument("--preprocessed", action="store_true", help="--cube is already reduced")
    p.add_argument("--text", action="store_true", help="also print a text report")
    p.add_argument("--out", required=True, help="metrics JSON path")
    _runtime_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict-map", help="classify every pixel and write a PPM map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube")
    p.add_argument("--preprocessed", action="store_true")
    p.add_argument("--labels", help="paint unlabeled pixels as background")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--out", required=True)
    _runtime_flags(p)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("gradcheck", help="finite-difference check on a 9x9 miniature")
    p.add_argument("--model", required=True, choices=sorted(C.MODEL_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-param", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic cube and label map")
    p.add_argument("--spec", required=True, help="JSON file or inline JSON object")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def _error_line(exc):
    out = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "line", "layer", "error"):
        value = getattr(exc, attr, None)
        if value is not None:
            out["max_rel_err" if attr == "error" else attr] = value
    return json.dumps(out, sort_keys=True)


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        message = args.func(args)
    except (UsageError, C.ConfigError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, GradcheckFailed) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_FAILURE
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
