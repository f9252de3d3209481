"""Command-line entry point: ``mint <subcommand> ...``.

Exit status: 0 success, 1 validation error (bad flags, configs, inputs),
2 runtime failure. Logs are JSON lines on stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "MINT_DATA_ROOT"
GEN_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Invalid command line, config or input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj: dict, quiet: bool = False, final: bool = False) -> None:
    if final or not quiet:
        print(json.dumps(obj, sort_keys=True), flush=True)


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e


def _overrides(items: list[str] | None) -> dict:
    from mint.trainer.config import deep_update, parse_override

    out: dict = {}
    for it in items or []:
        out = deep_update(out, parse_override(it))
    return out


def _data_dir(arg: str | None) -> Path:
    root = arg or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"--data is required (or set {DATA_ROOT_ENV})")
    return Path(root)


def _manifest_path(data: Path, split: str) -> Path:
    """``data`` may be a dataset root, a split directory or a manifest file."""
    for cand in (data, data / "manifest.json", data / split / "manifest.json"):
        if cand.is_file():
            return cand
    raise UsageError(f"no {split} manifest found under {data}")


def _file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _set_serial(serial: bool) -> None:
    import torch

    if serial:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from mint.synthgen import DatasetLayout, SynthConfig, generate_dataset
    from mint.trainer.config import deep_update

    raw = deep_update(_read_json(args.config), _overrides(args.set))
    unknown = set(raw) - {"schema_version", "synth", "layout"}
    if unknown:
        raise UsageError(f"unknown gen-data config keys {sorted(unknown)}")
    if raw.get("schema_version", GEN_SCHEMA_VERSION) != GEN_SCHEMA_VERSION:
        raise UsageError(f"unsupported gen-data schema_version {raw['schema_version']}")
    cfg = SynthConfig.from_dict(raw.get("synth", {}))
    layout = DatasetLayout.from_dict(raw.get("layout", {}))
    out = Path(args.out)
    manifests = generate_dataset(cfg, out, layout)
    effective = {"schema_version": GEN_SCHEMA_VERSION, "synth": cfg.to_dict(), "layout": layout.__dict__}
    (out / "effective_config.json").write_text(json.dumps(effective, indent=1, sort_keys=True) + "\n")
    _emit({"event": "gen-data", "out": str(out), **{k: len(m.entries) for k, m in manifests.items()}}, args.quiet, final=True)
    return 0


def cmd_pretrain(args) -> int:
    from mint.dataset import load_manifest
    from mint.pretrain import PretrainConfig, pretrain_base, save_backbone
    from mint.trainer.config import deep_update

    cfg = PretrainConfig.from_dict(deep_update(_read_json(args.config), _overrides(args.set)))
    mpath = _manifest_path(_data_dir(args.data), "pretrain")
    samples = load_manifest(mpath).load_all()
    model = pretrain_base(samples, cfg, log_sink=None if args.quiet else print)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(out, model, {"pretrain": cfg.to_dict(), "manifest": str(mpath)})
    _emit({"event": "pretrain", "out": str(out), "steps": cfg.steps, "sha256": _file_digest(out)}, args.quiet, final=True)
    return 0


def cmd_train(args) -> int:
    import torch

    from mint.backbone import VisionTransformer
    from mint.dataset import load_manifest
    from mint.pretrain import load_backbone
    from mint.trainer.config import TrainConfig, deep_update
    from mint.trainer.loop import init_train, train

    cfg = TrainConfig.from_dict(deep_update(_read_json(args.config), _overrides(args.set)))
    manifest = load_manifest(_manifest_path(_data_dir(args.data), "train"))
    samples = manifest.load_all()
    vocab = manifest.load_vocab()
    extra = {"data": str(manifest.root)}
    if args.base:
        if not Path(args.base).is_file():
            raise UsageError(f"base backbone not found: {args.base}")
        base, _ = load_backbone(args.base)
        if base.cfg != cfg.backbone:
            raise UsageError("base backbone architecture differs from config.backbone")
        extra["base"] = {"path": str(args.base), "sha256": _file_digest(args.base)}
    else:
        base = VisionTransformer(cfg.backbone, generator=torch.Generator().manual_seed(cfg.seed))
        extra["base"] = {"random_init_seed": cfg.seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps({"train": cfg.to_dict(), **extra}, indent=1, sort_keys=True) + "\n")
    state = init_train(base, cfg, len(vocab.genes), len(vocab.xenium_genes))
    train(state, samples, out, log_sink=print, quiet=args.quiet, extra_meta=extra)
    _emit({"event": "train", "out": str(out), "steps": state.step, "config_hash": cfg.hash()}, args.quiet, final=True)
    return 0


def cmd_gradcheck(args) -> int:
    from mint.trainer.gradcheck import TOLERANCE, gradcheck

    rep = gradcheck(seed=args.seed, per_tensor=10**9 if args.full else args.per_tensor)
    for name, err in rep.max_rel_err.items():
        print(f"{name}: max_rel_err={err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"masked gene gradient exactly zero: {rep.masked_exact_zero}")
    print(f"total vs weighted sum of parts: {rep.linearity_err:.3e}")
    print(f"coords={rep.n_coords['total']} params={rep.meta['n_params']} seconds={rep.seconds:.1f}")
    return 0 if rep.passed else 2


def _load_encoder(path: str, encoder: str):
    """(backbone, mask_st, provenance) from a trainer checkpoint or a backbone file."""
    from mint.dataset.container import load_arrays

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    meta = json.loads(bytes(load_arrays(path)["__meta__"]).decode())
    prov = {"ckpt": str(path), "ckpt_sha256": _file_digest(path)}
    if meta.get("kind") == "backbone":
        from mint.pretrain import load_backbone

        if encoder not in ("student", "frozen"):
            raise UsageError("a backbone file has no teacher")
        return load_backbone(path)[0], False, {**prov, "encoder": "base"}
    from mint.trainer.loop import load_checkpoint

    state = load_checkpoint(path)
    prov.update(encoder=encoder, mode=meta["mode"], step=meta["step"], config_hash=meta["config_hash"], train_config=meta["config"])
    if encoder == "frozen":
        return state.frozen, False, prov
    net = state.teacher.backbone if encoder == "teacher" else state.student.backbone
    return net, bool(meta["mask_st"]), prov


def cmd_features(args) -> int:
    from mint.dataset import load_manifest
    from mint.evaluation import VARIANTS, extract_features, save_features

    backbone, mask_st, prov = _load_encoder(args.ckpt, args.encoder)
    manifest = load_manifest(_manifest_path(_data_dir(args.data), "eval"))
    records = extract_features(backbone, manifest, mask_st=mask_st)
    has_st = records[0].z_st is not None if records else False
    if args.variant not in ("all",) + VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}")
    if args.variant not in ("all", "cls") and not has_st:
        raise UsageError(f"variant {args.variant!r} needs an ST token; this encoder has none")
    variants = [v for v in VARIANTS if has_st or v == "cls"] if args.variant == "all" else [args.variant]
    meta = {**prov, "mask_st": mask_st, "variants": variants, "manifest": str(manifest.root)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features(out, records, None if args.variant == "all" else args.variant, meta)
    _emit({"event": "features", "out": str(out), "n": len(records), "variants": variants}, args.quiet, final=True)
    return 0


def cmd_eval(args) -> int:
    from mint.dataset import load_manifest
    from mint.evaluation import Protocol, benchmark_expression, features_meta, load_features, morphology_probe, variant_matrix

    protocol = Protocol.from_dict({**_read_json(args.protocol), **_overrides(args.set)})
    fpath = Path(args.features)
    if not fpath.is_file():
        raise UsageError(f"features not found: {fpath}")
    records = load_features(fpath)
    fmeta = features_meta(fpath)
    manifest = load_manifest(_manifest_path(_data_dir(args.data), "eval"))
    by_path = {e.path: i for i, e in enumerate(manifest.entries)}
    missing = [r.sample_id for r in records if r.sample_id not in by_path]
    if missing or len(records) != len(manifest.entries):
        raise UsageError("features do not match the eval manifest")
    vocab = manifest.load_vocab()
    samples = [manifest.load_sample(by_path[r.sample_id], vocab) for r in records]
    Y = np.stack([s.expression for s in samples])
    measured = np.all(np.stack([s.measured_mask for s in samples]), axis=0)
    labels = np.array([s.dominant for s in samples])
    variants = args.variant or fmeta.get("variants") or ["cls"]
    table = {}
    for v in variants:
        X = variant_matrix(records, v)
        rep = benchmark_expression(X, Y, protocol, measured=measured, variant=v)
        rep.probe_accuracy = morphology_probe(X, labels, protocol, C=args.probe_c)
        rep.config = {"protocol": rep.config, "features": fmeta, "probe_C": args.probe_c}
        table[v] = rep.to_json()
        _emit({"event": "eval", "variant": v, "mean_pearson": rep.mean_pearson, "probe": rep.probe_accuracy}, args.quiet)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"kind": "eval", "variants": table}, indent=1, sort_keys=True) + "\n")
    rows = ["variant\tmean_pearson\tprobe_accuracy\tn_pca\talpha"]
    rows += [f"{v}\t{t['mean_pearson']:.6f}\t{t['probe_accuracy']:.6f}\t{t['n_pca']}\t{t['alpha']:g}" for v, t in table.items()]
    out.with_suffix(".tsv").write_text("\n".join(rows) + "\n")
    summary = {v: [round(t["mean_pearson"], 4), round(t["probe_accuracy"], 4)] for v, t in table.items()}
    _emit({"event": "eval-done", "out": str(out), "mean_pearson_and_probe": summary}, args.quiet, final=True)
    return 0


def _scores(path: str, variant: str):
    from mint.evaluation import VariantScores

    d = _read_json(path)
    if d.get("kind") != "eval":
        raise UsageError(f"{path} is not an eval report")
    if variant not in d["variants"]:
        raise UsageError(f"{path} has no variant {variant!r}")
    t = d["variants"][variant]
    return VariantScores(t["mean_pearson"], t["probe_accuracy"])


def cmd_report(args) -> int:
    from mint.evaluation import VARIANTS, ordering_report, write_report

    runs = {}
    for item in args.runs:
        if "=" not in item:
            raise UsageError(f"--runs entries must look like role=eval.json, got {item!r}")
        role, path = item.split("=", 1)
        if role not in ("mint", "frozen", "no_distill", "distill"):
            raise UsageError(f"unknown run role {role!r}")
        runs[role] = path
    if "mint" not in runs:
        raise UsageError("--runs needs at least mint=<eval.json>")
    variants = {v: _scores(runs["mint"], v) for v in VARIANTS}
    opt = {r: _scores(runs[r], "cls") if r in runs else None for r in ("frozen", "no_distill", "distill")}
    rep = ordering_report(
        variants,
        opt["frozen"],
        opt["no_distill"],
        opt["distill"],
        approx_tol=args.approx_tol,
        concat_tol=args.concat_tol,
        min_drop=args.min_drop,
    )
    rep["runs"] = runs
    write_report(args.out, rep)
    _emit({"event": "report", "out": args.out, "all_true": rep["all_true"]}, args.quiet, final=True)
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mint", description="ST-token fine-tuning toolkit (toy scale).")
    p.add_argument("--quiet", action="store_true", help="only print final summaries")
    p.add_argument("--serial", action="store_true", help="single thread, deterministic kernels")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(fn=cmd_gen_data)

    q = sub.add_parser("pretrain", help="train the base encoder on the pretrain split")
    q.add_argument("--config")
    q.add_argument("--data")
    q.add_argument("--out", required=True)
    q.add_argument("--set", action="append", metavar="KEY=VALUE")
    q.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="fine-tune (mode mint / st_on_cls / st_on_cls_no_distill)")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--base", help="pretrained backbone file (default: random init)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--per-tensor", type=int, default=6, help="sampled coordinates per parameter tensor")
    c.add_argument("--full", action="store_true", help="check every coordinate")
    c.set_defaults(fn=cmd_gradcheck)

    f = sub.add_parser("features", help="export CLS/ST features of the eval split")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data")
    f.add_argument("--variant", default="all")
    f.add_argument("--encoder", choices=("student", "teacher", "frozen"), default="student")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_features)

    e = sub.add_parser("eval", help="PCA+Ridge Pearson and morphology probe")
    e.add_argument("--features", required=True)
    e.add_argument("--data")
    e.add_argument("--protocol")
    e.add_argument("--variant", action="append")
    e.add_argument("--probe-c", type=float, default=1.0)
    e.add_argument("--out", required=True)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="ordering verdicts across eval reports")
    r.add_argument("--runs", nargs="+", required=True, metavar="ROLE=EVAL_JSON")
    r.add_argument("--out", required=True)
    r.add_argument("--approx-tol", type=float, default=0.01)
    r.add_argument("--concat-tol", type=float, default=0.005)
    r.add_argument("--min-drop", type=float, default=0.02)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_serial(args.serial)
        return args.fn(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        # config / manifest validation surfaces as ValueError subclasses
        print(f"mint: validation error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"mint: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
