"""``dmimo-lab`` command-line front end.

    dmimo-lab <generate|train|finetune|evaluate|pointwise|sweep|heatmap|protocol>
              [--config PATH] [--seed N] [--out DIR] [--preset desk|paper]

Exit codes: 0 success, 2 config error, 3 runtime error, 4 protocol fault.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .. import channel as ch
from .. import gnn
from .._jsonio import dumps17
from ..protocol import ProtocolViolation, StageTimeout
from . import experiments as ex
from .config import ConfigError, config_hash, load_config

log = logging.getLogger("dmimo_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PROTOCOL = 0, 2, 3, 4
COMMANDS = ("generate", "train", "finetune", "evaluate", "pointwise", "sweep", "heatmap", "protocol")


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, rows: list, fields: list, chash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_sha256={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(r[f]) for f in fields])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def write_pgm(path: Path, grid_db: np.ndarray, lo: float, hi: float) -> None:
    """8-bit binary PGM, dB values clipped to [lo, hi]; first row is the top (max y)."""
    scaled = np.clip((grid_db - lo) / (hi - lo) if hi > lo else 0 * grid_db, 0, 1)
    img = np.round(255 * scaled[::-1]).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `dmimo-lab {hint}` first")
    return path


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DMIMO_LAB_THREADS", "1")))
    except ValueError:
        raise ConfigError("DMIMO_LAB_THREADS must be an integer") from None


def _figure(enabled, fn, *args):
    if not enabled:
        return
    try:
        from . import plotting

        getattr(plotting, fn)(*args)
    except Exception as exc:  # figures never decide the exit code
        log.warning("figure %s skipped: %s", fn, exc)


def _model_ref(cfg_path):
    if cfg_path is None:
        return None
    p = Path(cfg_path)
    if not p.exists():
        raise ConfigError(f"referenced model file does not exist: {p}")
    return gnn.load_model(p)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(ctx, out, chash, figures):
    data = ex.generate(ctx)
    rows = []
    for name, ds in data.items():
        ch.export_csi(ds, out / f"{name}.jsonl")
        for key, n in ds.counts().items():
            region, split = key.split("/")
            rows.append({"dataset": name, "region": region, "split": split, "count": n,
                         "M": ds.M, "K": ds.K})
    write_csv(out / "generate_summary.csv", rows, ["dataset", "region", "split", "count", "M", "K"], chash)
    return {name: ds.counts() for name, ds in data.items()}


def cmd_train(ctx, out, chash, figures):
    source = ch.import_csi(_require(out / "source.jsonl", "generate"))
    res = ex.pretrain(ctx, source)
    gnn.save_model(res.model, out / "model_pretrained.json")
    write_csv(out / "train_log.csv", res.history, ["epoch", "train_loss", "val_sumrate"], chash)
    _figure(figures, "training_curve", res.history, out / "fig_train.png", "pretraining")
    return {"best_epoch": res.best_epoch, "best_val_sumrate": res.history[res.best_epoch - 1]["val_sumrate"]}


def cmd_finetune(ctx, out, chash, figures):
    target = ch.import_csi(_require(out / "target.jsonl", "generate"))
    pretrained = gnn.load_model(_require(out / "model_pretrained.json", "train"))
    rows, models = ex.finetune_study(ctx, pretrained, target)
    for seed, (ft, sc) in models.items():
        gnn.save_model(ft.model, out / f"model_finetuned_s{seed}.json")
        gnn.save_model(sc.model, out / f"model_scratch_s{seed}.json")
        write_csv(out / f"finetune_log_s{seed}.csv", ft.history, ["epoch", "train_loss", "val_sumrate"], chash)
        write_csv(out / f"scratch_log_s{seed}.csv", sc.history, ["epoch", "train_loss", "val_sumrate"], chash)
    write_csv(out / "finetune_summary.csv", rows,
              ["seed", "pretrained", "finetuned", "scratch", "mrt", "rzf"], chash)
    return {k: float(np.mean([r[k] for r in rows])) for k in ("pretrained", "finetuned", "scratch")}


def cmd_evaluate(ctx, out, chash, figures):
    seeds = ctx.cfg["finetune"]["seeds"]
    models = {"gnn_pretrained": gnn.load_model(_require(out / "model_pretrained.json", "train"))}
    for kind in ("finetuned", "scratch"):
        paths = [out / f"model_{kind}_s{s}.json" for s in seeds]
        models[f"gnn_{kind}"] = [gnn.load_model(_require(p, "finetune")) for p in paths]
    rows = ex.evaluate(ctx, models)
    write_csv(out / "evaluate.csv", rows,
              ["domain", "K", "scheme", "sum_rate", "min", "max", "n_models", "n_samples"], chash)
    _figure(figures, "sum_rate_bars", rows, out / "fig_sumrate.png")
    return {f"{r['domain']}/K={r['K']}/{r['scheme']}": round(r["sum_rate"], 4) for r in rows}


def _single_user_model(ctx, out):
    """Pretrained single-user model, cached in ``out`` and keyed by the config hash."""
    keys = ("seed", "topology", "source_domain", "noise", "model", "train", "single_user", "data")
    key = config_hash({k: ctx.cfg[k] for k in keys})
    path, tag = out / "model_pretrained_k1.json", out / "model_pretrained_k1.hash"
    if path.exists() and tag.exists() and tag.read_text().strip() == key:
        return gnn.load_model(path)
    res = ex.single_user_pretrain(ctx)
    gnn.save_model(res.model, path)
    tag.write_text(key + "\n")
    return res.model


def cmd_pointwise(ctx, out, chash, figures):
    pretrained = _single_user_model(ctx, out)
    ds = ex.single_user_target(ctx)
    ft = ex.finetune(ctx, pretrained, ds, int(ctx.cfg["seed"]))
    gnn.save_model(ft.model, out / "model_finetuned_k1.json")
    res = ex.pointwise(ctx, ft.model, ds)
    write_csv(out / "pointwise_samples.csv", res["samples"],
              ["id", "x", "y", "region", "r_mrt", "r_gnn", "delta"], chash)
    write_csv(out / "pointwise_grid.csv", res["grid"], ["x", "y", "region", "n", "mean_delta"], chash)
    srows = [{"region": k, **v} for k, v in res["summary"].items()]
    write_csv(out / "pointwise_summary.csv", srows, ["region", "n", "mean_delta", "mean_r_mrt"], chash)
    _figure(figures, "delta_map", res["grid"], ctx.cfg["single_user"]["mask"], out / "fig_pointwise.png")
    return {k: v["mean_delta"] for k, v in res["summary"].items()}


def cmd_sweep(ctx, out, chash, figures):
    pretrained = _single_user_model(ctx, out)
    ds = ex.single_user_target(ctx)
    raw, summary = ex.sweep(ctx, pretrained, ds, workers=_threads())
    write_csv(out / "sweep_raw.csv", raw, ["n_train", "seed", "ratio_interp", "ratio_extrap"], chash)
    fields = ["n_train", "n_seeds"] + [f"{r}_{s}" for r in ("interp", "extrap") for s in ("mean", "min", "max")]
    write_csv(out / "sweep_summary.csv", summary, fields, chash)
    _figure(figures, "sample_efficiency", summary, out / "fig_sweep.png")
    return {r["n_train"]: (round(r["interp_mean"], 5), round(r["extrap_mean"], 5)) for r in summary}


def cmd_heatmap(ctx, out, chash, figures):
    model = None
    if "gnn" in ctx.cfg["heatmap"]["schemes"]:
        model = _model_ref(ctx.cfg["heatmap"]["model"] or str(out / "model_finetuned_k1.json"))
    res = ex.heatmap(ctx, model)
    for (scheme, M), g in res["grids"].items():
        stem = out / f"heatmap_{scheme}_M{M}"
        db = 10 * np.log10(g)
        rows = [{"y": float(y), **{f"x={x:.3f}": float(v) for x, v in zip(res["xs"], row)}}
                for y, row in zip(res["ys"], db)]
        write_csv(stem.with_suffix(".csv"), rows, list(rows[0]), chash)
        lo, hi = float(db.max() - 40), float(db.max())
        write_pgm(stem.with_suffix(".pgm"), db, lo, hi)
        stem.with_suffix(".json").write_text(
            dumps17({"scheme": scheme, "M": M, "unit": "dB", "min_db": lo, "max_db": hi,
                     "config_sha256": chash}) + "\n", encoding="utf-8")
    write_csv(out / "heatmap_summary.csv", res["summary"],
              ["scheme", "M", "power_ue_db", "gain_db", "argmax_x", "argmax_y", "argmax_at_ue"], chash)
    _figure(figures, "power_heatmaps", res, out / "fig_heatmap.png")
    return {f"{r['scheme']}/M={r['M']}": round(r["gain_db"], 3) for r in res["summary"]}


def cmd_protocol(ctx, out, chash, figures):
    model = None
    if ctx.cfg["protocol"]["precoder"] == "gnn":
        model = ctx.cfg["protocol"]["model"] or str(out / "model_finetuned_k1.json")
        if not Path(model).exists():
            raise ConfigError(f"referenced model file does not exist: {model}")
    res = ex.protocol_round(ctx, model)
    events = [e.as_row() for e in res["result"].events]
    write_csv(out / "protocol_events.csv", events, ["tick", "stage", "action", "source", "target", "detail"], chash)
    report = {**res["report"], "config_sha256": chash}
    (out / "protocol_report.json").write_text(dumps17(report) + "\n", encoding="utf-8")
    return {k: report[k] for k in ("max_abs_diff", "stage_order_ok", "received_power")}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmimo-lab", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON config (keys override the preset)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--preset", default="desk", choices=("desk", "paper"))
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p.add_argument("--error-json", action="store_true", help="print failures as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(args, code, exc) -> int:
    if args.error_json:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"dmimo-lab: {type(exc).__name__}: {exc}\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        threads = _threads()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        chash = config_hash(cfg)
        ctx = ex.Context(cfg)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            summary = HANDLERS[args.command](ctx, out, chash, not args.no_figures)
    except ConfigError as exc:
        return _fail(args, EXIT_CONFIG, exc)
    except (StageTimeout, ProtocolViolation) as exc:
        return _fail(args, EXIT_PROTOCOL, exc)
    except Exception as exc:
        if args.verbose:
            raise
        return _fail(args, EXIT_RUNTIME, exc)
    print(json.dumps({"command": args.command, "config_sha256": chash, "summary": summary}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
