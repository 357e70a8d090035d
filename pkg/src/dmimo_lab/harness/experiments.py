"""Experiment recipes behind the CLI.

Every recipe is a pure function of the config dict (and of any models
passed in); the CLI only handles files. Random streams are derived from
``cfg["seed"]`` by name, so recipes do not perturb each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .. import calibration as cal
from .. import channel as ch
from .. import gnn
from .. import precoders as pc
from .. import protocol as proto
from ..numkit import RngStream

log = logging.getLogger(__name__)


@dataclass
class Context:
    cfg: dict

    @cached_property
    def rng(self) -> RngStream:
        return RngStream(int(self.cfg["seed"]))

    @cached_property
    def site(self) -> ch.Site:
        t = self.cfg["topology"]
        return ch.default_site(t["M"], t["fc_ghz"], t["width"], t["length"], t["ap_height"])

    @property
    def source(self) -> ch.DomainConfig:
        return ch.DomainConfig(**self.cfg["source_domain"])

    @property
    def target(self) -> ch.DomainConfig:
        return ch.DomainConfig(**self.cfg["target_domain"])

    @property
    def P(self) -> float:
        return float(self.cfg["noise"]["P"])

    @cached_property
    def sigma2(self) -> float:
        """Configured noise, or the one giving the target median SNR on the source domain."""
        noise = self.cfg["noise"]
        if noise["sigma2"] is not None:
            return float(noise["sigma2"])
        ref = ch.generate_dataset(self.site, self.source, 2000, 1, self.rng.child("noise-reference"))
        return pc.noise_for_snr(ref.H, noise["snr_db"], self.P)

    def alpha(self, K: int) -> float:
        a = self.cfg["precoder"]["alpha"]
        return pc.default_alpha(K, self.sigma2, self.P) if a is None else float(a)

    def train_config(self, section: str, seed: int, **extra) -> gnn.TrainConfig:
        s = self.cfg[section]
        return gnn.TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"],
                               learning_rate=s["learning_rate"], seed=seed, P=self.P,
                               sigma2=self.sigma2, **extra)

    def new_model(self, seed: int) -> gnn.GnnModel:
        m = self.cfg["model"]
        return gnn.init_model(RngStream(seed).child("init"), m["n_layers"], m["hidden_dim"],
                              m["leaky_slope"])

    def freeze_mask(self) -> list:
        return gnn.default_freeze_mask(self.cfg["model"]["n_layers"], self.cfg["finetune"]["n_tuned_layers"])


def rzf_rates(H, alpha, P, sigma2) -> np.ndarray:
    return np.array([pc.sum_rate(h, pc.rzf(h, alpha, P), sigma2) for h in H])


def mrt_rates(H, P, sigma2) -> np.ndarray:
    return pc.sum_rate(H, pc.mrt(H, P), sigma2)


def gnn_rates(model, H, P, sigma2) -> np.ndarray:
    return pc.sum_rate(H, gnn.forward(model, H, P), sigma2)


# --------------------------------------------------------------------------
# datasets, training
# --------------------------------------------------------------------------


def generate(ctx: Context) -> dict:
    """Source (pretraining) and target (fine-tuning) datasets with split tags."""
    d = ctx.cfg["data"]
    out = {}
    for name, domain, n in (("source", ctx.source, d["n_source"]), ("target", ctx.target, d["n_target"])):
        r = ctx.rng.child(f"dataset-{name}")
        ds = ch.generate_dataset(ctx.site, domain, n, d["K"], r.child("draw"))
        out[name] = ch.spatial_split(ds, None, d["val_fraction"], r.child("split"), d["test_fraction"])
    return out


def pretrain(ctx: Context, source: ch.ChannelDataset, seed: int | None = None) -> gnn.TrainResult:
    seed = ctx.cfg["seed"] if seed is None else seed
    return gnn.train(ctx.new_model(seed), source, ctx.train_config("train", seed))


def finetune(ctx: Context, pretrained: gnn.GnnModel, target: ch.ChannelDataset, seed: int,
             n_train: int | None = None) -> gnn.TrainResult:
    n_train = ctx.cfg["finetune"]["n_train"] if n_train is None else n_train
    n_train = min(n_train, int(np.sum(target.split == "train")))
    cfg = ctx.train_config("finetune", seed, n_train=n_train, freeze_mask=ctx.freeze_mask())
    return gnn.fine_tune(pretrained, target, cfg)


def from_scratch(ctx: Context, target: ch.ChannelDataset, seed: int) -> gnn.TrainResult:
    n_train = min(ctx.cfg["finetune"]["n_train"], int(np.sum(target.split == "train")))
    cfg = ctx.train_config("finetune", seed, n_train=n_train)
    return gnn.train(ctx.new_model(seed), target, cfg)


def finetune_study(ctx: Context, pretrained, target) -> tuple[list, dict]:
    """Fine-tuned and from-scratch models per seed, scored on the target test split."""
    test = target.subset(split="test").H
    base = float(np.mean(gnn_rates(pretrained, test, ctx.P, ctx.sigma2)))
    rows, models = [], {}
    for seed in ctx.cfg["finetune"]["seeds"]:
        ft = finetune(ctx, pretrained, target, seed)
        sc = from_scratch(ctx, target, seed)
        models[seed] = (ft, sc)
        rows.append({
            "seed": seed,
            "pretrained": base,
            "finetuned": float(np.mean(gnn_rates(ft.model, test, ctx.P, ctx.sigma2))),
            "scratch": float(np.mean(gnn_rates(sc.model, test, ctx.P, ctx.sigma2))),
            "mrt": float(np.mean(mrt_rates(test, ctx.P, ctx.sigma2))),
            "rzf": float(np.mean(rzf_rates(test, ctx.alpha(target.K), ctx.P, ctx.sigma2))),
        })
    return rows, models


def evaluate(ctx: Context, models: dict) -> list:
    """Mean sum rate per (domain, K, scheme).

    ``models`` maps a scheme name to a GnnModel or a list of them (one per
    seed); lists are summarised by mean, min and max.
    """
    rows = []
    n = ctx.cfg["evaluate"]["n_eval"]
    for dname, domain in (("source", ctx.source), ("target", ctx.target)):
        for K in ctx.cfg["evaluate"]["K_list"]:
            H = ch.generate_dataset(ctx.site, domain, n, K, ctx.rng.child(f"eval-{dname}-{K}")).H
            schemes = {"mrt": [mrt_rates(H, ctx.P, ctx.sigma2)],
                       "rzf": [rzf_rates(H, ctx.alpha(K), ctx.P, ctx.sigma2)]}
            for name, m in models.items():
                ms = m if isinstance(m, (list, tuple)) else [m]
                schemes[name] = [gnn_rates(x, H, ctx.P, ctx.sigma2) for x in ms]
            for name, runs in schemes.items():
                means = [float(np.mean(r)) for r in runs]
                rows.append({"domain": dname, "K": K, "scheme": name, "sum_rate": float(np.mean(means)),
                             "min": min(means), "max": max(means), "n_models": len(means),
                             "n_samples": n})
    return rows


# --------------------------------------------------------------------------
# single-user generalization studies
# --------------------------------------------------------------------------


def single_user_pretrain(ctx: Context) -> gnn.TrainResult:
    su = ctx.cfg["single_user"]
    r = ctx.rng.child("su-source")
    ds = ch.generate_dataset(ctx.site, ctx.source, su["n_source"], 1, r.child("draw"))
    ds = ch.spatial_split(ds, None, ctx.cfg["data"]["val_fraction"], r.child("split"),
                          ctx.cfg["data"]["test_fraction"])
    seed = ctx.cfg["seed"]
    cfg = ctx.train_config("train", seed)
    cfg.epochs = su["epochs"]
    return gnn.train(ctx.new_model(seed), ds, cfg)


def single_user_target(ctx: Context) -> ch.ChannelDataset:
    """Target-domain single-user dataset with the extrapolation mask applied."""
    su = ctx.cfg["single_user"]
    r = ctx.rng.child("su-target")
    ds = ch.generate_dataset(ctx.site, ctx.target, su["n_target"], 1, r.child("draw"))
    return ch.spatial_split(ds, su["mask"], ctx.cfg["data"]["val_fraction"], r.child("split"),
                            ctx.cfg["data"]["test_fraction"])


def _test_samples(ds):
    interp = ds.subset(split="test", region="interp")
    extrap = ds.subset(region="extrap")
    return {"interp": interp, "extrap": extrap}


def pointwise(ctx: Context, model: gnn.GnnModel | None, dataset: ch.ChannelDataset,
              compare: str = "gnn") -> dict:
    """Per-position gap ``delta = R_mrt - R_gnn`` on interp and extrap test points.

    ``compare="mrt"`` replaces the GNN by MRT itself (a zero-gap control).
    """
    samples = []
    for region, ds in _test_samples(dataset).items():
        if len(ds) == 0:
            continue
        r_mrt = mrt_rates(ds.H, ctx.P, ctx.sigma2)
        r_cmp = r_mrt.copy() if compare == "mrt" else gnn_rates(model, ds.H, ctx.P, ctx.sigma2)
        for j in range(len(ds)):
            x, y = ds.positions[j, 0, :2]
            samples.append({"id": int(ds.ids[j]), "x": float(x), "y": float(y), "region": region,
                            "r_mrt": float(r_mrt[j]), "r_gnn": float(r_cmp[j]),
                            "delta": float(r_mrt[j] - r_cmp[j])})
    samples.sort(key=lambda s: s["id"])

    su = ctx.cfg["single_user"]
    cell = float(su["cell"])
    (x0, x1), (y0, y1), _ = ctx.site.area_bounds
    nx, ny = max(1, math.ceil((x1 - x0) / cell - 1e-9)), max(1, math.ceil((y1 - y0) / cell - 1e-9))
    acc = {}
    for s in samples:
        ix = min(int((s["x"] - x0) // cell), nx - 1)
        iy = min(int((s["y"] - y0) // cell), ny - 1)
        acc.setdefault((iy, ix), []).append(s["delta"])
    grid = []
    (mx0, mx1), (my0, my1) = su["mask"]
    for iy in range(ny):
        for ix in range(nx):
            cx, cy = x0 + (ix + 0.5) * cell, y0 + (iy + 0.5) * cell
            region = "extrap" if (mx0 <= cx <= mx1 and my0 <= cy <= my1) else "interp"
            vals = acc.get((iy, ix), [])
            grid.append({"x": cx, "y": cy, "region": region, "n": len(vals),
                         "mean_delta": float(np.mean(vals)) if vals else float("nan")})
    summary = {}
    for region in ("interp", "extrap"):
        d = [s["delta"] for s in samples if s["region"] == region]
        summary[region] = {"n": len(d), "mean_delta": float(np.mean(d)) if d else float("nan"),
                           "mean_r_mrt": float(np.mean([s["r_mrt"] for s in samples if s["region"] == region]))
                           if d else float("nan")}
    return {"samples": samples, "grid": grid, "summary": summary}


def _sweep_cell(ctx, pretrained, dataset, n_train, seed):
    ft = finetune(ctx, pretrained, dataset, seed, n_train=n_train).model
    out = {"n_train": n_train, "seed": seed}
    for region, ds in _test_samples(dataset).items():
        out[f"ratio_{region}"] = float(np.mean(gnn_rates(ft, ds.H, ctx.P, ctx.sigma2))
                                       / np.mean(mrt_rates(ds.H, ctx.P, ctx.sigma2)))
    return out


def sweep(ctx: Context, pretrained: gnn.GnnModel, dataset: ch.ChannelDataset, workers: int = 1) -> tuple[list, list]:
    """GNN/MRT sum-rate ratio per region for every (N_train, seed) cell.

    Returns the raw per-cell rows and a per-N_train summary with mean,
    min and max over seeds. Cells are independent; with ``workers > 1``
    they run in a process pool and are reassembled in key order.
    """
    keys = [(n, s) for n in ctx.cfg["sweep"]["n_train"] for s in ctx.cfg["sweep"]["seeds"]]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {k: pool.submit(_sweep_cell, ctx, pretrained, dataset, *k) for k in keys}
            raw = [futs[k].result() for k in keys]
    else:
        raw = [_sweep_cell(ctx, pretrained, dataset, *k) for k in keys]
    summary = []
    for n in ctx.cfg["sweep"]["n_train"]:
        cells = [r for r in raw if r["n_train"] == n]
        row = {"n_train": n, "n_seeds": len(cells)}
        for region in ("interp", "extrap"):
            vals = [c[f"ratio_{region}"] for c in cells]
            row.update({f"{region}_mean": float(np.mean(vals)), f"{region}_min": float(np.min(vals)),
                        f"{region}_max": float(np.max(vals))})
        summary.append(row)
    return raw, summary


# --------------------------------------------------------------------------
# received-power maps
# --------------------------------------------------------------------------


def anchored_axis(lo, hi, anchor, step):
    """Grid coordinates in [lo, hi] spaced by ``step`` and passing through ``anchor``."""
    i0 = math.ceil((lo - anchor) / step - 1e-9)
    i1 = math.floor((hi - anchor) / step + 1e-9)
    # clip so roundoff never puts the edge points outside the area
    return np.clip(anchor + step * np.arange(i0, i1 + 1), lo, hi)


def _point_channels(site, points, equal_gain):
    d = np.sqrt(np.sum((points[:, None, :] - site.ap_positions[None]) ** 2, axis=-1))
    if np.any(d <= 0):
        raise ch.DegenerateGeometry("grid point coincides with an AP")
    amp = np.ones_like(d) if equal_gain else 10 ** (-ch.pathloss_db(d, site.fc_ghz) / 20)
    return amp * np.exp(-2j * np.pi * d / site.wavelength)


def power_map(site: ch.Site, scheme: str, target, xs, ys, *, equal_gain=True, model=None,
              rps_draws=10000, rng: RngStream | None = None) -> np.ndarray:
    """Received power on the grid ``ys x xs`` when ``site`` focuses on ``target``.

    Every AP radiates unit amplitude; the scheme sets the transmit phases
    (conjugate of the target LOS channel for ``mrt``, GNN output phases for
    ``gnn``, uniform random per draw for ``rps``, averaged over draws).
    """
    target = np.asarray(target, dtype=float)
    h_t = ch.los_channel(site, target)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, site.ue_height)])
    F = _point_channels(site, pts, equal_gain)
    if scheme == "mrt":
        w = np.exp(-1j * np.angle(h_t.H[:, 0]))
    elif scheme == "gnn":
        if model is None:
            raise ValueError("gnn scheme needs a model")
        w = np.exp(1j * np.angle(gnn.forward(model, h_t.H, 1.0)[:, 0]))
    elif scheme == "rps":
        rng = rng or RngStream(0)
        acc = np.zeros(len(pts))
        chunk = 500
        for start in range(0, rps_draws, chunk):
            n = min(chunk, rps_draws - start)
            theta = rng.uniform(0.0, 2 * np.pi, (n, site.M))
            acc += np.sum(np.abs(np.exp(1j * theta) @ F.T) ** 2, axis=0)
        return (acc / rps_draws).reshape(X.shape)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return (np.abs(F @ w) ** 2).reshape(X.shape)


def heatmap(ctx: Context, model: gnn.GnnModel | None = None) -> dict:
    """Power grids per (scheme, M) plus a summary with gains at the UE cell."""
    hm = ctx.cfg["heatmap"]
    (x0, x1), (y0, y1), _ = ctx.site.area_bounds
    tx, ty = hm["target"]
    if not (x0 <= tx <= x1 and y0 <= ty <= y1):
        raise ValueError(f"heatmap target {hm['target']} outside the area")
    xs = anchored_axis(x0, x1, tx, hm["resolution"])
    ys = anchored_axis(y0, y1, ty, hm["resolution"])
    ix, iy = int(np.argmin(np.abs(xs - tx))), int(np.argmin(np.abs(ys - ty)))
    target = (tx, ty, ctx.site.ue_height)
    grids, summary = {}, []
    for scheme in hm["schemes"]:
        base = None
        for M in sorted(set(hm["M_list"]) | {1}):
            site = ctx.site.subset(M)
            g = power_map(site, scheme, target, xs, ys, equal_gain=hm["equal_gain"], model=model,
                          rps_draws=hm["rps_draws"], rng=ctx.rng.child(f"rps-{M}"))
            if M == 1:
                base = g[iy, ix]
            if M not in hm["M_list"]:
                continue
            grids[(scheme, M)] = g
            ay, ax = np.unravel_index(int(np.argmax(g)), g.shape)
            summary.append({
                "scheme": scheme, "M": M,
                "power_ue_db": float(10 * np.log10(g[iy, ix])),
                "gain_db": float(10 * np.log10(g[iy, ix] / base)),
                "argmax_x": float(xs[ax]), "argmax_y": float(ys[ay]),
                "argmax_at_ue": bool(ax == ix and ay == iy),
            })
    return {"xs": xs, "ys": ys, "ue_index": (iy, ix), "grids": grids, "summary": summary}


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------


def protocol_round(ctx: Context, model=None) -> dict:
    """One TDD round on a random hardware draw, checked against the monolithic pipeline."""
    pc_cfg = ctx.cfg["protocol"]
    r = ctx.rng.child("protocol")
    site = ctx.site.subset(pc_cfg["M"])
    (x0, x1), (y0, y1), _ = site.area_bounds
    K = pc_cfg["K"]
    ue = np.column_stack([r.child("ue").uniform(x0, x1, K), r.child("ue-y").uniform(y0, y1, K),
                          np.full(K, site.ue_height)])
    H = ch.synth_channel(site.place(ue), ctx.source, r.child("channel"))
    hw = cal.HardwarePhaseModel.random(r.child("hardware"), site.M, K, channel=H.H)
    alpha = ctx.cfg["precoder"]["alpha"]
    precoder = proto.make_precoder(pc_cfg["precoder"], ctx.P, ctx.sigma2, alpha, model)
    drop = [(proto.PILOT_REPORT, proto.NodeId("AP", int(i))) for i in pc_cfg["drop_reports"]]
    res = proto.run_tdd_round(hw, precoder, ctx.P, ctx.sigma2, r.child("round"), mode=pc_cfg["mode"],
                              shuffle=pc_cfg["shuffle"], transport=pc_cfg["transport"], drop=drop)
    mono = proto.monolithic_round(hw, precoder, mode=pc_cfg["mode"])
    report = {
        "M": site.M, "K": K, "precoder": pc_cfg["precoder"], "mode": pc_cfg["mode"],
        "max_abs_diff": float(np.max(np.abs(res.W - mono))),
        "received_power": res.received_power.tolist(),
        "sinr": res.sinr.tolist(),
        "stage_order_ok": res.stage_order_ok(),
        "n_events": len(res.events),
    }
    if K == 1:
        report["coherent_power"] = float(np.sum(hw.a[:, 0]) ** 2)
    return {"result": res, "report": report}
