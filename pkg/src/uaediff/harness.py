"""Batch experiments on top of the pipeline: attack runs, evaluation, sweeps and the saliency ablation.

Everything here is driven by a :class:`~uaediff.io.RunConfig` and writes into
a run directory.  Reports deliberately contain no paths, timestamps or wall
times, so repeating a run yields byte-identical report files; those details
live in ``manifest.json`` instead.
"""

from __future__ import annotations

import copy
import csv
import io as _io
import json
import logging
import queue
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import GateError, IngestionError, ParameterError
from .guidance import GuidanceConfig, Label, TargetImage
from .io import (RunConfig, new_run_dir, read_manifest, read_png, update_manifest, write_json,
                 write_manifest, write_png)
from .metrics import FID_MIN_IMAGES, attack_success_rate, binomial_ci_halfwidth, desk_fid, psnr, ssim
from .models.data import Dataset, load_dataset
from .models.training import load_model
from .pipeline import AttackOptions, AttackResult, instance_generator, plain_cfg_sample, run_attack_batch
from .saliency import METHODS

log = logging.getLogger(__name__)

SWEEP_PARAMS = {"t_star": ("guidance", "T_star"), "n_cycles": ("guidance", "N"),
                "s_a": ("guidance", "s_a"), "s_n": ("guidance", "s_n")}


# -- construction from config ----------------------------------------------------

def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]), s["sigma_mode"])


def guidance_from(cfg: RunConfig) -> GuidanceConfig:
    g = cfg["guidance"]
    return GuidanceConfig(T=int(cfg.get("schedule", "T")), T_star=int(g["T_star"]), N=int(g["N"]),
                          s_a=float(g["s_a"]), s_c=float(g["s_c"]), s_n=float(g["s_n"]),
                          seed=int(cfg.get("run", "seed")))


def options_from(cfg: RunConfig) -> AttackOptions:
    a = cfg["attack"]
    return AttackOptions(grad_at=a["grad_at"], x0_source=a["x0_source"], chain_rule=a["chain_rule"],
                         fusion_order=a["fusion_order"], surrogate=a["surrogate_loss"], kappa=a["kappa"],
                         tau=a["tau"], saliency_method=a["saliency_method"], saliency_layer=a["saliency_layer"],
                         combine_at=a["combine_at"], early_stop=a["early_stop"])


def dataset_from(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.path("data", "manifest"))


class ModelStore:
    """Loads each checkpoint from the models directory once (hash-verified by ``load_model``)."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self._cache: Dict[str, object] = {}

    def get(self, name: str):
        if name not in self._cache:
            self._cache[name] = load_model(self.directory, name)
        return self._cache[name]

    def descriptors(self) -> dict:
        return {k: {kk: vv for kk, vv in v.descriptor.items() if kk != "history"} for k, v in self._cache.items()}


# -- attack instances --------------------------------------------------------------

@dataclass
class Instances:
    ids: List[int]
    y: torch.Tensor
    y_tar: torch.Tensor
    x_ref: Optional[torch.Tensor]
    x_tar: Optional[torch.Tensor]


def build_instances(cfg: RunConfig, ds: Dataset, store: ModelStore) -> Instances:
    """Labels, targets and references for every attack, derived from (seed, instance index)."""
    n = int(cfg.get("attack", "n_attacks"))
    if n < 1:
        raise ParameterError("attack.n_attacks must be at least 1")
    seed = int(cfg.get("run", "seed"))
    k = ds.num_classes
    mode = cfg.get("attack", "mode")
    if mode not in ("classification", "recognition"):
        raise ParameterError("attack.mode must be 'classification' or 'recognition'")
    ref_path = cfg.get("attack", "reference_path")
    use_ref = bool(cfg.get("attack", "reference")) or bool(ref_path)
    fixed_ref = None
    if ref_path:
        fixed_ref = read_png(cfg.path("attack", "reference_path"))
        if tuple(fixed_ref.shape) != tuple(ds.x_test.shape[1:]):
            raise ParameterError(f"reference image shape {tuple(fixed_ref.shape)} does not match the "
                                 f"dataset shape {tuple(ds.x_test.shape[1:])}")
        fixed_y = int(store.get(cfg.get("attack", "saliency_model")).predict(fixed_ref))
    by_class = [np.flatnonzero(ds.y_test == c) for c in range(k)]
    ys, tars, refs, xtars = [], [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 7])
        y = fixed_y if fixed_ref is not None else i % k
        y_tar = int((y + 1 + rng.integers(k - 1)) % k)
        ys.append(y)
        tars.append(y_tar)
        if use_ref:
            refs.append(fixed_ref if fixed_ref is not None
                        else torch.from_numpy(ds.x_test[rng.choice(by_class[y])]))
        if mode == "recognition":
            xtars.append(torch.from_numpy(ds.x_test[rng.choice(by_class[y_tar])]))
    return Instances(list(range(n)), torch.tensor(ys), torch.tensor(tars),
                     torch.stack(refs) if refs else None, torch.stack(xtars) if xtars else None)


# -- attack run --------------------------------------------------------------------

def _attack_models(cfg: RunConfig, store: ModelStore):
    diffusion = store.get("diffusion")
    mode = cfg.get("attack", "mode")
    f = store.get(cfg.get("attack", "surrogate"))
    if mode == "classification" and not hasattr(f, "predict"):
        raise ParameterError(f"surrogate {cfg.get('attack', 'surrogate')!r} is not a classifier")
    if mode == "recognition" and not hasattr(f, "score"):
        raise ParameterError(f"surrogate {cfg.get('attack', 'surrogate')!r} is not a similarity model")
    sal = store.get(cfg.get("attack", "saliency_model"))
    return diffusion, f, sal


def _run_batches(cfg, schedule, gcfg, opts, diffusion, f, sal, inst: Instances) -> List[AttackResult]:
    bs = int(cfg.get("run", "batch_size"))
    workers = max(1, int(cfg.get("run", "workers")))
    seed = gcfg.seed
    chunks = [inst.ids[i:i + bs] for i in range(0, len(inst.ids), bs)]

    def work(chunk, models):
        d, model, s = models
        idx = torch.tensor(chunk)
        target = Label(inst.y_tar[idx]) if inst.x_tar is None else TargetImage(inst.x_tar[idx])
        rngs = [instance_generator(seed, i) for i in chunk]
        x_ref = inst.x_ref[idx] if inst.x_ref is not None else None
        return run_attack_batch(gcfg, d, schedule, model, target, inst.y[idx], rngs, x_ref, opts,
                                saliency_model=s, instance_ids=chunk)

    if workers == 1 or len(chunks) == 1:
        out = [work(c, (diffusion, f, sal)) for c in chunks]
    else:
        # adapters are not thread-safe: each task checks out a private copy of the models
        pool_models: queue.SimpleQueue = queue.SimpleQueue()
        for _ in range(workers):
            pool_models.put(copy.deepcopy((diffusion, f, sal)))

        def checked_out(chunk):
            models = pool_models.get()
            try:
                return work(chunk, models)
            finally:
                pool_models.put(models)

        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(checked_out, chunks))
    return [r for batch in out for r in batch]


def _baselines(cfg, schedule, gcfg, diffusion, inst: Instances) -> torch.Tensor:
    """Unguided samples that share each attack's random stream (and hence its initial noise)."""
    bs = int(cfg.get("run", "batch_size"))
    out = []
    for i in range(0, len(inst.ids), bs):
        chunk = inst.ids[i:i + bs]
        rngs = [instance_generator(gcfg.seed, j) for j in chunk]
        x0 = plain_cfg_sample(diffusion, schedule, inst.y[torch.tensor(chunk)], gcfg.s_c, rngs)
        out.append(((x0.clamp(-1, 1) + 1) / 2).clamp(0, 1))
    return torch.cat(out)


def run_attack(cfg: RunConfig, run_dir: Optional[Path] = None, tag: Optional[str] = None) -> Path:
    """Run the configured attack batch and persist images, masks, records and the manifest."""
    torch.set_num_threads(max(1, int(cfg.get("run", "threads"))))
    ds = dataset_from(cfg)
    store = ModelStore(cfg.path("models", "dir"))
    schedule = schedule_from(cfg)
    gcfg = guidance_from(cfg)
    opts = options_from(cfg)
    diffusion, f, sal = _attack_models(cfg, store)
    trained = diffusion.descriptor.get("schedule")
    if trained and not np.array_equal(NoiseSchedule.from_dict(trained).alpha_bar, schedule.alpha_bar):
        raise ParameterError(f"diffusion model was trained with schedule {trained} but the run uses "
                             f"{schedule.to_dict()}")
    inst = build_instances(cfg, ds, store)
    run_dir = Path(run_dir) if run_dir is not None else new_run_dir(cfg, tag)
    for sub in ("images", "masks", "records", "plots"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    results = _run_batches(cfg, schedule, gcfg, opts, diffusion, f, sal, inst)
    wall = time.perf_counter() - started
    baseline = None
    if inst.x_ref is None and cfg.get("attack", "quality_baseline"):
        baseline = _baselines(cfg, schedule, gcfg, diffusion, inst)
    # single writer: all files are written here, in instance order
    for r in results:
        i = r.instance
        stem = f"{i:04d}"
        files = {"final": f"images/{stem}.png"}
        write_png(run_dir / files["final"], r.final_image)
        for k, img in enumerate(r.accepted_images):
            write_png(run_dir / f"images/{stem}_accepted{k}.png", img)
        files["accepted"] = [f"images/{stem}_accepted{k}.png" for k in range(len(r.accepted_images))]
        if r.mask is not None:
            files["mask"] = f"masks/{stem}.png"
            write_png(run_dir / files["mask"], r.mask.unsqueeze(0))
            write_json(run_dir / f"masks/{stem}.json", {**(r.mask_meta or {}),
                                                         "min": float(r.mask.min()), "max": float(r.mask.max())})
        if inst.x_ref is not None:
            files["reference"] = f"references/{stem}.png"
            write_png(run_dir / files["reference"], inst.x_ref[i])
        if inst.x_tar is not None:
            files["target_image"] = f"targets/{stem}.png"
            write_png(run_dir / files["target_image"], inst.x_tar[i])
        if baseline is not None:
            files["baseline"] = f"baseline/{stem}.png"
            write_png(run_dir / files["baseline"], baseline[i])
        rec = r.to_record()
        rec.pop("wall_time")  # timing lives in the manifest so records stay reproducible
        rec["files"] = files
        rec["mode"] = cfg.get("attack", "mode")
        write_json(run_dir / f"records/{stem}.json", rec)
    asr = attack_success_rate(results)
    write_manifest(run_dir, cfg, "attack", {
        "models": store.descriptors(),
        "dataset_checksum": ds.checksum,
        "schedule": schedule.to_dict(),
        "guidance": gcfg.to_dict(),
        "options": opts.to_dict(),
        "n_attacks": len(results),
        "attack_success_rate": asr,
        "wall_time_seconds": round(wall, 3),
    })
    log.info("attack run %s: ASR %.3f over %d attacks", run_dir, asr, len(results))
    return run_dir


# -- evaluation ---------------------------------------------------------------------

@dataclass
class LoadedRun:
    run_dir: Path
    manifest: dict
    records: List[dict]
    finals: torch.Tensor
    references: Optional[torch.Tensor]
    baselines: Optional[torch.Tensor]
    target_images: Optional[torch.Tensor]

    @property
    def surrogate(self) -> str:
        return self.manifest["config_snapshot"]["config"]["attack"]["surrogate"]

    @property
    def mode(self) -> str:
        return self.manifest["config_snapshot"]["config"]["attack"]["mode"]


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    rec_paths = sorted((run_dir / "records").glob("*.json"))
    if not rec_paths:
        raise IngestionError(f"run {run_dir} has no attack records")
    records = [json.loads(p.read_text()) for p in rec_paths]

    def stack(key):
        if not all(key in r["files"] for r in records):
            return None
        return torch.stack([read_png(run_dir / r["files"][key]) for r in records])

    return LoadedRun(run_dir, manifest, records, stack("final"), stack("reference"), stack("baseline"),
                     stack("target_image"))


def judge(target_adapter, run: LoadedRun, tau: float) -> List[bool]:
    """Success of each run's final image against ``target_adapter``."""
    if run.mode == "classification":
        y_tar = torch.tensor([r["y_tar"] for r in run.records])
        return (target_adapter.predict(run.finals) == y_tar).tolist()
    return (target_adapter.score(run.finals, run.target_images) >= tau).tolist()


def _mean_finite(values):
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def quality_metrics(run: LoadedRun, fid_features, x_real: torch.Tensor) -> dict:
    out = {"n": len(run.records)}
    ref, kind = (run.references, "reference") if run.references is not None else (run.baselines, "baseline")
    if ref is not None:
        ps = [psnr(a, b) for a, b in zip(run.finals, ref)]
        out.update(quality_reference=kind, psnr=_mean_finite(ps), psnr_identical=int(sum(np.isinf(ps))),
                   ssim=float(np.mean([ssim(a, b) for a, b in zip(run.finals, ref)])))
    else:
        out.update(quality_reference="none", psnr=None, psnr_identical=0, ssim=None)
    if len(run.finals) >= FID_MIN_IMAGES:
        out["desk_fid"] = desk_fid(run.finals, x_real, fid_features)
        if run.baselines is not None:
            out["desk_fid_baseline"] = desk_fid(run.baselines, x_real, fid_features)
    else:
        out["desk_fid"] = None
    return out


def evaluate_runs(run_dirs: Sequence, targets: Sequence[str], cfg: RunConfig, out_dir: Optional[Path] = None) -> dict:
    """ASR, transfer matrix and quality metrics for one or more attack runs.

    Each run contributes one surrogate row.  Writes ``report.json`` and
    ``report.csv`` into ``out_dir`` (default: the first run directory).
    """
    if not run_dirs:
        raise ParameterError("evaluate needs at least one run directory")
    if not targets:
        raise ParameterError("evaluate needs at least one target model")
    runs = [load_run(d) for d in run_dirs]
    store = ModelStore(cfg.path("models", "dir"))
    ds = dataset_from(cfg)
    fid_model = store.get(cfg.get("evaluate", "fid_model"))
    x_real = torch.from_numpy(ds.x_test)
    tau = float(cfg.get("attack", "tau"))
    labels = []
    for r in runs:
        label = r.surrogate
        while label in labels:
            label += "'"
        labels.append(label)
    matrix = np.zeros((len(runs), len(targets)))
    for i, run in enumerate(runs):
        for j, t in enumerate(targets):
            matrix[i, j] = attack_success_rate(judge(store.get(t), run, tau))
    rows = []
    for label, run in zip(labels, runs):
        asr = attack_success_rate(run.records)
        q = quality_metrics(run, fid_model.features, x_real)
        rows.append({"surrogate": label, "mode": run.mode, "attack_success_rate": asr,
                     "asr_ci95": binomial_ci_halfwidth(asr, len(run.records)), **q})
    report = {
        "surrogates": labels,
        "targets": list(targets),
        "transfer_matrix": matrix.tolist(),
        "white_box": [[runs[i].surrogate == t for t in targets] for i in range(len(runs))],
        "runs": rows,
        "fid_model": cfg.get("evaluate", "fid_model"),
    }
    out_dir = Path(out_dir) if out_dir is not None else Path(run_dirs[0])
    write_json(out_dir / "report.json", report)
    (out_dir / "report.csv").write_text(report_csv(report), newline="")
    details = {"evaluation": {"runs": [str(Path(d).resolve()) for d in run_dirs], "targets": list(targets),
                              "report": ["report.json", "report.csv"]}}
    if (out_dir / "manifest.json").is_file():
        update_manifest(out_dir, details)
    else:
        write_manifest(out_dir, cfg, "evaluate", details)
    return report


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: dict) -> str:
    """One row per (surrogate, target) cell followed by one row per scalar metric."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "row", "column", "value", "white_box"])
    for i, s in enumerate(report["surrogates"]):
        for j, t in enumerate(report["targets"]):
            w.writerow(["transfer", s, t, _fmt(report["transfer_matrix"][i][j]), _fmt(report["white_box"][i][j])])
    for row in report["runs"]:
        for key in ("attack_success_rate", "asr_ci95", "psnr", "ssim", "desk_fid", "desk_fid_baseline"):
            if key in row:
                w.writerow(["metric", row["surrogate"], key, _fmt(row[key]), ""])
    return buf.getvalue()


# -- sweeps and ablation -------------------------------------------------------------

def parse_grid(param: str, grid) -> List:
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    items = [g for g in (grid.split(",") if isinstance(grid, str) else grid) if str(g).strip() != ""]
    if not items:
        raise ParameterError("sweep grid is empty")
    try:
        if param in ("t_star", "n_cycles"):
            return [int(float(v)) for v in items]
        return [float(v) for v in items]
    except ValueError as exc:
        raise ParameterError(f"bad sweep grid {grid!r}") from exc


def _point_row(cfg: RunConfig, point_dir: Path) -> dict:
    report = evaluate_runs([point_dir], [cfg.get("attack", "surrogate")], cfg)
    return report["runs"][0]


def run_sweep(cfg: RunConfig, param: str, grid, out_dir: Optional[Path] = None) -> Path:
    values = parse_grid(param, grid)
    section, key = SWEEP_PARAMS[param]
    out_dir = Path(out_dir) if out_dir is not None else new_run_dir(cfg, f"sweep-{param}")
    rows = []
    for v in values:
        point = cfg.copy()
        point.set(section, key, v)
        pdir = out_dir / "points" / f"{param}={v}"
        run_attack(point, pdir)
        row = _point_row(point, pdir)
        rows.append({"param": param, "value": v, **{k: row.get(k) for k in
                     ("attack_success_rate", "asr_ci95", "desk_fid", "desk_fid_baseline", "psnr", "ssim", "n")}})
    _write_table(out_dir, rows, ["param", "value", "attack_success_rate", "asr_ci95", "desk_fid",
                                 "desk_fid_baseline", "psnr", "ssim", "n"])
    plot = _plot_sweep(out_dir, param, rows)
    sweep_cfg = cfg.copy()
    sweep_cfg.set("sweep", "param", param)
    sweep_cfg.set("sweep", "grid", ",".join(str(v) for v in values))
    write_manifest(out_dir, sweep_cfg, "sweep", {"param": param, "grid": values, "csv": "report.csv",
                                                 "plot": plot, "points": [f"points/{param}={v}" for v in values]})
    return out_dir


def mask_audit(run_dir: Path) -> dict:
    """Range check of every exported mask, using the float bounds stored in each sidecar."""
    metas = [json.loads(p.read_text()) for p in sorted((Path(run_dir) / "masks").glob("*.json"))]
    valid = bool(metas) and all(np.isfinite(m["min"]) and np.isfinite(m["max"]) and 0.0 <= m["min"] <= m["max"] <= 1.0
                                for m in metas)
    return {"mask_count": len(metas), "masks_valid": valid}


def run_saliency_ablation(cfg: RunConfig, out_dir: Optional[Path] = None, methods: Sequence[str] = METHODS) -> Path:
    """Same attacks (seeds, labels, references) under each saliency method."""
    out_dir = Path(out_dir) if out_dir is not None else new_run_dir(cfg, "ablate-saliency")
    rows = []
    for method in methods:
        point = cfg.copy()
        point.set("attack", "saliency_method", method)
        if not point.get("attack", "reference_path"):
            point.set("attack", "reference", True)
        pdir = out_dir / "points" / method
        run_attack(point, pdir)
        row = _point_row(point, pdir)
        rows.append({"method": method, **{k: row.get(k) for k in
                     ("attack_success_rate", "asr_ci95", "desk_fid", "psnr", "ssim", "n")}, **mask_audit(pdir)})
    cols = ["method", "attack_success_rate", "asr_ci95", "desk_fid", "psnr", "ssim", "n", "mask_count",
            "masks_valid"]
    _write_table(out_dir, rows, cols)
    write_manifest(out_dir, cfg, "ablate-saliency", {"methods": list(methods), "csv": "report.csv",
                                                     "points": [f"points/{m}" for m in methods]})
    return out_dir


def _write_table(out_dir: Path, rows: List[dict], cols: List[str]):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    (out_dir / "report.csv").write_text(buf.getvalue(), newline="")
    write_json(out_dir / "report.json", {"rows": rows})


def _plot_sweep(out_dir: Path, param: str, rows: List[dict]) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["value"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.errorbar(xs, [r["attack_success_rate"] for r in rows], yerr=[r["asr_ci95"] for r in rows],
                 marker="o", color="tab:red", capsize=3)
    ax1.set_xlabel(param)
    ax1.set_ylabel("ASR", color="tab:red")
    ax1.set_ylim(-0.02, 1.02)
    fid = [r["desk_fid"] for r in rows]
    if all(v is not None for v in fid):
        ax2 = ax1.twinx()
        ax2.plot(xs, fid, marker="s", color="tab:blue")
        ax2.set_ylabel("desk-FID", color="tab:blue")
    fig.tight_layout()
    rel = f"plots/sweep_{param}.png"
    (out_dir / "plots").mkdir(parents=True, exist_ok=True)
    fig.savefig(out_dir / rel, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return rel


# -- training -----------------------------------------------------------------------

def unguided_samples(diffusion, schedule: NoiseSchedule, n: int, num_classes: int, s_c: float, seed: int,
                     batch: int = 100) -> torch.Tensor:
    """``n`` plain classifier-free guided samples in pixel range, labels cycling through the classes."""
    out = []
    for i in range(0, n, batch):
        ids = list(range(i, min(n, i + batch)))
        y = torch.tensor([j % num_classes for j in ids])
        x0 = plain_cfg_sample(diffusion, schedule, y, s_c, [instance_generator(seed, j) for j in ids])
        out.append(((x0.clamp(-1, 1) + 1) / 2).clamp(0, 1))
    return torch.cat(out)


def train_models(cfg: RunConfig) -> dict:
    """Train every desk-scale model, write checkpoints and ``gates.json``; raise on any failed gate.

    Checkpoints of models that pass are written even when another gate fails.
    """
    from .models.training import (save_model, train_toy_classifier, train_toy_diffusion, train_toy_embedder,
                                  verification_accuracy)

    torch.set_num_threads(max(1, int(cfg.get("run", "threads"))))
    tr = cfg["train"]
    seed = int(cfg.get("run", "seed"))
    ds = dataset_from(cfg)
    out = cfg.path("models", "dir")
    out.mkdir(parents=True, exist_ok=True)
    gates, failures = {}, []

    def gated(name, fn):
        try:
            adapter = fn()
        except GateError as exc:
            failures.append(str(exc))
            gates[name] = {**exc.diagnostics, "passed": False}
            return None
        save_model(adapter, out, name)
        return adapter

    classifiers = {}
    for arch in ("cnn_a", "cnn_b"):
        a = gated(arch, lambda arch=arch: train_toy_classifier(ds, arch, int(tr["classifier_epochs"]), seed,
                                                               min_accuracy=float(tr["min_accuracy"])))
        if a is not None:
            classifiers[arch] = a
            gates[arch] = {"test_accuracy": a.descriptor["test_accuracy"], "required": float(tr["min_accuracy"]),
                           "passed": True}
    if len(classifiers) == 2:
        xa = torch.from_numpy(ds.x_test)
        disagree = float((classifiers["cnn_a"].predict(xa) != classifiers["cnn_b"].predict(xa)).float().mean())
        gates["cross_architecture_disagreement"] = disagree
    if tr["embedder"]:
        e = gated("embedder", lambda: train_toy_embedder(ds, int(tr["embedder_epochs"]), seed,
                                                         tau=float(cfg.get("attack", "tau")),
                                                         min_verification=float(tr["min_verification"])))
        if e is not None:
            acc, same, diff = verification_accuracy(e, ds.x_test, ds.y_test, float(cfg.get("attack", "tau")),
                                                    seed=seed)
            gates["embedder"] = {"verification_accuracy": acc, "mean_same_similarity": same,
                                 "mean_different_similarity": diff, "required": float(tr["min_verification"]),
                                 "passed": True}
    schedule = schedule_from(cfg)
    diffusion = train_toy_diffusion(ds, schedule, epochs=10 ** 6, seed=seed,
                                    class_dropout_rate=float(tr["class_dropout_rate"]),
                                    base_channels=int(tr["diffusion_channels"]), lr=float(tr["diffusion_lr"]),
                                    max_steps=int(tr["diffusion_steps"]), prediction=str(tr["diffusion_prediction"]))
    fid_name = cfg.get("evaluate", "fid_model")
    if fid_name in classifiers:
        n = int(tr["gate_samples"])
        samples = unguided_samples(diffusion, schedule, n, ds.num_classes, float(cfg.get("guidance", "s_c")), seed)
        gen = torch.Generator().manual_seed(seed)
        noise = ((torch.randn(samples.shape, generator=gen) + 1) / 2).clamp(0, 1)
        real = torch.from_numpy(ds.x_test)
        feats = classifiers[fid_name].features
        fid_samples = desk_fid(samples, real, feats)
        fid_noise = desk_fid(noise, real, feats)
        sample_acc = float((classifiers[fid_name].predict(samples)
                            == torch.tensor([j % ds.num_classes for j in range(n)])).float().mean())
        ok = fid_samples * 5.0 <= fid_noise
        diffusion.descriptor["desk_fid_unguided"] = fid_samples
        diffusion.descriptor["desk_fid_noise"] = fid_noise
        gates["diffusion"] = {"desk_fid_unguided": fid_samples, "desk_fid_noise": fid_noise,
                              "required_ratio": 5.0, "label_agreement": sample_acc, "samples": n, "passed": ok}
        if not ok:
            failures.append(f"unguided desk-FID {fid_samples:.3f} is not 5x below pure-noise {fid_noise:.3f}")
    else:
        gates["diffusion"] = {"passed": None, "note": f"{fid_name} unavailable, sample gate skipped"}
    save_model(diffusion, out, "diffusion")
    write_json(out / "gates.json", gates)
    if failures:
        raise GateError("; ".join(failures), gates)
    return gates
