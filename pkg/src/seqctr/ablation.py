"""The 8-configuration ablation matrix over the three backbones.

Rows mirror the standard study layout: a bare backbone, embedding transfer
only, an attached fresh decoder with and without embedding transfer, and
the fully inherited decoder under the four pretraining variants.

Pretraining runs are shared across rows and backbones for a given
(mode, seed); CTR runs fan out over (row, backbone, seed) with independent
derived seeds. Failures are recorded per run and the matrix keeps going.
"""

from __future__ import annotations

import json
import time
import traceback
from dataclasses import asdict, dataclass
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from .data import DatasetBundle, load_bundle
from .decoder import DecoderConfig
from .checkpoint import save_checkpoint
from .integration import (
    CtrModel,
    IntegrationConfig,
    TrainConfig,
    apply_transfers,
    evaluate,
    train_ctr,
)
from .pretrain import PretrainConfig, pretrain

BACKBONES = ("dnn", "dcnv2", "dcnv2_ta")


@dataclass(frozen=True)
class RowSpec:
    row: int
    label: str
    decoder_attached: bool
    ps: bool
    mi: bool
    pretrain_mode: str | None


ROWS: dict[int, RowSpec] = {
    1: RowSpec(1, "Backbone", False, False, False, None),
    2: RowSpec(2, "Backbone PS CS+CD", False, True, False, "cs+cd"),
    3: RowSpec(3, "+decoder", True, False, False, None),
    4: RowSpec(4, "+decoder PS CS+CD", True, True, False, "cs+cd"),
    5: RowSpec(5, "+decoder PS+MI CS+CD", True, True, True, "cs+cd"),
    6: RowSpec(6, "+decoder PS+MI CS+SD", True, True, True, "cs+sd"),
    7: RowSpec(7, "+decoder PS+MI RS+CD", True, True, True, "rs+cd"),
    8: RowSpec(8, "+decoder PS+MI RS+SD", True, True, True, "rs+sd"),
}

_MODE_TAG = {"cs+cd": 0, "cs+sd": 1, "rs+cd": 2, "rs+sd": 3}


def integration_config(spec: RowSpec, backbone: str) -> IntegrationConfig:
    return IntegrationConfig(
        backbone=backbone,
        decoder_attached=spec.decoder_attached,
        ps=spec.ps,
        mi=spec.mi,
        pretrain_mode=spec.pretrain_mode,
    )


def derive_seed(base_seed: int, *key: int) -> int:
    """Stable child seed for a run keyed by small integers."""
    ss = np.random.SeedSequence([int(base_seed), *[int(k) for k in key]])
    return int(ss.generate_state(1, np.uint64)[0])


def pretrain_seed(base_seed: int, mode: str, seed_idx: int) -> int:
    return derive_seed(base_seed, 1, _MODE_TAG[mode], seed_idx)


def ctr_seed(base_seed: int, row: int, backbone: str, seed_idx: int) -> int:
    return derive_seed(base_seed, 2, row, BACKBONES.index(backbone), seed_idx)


@dataclass
class AblationRecord:
    row: int
    label: str
    backbone: str
    seed_idx: int
    auc: float | None
    logloss: float | None
    wall_clock: float
    error: str | None = None


@dataclass(frozen=True)
class MatrixConfig:
    backbones: tuple[str, ...] = BACKBONES
    rows: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    n_seeds: int = 5
    base_seed: int = 0
    pretrain_epochs: int = 3
    ctr_epochs: int = 1
    lr: float = 0.001
    k_negatives: int = 10
    batch_size: int = 8
    pretrain_batch_size: int = 1
    workers: int = 1
    save_models: bool = True

    def needed_modes(self) -> list[str]:
        modes = []
        for r in self.rows:
            mode = ROWS[r].pretrain_mode
            if mode is not None and mode not in modes:
                modes.append(mode)
        return sorted(modes)


# worker-side bundle cache: loading 60k lines once per process, not per job
_BUNDLE_CACHE: dict[str, DatasetBundle] = {}


def _get_bundle(data_dir: str) -> DatasetBundle:
    bundle = _BUNDLE_CACHE.get(data_dir)
    if bundle is None:
        bundle = load_bundle(data_dir)
        _BUNDLE_CACHE.clear()
        _BUNDLE_CACHE[data_dir] = bundle
    return bundle


def run_pretrain_job(job: dict) -> dict:
    """Pretrain one (mode, seed) pair and write its checkpoint + loss log.

    Failures are reported, not raised: dependent CTR runs then fail
    individually on the missing checkpoint and the matrix keeps going.
    """
    t0 = time.time()
    try:
        bundle = _get_bundle(job["data_dir"])
        cfg = PretrainConfig(
            mode=job["mode"],
            epochs=job["epochs"],
            lr=job["lr"],
            k_negatives=job["k_negatives"],
            batch_size=job["batch_size"],
            seed=job["seed"],
        )
        result = pretrain(bundle.pretrain, bundle.cat_item_table, bundle.vocab, cfg)
        arrays = {f"emb.{n}": t.weights.data for n, t in result.tables.items()}
        arrays.update({f"dec.{n}": p.data for n, p in result.dec_params.items()})
        meta = {
            "kind": "pretrain",
            "mode": job["mode"],
            "n_items": str(bundle.vocab.n_items),
            "n_categories": str(bundle.vocab.n_categories),
        }
        meta.update(result.dec_cfg.meta())
        ckpt = Path(job["ckpt_path"])
        save_checkpoint(ckpt, arrays, meta)
        log_path = ckpt.with_suffix(".log.jsonl")
        with log_path.open("w") as fh:
            for entry in result.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return {
            "mode": job["mode"],
            "seed_idx": job["seed_idx"],
            "ckpt": str(ckpt),
            "final_loss": result.log[-1]["mean_loss"],
            "wall_clock": time.time() - t0,
        }
    except Exception:
        return {
            "mode": job["mode"],
            "seed_idx": job["seed_idx"],
            "ckpt": None,
            "error": traceback.format_exc(limit=20),
            "wall_clock": time.time() - t0,
        }


def run_ctr_job(job: dict) -> AblationRecord:
    """Train and evaluate one (row, backbone, seed) cell."""
    t0 = time.time()
    spec = ROWS[job["row"]]
    try:
        bundle = _get_bundle(job["data_dir"])
        cfg = integration_config(spec, job["backbone"])
        rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(job["seed"])))
        model = CtrModel(bundle.vocab, cfg, rng, DecoderConfig())
        if spec.pretrain_mode is None:
            assert job.get("pretrain_ckpt") is None, "row without pretraining got a checkpoint"
        apply_transfers(model, job.get("pretrain_ckpt"))
        train_cfg = TrainConfig(epochs=job["epochs"], lr=job["lr"], batch_size=job["batch_size"])
        train_log = train_ctr(model, bundle.train, train_cfg, rng)
        res = evaluate(model, bundle.test)
        record = AblationRecord(
            row=spec.row,
            label=spec.label,
            backbone=job["backbone"],
            seed_idx=job["seed_idx"],
            auc=res.auc,
            logloss=res.logloss,
            wall_clock=time.time() - t0,
        )
        if job.get("run_dir"):
            run_dir = Path(job["run_dir"])
            run_dir.mkdir(parents=True, exist_ok=True)
            if job.get("save_model", True):
                model.save(run_dir / "model.ckpt")
            (run_dir / "metrics.json").write_text(
                json.dumps(
                    {
                        **asdict(record),
                        "train_initial_loss": train_log.initial_loss,
                        "train_final_loss": train_log.final_loss,
                    },
                    sort_keys=True,
                    indent=2,
                )
                + "\n"
            )
        return record
    except Exception:
        return AblationRecord(
            row=spec.row,
            label=spec.label,
            backbone=job["backbone"],
            seed_idx=job["seed_idx"],
            auc=None,
            logloss=None,
            wall_clock=time.time() - t0,
            error=traceback.format_exc(limit=20),
        )


@dataclass
class CellStats:
    row: int
    label: str
    backbone: str
    auc_mean: float
    auc_std: float
    logloss_mean: float
    logloss_std: float
    n_runs: int


def aggregate(records: list[AblationRecord]) -> list[CellStats]:
    """Mean/std (population) per (row, backbone) over successful seeds."""
    cells: dict[tuple[int, str], list[AblationRecord]] = {}
    for rec in records:
        if rec.error is None:
            cells.setdefault((rec.row, rec.backbone), []).append(rec)
    out = []
    for (row, backbone), recs in sorted(cells.items()):
        aucs = np.array([r.auc for r in recs])
        lls = np.array([r.logloss for r in recs])
        out.append(
            CellStats(
                row=row,
                label=recs[0].label,
                backbone=backbone,
                auc_mean=float(aucs.mean()),
                auc_std=float(aucs.std()),
                logloss_mean=float(lls.mean()),
                logloss_std=float(lls.std()),
                n_runs=len(recs),
            )
        )
    return out


def _map_jobs(fn, jobs: list[dict], workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with Pool(processes=min(workers, len(jobs))) as pool:
        # chunksize 1: run lengths vary a lot across rows/backbones
        return pool.map(fn, jobs, chunksize=1)


def run_ablation(data_dir, out_dir, cfg: MatrixConfig) -> tuple[list[AblationRecord], list[CellStats]]:
    """Run pretraining plus the full CTR matrix; returns per-run records and cell stats."""
    data_dir = str(data_dir)
    out_dir = Path(out_dir)
    (out_dir / "pretrain").mkdir(parents=True, exist_ok=True)

    pre_jobs = []
    ckpt_paths: dict[tuple[str, int], str] = {}
    for mode in cfg.needed_modes():
        for s in range(cfg.n_seeds):
            path = out_dir / "pretrain" / f"{mode.replace('+', '_')}_s{s}.ckpt"
            ckpt_paths[(mode, s)] = str(path)
            pre_jobs.append(
                {
                    "data_dir": data_dir,
                    "mode": mode,
                    "seed_idx": s,
                    "seed": pretrain_seed(cfg.base_seed, mode, s),
                    "epochs": cfg.pretrain_epochs,
                    "lr": cfg.lr,
                    "k_negatives": cfg.k_negatives,
                    "batch_size": cfg.pretrain_batch_size,
                    "ckpt_path": str(path),
                }
            )
    _map_jobs(run_pretrain_job, pre_jobs, cfg.workers)

    ctr_jobs = []
    for row in cfg.rows:
        spec = ROWS[row]
        for backbone in cfg.backbones:
            for s in range(cfg.n_seeds):
                mode = spec.pretrain_mode
                ctr_jobs.append(
                    {
                        "data_dir": data_dir,
                        "row": row,
                        "backbone": backbone,
                        "seed_idx": s,
                        "seed": ctr_seed(cfg.base_seed, row, backbone, s),
                        "epochs": cfg.ctr_epochs,
                        "lr": cfg.lr,
                        "batch_size": cfg.batch_size,
                        "pretrain_ckpt": ckpt_paths[(mode, s)] if mode else None,
                        "run_dir": str(out_dir / "runs" / f"row{row}_{backbone}_s{s}"),
                        "save_model": cfg.save_models,
                    }
                )
    records = _map_jobs(run_ctr_job, ctr_jobs, cfg.workers)
    return records, aggregate(records)
